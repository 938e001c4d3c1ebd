//! Declarative assembly of the full encoder-decoder and its ablation variants.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod variant;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MatchReport};
pub use config::{DecoderKind, Downsampling, Factorization, ModuleKind, NetworkConfig};
pub use model::{build_fplnet, Network, PyramidModule, OUTPUT_STRIDE};
pub use variant::{build_variant, Ablation};
