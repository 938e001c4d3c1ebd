pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use loss::{class_weights, ClassWeighting};
pub use optim::{poly_lr, Sgd, TrainConfig};
pub use params::{ParamId, ParamKind, ParamStore, Parameter, StatUpdate};
pub use tape::{Gradients, Tape, VarId};
