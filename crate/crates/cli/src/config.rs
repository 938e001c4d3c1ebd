//! Line-oriented `key = value` run configuration: every network key plus
//! the training and dataset keys below. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use fplnet::autograd::TrainConfig;
use fplnet::data::{AugmentConfig, SynthSpec};
use fplnet::network::NetworkConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size network.
    Default,
    /// Quarter-width network with two modules per stage and three classes.
    Tiny,
}

impl Preset {
    pub fn network(self) -> NetworkConfig {
        match self {
            Preset::Default => NetworkConfig::default(),
            Preset::Tiny => NetworkConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Synthetic,
    /// Cityscapes-style directory tree of PNM files.
    Directory { image_root: PathBuf, label_root: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    /// Shared by both training stages; `max_iter` is overridden per stage.
    pub train: TrainConfig,
    pub encoder_iters: usize,
    pub full_iters: usize,
    pub dataset: Dataset,
    pub train_images: usize,
    pub val_images: usize,
    pub synth: SynthSpec,
    pub train_split: String,
    pub val_split: String,
    pub downscale: bool,
    pub augment: bool,
    pub crop: Option<(usize, usize)>,
}

const RUN_KEYS: &[&str] = &[
    "lr_init",
    "power",
    "momentum",
    "weight_decay",
    "batch_size",
    "class_weight_c",
    "encoder_iters",
    "full_iters",
    "dataset",
    "image_root",
    "label_root",
    "train_split",
    "val_split",
    "downscale",
    "train_images",
    "val_images",
    "synth_height",
    "synth_width",
    "synth_noise",
    "synth_frequencies",
    "synth_shapes_min",
    "synth_shapes_max",
    "augment",
    "crop_height",
    "crop_width",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn new(network: NetworkConfig) -> Self {
        let synth = SynthSpec {
            num_classes: network.num_classes,
            foreground_frequencies: default_frequencies(network.num_classes),
            ..SynthSpec::default()
        };
        RunConfig {
            network,
            train: TrainConfig::default(),
            encoder_iters: 1000,
            full_iters: 1000,
            dataset: Dataset::Synthetic,
            train_images: 200,
            val_images: 50,
            synth,
            train_split: "train".into(),
            val_split: "val".into(),
            downscale: false,
            augment: false,
            crop: None,
        }
    }

    /// Applies `text` over `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut image_root = None;
        let mut label_root = None;
        let mut crop = (None, None);
        let mut dataset_kind = None;
        let mut frequencies_set = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if NetworkConfig::keys().contains(&k) {
                self.network.set(k, v).map_err(|e| CliError::Config(e.to_string()))?;
                continue;
            }
            match k {
                "lr_init" => self.train.lr_init = parse(k, v)?,
                "power" => self.train.power = parse(k, v)?,
                "momentum" => self.train.momentum = parse(k, v)?,
                "weight_decay" => self.train.weight_decay = parse(k, v)?,
                "batch_size" => self.train.batch_size = parse(k, v)?,
                "class_weight_c" => self.train.class_weight_c = parse(k, v)?,
                "encoder_iters" => self.encoder_iters = parse(k, v)?,
                "full_iters" => self.full_iters = parse(k, v)?,
                "dataset" => dataset_kind = Some(v.to_string()),
                "image_root" => image_root = Some(PathBuf::from(v)),
                "label_root" => label_root = Some(PathBuf::from(v)),
                "train_split" => self.train_split = v.to_string(),
                "val_split" => self.val_split = v.to_string(),
                "downscale" => self.downscale = parse(k, v)?,
                "train_images" => self.train_images = parse(k, v)?,
                "val_images" => self.val_images = parse(k, v)?,
                "synth_height" => self.synth.height = parse(k, v)?,
                "synth_width" => self.synth.width = parse(k, v)?,
                "synth_noise" => self.synth.noise = parse(k, v)?,
                "synth_frequencies" => {
                    self.synth.foreground_frequencies = v
                        .split(',')
                        .map(|p| parse(k, p.trim()))
                        .collect::<Result<_, _>>()?;
                    frequencies_set = true;
                }
                "synth_shapes_min" => self.synth.shapes_per_class.0 = parse(k, v)?,
                "synth_shapes_max" => self.synth.shapes_per_class.1 = parse(k, v)?,
                "augment" => self.augment = parse(k, v)?,
                "crop_height" => crop.0 = Some(parse(k, v)?),
                "crop_width" => crop.1 = Some(parse(k, v)?),
                _ => {
                    return Err(CliError::Config(format!(
                        "unknown key {k:?}; valid keys: {}, {}",
                        NetworkConfig::keys().join(", "),
                        RUN_KEYS.join(", ")
                    )))
                }
            }
        }
        if self.synth.num_classes != self.network.num_classes {
            self.synth.num_classes = self.network.num_classes;
            if !frequencies_set {
                self.synth.foreground_frequencies = default_frequencies(self.network.num_classes);
            }
        }
        match crop {
            (Some(h), Some(w)) => self.crop = Some((h, w)),
            (None, None) => {}
            _ => return Err(CliError::Config("crop_height and crop_width must be set together".into())),
        }
        match dataset_kind.as_deref() {
            None => {}
            Some("synthetic") => self.dataset = Dataset::Synthetic,
            Some("directory") => {
                let (Some(image_root), Some(label_root)) = (image_root, label_root) else {
                    return Err(CliError::Config("dataset = directory needs image_root and label_root".into()));
                };
                self.dataset = Dataset::Directory { image_root, label_root };
            }
            Some(other) => {
                return Err(CliError::Config(format!(
                    "unknown dataset {other:?}; expected synthetic or directory"
                )))
            }
        }
        self.validate()
    }

    /// Seeds parameter initialisation, data generation and batch order.
    pub fn set_seed(&mut self, seed: u64) {
        self.network.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: fplnet::Error| CliError::Config(e.to_string());
        self.network.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.dataset == Dataset::Synthetic {
            self.synth.validate().map_err(wrap)?;
        }
        if self.encoder_iters == 0 || self.full_iters == 0 {
            return Err(CliError::Config("encoder_iters and full_iters must be >= 1".into()));
        }
        if self.train_images == 0 || self.val_images == 0 {
            return Err(CliError::Config("train_images and val_images must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_optim(&self, max_iter: usize) -> TrainConfig {
        TrainConfig {
            max_iter,
            ..self.train.clone()
        }
    }

    pub fn augment_config(&self) -> Option<AugmentConfig> {
        self.augment.then(|| AugmentConfig {
            crop: self.crop,
            ..AugmentConfig::default()
        })
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut s = self.network.to_text();
        let t = &self.train;
        let _ = writeln!(s, "lr_init = {}", t.lr_init);
        let _ = writeln!(s, "power = {}", t.power);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "class_weight_c = {}", t.class_weight_c);
        let _ = writeln!(s, "encoder_iters = {}", self.encoder_iters);
        let _ = writeln!(s, "full_iters = {}", self.full_iters);
        match &self.dataset {
            Dataset::Synthetic => {
                let _ = writeln!(s, "dataset = synthetic");
            }
            Dataset::Directory { image_root, label_root } => {
                let _ = writeln!(s, "dataset = directory");
                let _ = writeln!(s, "image_root = {}", image_root.display());
                let _ = writeln!(s, "label_root = {}", label_root.display());
            }
        }
        let _ = writeln!(s, "train_split = {}", self.train_split);
        let _ = writeln!(s, "val_split = {}", self.val_split);
        let _ = writeln!(s, "downscale = {}", self.downscale);
        let _ = writeln!(s, "train_images = {}", self.train_images);
        let _ = writeln!(s, "val_images = {}", self.val_images);
        let _ = writeln!(s, "synth_height = {}", self.synth.height);
        let _ = writeln!(s, "synth_width = {}", self.synth.width);
        let _ = writeln!(s, "synth_noise = {}", self.synth.noise);
        let freqs: Vec<String> = self.synth.foreground_frequencies.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(s, "synth_frequencies = {}", freqs.join(","));
        let _ = writeln!(s, "synth_shapes_min = {}", self.synth.shapes_per_class.0);
        let _ = writeln!(s, "synth_shapes_max = {}", self.synth.shapes_per_class.1);
        let _ = writeln!(s, "augment = {}", self.augment);
        if let Some((h, w)) = self.crop {
            let _ = writeln!(s, "crop_height = {h}");
            let _ = writeln!(s, "crop_width = {w}");
        }
        s
    }
}

/// The synthetic default profile for its class count; otherwise foreground
/// classes share 30 % of the pixels, halving from class to class.
fn default_frequencies(num_classes: usize) -> Vec<f64> {
    let base = SynthSpec::default();
    if num_classes == base.num_classes {
        return base.foreground_frequencies;
    }
    let n = num_classes.saturating_sub(1);
    let raw: Vec<f64> = (0..n).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| 0.3 * r / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::new(NetworkConfig::tiny());
        cfg.apply_text("encoder_iters = 7\naugment = true\ncrop_height = 32\ncrop_width = 64\nnum_classes = 4")
            .unwrap();
        assert_eq!(cfg.synth.foreground_frequencies.len(), 3);
        let mut back = RunConfig::new(NetworkConfig::tiny());
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut cfg = RunConfig::new(NetworkConfig::tiny());
        assert!(cfg.apply_text("learning_rate = 1").is_err());
        assert!(cfg.apply_text("encoder_iters").is_err());
        assert!(cfg.apply_text("crop_height = 8").is_err());
        assert!(cfg.apply_text("dataset = directory").is_err());
    }

    #[test]
    fn tiny_default_frequencies_match_synth_default() {
        let cfg = RunConfig::new(NetworkConfig::tiny());
        assert_eq!(cfg.synth, SynthSpec::default());
    }
}
