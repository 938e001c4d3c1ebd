use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{BranchFusion, FusionStrategy};
use crate::error::{Error, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    let names: Vec<_> = $name::ALL.iter().map(|v| v.name()).collect();
                    Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of {}"),
                        s,
                        names.join(", ")
                    ))
                })
            }
        }
    };
}

named_enum!(
    /// Delayed keeps full-width 3x3 convs at half resolution; hasty drops
    /// them so two downsamplers run back to back.
    Downsampling { Delayed => "delayed", Hasty => "hasty" }
);

named_enum!(ModuleKind { Fpl => "fpl", Esp => "esp" });

named_enum!(
    /// Which FPL convs are split into 3x1 / 1x3 pairs: none, only the
    /// dilated bank (composite), or the bank and stage 1 (all).
    Factorization { None => "none", Composite => "composite", All => "all" }
);

named_enum!(DecoderKind { SequentialDefault => "sequential_default", EncoderOnly => "encoder_only" });

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub image_channels: usize,
    pub initial_channels: usize,
    pub stage2_channels: usize,
    pub stage3_channels: usize,
    pub stage2_modules: usize,
    pub stage3_modules: usize,
    pub stage2_module: ModuleKind,
    pub stage3_module: ModuleKind,
    pub fpl_branches: usize,
    pub esp_branches: usize,
    pub branch_fusion: BranchFusion,
    pub factorization: Factorization,
    pub downsampling: Downsampling,
    pub fusion_strategy: FusionStrategy,
    pub decoder: DecoderKind,
    pub decoder_mid_channels: usize,
    pub decoder_low_channels: usize,
    pub decoder_modules: usize,
    /// Upsampling factor of the encoder-only bilinear head.
    pub encoder_upsample: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 19,
            image_channels: 3,
            initial_channels: 32,
            stage2_channels: 64,
            stage3_channels: 128,
            stage2_modules: 4,
            stage3_modules: 8,
            stage2_module: ModuleKind::Fpl,
            stage3_module: ModuleKind::Fpl,
            fpl_branches: 4,
            esp_branches: 5,
            branch_fusion: BranchFusion::Pff,
            factorization: Factorization::Composite,
            downsampling: Downsampling::Delayed,
            fusion_strategy: FusionStrategy::Fir,
            decoder: DecoderKind::SequentialDefault,
            decoder_mid_channels: 64,
            decoder_low_channels: 16,
            decoder_modules: 2,
            encoder_upsample: 8,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "num_classes",
    "image_channels",
    "initial_channels",
    "stage2_channels",
    "stage3_channels",
    "stage2_modules",
    "stage3_modules",
    "stage2_module",
    "stage3_module",
    "fpl_branches",
    "esp_branches",
    "branch_fusion",
    "factorization",
    "downsampling",
    "fusion_strategy",
    "decoder",
    "decoder_mid_channels",
    "decoder_low_channels",
    "decoder_modules",
    "encoder_upsample",
    "seed",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

impl NetworkConfig {
    /// Default layout with all widths quartered, two modules per encoder
    /// stage and three classes.
    pub fn tiny() -> Self {
        NetworkConfig {
            num_classes: 3,
            initial_channels: 8,
            stage2_channels: 16,
            stage3_channels: 32,
            stage2_modules: 2,
            stage3_modules: 2,
            decoder_mid_channels: 16,
            decoder_low_channels: 4,
            ..NetworkConfig::default()
        }
    }

    pub fn encoder_only(mut self) -> Self {
        self.decoder = DecoderKind::EncoderOnly;
        self
    }

    pub fn full(mut self) -> Self {
        self.decoder = DecoderKind::SequentialDefault;
        self
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("image_channels", self.image_channels),
            ("initial_channels", self.initial_channels),
            ("stage2_channels", self.stage2_channels),
            ("stage3_channels", self.stage3_channels),
            ("stage2_modules", self.stage2_modules),
            ("stage3_modules", self.stage3_modules),
            ("fpl_branches", self.fpl_branches),
            ("esp_branches", self.esp_branches),
            ("decoder_mid_channels", self.decoder_mid_channels),
            ("decoder_low_channels", self.decoder_low_channels),
            ("encoder_upsample", self.encoder_upsample),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        if self.num_classes > 255 {
            return Err(Error::Config("num_classes must be <= 255 (255 is the ignore label)".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "num_classes" => self.num_classes = parse(key, v)?,
            "image_channels" => self.image_channels = parse(key, v)?,
            "initial_channels" => self.initial_channels = parse(key, v)?,
            "stage2_channels" => self.stage2_channels = parse(key, v)?,
            "stage3_channels" => self.stage3_channels = parse(key, v)?,
            "stage2_modules" => self.stage2_modules = parse(key, v)?,
            "stage3_modules" => self.stage3_modules = parse(key, v)?,
            "stage2_module" => self.stage2_module = parse(key, v)?,
            "stage3_module" => self.stage3_module = parse(key, v)?,
            "fpl_branches" => self.fpl_branches = parse(key, v)?,
            "esp_branches" => self.esp_branches = parse(key, v)?,
            "branch_fusion" => self.branch_fusion = parse(key, v)?,
            "factorization" => self.factorization = parse(key, v)?,
            "downsampling" => self.downsampling = parse(key, v)?,
            "fusion_strategy" => self.fusion_strategy = parse(key, v)?,
            "decoder" => self.decoder = parse(key, v)?,
            "decoder_mid_channels" => self.decoder_mid_channels = parse(key, v)?,
            "decoder_low_channels" => self.decoder_low_channels = parse(key, v)?,
            "decoder_modules" => self.decoder_modules = parse(key, v)?,
            "encoder_upsample" => self.encoder_upsample = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown network key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "num_classes" => self.num_classes.to_string(),
            "image_channels" => self.image_channels.to_string(),
            "initial_channels" => self.initial_channels.to_string(),
            "stage2_channels" => self.stage2_channels.to_string(),
            "stage3_channels" => self.stage3_channels.to_string(),
            "stage2_modules" => self.stage2_modules.to_string(),
            "stage3_modules" => self.stage3_modules.to_string(),
            "stage2_module" => self.stage2_module.to_string(),
            "stage3_module" => self.stage3_module.to_string(),
            "fpl_branches" => self.fpl_branches.to_string(),
            "esp_branches" => self.esp_branches.to_string(),
            "branch_fusion" => self.branch_fusion.to_string(),
            "factorization" => self.factorization.to_string(),
            "downsampling" => self.downsampling.to_string(),
            "fusion_strategy" => self.fusion_strategy.to_string(),
            "decoder" => self.decoder.to_string(),
            "decoder_mid_channels" => self.decoder_mid_channels.to_string(),
            "decoder_low_channels" => self.decoder_low_channels.to_string(),
            "decoder_modules" => self.decoder_modules.to_string(),
            "encoder_upsample" => self.encoder_upsample.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key is readable")))
            .collect()
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = NetworkConfig::tiny();
        cfg.fusion_strategy = FusionStrategy::IsffConcat;
        cfg.downsampling = Downsampling::Hasty;
        cfg.seed = 42;
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = NetworkConfig::from_text("num_clases = 3").unwrap_err();
        assert!(err.to_string().contains("num_clases"));
    }

    #[test]
    fn bad_enum_lists_choices() {
        let err = NetworkConfig::from_text("factorization = some").unwrap_err();
        assert!(err.to_string().contains("composite"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = NetworkConfig::from_text("# tiny\n\nnum_classes = 5\n").unwrap();
        assert_eq!(cfg.num_classes, 5);
    }

    #[test]
    fn zero_stage_count_rejected() {
        assert!(NetworkConfig::from_text("stage2_modules = 0").is_err());
    }
}
