use std::fmt;
use std::str::FromStr;

use crate::blocks::FusionStrategy;
use crate::error::{Error, Result};
use crate::network::config::{Downsampling, Factorization, ModuleKind, NetworkConfig};
use crate::network::model::Network;
use crate::tensor::Scalar;

/// A named ablation: one change applied on top of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// The base configuration unchanged.
    Baseline,
    /// ESP modules in both encoder stages.
    EspModules,
    Downsampling(Downsampling),
    Fusion(FusionStrategy),
    /// Module counts of encoder stages 2 and 3.
    Stages(usize, usize),
    Factorization(Factorization),
}

impl Ablation {
    /// Every ablation with a fixed name, plus the module-count grid.
    pub fn catalogue() -> Vec<Ablation> {
        let mut out = vec![Ablation::Baseline, Ablation::EspModules];
        out.extend(Downsampling::ALL.iter().map(|&d| Ablation::Downsampling(d)));
        out.extend(FusionStrategy::ALL.iter().map(|&f| Ablation::Fusion(f)));
        for s2 in [2, 4] {
            for s3 in [6, 8, 10, 12] {
                out.push(Ablation::Stages(s2, s3));
            }
        }
        out.extend(Factorization::ALL.iter().map(|&f| Ablation::Factorization(f)));
        out
    }

    pub fn apply(self, base: &NetworkConfig) -> NetworkConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::Baseline => {}
            Ablation::EspModules => {
                cfg.stage2_module = ModuleKind::Esp;
                cfg.stage3_module = ModuleKind::Esp;
            }
            Ablation::Downsampling(d) => cfg.downsampling = d,
            Ablation::Fusion(f) => cfg.fusion_strategy = f,
            Ablation::Stages(s2, s3) => {
                cfg.stage2_modules = s2;
                cfg.stage3_modules = s3;
            }
            Ablation::Factorization(f) => cfg.factorization = f,
        }
        cfg
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::Baseline => f.write_str("fplnet"),
            Ablation::EspModules => f.write_str("fplnet_esp"),
            Ablation::Downsampling(d) => write!(f, "downsampling_{d}"),
            Ablation::Fusion(s) => write!(f, "fusion_{s}"),
            Ablation::Stages(a, b) => write!(f, "stages_{a}_{b}"),
            Ablation::Factorization(x) => write!(f, "factorization_{x}"),
        }
    }
}

fn unknown(name: &str) -> Error {
    let names: Vec<String> = Ablation::catalogue().iter().map(|a| a.to_string()).collect();
    Error::Config(format!(
        "unknown ablation {name:?}; valid names: {} (stages_<s2>_<s3> takes any counts >= 1)",
        names.join(", ")
    ))
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fplnet" {
            return Ok(Ablation::Baseline);
        }
        if s == "fplnet_esp" {
            return Ok(Ablation::EspModules);
        }
        if let Some(rest) = s.strip_prefix("downsampling_") {
            return rest.parse().map(Ablation::Downsampling).map_err(|_| unknown(s));
        }
        if let Some(rest) = s.strip_prefix("fusion_") {
            return rest.parse().map(Ablation::Fusion).map_err(|_| unknown(s));
        }
        if let Some(rest) = s.strip_prefix("factorization_") {
            return rest.parse().map(Ablation::Factorization).map_err(|_| unknown(s));
        }
        if let Some(rest) = s.strip_prefix("stages_") {
            if let Some((a, b)) = rest.split_once('_') {
                if let (Ok(a), Ok(b)) = (a.parse::<usize>(), b.parse::<usize>()) {
                    if a >= 1 && b >= 1 {
                        return Ok(Ablation::Stages(a, b));
                    }
                }
            }
        }
        Err(unknown(s))
    }
}

pub fn build_variant<T: Scalar>(base: &NetworkConfig, ablation: Ablation) -> Result<Network<T>> {
    Network::new(ablation.apply(base))
}
