use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autograd::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Scalar, Shape};

/// Closed-form weight counts of a single module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleFormula {
    /// Plain `k x k` conv: `C_i C_o k^2`.
    Conv,
    /// `(C_o/b)(C_i + k^2 C_o)`.
    Esp,
    /// Two-stage pyramid with a dense bank: `(C_o/b^2)(b C_i + k^2 C_o + k^2 b C_o)`.
    FplDecomp,
    /// Two-stage pyramid with a factorized bank: `(C_o/b^2)(b C_i + k^2 C_o + 2 k b C_o)`.
    Fpl,
}

impl FromStr for ModuleFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(ModuleFormula::Conv),
            "esp" => Ok(ModuleFormula::Esp),
            "fpl_decomp" => Ok(ModuleFormula::FplDecomp),
            "fpl" => Ok(ModuleFormula::Fpl),
            _ => Err(Error::Config(format!(
                "unknown module kind {s:?}; expected conv, esp, fpl_decomp or fpl"
            ))),
        }
    }
}

impl fmt::Display for ModuleFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModuleFormula::Conv => "conv",
            ModuleFormula::Esp => "esp",
            ModuleFormula::FplDecomp => "fpl_decomp",
            ModuleFormula::Fpl => "fpl",
        })
    }
}

/// Evaluates the formula exactly; a non-integer result is an error.
pub fn symbolic_param_count(kind: ModuleFormula, c_in: usize, c_out: usize, k: usize, b: usize) -> Result<usize> {
    let (num, den) = match kind {
        ModuleFormula::Conv => (c_in * c_out * k * k, 1),
        ModuleFormula::Esp => (c_out * (c_in + k * k * c_out), b),
        ModuleFormula::FplDecomp => (c_out * (b * c_in + k * k * c_out + k * k * b * c_out), b * b),
        ModuleFormula::Fpl => (c_out * (b * c_in + k * k * c_out + 2 * k * b * c_out), b * b),
    };
    if den == 0 || num % den != 0 {
        return Err(Error::Config(format!(
            "{kind} count with C_i={c_in}, C_o={c_out}, k={k}, b={b} is not an integer"
        )));
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Convolution kernels only, no bias, no normalization or activation
    /// parameters (module-comparison convention).
    WeightsOnly,
    /// Every trainable tensor: kernels, biases, BN gamma/beta, PReLU
    /// slopes. BN running statistics are excluded.
    Trainable,
}

impl Convention {
    pub fn includes(self, kind: ParamKind) -> bool {
        match self {
            Convention::WeightsOnly => kind == ParamKind::Weight,
            Convention::Trainable => kind.trainable(),
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::WeightsOnly => "weights-only",
            Convention::Trainable => "trainable",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub convention: Convention,
    /// One row per layer (network reports) or per tensor (store reports).
    pub rows: Vec<ParamRow>,
    pub stages: Vec<ParamRow>,
    pub total: usize,
}

pub fn count_ids<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId], convention: Convention) -> usize {
    ids.iter()
        .map(|&id| store.get(id))
        .filter(|p| convention.includes(p.kind))
        .map(|p| p.value.len())
        .sum()
}

/// Per-tensor report over an entire store.
pub fn count_params<T: Scalar>(store: &ParamStore<T>, convention: Convention) -> ParamReport {
    let rows: Vec<ParamRow> = store
        .iter()
        .filter(|(_, p)| convention.includes(p.kind))
        .map(|(_, p)| ParamRow {
            name: p.name.clone(),
            count: p.value.len(),
        })
        .collect();
    let total = rows.iter().map(|r| r.count).sum();
    ParamReport {
        convention,
        rows,
        stages: Vec::new(),
        total,
    }
}

/// Per-layer report over a network, with encoder and decoder subtotals.
pub fn count_network<T: Scalar>(net: &Network<T>, probe: Shape, convention: Convention) -> Result<ParamReport> {
    let store = net.store();
    let layers = net.layers(probe)?;
    let rows: Vec<ParamRow> = layers
        .iter()
        .enumerate()
        .map(|(i, l)| ParamRow {
            name: format!("{} {}", i + 1, l.op),
            count: count_ids(store, &l.params, convention),
        })
        .collect();
    let total: usize = rows.iter().map(|r| r.count).sum();
    let encoder = count_ids(store, &net.encoder_param_ids(), convention);
    let report = ParamReport {
        convention,
        rows,
        stages: vec![
            ParamRow {
                name: "encoder".into(),
                count: encoder,
            },
            ParamRow {
                name: "head".into(),
                count: total - encoder,
            },
        ],
        total,
    };
    debug_assert_eq!(report.total, count_params(store, convention).total);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{EspConfig, EspModule, FplConfig, FplModule};
    use crate::network::NetworkConfig;

    #[test]
    fn table_one_values() {
        assert_eq!(symbolic_param_count(ModuleFormula::Conv, 60, 60, 3, 1).unwrap(), 32_400);
        assert_eq!(symbolic_param_count(ModuleFormula::Esp, 60, 60, 3, 5).unwrap(), 7_200);
        assert_eq!(symbolic_param_count(ModuleFormula::FplDecomp, 60, 60, 3, 4).unwrap(), 11_025);
        assert_eq!(symbolic_param_count(ModuleFormula::Fpl, 60, 60, 3, 4).unwrap(), 8_325);
    }

    #[test]
    fn non_integer_is_error() {
        assert!(symbolic_param_count(ModuleFormula::Fpl, 60, 62, 3, 4).is_err());
        assert!(symbolic_param_count(ModuleFormula::Esp, 60, 60, 3, 0).is_err());
    }

    #[test]
    fn formulas_match_built_blocks_on_a_grid() {
        let mut store = ParamStore::<f32>::new(0);
        let mut n = 0;
        for b in 1..=4 {
            for c_in in [1, 3, 8] {
                for c_out in (b..=12).step_by(b) {
                    for bank in [true, false] {
                        let mut cfg = FplConfig::new(c_in, c_out).with_branches(b);
                        cfg.factorize_bank = bank;
                        let m = FplModule::new(&mut store, &format!("m{n}"), cfg).unwrap();
                        n += 1;
                        let kind = if bank { ModuleFormula::Fpl } else { ModuleFormula::FplDecomp };
                        assert_eq!(
                            count_ids(&store, &m.param_ids(), Convention::WeightsOnly),
                            symbolic_param_count(kind, c_in, c_out, 3, b).unwrap()
                        );
                    }
                    let mut cfg = EspConfig::new(c_in, c_out);
                    cfg.branches = b;
                    cfg.dilations = crate::blocks::fpl::power_of_two_dilations(b);
                    let m = EspModule::new(&mut store, &format!("m{n}"), cfg).unwrap();
                    n += 1;
                    assert_eq!(
                        count_ids(&store, &m.param_ids(), Convention::WeightsOnly),
                        symbolic_param_count(ModuleFormula::Esp, c_in, c_out, 3, b).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn empty_store_counts_zero() {
        let store = ParamStore::<f32>::new(0);
        assert_eq!(count_params(&store, Convention::Trainable).total, 0);
    }

    #[test]
    fn network_report_totals_agree() {
        let net = Network::<f32>::new(NetworkConfig::tiny()).unwrap();
        let r = count_network(&net, Shape::new(1, 3, 64, 64), Convention::Trainable).unwrap();
        assert_eq!(r.total, r.rows.iter().map(|x| x.count).sum::<usize>());
        assert_eq!(r.total, r.stages.iter().map(|x| x.count).sum::<usize>());
        assert_eq!(r.total, net.store().trainable_count());
    }
}
