use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, VarId};
use crate::blocks::fpl::power_of_two_dilations;
use crate::blocks::layers::{BnPrelu, Conv};
use crate::blocks::{fuse, BranchFusion, RfStep};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, ConvSpec, Scalar, Shape};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EspConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub branches: usize,
    pub dilations: Vec<usize>,
    pub stride: usize,
    pub residual: bool,
}

impl EspConfig {
    /// Stride-1 module, five branches at dilations {1, 2, 4, 8, 16}.
    pub fn new(c_in: usize, c_out: usize) -> Self {
        EspConfig {
            c_in,
            c_out,
            branches: 5,
            dilations: power_of_two_dilations(5),
            stride: 1,
            residual: c_in == c_out,
        }
    }

    pub fn downsampler(c_in: usize, c_out: usize) -> Self {
        EspConfig {
            stride: 2,
            residual: false,
            ..EspConfig::new(c_in, c_out)
        }
    }

    /// Width `n = c_out / b` of every branch but the first, which takes the
    /// remainder `c_out - (b-1)n` when `b` does not divide `c_out`.
    pub fn branch_widths(&self) -> Vec<usize> {
        let n = self.c_out / self.branches;
        let mut w = vec![n; self.branches];
        w[0] = self.c_out - (self.branches - 1) * n;
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.branches == 0 || self.c_out < self.branches {
            return Err(Error::Config(format!(
                "ESP needs c_out >= b >= 1, got c_out {} and b {}",
                self.c_out, self.branches
            )));
        }
        if self.dilations.len() != self.branches {
            return Err(Error::Config(format!(
                "ESP needs {} dilation rates, got {}",
                self.branches,
                self.dilations.len()
            )));
        }
        if self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ESP dilations must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("ESP stride must be 1 or 2, got {}", self.stride)));
        }
        if self.residual && (self.stride != 1 || self.c_in != self.c_out) {
            return Err(Error::Config("ESP residual needs stride 1 and c_in == c_out".into()));
        }
        Ok(())
    }
}

/// Efficient spatial pyramid baseline:
///
/// ```text
/// x -> 1x1 (C_i -> n) -> b x 3x3(d_i) -> [y1, y2, y2+y3, y2+y3+y4, ...] -> concat -> (+ x) -> BN+PReLU
/// ```
///
/// In the stride-2 form every branch is strided.
#[derive(Clone, Debug)]
pub struct EspModule {
    pub cfg: EspConfig,
    reduce: Conv,
    bank: Vec<Conv>,
    out_act: BnPrelu,
}

impl EspModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: EspConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.branch_widths();
        let n = widths[1.min(widths.len() - 1)];
        let reduce = Conv::new(store, &format!("{name}.reduce"), ConvSpec::new(cfg.c_in, n, 1, 1))?;
        let bank = cfg
            .dilations
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (&d, &w))| {
                let spec = ConvSpec::same(n, w, 3, 3, d).with_stride(cfg.stride);
                Conv::new(store, &format!("{name}.branch{i}"), spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let out_act = BnPrelu::new(store, &format!("{name}.out"), cfg.c_out)?;
        Ok(EspModule {
            cfg,
            reduce,
            bank,
            out_act,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId, mode: BnMode) -> Result<VarId> {
        let c = tape.shape(x).c;
        if c != self.cfg.c_in {
            return Err(Error::ShapeMismatch {
                op: "esp_forward",
                dim: "channels",
                expected: self.cfg.c_in,
                actual: c,
            });
        }
        let r = self.reduce.forward(tape, store, x)?;
        let ys = self
            .bank
            .iter()
            .map(|b| b.forward(tape, store, r))
            .collect::<Result<Vec<_>>>()?;
        let mut zs = vec![ys[0]];
        zs.extend(fuse(tape, &ys[1..], BranchFusion::Hff)?);
        let mut y = tape.concat(&zs)?;
        if self.cfg.residual {
            y = tape.add(&[y, x])?;
        }
        self.out_act.forward(tape, store, y, mode)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let r = self.reduce.output_shape(input)?;
        Ok(self.bank[0].output_shape(r)?.with_c(self.cfg.c_out))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.reduce.param_ids();
        for b in &self.bank {
            ids.extend(b.param_ids());
        }
        ids.extend(self.out_act.param_ids());
        ids
    }

    pub fn rf_steps(&self) -> Vec<RfStep> {
        let mut steps = vec![self.reduce.rf_step()];
        steps.extend(self.bank.last().map(|b| b.rf_step()));
        steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamKind;
    use crate::tensor::Tensor;

    #[test]
    fn table_one_count() {
        let mut store = ParamStore::<f32>::new(0);
        let m = EspModule::new(&mut store, "esp", EspConfig::new(60, 60)).unwrap();
        let weights: usize = m
            .param_ids()
            .iter()
            .filter(|&&id| store.get(id).kind == ParamKind::Weight)
            .map(|&id| store.value(id).len())
            .sum();
        assert_eq!(weights, 7200);
    }

    #[test]
    fn remainder_goes_to_first_branch() {
        assert_eq!(EspConfig::new(64, 64).branch_widths(), vec![16, 12, 12, 12, 12]);
        assert_eq!(EspConfig::new(60, 60).branch_widths(), vec![12; 5]);
    }

    #[test]
    fn shape_preserving_and_downsampling() {
        let mut store = ParamStore::<f32>::new(0);
        let m = EspModule::new(&mut store, "m", EspConfig::new(10, 10)).unwrap();
        let d = EspModule::new(&mut store, "d", EspConfig::downsampler(7, 12)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(Shape::new(1, 10, 40, 36), 0.1));
        let y = m.forward(&mut tape, &store, x, BnMode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 10, 40, 36));
        let x = tape.input(Tensor::full(Shape::new(1, 7, 40, 36), 0.1));
        let y = d.forward(&mut tape, &store, x, BnMode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 12, 20, 18));
        assert_eq!(d.output_shape(Shape::new(1, 7, 40, 36)).unwrap(), Shape::new(1, 12, 20, 18));
    }
}
