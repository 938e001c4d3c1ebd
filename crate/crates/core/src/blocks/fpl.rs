use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, VarId};
use crate::blocks::layers::{BnPrelu, Conv, ConvBnAct};
use crate::blocks::{fuse, BranchFusion, RfStep};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, ConvSpec, Scalar, Shape};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FplConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub branches: usize,
    pub dilations: Vec<usize>,
    /// Each bank branch is a 3x1 / 1x3 pair instead of a single 3x3.
    pub factorize_bank: bool,
    /// The stage-1 3x3 is also split into a 3x1 / 1x3 pair.
    pub factorize_stage1: bool,
    pub stride: usize,
    pub residual: bool,
    pub fusion: BranchFusion,
}

pub fn power_of_two_dilations(branches: usize) -> Vec<usize> {
    (0..branches).map(|i| 1usize << i).collect()
}

impl FplConfig {
    /// Stride-1 module with `b = 4`, dilations {1, 2, 4, 8}, factorized bank,
    /// pairwise fusion, residual when `c_in == c_out`.
    pub fn new(c_in: usize, c_out: usize) -> Self {
        FplConfig {
            c_in,
            c_out,
            branches: 4,
            dilations: power_of_two_dilations(4),
            factorize_bank: true,
            factorize_stage1: false,
            stride: 1,
            residual: c_in == c_out,
            fusion: BranchFusion::Pff,
        }
    }

    /// Stride-2 module without residual.
    pub fn downsampler(c_in: usize, c_out: usize) -> Self {
        FplConfig {
            stride: 2,
            residual: false,
            ..FplConfig::new(c_in, c_out)
        }
    }

    /// Sets `b` and the matching power-of-two dilations.
    pub fn with_branches(mut self, branches: usize) -> Self {
        self.branches = branches;
        self.dilations = power_of_two_dilations(branches);
        self
    }

    pub fn with_fusion(mut self, fusion: BranchFusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn branch_width(&self) -> usize {
        self.c_out / self.branches.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config("FPL channels must be >= 1".into()));
        }
        if self.branches == 0 || self.c_out % self.branches != 0 {
            return Err(Error::Config(format!(
                "FPL c_out {} is not divisible by b = {}",
                self.c_out, self.branches
            )));
        }
        if self.dilations.len() != self.branches {
            return Err(Error::Config(format!(
                "FPL needs {} dilation rates, got {}",
                self.branches,
                self.dilations.len()
            )));
        }
        if self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "FPL dilations must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("FPL stride must be 1 or 2, got {}", self.stride)));
        }
        if self.residual && (self.stride != 1 || self.c_in != self.c_out) {
            return Err(Error::Config(
                "FPL residual needs stride 1 and c_in == c_out".into(),
            ));
        }
        Ok(())
    }
}

/// `k x 1` then `1 x k` at the same dilation with BN+PReLU in between, or a
/// single dense `k x k`.
#[derive(Clone, Debug)]
pub(crate) enum Spatial {
    Dense(Conv),
    Factorized { first: ConvBnAct, second: Conv },
}

impl Spatial {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        stride: usize,
        factorized: bool,
    ) -> Result<Self> {
        if factorized {
            let a = ConvSpec::same(c_in, c_out, 3, 1, dilation).with_stride(stride);
            let b = ConvSpec::same(c_out, c_out, 1, 3, dilation);
            Ok(Spatial::Factorized {
                first: ConvBnAct::new(store, &format!("{name}.a"), a)?,
                second: Conv::new(store, &format!("{name}.b"), b)?,
            })
        } else {
            let spec = ConvSpec::same(c_in, c_out, 3, 3, dilation).with_stride(stride);
            Ok(Spatial::Dense(Conv::new(store, name, spec)?))
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
        mode: BnMode,
    ) -> Result<VarId> {
        match self {
            Spatial::Dense(c) => c.forward(tape, store, x),
            Spatial::Factorized { first, second } => {
                let y = first.forward(tape, store, x, mode)?;
                second.forward(tape, store, y)
            }
        }
    }

    pub(crate) fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Spatial::Dense(c) => c.output_shape(input),
            Spatial::Factorized { first, second } => second.output_shape(first.output_shape(input)?),
        }
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Spatial::Dense(c) => c.param_ids(),
            Spatial::Factorized { first, second } => {
                let mut ids = first.param_ids();
                ids.extend(second.param_ids());
                ids
            }
        }
    }

    pub(crate) fn rf_steps(&self) -> Vec<RfStep> {
        match self {
            Spatial::Dense(c) => vec![c.rf_step()],
            Spatial::Factorized { first, second } => vec![first.conv.rf_step(), second.rf_step()],
        }
    }
}

/// Two-stage factorized pyramid:
///
/// ```text
/// x -> 1x1 (C_i -> C_o/b) -> 3x3 -> BN+PReLU -> b x [3x1(d) -> BN+PReLU -> 1x3(d)]
///   -> branch fusion -> concat -> (+ x) -> BN+PReLU
/// ```
///
/// In the stride-2 form the stride sits on the stage-1 conv.
#[derive(Clone, Debug)]
pub struct FplModule {
    pub cfg: FplConfig,
    reduce: Conv,
    stage1: Spatial,
    stage1_act: BnPrelu,
    bank: Vec<Spatial>,
    out_act: BnPrelu,
}

impl FplModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: FplConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.branch_width();
        let reduce = Conv::new(store, &format!("{name}.reduce"), ConvSpec::new(cfg.c_in, w, 1, 1))?;
        let stage1 = Spatial::new(store, &format!("{name}.stage1"), w, w, 1, cfg.stride, cfg.factorize_stage1)?;
        let stage1_act = BnPrelu::new(store, &format!("{name}.stage1"), w)?;
        let bank = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Spatial::new(store, &format!("{name}.branch{i}"), w, w, d, 1, cfg.factorize_bank))
            .collect::<Result<Vec<_>>>()?;
        let out_act = BnPrelu::new(store, &format!("{name}.out"), cfg.c_out)?;
        Ok(FplModule {
            cfg,
            reduce,
            stage1,
            stage1_act,
            bank,
            out_act,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId, mode: BnMode) -> Result<VarId> {
        let c = tape.shape(x).c;
        if c != self.cfg.c_in {
            return Err(Error::ShapeMismatch {
                op: "fpl_forward",
                dim: "channels",
                expected: self.cfg.c_in,
                actual: c,
            });
        }
        let r = self.reduce.forward(tape, store, x)?;
        let s = self.stage1.forward(tape, store, r, mode)?;
        let s = self.stage1_act.forward(tape, store, s, mode)?;
        let ys = self
            .bank
            .iter()
            .map(|b| b.forward(tape, store, s, mode))
            .collect::<Result<Vec<_>>>()?;
        let zs = fuse(tape, &ys, self.cfg.fusion)?;
        let mut y = tape.concat(&zs)?;
        if self.cfg.residual {
            y = tape.add(&[y, x])?;
        }
        self.out_act.forward(tape, store, y, mode)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let r = self.reduce.output_shape(input)?;
        let s = self.stage1.output_shape(r)?;
        Ok(s.with_c(self.cfg.c_out))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.reduce.param_ids();
        ids.extend(self.stage1.param_ids());
        ids.extend(self.stage1_act.param_ids());
        for b in &self.bank {
            ids.extend(b.param_ids());
        }
        ids.extend(self.out_act.param_ids());
        ids
    }

    /// Longest path: reduction, stage 1, widest-dilation branch.
    pub fn rf_steps(&self) -> Vec<RfStep> {
        let mut steps = vec![self.reduce.rf_step()];
        steps.extend(self.stage1.rf_steps());
        if let Some(last) = self.bank.last() {
            steps.extend(last.rf_steps());
        }
        steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamKind;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights_only<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
        ids.iter()
            .filter(|&&id| store.get(id).kind == ParamKind::Weight)
            .map(|&id| store.value(id).len())
            .sum()
    }

    #[test]
    fn table_one_counts() {
        let mut store = ParamStore::<f32>::new(0);
        let fpl = FplModule::new(&mut store, "fpl", FplConfig::new(60, 60)).unwrap();
        assert_eq!(weights_only(&store, &fpl.param_ids()), 8325);
        let cfg = FplConfig {
            factorize_bank: false,
            ..FplConfig::new(60, 60)
        };
        let decomp = FplModule::new(&mut store, "decomp", cfg).unwrap();
        assert_eq!(weights_only(&store, &decomp.param_ids()), 11025);
    }

    #[test]
    fn shapes_stride_one_and_two() {
        let mut store = ParamStore::<f32>::new(0);
        let m = FplModule::new(&mut store, "m", FplConfig::new(64, 64)).unwrap();
        assert_eq!(m.output_shape(Shape::new(1, 64, 128, 256)).unwrap(), Shape::new(1, 64, 128, 256));
        let d = FplModule::new(&mut store, "d", FplConfig::downsampler(35, 64)).unwrap();
        assert_eq!(d.output_shape(Shape::new(1, 35, 256, 512)).unwrap(), Shape::new(1, 64, 128, 256));
        let d3 = FplModule::new(&mut store, "d3", FplConfig::downsampler(131, 128)).unwrap();
        assert_eq!(d3.output_shape(Shape::new(1, 131, 128, 256)).unwrap(), Shape::new(1, 128, 64, 128));
    }

    #[test]
    fn forward_matches_static_shape() {
        let mut store = ParamStore::<f32>::new(1);
        let d = FplModule::new(&mut store, "d", FplConfig::downsampler(5, 8)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(Shape::new(2, 5, 16, 12), 0.5));
        let y = d.forward(&mut tape, &store, x, BnMode::Train).unwrap();
        assert_eq!(tape.shape(y), d.output_shape(Shape::new(2, 5, 16, 12)).unwrap());
    }

    #[test]
    fn zero_input_gives_zero_output_in_infer_mode() {
        let mut store = ParamStore::<f64>::new(2);
        let m = FplModule::new(&mut store, "m", FplConfig::new(8, 8)).unwrap();
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::zeros(Shape::new(1, 8, 9, 9)));
        let y = m.forward(&mut tape, &store, x, BnMode::Infer).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(FplConfig::new(60, 62).validate().is_err());
        let mut c = FplConfig::new(8, 8);
        c.dilations = vec![1, 4, 2, 8];
        assert!(c.validate().is_err());
        let mut c = FplConfig::downsampler(8, 8);
        c.residual = true;
        assert!(c.validate().is_err());
        let mut c = FplConfig::new(8, 8);
        c.dilations.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn wrong_input_channels_named() {
        let mut store = ParamStore::<f32>::new(0);
        let m = FplModule::new(&mut store, "m", FplConfig::new(8, 8)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(Shape::new(1, 4, 4, 4)));
        let err = m.forward(&mut tape, &store, x, BnMode::Train).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn repeated_forward_bit_identical() {
        let mut store = ParamStore::<f32>::new(3);
        let m = FplModule::new(&mut store, "m", FplConfig::new(8, 8)).unwrap();
        let input = Tensor::random_uniform(Shape::new(2, 8, 10, 10), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(input.clone());
            let y = m.forward(&mut tape, &store, x, BnMode::Train).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
