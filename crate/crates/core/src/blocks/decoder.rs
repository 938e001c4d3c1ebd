use crate::autograd::{ParamId, ParamStore, Tape, VarId};
use crate::blocks::fpl::{FplConfig, FplModule};
use crate::blocks::layers::{ConvBnAct, Deconv, Upsampler};
use crate::blocks::LayerRow;
use crate::error::{Error, Result};
use crate::tensor::{BnMode, ConvSpec, Scalar, Shape};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub c_in: usize,
    /// Width after the 1x1 projection and the first upsampler.
    pub c_mid: usize,
    /// Width after the second upsampler.
    pub c_low: usize,
    pub modules_per_stage: usize,
    pub num_classes: usize,
    /// Channel counts are overwritten per module; the rest is kept.
    pub module: FplConfig,
}

impl DecoderConfig {
    pub fn new(c_in: usize, num_classes: usize) -> Self {
        DecoderConfig {
            c_in,
            c_mid: 64,
            c_low: 16,
            modules_per_stage: 2,
            num_classes,
            module: FplConfig::new(64, 64),
        }
    }
}

/// Sequential decoder without encoder skips:
/// 1x1 projection, upsample, FPL x m, upsample, FPL x m, transposed-conv
/// projection to classes (x2).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    proj: ConvBnAct,
    up_mid: Upsampler,
    mid: Vec<FplModule>,
    up_low: Upsampler,
    low: Vec<FplModule>,
    out: Deconv,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: DecoderConfig) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(Error::Config("decoder needs at least one class".into()));
        }
        let module = |c: usize| FplConfig {
            c_in: c,
            c_out: c,
            stride: 1,
            residual: true,
            ..cfg.module.clone()
        };
        let proj = ConvBnAct::new(store, &format!("{name}.proj"), ConvSpec::new(cfg.c_in, cfg.c_mid, 1, 1))?;
        let up_mid = Upsampler::new(store, &format!("{name}.up0"), cfg.c_mid, cfg.c_mid)?;
        let mid = (0..cfg.modules_per_stage)
            .map(|i| FplModule::new(store, &format!("{name}.mid{i}"), module(cfg.c_mid)))
            .collect::<Result<Vec<_>>>()?;
        let up_low = Upsampler::new(store, &format!("{name}.up1"), cfg.c_mid, cfg.c_low)?;
        let low = (0..cfg.modules_per_stage)
            .map(|i| FplModule::new(store, &format!("{name}.low{i}"), module(cfg.c_low)))
            .collect::<Result<Vec<_>>>()?;
        let out = Deconv::new(
            store,
            &format!("{name}.classifier"),
            ConvSpec::new(cfg.c_low, cfg.num_classes, 2, 2).with_stride(2).with_bias(true),
        )?;
        Ok(Decoder {
            cfg,
            proj,
            up_mid,
            mid,
            up_low,
            low,
            out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId, mode: BnMode) -> Result<VarId> {
        let mut y = self.proj.forward(tape, store, x, mode)?;
        y = self.up_mid.forward(tape, store, y, mode)?;
        for m in &self.mid {
            y = m.forward(tape, store, y, mode)?;
        }
        y = self.up_low.forward(tape, store, y, mode)?;
        for m in &self.low {
            y = m.forward(tape, store, y, mode)?;
        }
        self.out.forward(tape, store, y)
    }

    pub fn rows(&self, input: Shape) -> Result<Vec<LayerRow>> {
        let mut rows = Vec::new();
        let mut s = self.proj.output_shape(input)?;
        rows.push(LayerRow::new("Projection (Conv-1x1)", s, self.proj.param_ids(), vec![self.proj.conv.rf_step()]));
        for (up, modules) in [(&self.up_mid, &self.mid), (&self.up_low, &self.low)] {
            s = up.output_shape(s)?;
            rows.push(LayerRow::new("Upsampler", s, up.param_ids(), vec![up.deconv.rf_step()]));
            for m in modules {
                s = m.output_shape(s)?;
                rows.push(LayerRow::new("FPL", s, m.param_ids(), m.rf_steps()));
            }
        }
        s = self.out.output_shape(s)?;
        rows.push(LayerRow::new("Projection (Deconv)", s, self.out.param_ids(), vec![self.out.rf_step()]));
        Ok(rows)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.proj.param_ids();
        ids.extend(self.up_mid.param_ids());
        for m in &self.mid {
            ids.extend(m.param_ids());
        }
        ids.extend(self.up_low.param_ids());
        for m in &self.low {
            ids.extend(m.param_ids());
        }
        ids.extend(self.out.param_ids());
        ids
    }
}
