//! Coverage-gap ("gridding") score from an impulse response.
//!
//! A unit impulse at the centre of every input channel is pushed through a
//! block whose kernels are all ones, whose batch norms are identities and
//! whose PReLU slopes are 1. Every path then contributes a strictly positive
//! amount, so an output position is zero exactly when no path reaches it.
//! For each output channel the theoretical receptive field is the bounding
//! box of its nonzero response; the channel's score is the fraction of that
//! box that stays zero, and the block score is the mean over channels.

use serde::Serialize;

use crate::analysis::rf::rf_of_steps;
use crate::autograd::{ParamKind, ParamStore, Tape};
use crate::blocks::{Conv, EspConfig, EspModule, FplConfig, FplModule};
use crate::error::{Error, Result};
use crate::network::model::{esp_template, fpl_template};
use crate::network::{ModuleKind, NetworkConfig};
use crate::tensor::{BnMode, ConvSpec, Shape, Tensor};

#[derive(Clone, Debug)]
pub enum GridBlock {
    Conv { kernel: usize, dilation: usize },
    Fpl(FplConfig),
    Esp(EspConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridReport {
    pub score: f64,
    pub channel_scores: Vec<f64>,
    /// Side of the square probe map.
    pub size: usize,
}

/// The stride-1 stage-3 module of `cfg` at `channels` width.
pub fn stage_module_block(cfg: &NetworkConfig, channels: usize) -> GridBlock {
    match cfg.stage3_module {
        ModuleKind::Fpl => GridBlock::Fpl(fpl_template(cfg, FplConfig::new(channels, channels))),
        ModuleKind::Esp => GridBlock::Esp(esp_template(cfg, EspConfig::new(channels, channels))),
    }
}

/// Overwrites every parameter with its probe value.
pub fn set_probe_params(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let fill = match store.get(id).kind {
            ParamKind::Weight | ParamKind::BnGamma | ParamKind::BnRunningVar | ParamKind::PreluSlope => 1.0,
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => 0.0,
        };
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = fill);
    }
}

pub fn centred_impulse(channels: usize, size: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(Shape::new(1, channels, size, size));
    for c in 0..channels {
        t.set(0, c, size / 2, size / 2, 1.0);
    }
    t
}

/// Mean over channels of the zero fraction inside each channel's response
/// bounding box. Channels with no response are skipped.
pub fn gridding_score(response: &Tensor<f64>) -> GridReport {
    let s = response.shape();
    let mut channel_scores = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let plane = response.plane(0, c);
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..s.h {
            for x in 0..s.w {
                if plane[y * s.w + x] != 0.0 {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        if y0 == usize::MAX {
            continue;
        }
        let mut zeros = 0usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if plane[y * s.w + x] == 0.0 {
                    zeros += 1;
                }
            }
        }
        channel_scores.push(zeros as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
    }
    let score = if channel_scores.is_empty() {
        0.0
    } else {
        channel_scores.iter().sum::<f64>() / channel_scores.len() as f64
    };
    GridReport {
        score,
        channel_scores,
        size: s.h,
    }
}

/// Builds the block with probe parameters, feeds it a centred impulse on a
/// map twice as large as its receptive field, and scores the response.
pub fn gridding_diagnostic(block: &GridBlock) -> Result<GridReport> {
    let mut store = ParamStore::<f64>::new(0);
    let mut tape = Tape::inference();
    let (c_in, rf_steps, probe) = match block {
        GridBlock::Conv { kernel, dilation } => {
            let spec = ConvSpec::same(1, 1, *kernel, *kernel, *dilation);
            let conv = Conv::new(&mut store, "conv", spec)?;
            (1, vec![conv.rf_step()], Probe::Conv(conv))
        }
        GridBlock::Fpl(cfg) => {
            let m = FplModule::new(&mut store, "fpl", cfg.clone())?;
            (cfg.c_in, m.rf_steps(), Probe::Fpl(m))
        }
        GridBlock::Esp(cfg) => {
            let m = EspModule::new(&mut store, "esp", cfg.clone())?;
            (cfg.c_in, m.rf_steps(), Probe::Esp(m))
        }
    };
    let rf = rf_of_steps(&rf_steps)?;
    let size = 2 * (rf.rf_h.max(rf.rf_w).ceil() as usize) + 1;
    set_probe_params(&mut store);
    let x = tape.input(centred_impulse(c_in, size));
    let y = match &probe {
        Probe::Conv(c) => c.forward(&mut tape, &store, x)?,
        Probe::Fpl(m) => m.forward(&mut tape, &store, x, BnMode::Infer)?,
        Probe::Esp(m) => m.forward(&mut tape, &store, x, BnMode::Infer)?,
    };
    let response = tape.value(y);
    if response.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("impulse response overflowed".into()));
    }
    Ok(gridding_score(response))
}

enum Probe {
    Conv(Conv),
    Fpl(FplModule),
    Esp(EspModule),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BranchFusion;

    #[test]
    fn dense_conv_scores_zero() {
        let r = gridding_diagnostic(&GridBlock::Conv { kernel: 3, dilation: 1 }).unwrap();
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn dilated_conv_scores_sixteen_of_twenty_five() {
        // 9 taps inside a 5x5 window.
        let r = gridding_diagnostic(&GridBlock::Conv { kernel: 3, dilation: 2 }).unwrap();
        assert_eq!(r.score, 16.0 / 25.0);
    }

    #[test]
    fn pairwise_fusion_reduces_gaps() {
        let base = FplConfig::new(8, 8);
        let pff = gridding_diagnostic(&GridBlock::Fpl(base.clone().with_fusion(BranchFusion::Pff))).unwrap();
        let none = gridding_diagnostic(&GridBlock::Fpl(base.with_fusion(BranchFusion::None))).unwrap();
        assert!(pff.score < none.score, "pff {} vs none {}", pff.score, none.score);
    }
}
