use serde::Serialize;

use crate::blocks::{LayerRow, RfStep};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Scalar, Shape};

/// Receptive field after a layer, in input pixels, and the spacing of the
/// layer's output grid on the input (below 1 after upsampling).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RfRow {
    pub name: String,
    pub rf_h: f64,
    pub rf_w: f64,
    pub jump_h: f64,
    pub jump_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RfReport {
    pub rows: Vec<RfRow>,
}

impl RfReport {
    pub fn last(&self) -> Option<&RfRow> {
        self.rows.last()
    }
}

/// Running state of the recurrence `rf += d (k - 1) jump; jump *= stride`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RfState {
    pub rf_h: f64,
    pub rf_w: f64,
    pub jump_h: f64,
    pub jump_w: f64,
}

impl Default for RfState {
    fn default() -> Self {
        RfState {
            rf_h: 1.0,
            rf_w: 1.0,
            jump_h: 1.0,
            jump_w: 1.0,
        }
    }
}

impl RfState {
    pub fn apply(&mut self, step: RfStep) -> Result<()> {
        match step {
            RfStep::Conv { kh, kw, dilation, stride } => {
                self.rf_h += (dilation * (kh - 1)) as f64 * self.jump_h;
                self.rf_w += (dilation * (kw - 1)) as f64 * self.jump_w;
                self.jump_h *= stride as f64;
                self.jump_w *= stride as f64;
            }
            RfStep::AvgPool2 => {
                return self.apply(RfStep::Conv {
                    kh: 2,
                    kw: 2,
                    dilation: 1,
                    stride: 2,
                })
            }
            RfStep::Transposed { kernel, stride } => {
                if stride == 0 || kernel % stride != 0 {
                    return Err(Error::UnsupportedOps(vec![format!(
                        "transposed conv k={kernel} stride={stride} (kernel must be a multiple of stride)"
                    )]));
                }
                let taps = (kernel / stride - 1) as f64;
                self.rf_h += taps * self.jump_h;
                self.rf_w += taps * self.jump_w;
                self.jump_h /= stride as f64;
                self.jump_w /= stride as f64;
            }
            RfStep::Bilinear { factor } => {
                if factor == 1 {
                    return Ok(());
                }
                if factor % 2 != 0 {
                    return Err(Error::UnsupportedOps(vec![format!(
                        "bilinear x{factor} (odd factors mix one- and two-tap outputs)"
                    )]));
                }
                self.rf_h += self.jump_h;
                self.rf_w += self.jump_w;
                self.jump_h /= factor as f64;
                self.jump_w /= factor as f64;
            }
        }
        Ok(())
    }
}

/// Closed-form receptive field of a single chain of steps.
pub fn rf_of_steps(steps: &[RfStep]) -> Result<RfState> {
    let mut s = RfState::default();
    let mut bad = Vec::new();
    for &step in steps {
        if let Err(Error::UnsupportedOps(mut ops)) = s.apply(step) {
            bad.append(&mut ops);
        }
    }
    if bad.is_empty() {
        Ok(s)
    } else {
        Err(Error::UnsupportedOps(bad))
    }
}

/// Propagates along the layer table; each row contributes its longest path.
pub fn receptive_field_rows(rows: &[LayerRow]) -> Result<RfReport> {
    let mut s = RfState::default();
    let mut out = Vec::with_capacity(rows.len());
    let mut bad = Vec::new();
    for row in rows {
        for &step in &row.rf {
            if let Err(Error::UnsupportedOps(ops)) = s.apply(step) {
                bad.extend(ops.into_iter().map(|o| format!("{}: {o}", row.op)));
            }
        }
        out.push(RfRow {
            name: row.op.clone(),
            rf_h: s.rf_h,
            rf_w: s.rf_w,
            jump_h: s.jump_h,
            jump_w: s.jump_w,
        });
    }
    if !bad.is_empty() {
        return Err(Error::UnsupportedOps(bad));
    }
    Ok(RfReport { rows: out })
}

pub fn receptive_field<T: Scalar>(net: &Network<T>, probe: Shape) -> Result<RfReport> {
    receptive_field_rows(&net.layers(probe)?)
}
