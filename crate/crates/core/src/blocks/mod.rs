//! Differentiable building blocks. Each block registers its parameters in a
//! [`ParamStore`](crate::autograd::ParamStore) at construction and records
//! its forward pass on a [`Tape`](crate::autograd::Tape).

pub mod decoder;
pub mod esp;
pub mod fir;
pub mod fpl;
pub mod initial;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

pub use decoder::{Decoder, DecoderConfig};
pub use esp::{EspConfig, EspModule};
pub use fir::{fir_forward, FusionStrategy};
pub use fpl::{FplConfig, FplModule};
pub use initial::InitialModule;
pub use layers::{BnPrelu, Conv, ConvBnAct, Deconv, Upsampler};

/// How pyramid branch outputs `y1..yb` are combined before concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchFusion {
    /// `z1 = y1`, `zi = yi + y(i-1)`.
    Pff,
    /// `z1 = y1`, `zi = z(i-1) + yi`.
    Hff,
    None,
}

impl fmt::Display for BranchFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchFusion::Pff => "pff",
            BranchFusion::Hff => "hff",
            BranchFusion::None => "none",
        })
    }
}

impl FromStr for BranchFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pff" => Ok(BranchFusion::Pff),
            "hff" => Ok(BranchFusion::Hff),
            "none" => Ok(BranchFusion::None),
            _ => Err(Error::Config(format!("unknown branch fusion {s:?}; expected pff, hff or none"))),
        }
    }
}

pub fn fuse<T: Scalar>(tape: &mut Tape<T>, ys: &[VarId], fusion: BranchFusion) -> Result<Vec<VarId>> {
    let mut zs = Vec::with_capacity(ys.len());
    for (i, &y) in ys.iter().enumerate() {
        let z = match (fusion, i) {
            (BranchFusion::None, _) | (_, 0) => y,
            (BranchFusion::Pff, _) => tape.add(&[y, ys[i - 1]])?,
            (BranchFusion::Hff, _) => tape.add(&[zs[i - 1], y])?,
        };
        zs.push(z);
    }
    Ok(zs)
}

/// One step of the closed-form receptive-field recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfStep {
    Conv { kh: usize, kw: usize, dilation: usize, stride: usize },
    /// Transposed conv; an output pixel sees `ceil(kernel/stride)` inputs per axis.
    Transposed { kernel: usize, stride: usize },
    /// Bilinear upsampling, counted as two input taps per axis.
    Bilinear { factor: usize },
    AvgPool2,
}

/// One row of a layer table: label, output shape, owned parameters and
/// the receptive-field steps along its longest path.
#[derive(Clone, Debug)]
pub struct LayerRow {
    pub op: String,
    pub shape: Shape,
    pub params: Vec<ParamId>,
    pub rf: Vec<RfStep>,
}

impl LayerRow {
    pub fn new(op: impl Into<String>, shape: Shape, params: Vec<ParamId>, rf: Vec<RfStep>) -> Self {
        LayerRow {
            op: op.into(),
            shape,
            params,
            rf,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(tape: &mut Tape<f64>, v: f64) -> VarId {
        tape.input(Tensor::full(Shape::new(1, 1, 1, 1), v))
    }

    fn values(tape: &Tape<f64>, zs: &[VarId]) -> Vec<f64> {
        zs.iter().map(|&z| tape.value(z).data()[0]).collect()
    }

    #[test]
    fn fusion_rules() {
        let mut tape = Tape::new();
        let ys: Vec<_> = [1.0, 10.0, 100.0, 1000.0].iter().map(|&v| leaf(&mut tape, v)).collect();
        let p = fuse(&mut tape, &ys, BranchFusion::Pff).unwrap();
        assert_eq!(values(&tape, &p), vec![1.0, 11.0, 110.0, 1100.0]);
        let h = fuse(&mut tape, &ys, BranchFusion::Hff).unwrap();
        assert_eq!(values(&tape, &h), vec![1.0, 11.0, 111.0, 1111.0]);
        let n = fuse(&mut tape, &ys, BranchFusion::None).unwrap();
        assert_eq!(values(&tape, &n), vec![1.0, 10.0, 100.0, 1000.0]);
    }
}
