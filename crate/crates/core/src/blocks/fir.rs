use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

/// How an encoder stage closes: which of the deep output, the stage's
/// first (shallow) output and the resized image are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    /// `concat(deep, image)`
    If,
    /// `deep + shallow`
    IsffAdd,
    /// `concat(deep, shallow)`
    IsffConcat,
    /// `concat(deep + shallow, image)`
    IfAndIsffAdd,
    /// `concat(deep, shallow, image)`
    IfAndIsffConcat,
    /// `concat(deep + shallow, deep, image)`
    Fir,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::If,
        FusionStrategy::IsffAdd,
        FusionStrategy::IsffConcat,
        FusionStrategy::IfAndIsffAdd,
        FusionStrategy::IfAndIsffConcat,
        FusionStrategy::Fir,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::If => "if",
            FusionStrategy::IsffAdd => "isff_add",
            FusionStrategy::IsffConcat => "isff_concat",
            FusionStrategy::IfAndIsffAdd => "if_and_isff_add",
            FusionStrategy::IfAndIsffConcat => "if_and_isff_concat",
            FusionStrategy::Fir => "fir",
        }
    }

    /// Row label used in layer tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionStrategy::If => "IF unit",
            FusionStrategy::IsffAdd => "ISFF-add unit",
            FusionStrategy::IsffConcat => "ISFF-concat unit",
            FusionStrategy::IfAndIsffAdd => "IF & ISFF-add unit",
            FusionStrategy::IfAndIsffConcat => "IF & ISFF-concat unit",
            FusionStrategy::Fir => "FIR unit",
        }
    }

    /// Output channels for stage width `c` and `image_c` image channels.
    pub fn out_channels(self, c: usize, image_c: usize) -> usize {
        match self {
            FusionStrategy::If | FusionStrategy::IfAndIsffAdd => c + image_c,
            FusionStrategy::IsffAdd => c,
            FusionStrategy::IsffConcat => 2 * c,
            FusionStrategy::IfAndIsffConcat | FusionStrategy::Fir => 2 * c + image_c,
        }
    }

    pub fn forward<T: Scalar>(self, tape: &mut Tape<T>, deep: VarId, shallow: VarId, image: VarId) -> Result<VarId> {
        match self {
            FusionStrategy::If => tape.concat(&[deep, image]),
            FusionStrategy::IsffAdd => tape.add(&[deep, shallow]),
            FusionStrategy::IsffConcat => tape.concat(&[deep, shallow]),
            FusionStrategy::IfAndIsffAdd => {
                let s = tape.add(&[deep, shallow])?;
                tape.concat(&[s, image])
            }
            FusionStrategy::IfAndIsffConcat => tape.concat(&[deep, shallow, image]),
            FusionStrategy::Fir => fir_forward(tape, deep, shallow, image),
        }
    }

    pub fn output_shape(self, deep: Shape, image_c: usize) -> Shape {
        deep.with_c(self.out_channels(deep.c, image_c))
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = FusionStrategy::ALL.iter().map(|f| f.name()).collect();
                Error::Config(format!("unknown fusion strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Feature-image reinforcement: `concat(deep + shallow, deep, image)`.
/// Parameter-free; the image must already match the deep resolution.
pub fn fir_forward<T: Scalar>(tape: &mut Tape<T>, deep: VarId, shallow: VarId, image: VarId) -> Result<VarId> {
    let sum = tape.add(&[deep, shallow])?;
    tape.concat(&[sum, deep, image])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{concat, Tensor};

    fn t(c: usize, v: f64) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, c, 2, 3), |_, ch, y, x| v + ch as f64 + 0.1 * (y * 3 + x) as f64)
    }

    #[test]
    fn stage_widths() {
        assert_eq!(FusionStrategy::Fir.out_channels(64, 3), 131);
        assert_eq!(FusionStrategy::Fir.out_channels(128, 3), 259);
        for f in FusionStrategy::ALL {
            let mut tape = Tape::<f64>::new();
            let (d, s, i) = (tape.input(t(4, 1.0)), tape.input(t(4, 2.0)), tape.input(t(3, 3.0)));
            let y = f.forward(&mut tape, d, s, i).unwrap();
            assert_eq!(tape.shape(y).c, f.out_channels(4, 3), "{f}");
        }
    }

    #[test]
    fn zero_shallow_duplicates_deep() {
        let mut tape = Tape::<f64>::new();
        let deep = t(4, 1.0);
        let image = t(3, 5.0);
        let (d, s, i) = (
            tape.input(deep.clone()),
            tape.input(Tensor::zeros(deep.shape())),
            tape.input(image.clone()),
        );
        let y = fir_forward(&mut tape, d, s, i).unwrap();
        assert_eq!(tape.value(y), &concat(&[&deep, &deep, &image]).unwrap());
    }

    #[test]
    fn deep_receives_both_paths() {
        let mut tape = Tape::<f64>::new();
        let d = tape.input_with_grad(t(2, 1.0));
        let s = tape.input_with_grad(t(2, 2.0));
        let i = tape.input(t(3, 0.0));
        let y = fir_forward(&mut tape, d, s, i).unwrap();
        let loss = tape.dot_const(y, Tensor::full(tape.shape(y), 1.0)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(d).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(g.wrt(s).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut tape = Tape::<f64>::new();
        let d = tape.input(t(2, 1.0));
        let s = tape.input(t(3, 1.0));
        let i = tape.input(t(3, 0.0));
        assert!(fir_forward(&mut tape, d, s, i).is_err());
    }

    #[test]
    fn names_round_trip() {
        for f in FusionStrategy::ALL {
            assert_eq!(f.name().parse::<FusionStrategy>().unwrap(), f);
        }
        assert!("nope".parse::<FusionStrategy>().is_err());
    }
}
