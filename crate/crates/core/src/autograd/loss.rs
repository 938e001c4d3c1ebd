use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-class weights `w = 1 / ln(c + p)` for normalized class frequencies `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeighting {
    pub p_class: Vec<f64>,
    pub w_class: Vec<f64>,
}

impl ClassWeighting {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeighting {
            p_class: vec![1.0 / num_classes as f64; num_classes],
            w_class: vec![1.0; num_classes],
        }
    }

    pub fn weights<T: Scalar>(&self) -> Vec<T> {
        self.w_class.iter().map(|&w| T::cst(w)).collect()
    }
}

pub fn class_weights(frequencies: &[f64], c: f64) -> Result<ClassWeighting> {
    if !(c > 1.0) || !c.is_finite() {
        return Err(Error::InvalidValue(format!(
            "class weighting constant must be > 1 (ln(c + p) must stay positive), got {c}"
        )));
    }
    let mut w = Vec::with_capacity(frequencies.len());
    for (i, &p) in frequencies.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidValue(format!(
                "class {i} frequency {p} outside [0, 1]"
            )));
        }
        w.push(1.0 / (c + p).ln());
    }
    Ok(ClassWeighting {
        p_class: frequencies.to_vec(),
        w_class: w,
    })
}

/// Returns `(loss, dloss/dlogits)`; see [`crate::autograd::Tape::weighted_cross_entropy`].
pub(crate) fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    class_weights: &[T],
    ignore_index: u8,
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let pixels = s.n * s.plane();
    if targets.len() != pixels {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            dim: "target pixels",
            expected: pixels,
            actual: targets.len(),
        });
    }
    if class_weights.len() != s.c {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            dim: "class weights",
            expected: s.c,
            actual: class_weights.len(),
        });
    }
    let mut valid = 0usize;
    for &t in targets {
        if t == ignore_index {
            continue;
        }
        if t as usize >= s.c {
            return Err(Error::InvalidValue(format!(
                "target label {t} out of range for {} classes",
                s.c
            )));
        }
        valid += 1;
    }
    let mut grad = Tensor::zeros(s);
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let inv_count = T::one() / T::cst(valid as f64);
    let plane = s.plane();
    let mut total = T::zero();
    let mut probs = vec![T::zero(); s.c];
    for n in 0..s.n {
        for i in 0..plane {
            let t = targets[n * plane + i];
            if t == ignore_index {
                continue;
            }
            let t = t as usize;
            let mut max = T::neg_infinity();
            for c in 0..s.c {
                max = max.max(logits.data()[(n * s.c + c) * plane + i]);
            }
            let mut z = T::zero();
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (logits.data()[(n * s.c + c) * plane + i] - max).exp();
                z += *p;
            }
            let log_z = z.ln();
            let shifted_t = logits.data()[(n * s.c + t) * plane + i] - max;
            let w = class_weights[t];
            total += w * (log_z - shifted_t);
            let g = grad.data_mut();
            for (c, &p) in probs.iter().enumerate() {
                let onehot = if c == t { T::one() } else { T::zero() };
                g[(n * s.c + c) * plane + i] = w * (p / z - onehot) * inv_count;
            }
        }
    }
    Ok((total * inv_count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Shape;

    #[test]
    fn weight_values() {
        // 1/ln(1.02) and 1/ln(2.02), evaluated at 30 digits with mpmath.
        let cw = class_weights(&[0.0, 1.0], 1.02).unwrap();
        assert!((cw.w_class[0] - 50.498_349_791_843_94).abs() < 1e-9);
        assert!((cw.w_class[1] - 1.422_277_826_001_915_7).abs() < 1e-9);
    }

    #[test]
    fn uniform_frequencies_equal_weights() {
        let cw = class_weights(&[0.25; 4], 1.02).unwrap();
        assert!(cw.w_class.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn invalid_constant_errors() {
        assert!(class_weights(&[0.0], 1.0).is_err());
        assert!(class_weights(&[0.0], 0.5).is_err());
        assert!(class_weights(&[1.5], 1.02).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let k = 5;
        let logits = Tensor::<f64>::full(Shape::new(2, k, 3, 3), 0.7);
        let targets: Vec<u8> = (0..18).map(|i| (i % k) as u8).collect();
        let (loss, _) = cross_entropy_forward(&logits, &targets, &[1.0; 5], 255).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_weighted() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
        let (loss, _) = cross_entropy_forward(&logits, &[0], &[2.0, 1.0], 255).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_zero_with_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input_with_grad(Tensor::full(Shape::new(1, 3, 2, 2), 0.3));
        let loss = tape.weighted_cross_entropy(x, &[255; 4], &[1.0; 3], 255).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_target_errors() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
        assert!(cross_entropy_forward(&logits, &[2], &[1.0, 1.0], 255).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 1), vec![1000.0, -1000.0]).unwrap();
        let (loss, grad) = cross_entropy_forward(&logits, &[1], &[1.0, 1.0], 255).unwrap();
        assert!((loss - 2000.0).abs() < 1e-3);
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }
}
