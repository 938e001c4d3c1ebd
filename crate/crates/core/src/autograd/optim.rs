use serde::{Deserialize, Serialize};

use crate::autograd::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iter: usize,
    /// Constant `c` of the class weighting `1 / ln(c + p)`.
    pub class_weight_c: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 4.5e-2,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 6,
            max_iter: 1000,
            class_weight_c: 1.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::Config(format!("lr_init must be > 0, got {}", self.lr_init)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.power > 0.0) {
            return Err(Error::Config(format!("power must be > 0, got {}", self.power)));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// `lr_init * (1 - iter/max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::InvalidValue(format!(
            "iteration {iter} exceeds max_iter {}",
            cfg.max_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.lr_init * frac.powf(cfg.power))
}

/// SGD with classic (coupled) momentum and L2 weight decay:
///
/// ```text
/// g <- grad + weight_decay * param
/// v <- momentum * v + g
/// param <- param - lr * v
/// ```
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: T::cst(momentum),
            weight_decay: T::cst(weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity.get(id.index()).and_then(|v| v.as_ref())
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        let lr = T::cst(lr);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, grad) in grads {
            if !store.get(*id).kind.trainable() {
                continue;
            }
            let param = store.value_mut(*id);
            check_same_shape("sgd_step", param.shape(), grad.shape())?;
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(param.shape()));
            for ((p, &g), vel) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(v.data_mut().iter_mut())
            {
                let g = g + self.weight_decay * *p;
                *vel = self.momentum * *vel + g;
                *p -= lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::params::ParamKind;
    use crate::tensor::Shape;

    #[test]
    fn poly_endpoints() {
        let cfg = TrainConfig {
            max_iter: 100,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(0, &cfg).unwrap(), 0.045);
        assert_eq!(poly_lr(100, &cfg).unwrap(), 0.0);
        assert!(poly_lr(101, &cfg).is_err());
        let lin = TrainConfig { power: 1.0, ..cfg };
        assert!((poly_lr(50, &lin).unwrap() - 0.0225).abs() < 1e-15);
    }

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new(0);
        let id = s.add("p", ParamKind::Weight, Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, id) = scalar_store(1.5);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &[(id, Tensor::scalar(0.0))], 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 1.5);
    }

    #[test]
    fn two_step_velocity_sequence() {
        // p0 = 1, grads 0.5 then 0.25, lr 0.1, momentum 0.9, no decay:
        // v1 = 0.5, p1 = 0.95; v2 = 0.45 + 0.25 = 0.7, p2 = 0.95 - 0.07 = 0.88.
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &[(id, Tensor::scalar(0.5))], 0.1).unwrap();
        assert!((s.value(id).data()[0] - 0.95).abs() < 1e-15);
        opt.step(&mut s, &[(id, Tensor::scalar(0.25))], 0.1).unwrap();
        assert!((opt.velocity(id).unwrap().data()[0] - 0.7).abs() < 1e-15);
        assert!((s.value(id).data()[0] - 0.88).abs() < 1e-15);
    }

    #[test]
    fn decay_only_scales() {
        let (mut s, id) = scalar_store(2.0);
        let mut opt = Sgd::new(0.0, 0.01);
        opt.step(&mut s, &[(id, Tensor::scalar(0.0))], 0.5).unwrap();
        assert!((s.value(id).data()[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let (mut s, id) = scalar_store(2.0);
        let mut opt = Sgd::new(0.0, 0.0);
        let g = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert!(opt.step(&mut s, &[(id, g)], 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_init: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { max_iter: 0, ..Default::default() }.validate().is_err());
    }
}
