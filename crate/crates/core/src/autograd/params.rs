use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution / transposed-convolution kernel.
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    PreluSlope,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// A pending running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
    pub momentum: T,
}

/// Named parameter tensors plus the seeded generator used to initialize
/// them. Build order fixes the draw order, so a given seed always yields the
/// same weights.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, kind, value });
        Ok(id)
    }

    /// Kaiming-uniform (fan-in, gain sqrt 2): U(-b, b) with `b = sqrt(6 / fan_in)`,
    /// `fan_in = shape.c * shape.h * shape.w`.
    pub fn add_kaiming(&mut self, name: impl Into<String>, shape: Shape) -> Result<ParamId> {
        let fan_in = (shape.c * shape.h * shape.w) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let value = Tensor::random_uniform(shape, -bound, bound, &mut self.rng);
        self.add(name, ParamKind::Weight, value)
    }

    pub fn add_vector(&mut self, name: impl Into<String>, kind: ParamKind, len: usize, fill: f64) -> Result<ParamId> {
        self.add(name, kind, Tensor::full(Shape::new(1, len, 1, 1), T::cst(fill)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Total element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            let m = u.momentum;
            let keep = T::one() - m;
            for (r, &b) in self.params[u.mean.0].value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.params[u.var.0].value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Converts every tensor to another dtype, keeping names and ids.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
            rng: self.rng.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.add_vector("a", ParamKind::Bias, 3, 0.0).unwrap();
        assert!(s.add_vector("a", ParamKind::Bias, 3, 0.0).is_err());
    }

    #[test]
    fn kaiming_is_seeded_and_bounded() {
        let shape = Shape::new(8, 4, 3, 3);
        let mut a = ParamStore::<f64>::new(7);
        let mut b = ParamStore::<f64>::new(7);
        let ia = a.add_kaiming("w", shape).unwrap();
        let ib = b.add_kaiming("w", shape).unwrap();
        assert_eq!(a.value(ia), b.value(ib));
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(a.value(ia).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn running_stats_are_not_trainable() {
        let mut s = ParamStore::<f32>::new(0);
        s.add_vector("g", ParamKind::BnGamma, 4, 1.0).unwrap();
        s.add_vector("m", ParamKind::BnRunningMean, 4, 0.0).unwrap();
        assert_eq!(s.trainable_count(), 4);
    }
}
