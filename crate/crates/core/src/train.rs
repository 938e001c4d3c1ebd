//! Two-stage training on in-memory samples: the encoder with a bilinear
//! head first, then the full network initialised from the trained encoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{class_weights, poly_lr, ClassWeighting, Sgd, Tape, TrainConfig};
use crate::data::{augment, class_frequencies, make_batch, AugmentConfig, ConfusionMatrix, MiouReport, Sample, IGNORE};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, MatchReport, Network, NetworkConfig};
use crate::tensor::{argmax_channels, BnMode, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Full,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Encoder => "encoder",
            Stage::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub stage: Stage,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub optim: TrainConfig,
    /// `None` trains on the samples as they are.
    pub augment: Option<AugmentConfig>,
}

pub struct Trainer<'a, T: Scalar> {
    pub net: Network<T>,
    sgd: Sgd<T>,
    cfg: StageConfig,
    stage: Stage,
    weights: Vec<T>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    data: &'a [Sample],
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(net: Network<T>, stage: Stage, cfg: StageConfig, weighting: &ClassWeighting, data: &'a [Sample], seed: u64) -> Result<Self> {
        cfg.optim.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if weighting.w_class.len() != net.config().num_classes {
            return Err(Error::ShapeMismatch {
                op: "trainer",
                dim: "class weights",
                expected: net.config().num_classes,
                actual: weighting.w_class.len(),
            });
        }
        Ok(Trainer {
            sgd: Sgd::from_config(&cfg.optim),
            weights: weighting.weights(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            net,
            cfg,
            stage,
            data,
        })
    }

    /// Next mini-batch: samples are visited in a fresh shuffled order each epoch.
    fn next_batch(&mut self) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(self.cfg.optim.batch_size);
        while out.len() < self.cfg.optim.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let s = &self.data[self.order[self.cursor]];
            self.cursor += 1;
            out.push(match &self.cfg.augment {
                Some(a) => augment(s, a, self.rng.gen())?,
                None => s.clone(),
            });
        }
        Ok(out)
    }

    /// One SGD step at iteration `iter`; returns the log entry.
    pub fn step(&mut self, iter: usize) -> Result<IterLog> {
        let lr = poly_lr(iter, &self.cfg.optim)?;
        let batch = self.next_batch()?;
        let refs: Vec<&Sample> = batch.iter().collect();
        let (images, labels) = make_batch(&refs)?;
        let mut tape = Tape::new();
        let x = tape.input(images.cast::<T>());
        let logits = self.net.forward(&mut tape, x, BnMode::Train)?;
        let loss = tape.weighted_cross_entropy(logits, &labels, &self.weights, IGNORE)?;
        let loss_value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !loss_value.is_finite() {
            return Err(Error::InvalidValue(format!("{} loss diverged at iteration {iter}", self.stage)));
        }
        let grads = tape.backward(loss)?;
        let param_grads = tape.param_grads(&grads);
        let updates = tape.take_stat_updates();
        let store = self.net.store_mut();
        self.sgd.step(store, &param_grads, lr)?;
        store.apply_stat_updates(updates);
        Ok(IterLog {
            stage: self.stage,
            iter,
            lr,
            loss: loss_value,
        })
    }

    /// Runs iterations `0..max_iter`, reporting each to `log`.
    pub fn run(mut self, log: &mut dyn FnMut(&IterLog)) -> Result<Network<T>> {
        for iter in 0..self.cfg.optim.max_iter {
            log(&self.step(iter)?);
        }
        Ok(self.net)
    }
}

/// Inference-mode mIoU over `samples`, evaluated `batch` images at a time.
pub fn evaluate<T: Scalar>(net: &Network<T>, samples: &[Sample], batch: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, labels) = make_batch(&refs)?;
        let preds = argmax_channels(&net.infer(&images.cast::<T>())?);
        let plane = labels.len() / chunk.len();
        for (p, t) in preds.iter().zip(labels.chunks_exact(plane)) {
            cm.add(p, t, IGNORE)?;
        }
    }
    Ok(cm.report())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    /// Network for stage two; stage one uses its encoder-only form.
    pub network: NetworkConfig,
    pub encoder: StageConfig,
    pub full: StageConfig,
    pub seed: u64,
}

pub struct TwoStageOutcome<T> {
    pub network: Network<T>,
    pub weighting: ClassWeighting,
    pub transfer: MatchReport,
    pub log: Vec<IterLog>,
}

/// Trains the encoder-only network, copies its parameters into the full
/// network by name, then trains the full network. Class weights come from
/// the frequencies of `train`.
pub fn train_two_stage<T: Scalar>(cfg: &TwoStageConfig, train: &[Sample], log: &mut dyn FnMut(&IterLog)) -> Result<TwoStageOutcome<T>> {
    let full_cfg = NetworkConfig {
        seed: cfg.seed,
        ..cfg.network.clone().full()
    };
    let p = class_frequencies(train, full_cfg.num_classes)?;
    let weighting = class_weights(&p, cfg.encoder.optim.class_weight_c)?;
    let mut history = Vec::new();
    let mut record = |l: &IterLog| {
        log(l);
        history.push(l.clone());
    };

    let encoder = Network::<T>::new(full_cfg.clone().encoder_only())?;
    let encoder = Trainer::new(encoder, Stage::Encoder, cfg.encoder.clone(), &weighting, train, cfg.seed)?.run(&mut record)?;

    let mut full = Network::<T>::new(full_cfg)?;
    let transfer = full.load_matching_from(&Checkpoint::from_network(&encoder));
    let weighting_full = class_weights(&p, cfg.full.optim.class_weight_c)?;
    let full = Trainer::new(full, Stage::Full, cfg.full.clone(), &weighting_full, train, cfg.seed.wrapping_add(1))?.run(&mut record)?;
    Ok(TwoStageOutcome {
        network: full,
        weighting: weighting_full,
        transfer,
        log: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            height: 32,
            width: 32,
            ..SynthSpec::default()
        }
    }

    fn stage(iters: usize, batch: usize) -> StageConfig {
        StageConfig {
            optim: TrainConfig {
                max_iter: iters,
                batch_size: batch,
                ..TrainConfig::default()
            },
            augment: None,
        }
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let data = synth_dataset(&small_spec(), 12).unwrap();
        let net = Network::<f32>::new(NetworkConfig::tiny().encoder_only()).unwrap();
        let w = ClassWeighting::uniform(3);
        let mut losses = Vec::new();
        Trainer::new(net, Stage::Encoder, stage(50, 4), &w, &data, 0)
            .unwrap()
            .run(&mut |l| losses.push(l.loss))
            .unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.7 * head, "first {head}, last {tail}");
    }

    #[test]
    fn two_stage_is_deterministic_and_transfers_encoder() {
        let data = synth_dataset(&small_spec(), 6).unwrap();
        let cfg = TwoStageConfig {
            network: NetworkConfig::tiny(),
            encoder: stage(3, 2),
            full: stage(3, 2),
            seed: 5,
        };
        let a = train_two_stage::<f32>(&cfg, &data, &mut |_| {}).unwrap();
        let b = train_two_stage::<f32>(&cfg, &data, &mut |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.log[0].lr, 0.045);
        assert_eq!(a.log[3].stage, Stage::Full);
        let encoder_params = a.network.encoder_param_ids().len();
        assert_eq!(a.transfer.copied, encoder_params);
        assert!(a.transfer.kept.iter().all(|n| n.starts_with("decoder")), "{:?}", a.transfer.kept);
        let r = evaluate(&a.network, &data, 4).unwrap();
        assert!((0.0..=1.0).contains(&r.miou));
    }
}
