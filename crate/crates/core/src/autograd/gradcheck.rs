//! Central finite-difference gradient checker (f64 only).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::params::ParamStore;
use crate::autograd::tape::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Coordinates to sample; every coordinate is checked when there are fewer.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// numerically zero are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            samples: 64,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a PReLU kink.
    pub excluded: usize,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug)]
enum Coord {
    Param(usize, usize),
    Input(usize, usize),
}

/// Checks the tape gradients of `fragment` against central differences.
///
/// `fragment` receives a fresh recording tape, the parameters and one leaf
/// per entry of `inputs`, and returns its output node. The probe loss is
/// `<output, r>` for a seeded random `r`. Both trainable parameters and the
/// inputs are perturbed.
pub fn finite_diff_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    fragment: F,
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[VarId]) -> Result<VarId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let run = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> Result<(Tape<f64>, Vec<VarId>, VarId, VarId)> {
        let mut tape = Tape::new();
        let leaves: Vec<VarId> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
        let out = fragment(&mut tape, store, &leaves)?;
        let r = match probe {
            Some(r) => r.clone(),
            None => Tensor::zeros(tape.shape(out)),
        };
        let loss = tape.dot_const(out, r)?;
        Ok((tape, leaves, out, loss))
    };

    let (probe_tape, _, out, _) = run(store, inputs, None)?;
    let probe = Tensor::random_uniform(probe_tape.shape(out), -1.0, 1.0, &mut rng);
    drop(probe_tape);

    let (tape, leaves, _, loss) = run(store, inputs, Some(&probe))?;
    let grads = tape.backward(loss)?;
    let param_grads = tape.param_grads(&grads);

    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        if p.kind.trainable() {
            coords.extend((0..p.value.len()).map(|i| Coord::Param(id.index(), i)));
        }
    }
    for (k, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|i| Coord::Input(k, i)));
    }
    coords.shuffle(&mut rng);
    coords.truncate(opts.samples);

    let analytic = |c: Coord| -> f64 {
        match c {
            Coord::Param(p, i) => param_grads
                .iter()
                .find(|(id, _)| id.index() == p)
                .map_or(0.0, |(_, g)| g.data()[i]),
            Coord::Input(k, i) => grads.wrt(leaves[k]).map_or(0.0, |g| g.data()[i]),
        }
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
        pass: true,
    };
    for c in coords {
        let mut evals = [(0.0, 0u64); 2];
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut s = store.clone();
            let mut xs = inputs.to_vec();
            let delta = sign * opts.step;
            match c {
                Coord::Param(p, i) => {
                    let id = s.ids().nth(p).ok_or_else(|| Error::Graph("parameter vanished".into()))?;
                    s.value_mut(id).data_mut()[i] += delta;
                }
                Coord::Input(k, i) => xs[k].data_mut()[i] += delta,
            }
            let (t, _, _, l) = run(&s, &xs, Some(&probe))?;
            evals[slot] = (t.value(l).data()[0], t.prelu_signature());
        }
        if evals[0].1 != evals[1].1 {
            report.excluded += 1;
            continue;
        }
        let numeric = (evals[0].0 - evals[1].0) / (2.0 * opts.step);
        let a = analytic(c);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    report.pass = report.checked > 0 && report.max_rel_err < opts.tolerance;
    Ok(report)
}
