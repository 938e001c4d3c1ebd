//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and backward simply walks it in reverse.

use crate::autograd::params::{ParamId, ParamStore, StatUpdate};
use crate::error::{Error, Result};
use crate::tensor::conv::{scatter, transposed_conv2d_backward, weight_grad};
use crate::tensor::ops::{
    avg_pool2_backward, bilinear_backward, bn_infer, bn_infer_scale, bn_train_backward,
    bn_train_forward, channel_affine, prelu_backward, prelu_raw,
};
use crate::tensor::{self, ConvSpec, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d(ConvSpec),
    ConvTranspose2d(ConvSpec),
    BiasAdd,
    BnTrain { mean: Vec<T>, inv_std: Vec<T> },
    BnInfer { mean: Vec<T>, inv_std: Vec<T> },
    Prelu,
    Add,
    Concat,
    Bilinear(usize),
    AvgPool2,
    /// d(loss)/d(logits) computed during the forward pass.
    CrossEntropy { dlogits: Tensor<T> },
    DotConst(Tensor<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d(_) => "conv2d",
            Op::ConvTranspose2d(_) => "conv_transpose2d",
            Op::BiasAdd => "bias_add",
            Op::BnTrain { .. } => "batch_norm_train",
            Op::BnInfer { .. } => "batch_norm_infer",
            Op::Prelu => "prelu",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Bilinear(_) => "bilinear",
            Op::AvgPool2 => "avg_pool2",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::DotConst(_) => "dot_const",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<VarId>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that keeps the caches needed by [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            stat_updates: Vec::new(),
        }
    }

    /// Forward-only tape: backward caches are not kept and
    /// [`Tape::backward`] fails.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: VarId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn push_stat_update(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<VarId>, value: Tensor<T>) -> VarId {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient unless created with [`Tape::input_with_grad`].
    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Input, vec![], value)
    }

    /// Leaf whose gradient is tracked (e.g. for input-gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> VarId {
        let id = self.push(Op::Input, vec![], value);
        self.nodes[id.0].requires_grad = true;
        id
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> VarId {
        self.push(Op::Param(id), vec![], store.value(id).clone())
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, spec: &ConvSpec) -> Result<VarId> {
        let y = tensor::conv2d(self.value(x), self.value(w), spec)?;
        Ok(self.push(Op::Conv2d(*spec), vec![x, w], y))
    }

    pub fn conv_transpose2d(&mut self, x: VarId, w: VarId, spec: &ConvSpec) -> Result<VarId> {
        let y = tensor::transposed_conv2d(self.value(x), self.value(w), spec)?;
        Ok(self.push(Op::ConvTranspose2d(*spec), vec![x, w], y))
    }

    /// `b` has shape (1, c, 1, 1).
    pub fn bias_add(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let bias = self.value(b);
        check_channels("bias_add", self.shape(x).c, bias.len())?;
        let ones = vec![T::one(); bias.len()];
        let y = channel_affine(self.value(x), &ones, bias.data());
        Ok(self.push(Op::BiasAdd, vec![x, b], y))
    }

    /// Train-mode batch norm. Returns the output and the batch
    /// `(mean, biased variance)` so the caller can fold running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: T,
    ) -> Result<(VarId, Vec<T>, Vec<T>)> {
        check_channels("batch_norm", self.shape(x).c, self.value(gamma).len())?;
        check_channels("batch_norm", self.shape(x).c, self.value(beta).len())?;
        let (y, mean, inv_std, var) = bn_train_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let op = if self.recording {
            Op::BnTrain {
                mean: mean.clone(),
                inv_std,
            }
        } else {
            Op::BnTrain {
                mean: vec![],
                inv_std: vec![],
            }
        };
        Ok((self.push(op, vec![x, gamma, beta], y), mean, var))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<VarId> {
        let c = self.shape(x).c;
        for len in [self.value(gamma).len(), self.value(beta).len(), running_mean.len(), running_var.len()] {
            check_channels("batch_norm", c, len)?;
        }
        let y = bn_infer(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let ones = vec![T::one(); c];
        let inv_std = bn_infer_scale(&ones, running_var, eps);
        Ok(self.push(
            Op::BnInfer {
                mean: running_mean.to_vec(),
                inv_std,
            },
            vec![x, gamma, beta],
            y,
        ))
    }

    pub fn prelu(&mut self, x: VarId, slope: VarId) -> Result<VarId> {
        check_channels("prelu", self.shape(x).c, self.value(slope).len())?;
        let y = prelu_raw(self.value(x), self.value(slope).data());
        Ok(self.push(Op::Prelu, vec![x, slope], y))
    }

    pub fn add(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&i| self.value(i)).collect();
        let y = tensor::add(&vals)?;
        Ok(self.push(Op::Add, xs.to_vec(), y))
    }

    pub fn concat(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&i| self.value(i)).collect();
        let y = tensor::concat(&vals)?;
        Ok(self.push(Op::Concat, xs.to_vec(), y))
    }

    pub fn bilinear(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        let y = tensor::bilinear_upsample(self.value(x), factor)?;
        Ok(self.push(Op::Bilinear(factor), vec![x], y))
    }

    pub fn avg_pool2(&mut self, x: VarId) -> Result<VarId> {
        let y = tensor::avg_pool2(self.value(x))?;
        Ok(self.push(Op::AvgPool2, vec![x], y))
    }

    /// Scalar `<x, r>` for a constant `r`; handy as a probe loss.
    pub fn dot_const(&mut self, x: VarId, r: Tensor<T>) -> Result<VarId> {
        let v = self.value(x).dot(&r)?;
        Ok(self.push(Op::DotConst(r), vec![x], Tensor::scalar(v)))
    }

    /// Class-weighted softmax cross-entropy, averaged over non-ignored pixels.
    ///
    /// `targets` holds one label per pixel in `(n, h, w)` order. A tape with
    /// no valid pixel yields loss 0 and zero gradients.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: VarId,
        targets: &[u8],
        class_weights: &[T],
        ignore_index: u8,
    ) -> Result<VarId> {
        let (loss, dlogits) =
            crate::autograd::loss::cross_entropy_forward(self.value(logits), targets, class_weights, ignore_index)?;
        let dlogits = if self.recording {
            dlogits
        } else {
            Tensor::scalar(T::zero())
        };
        Ok(self.push(Op::CrossEntropy { dlogits }, vec![logits], Tensor::scalar(loss)))
    }

    /// Hash of the sign pattern of every PReLU input on the tape. Two
    /// evaluations with equal signatures lie in the same linear piece.
    pub fn prelu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Prelu = node.op {
                for &v in self.nodes[node.inputs[0].0].value.data() {
                    let code: u64 = if v < T::zero() {
                        1
                    } else if v > T::zero() {
                        2
                    } else {
                        3
                    };
                    h = (h ^ code).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Exact reverse-mode gradients of the scalar `loss` node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Graph(
                "tape was built without forward caches; use Tape::new() for training".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("loss node {} is not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let needs = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
            let put = |k: usize, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                let slot = &mut grads[node.inputs[k].0];
                match slot {
                    Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
                    None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(gy);
                }
                Op::Conv2d(spec) => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    if needs(0) {
                        let s = x.shape();
                        put(0, scatter(&gy, w, spec, s.h, s.w), &mut grads);
                    }
                    if needs(1) {
                        put(1, weight_grad(x, &gy, spec), &mut grads);
                    }
                }
                Op::ConvTranspose2d(spec) => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    let (gx, gw) = transposed_conv2d_backward(x, w, &gy, spec);
                    if needs(0) {
                        put(0, gx, &mut grads);
                    }
                    if needs(1) {
                        put(1, gw, &mut grads);
                    }
                }
                Op::BiasAdd => {
                    if needs(1) {
                        let gb = channel_sums(&gy);
                        put(1, vector(gb), &mut grads);
                    }
                    if needs(0) {
                        put(0, gy, &mut grads);
                    }
                }
                Op::BnTrain { mean, inv_std } => {
                    let x = self.value(node.inputs[0]);
                    let gamma = self.value(node.inputs[1]);
                    let (gx, gg, gb) = bn_train_backward(x, &gy, mean, inv_std, gamma.data());
                    if needs(1) {
                        put(1, vector(gg), &mut grads);
                    }
                    if needs(2) {
                        put(2, vector(gb), &mut grads);
                    }
                    if needs(0) {
                        put(0, gx, &mut grads);
                    }
                }
                Op::BnInfer { mean, inv_std } => {
                    let x = self.value(node.inputs[0]);
                    let gamma = self.value(node.inputs[1]).data();
                    let s = x.shape();
                    if needs(1) {
                        let mut gg = vec![T::zero(); s.c];
                        for n in 0..s.n {
                            for c in 0..s.c {
                                for (&g, &v) in gy.plane(n, c).iter().zip(x.plane(n, c)) {
                                    gg[c] += g * (v - mean[c]) * inv_std[c];
                                }
                            }
                        }
                        put(1, vector(gg), &mut grads);
                    }
                    if needs(2) {
                        put(2, vector(channel_sums(&gy)), &mut grads);
                    }
                    if needs(0) {
                        let scale: Vec<T> = gamma.iter().zip(inv_std).map(|(&g, &i)| g * i).collect();
                        let zero = vec![T::zero(); s.c];
                        put(0, channel_affine(&gy, &scale, &zero), &mut grads);
                    }
                }
                Op::Prelu => {
                    let x = self.value(node.inputs[0]);
                    let slope = self.value(node.inputs[1]);
                    let (gx, gs) = prelu_backward(x, &gy, slope.data());
                    if needs(1) {
                        put(1, vector(gs), &mut grads);
                    }
                    if needs(0) {
                        put(0, gx, &mut grads);
                    }
                }
                Op::Add => {
                    for k in 0..node.inputs.len() {
                        if needs(k) {
                            put(k, gy.clone(), &mut grads);
                        }
                    }
                }
                Op::Concat => {
                    let mut start = 0;
                    for k in 0..node.inputs.len() {
                        let c = self.shape(node.inputs[k]).c;
                        if needs(k) {
                            put(k, tensor::slice_channels(&gy, start, c)?, &mut grads);
                        }
                        start += c;
                    }
                }
                Op::Bilinear(factor) => {
                    if needs(0) {
                        let s = self.shape(node.inputs[0]);
                        put(0, bilinear_backward(&gy, s, *factor), &mut grads);
                    }
                }
                Op::AvgPool2 => {
                    if needs(0) {
                        let s = self.shape(node.inputs[0]);
                        put(0, avg_pool2_backward(&gy, s), &mut grads);
                    }
                }
                Op::CrossEntropy { dlogits } => {
                    if needs(0) {
                        put(0, dlogits.scale(gy.data()[0]), &mut grads);
                    }
                }
                Op::DotConst(r) => {
                    if needs(0) {
                        put(0, r.scale(gy.data()[0]), &mut grads);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Sum of leaf gradients per parameter (a parameter may be read twice).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads.grads.get(i).and_then(|g| g.as_ref()) {
                    match out.iter_mut().find(|(p, _)| *p == pid) {
                        Some((_, acc)) => acc.add_assign(g).expect("same parameter, same shape"),
                        None => out.push((pid, g.clone())),
                    }
                }
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn check_channels(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            dim: "channels",
            expected,
            actual,
        });
    }
    Ok(())
}

fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let s = t.shape();
    let mut out = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            *o += t.plane(n, c).iter().copied().sum::<T>();
        }
    }
    out
}

fn vector<T: Scalar>(v: Vec<T>) -> Tensor<T> {
    let c = v.len();
    Tensor::from_vec(Shape::new(1, c, 1, 1), v).expect("length matches")
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient accumulated at a leaf (inputs and parameters), if any.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
