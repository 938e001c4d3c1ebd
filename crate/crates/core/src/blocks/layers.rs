use crate::autograd::{ParamId, ParamKind, ParamStore, StatUpdate, Tape, VarId};
use crate::blocks::RfStep;
use crate::error::Result;
use crate::tensor::{BnMode, ConvSpec, Scalar, Shape};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

/// Convolution with an optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let weight = store.add_kaiming(format!("{name}.weight"), spec.weight_shape())?;
        let bias = if spec.has_bias {
            Some(store.add_vector(format!("{name}.bias"), ParamKind::Bias, spec.c_out, 0.0)?)
        } else {
            None
        };
        Ok(Conv { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, &self.spec)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.bias_add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (h, w) = self.spec.out_size(input.h, input.w)?;
        Ok(Shape::new(input.n, self.spec.c_out, h, w))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn rf_step(&self) -> RfStep {
        RfStep::Conv {
            kh: self.spec.kernel_h,
            kw: self.spec.kernel_w,
            dilation: self.spec.dilation,
            stride: self.spec.stride,
        }
    }
}

/// Transposed convolution with an optional bias; weights are `(c_in, c_out, kh, kw)`.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Deconv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let weight = store.add_kaiming(format!("{name}.weight"), spec.transposed_weight_shape())?;
        let bias = if spec.has_bias {
            Some(store.add_vector(format!("{name}.bias"), ParamKind::Bias, spec.c_out, 0.0)?)
        } else {
            None
        };
        Ok(Deconv { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.weight);
        let y = tape.conv_transpose2d(x, w, &self.spec)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.bias_add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (h, w) = self.spec.transposed_out_size(input.h, input.w)?;
        Ok(Shape::new(input.n, self.spec.c_out, h, w))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn rf_step(&self) -> RfStep {
        RfStep::Transposed {
            kernel: self.spec.kernel_h,
            stride: self.spec.stride,
        }
    }
}

/// Batch norm followed by PReLU.
#[derive(Clone, Debug)]
pub struct BnPrelu {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub slope: ParamId,
}

impl BnPrelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BnPrelu {
            channels,
            gamma: store.add_vector(format!("{name}.bn.gamma"), ParamKind::BnGamma, channels, 1.0)?,
            beta: store.add_vector(format!("{name}.bn.beta"), ParamKind::BnBeta, channels, 0.0)?,
            running_mean: store.add_vector(format!("{name}.bn.running_mean"), ParamKind::BnRunningMean, channels, 0.0)?,
            running_var: store.add_vector(format!("{name}.bn.running_var"), ParamKind::BnRunningVar, channels, 1.0)?,
            slope: store.add_vector(format!("{name}.prelu.slope"), ParamKind::PreluSlope, channels, PRELU_INIT)?,
        })
    }

    /// In train mode the running-statistics update is queued on the tape;
    /// apply it with [`ParamStore::apply_stat_updates`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId, mode: BnMode) -> Result<VarId> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let eps = T::cst(BN_EPS);
        let y = match mode {
            BnMode::Train => {
                let s = tape.shape(x);
                let (y, mean, var) = tape.batch_norm_train(x, g, b, eps)?;
                let m = (s.n * s.plane()) as f64;
                let unbias = T::cst(m / (m - 1.0));
                tape.push_stat_update(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var: var.into_iter().map(|v| v * unbias).collect(),
                    momentum: T::cst(BN_MOMENTUM),
                });
                y
            }
            BnMode::Infer => tape.batch_norm_infer(
                x,
                g,
                b,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                eps,
            )?,
        };
        let a = tape.param(store, self.slope);
        tape.prelu(y, a)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var, self.slope]
    }
}

/// Convolution, batch norm, PReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub act: BnPrelu,
}

impl ConvBnAct {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(ConvBnAct {
            conv: Conv::new(store, &format!("{name}.conv"), spec)?,
            act: BnPrelu::new(store, name, spec.c_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId, mode: BnMode) -> Result<VarId> {
        let y = self.conv.forward(tape, store, x)?;
        self.act.forward(tape, store, y, mode)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.conv.output_shape(input)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.extend(self.act.param_ids());
        ids
    }
}

/// Transposed conv `k=2, stride 2` followed by batch norm and PReLU.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub deconv: Deconv,
    pub act: BnPrelu,
}

impl Upsampler {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let spec = ConvSpec::new(c_in, c_out, 2, 2).with_stride(2);
        Ok(Upsampler {
            deconv: Deconv::new(store, &format!("{name}.deconv"), spec)?,
            act: BnPrelu::new(store, name, c_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: VarId, mode: BnMode) -> Result<VarId> {
        let y = self.deconv.forward(tape, store, x)?;
        self.act.forward(tape, store, y, mode)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.deconv.output_shape(input)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.deconv.param_ids();
        ids.extend(self.act.param_ids());
        ids
    }
}
