//! Parameterised layers over the autodiff tape.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{LstmWeights, Var};
use crate::params::{Ctx, Init, ParamId};

pub const NORM_EPS: f64 = 1e-8;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Affine map over the last axis, `y = x·Wᵀ + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        init.scope(name, |i| Self {
            weight: i.xavier("weight", fan_out, fan_in),
            bias: bias.then(|| i.constant("bias", &[fan_out], 0.0)),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.linear(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }
}

/// Normalisation over all non-batch positions with a per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.constant("gamma", &[channels], 1.0),
            beta: i.constant("beta", &[channels], 0.0),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.group_norm(ctx.param(self.gamma), ctx.param(self.beta), NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new(init: &mut Init<'_>, name: &str) -> Self {
        Self { slope: init.scope(name, |i| i.constant("slope", &[1], 0.25)) }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.prelu(ctx.param(self.slope))
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmDirection {
    input: ParamId,
    recurrent: ParamId,
    bias: ParamId,
}

impl LstmDirection {
    fn new(init: &mut Init<'_>, name: &str, fan_in: usize, hidden: usize) -> Self {
        init.scope(name, |i| Self {
            input: i.xavier("w_ih", 4 * hidden, fan_in),
            recurrent: i.orthogonal_blocks("w_hh", 4 * hidden, hidden),
            bias: i.constant("bias", &[4 * hidden], 0.0),
        })
    }

    fn weights<'t>(&self, ctx: &Ctx<'t>) -> LstmWeights<'t> {
        LstmWeights {
            input: ctx.param(self.input),
            recurrent: ctx.param(self.recurrent),
            bias: ctx.param(self.bias),
        }
    }
}

/// Bidirectional LSTM, `[N, T, I]` to `[N, T, 2H]`.
#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    forward: LstmDirection,
    backward: LstmDirection,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, hidden: usize) -> Self {
        init.scope(name, |i| Self {
            forward: LstmDirection::new(i, "fwd", fan_in, hidden),
            backward: LstmDirection::new(i, "bwd", fan_in, hidden),
            hidden,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let f = x.lstm(self.forward.weights(ctx), false);
        let b = x.lstm(self.backward.weights(ctx), true);
        Var::concat_last(&[f, b])
    }
}

/// Per-channel batch normalisation with running statistics kept as buffers.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.constant("gamma", &[channels], 1.0),
            beta: i.constant("beta", &[channels], 0.0),
            running_mean: i.buffer("running_mean", &[channels], 0.0),
            running_var: i.buffer("running_var", &[channels], 1.0),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.is_training() {
            let (y, mean, var) = x.batch_norm(gamma, beta, None, BN_EPS);
            let store = ctx.store();
            let blend = |old: &ArrayD<f64>, new: &[f64]| {
                ArrayD::from_shape_fn(IxDyn(&[new.len()]), |i| (1.0 - BN_MOMENTUM) * old[i[0]] + BN_MOMENTUM * new[i[0]])
            };
            ctx.update_buffer(self.running_mean, blend(store.value(self.running_mean), &mean));
            ctx.update_buffer(self.running_var, blend(store.value(self.running_var), &var));
            y
        } else {
            let store = ctx.store();
            let mean = store.value(self.running_mean).as_slice().unwrap().to_vec();
            let var = store.value(self.running_var).as_slice().unwrap().to_vec();
            x.batch_norm(gamma, beta, Some((&mean, &var)), BN_EPS).0
        }
    }
}

/// Depthwise temporal convolution with odd kernel size and replicated edges.
#[derive(Debug, Clone, Copy)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, kernel: usize) -> Self {
        init.scope(name, |i| Self {
            kernel: i.fan_in_uniform("kernel", &[channels, kernel], kernel),
            bias: i.constant("bias", &[channels], 0.0),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.depthwise_conv(ctx.param(self.kernel), ctx.param(self.bias))
    }
}
