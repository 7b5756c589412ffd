//! Trainable layers: dense, convolution and batch normalization with
//! separate train/eval behavior and exponential running statistics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Train,
    Eval,
}

/// One complete batch-normalization state: learnable per-channel affine
/// parameters plus exponential running averages of batch statistics.
///
/// The running update is
/// `mu_hat <- (1 - alpha) * mu_hat + alpha * mu` and likewise for the
/// variance, using the biased (divide-by-m) batch variance everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBranchState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub xi: f64,
    pub alpha: f64,
    pub num_batches_seen: u64,
}

pub const DEFAULT_XI: f64 = 1e-5;
pub const DEFAULT_ALPHA: f64 = 0.1;

impl BnBranchState {
    pub fn new(channels: usize, xi: f64, alpha: f64) -> Self {
        assert!(xi > 0.0 && alpha > 0.0 && alpha <= 1.0);
        BnBranchState {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            xi,
            alpha,
            num_batches_seen: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Fold one batch's statistics into the running averages.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let a = self.alpha;
        for (m, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *m = (1.0 - a) * *m + a * b;
        }
        for (v, &b) in self.running_var.iter_mut().zip(batch_var) {
            *v = (1.0 - a) * *v + a * b;
        }
        self.num_batches_seen += 1;
    }
}

/// Tape handles for the learnable affine parameters of one BN branch.
#[derive(Debug, Clone, Copy)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

impl BnVars {
    pub fn bind(tape: &mut Tape, state: &BnBranchState, requires_grad: bool) -> Self {
        BnVars {
            gamma: tape.leaf(&state.gamma, requires_grad),
            beta: tape.leaf(&state.beta, requires_grad),
        }
    }
}

fn check_channels(tape: &Tape, x: Var, state: &BnBranchState) -> Result<(), Error> {
    let sh = tape.shape(x);
    if sh.len() < 2 || sh[1] != state.channels() {
        return Err(Error::DimMismatch {
            op: "bn_forward",
            left: sh.to_vec(),
            right: vec![state.channels()],
        });
    }
    Ok(())
}

/// Train-mode batch normalization: standardize by the biased batch
/// statistics (differentiable through them), apply the affine parameters,
/// and fold the batch statistics into the running averages.
pub fn bn_train(
    tape: &mut Tape,
    x: Var,
    state: &mut BnBranchState,
    vars: &BnVars,
) -> Result<Var, Error> {
    check_channels(tape, x, state)?;
    let n = tape.shape(x)[0];
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    let mean = tape.channel_mean(x)?;
    let centered = tape.sub_channel(x, mean)?;
    let sq = tape.square(centered);
    let var = tape.channel_mean(sq)?;
    let inv_std = tape.rsqrt_eps(var, state.xi);
    let xhat = tape.mul_channel(centered, inv_std)?;
    let scaled = tape.mul_channel(xhat, vars.gamma)?;
    let out = tape.channel_bias_add(scaled, vars.beta)?;

    let batch_mean = tape.data(mean).to_vec();
    let batch_var = tape.data(var).to_vec();
    state.update_running(&batch_mean, &batch_var);
    Ok(out)
}

/// Eval-mode batch normalization: a fixed per-channel affine map built
/// from the running statistics. Never mutates the state.
pub fn bn_eval(tape: &mut Tape, x: Var, state: &BnBranchState) -> Result<Var, Error> {
    check_channels(tape, x, state)?;
    let c = state.channels();
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for j in 0..c {
        let a = state.gamma.data()[j] / (state.running_var[j] + state.xi).sqrt();
        scale[j] = a;
        shift[j] = state.beta.data()[j] - a * state.running_mean[j];
    }
    let s = tape.leaf_owned(Tensor::new(vec![c], scale), false);
    let b = tape.leaf_owned(Tensor::new(vec![c], shift), false);
    let scaled = tape.mul_channel(x, s)?;
    tape.channel_bias_add(scaled, b)
}

/// Standalone BN entry point dispatching on mode; affine parameters are
/// taken from the state and not trained through this call.
pub fn bn_forward(
    tape: &mut Tape,
    x: Var,
    state: &mut BnBranchState,
    mode: LayerMode,
) -> Result<Var, Error> {
    match mode {
        LayerMode::Train => {
            let vars = BnVars::bind(tape, state, false);
            bn_train(tape, x, state, &vars)
        }
        LayerMode::Eval => bn_eval(tape, x, state),
    }
}

/// Fully connected layer, `x[n,d_in] . w[d_in,d_out] + b[d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let data: Vec<f64> = (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound)).collect();
        DenseLayer {
            w: Tensor::new(vec![d_in, d_out], data),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl DenseVars {
    pub fn bind(tape: &mut Tape, layer: &DenseLayer, requires_grad: bool) -> Self {
        DenseVars {
            w: tape.leaf(&layer.w, requires_grad),
            b: tape.leaf(&layer.b, requires_grad),
        }
    }
}

pub fn dense_forward(tape: &mut Tape, x: Var, vars: &DenseVars) -> Result<Var, Error> {
    let prod = tape.matmul(x, vars.w)?;
    tape.dense_bias_add(prod, vars.b)
}

/// 2-d convolution layer with per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn init(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> =
            (0..out_ch * in_ch * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        ConvLayer {
            kernel: Tensor::new(vec![out_ch, in_ch, k, k], data),
            bias: Tensor::zeros(vec![out_ch]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

impl ConvVars {
    pub fn bind(tape: &mut Tape, layer: &ConvLayer, requires_grad: bool) -> Self {
        ConvVars {
            kernel: tape.leaf(&layer.kernel, requires_grad),
            bias: tape.leaf(&layer.bias, requires_grad),
        }
    }
}

pub fn conv_forward(
    tape: &mut Tape,
    x: Var,
    layer: &ConvLayer,
    vars: &ConvVars,
) -> Result<Var, Error> {
    let out = tape.conv2d(x, vars.kernel, layer.stride, layer.padding)?;
    tape.channel_bias_add(out, vars.bias)
}

/// SGD update `p <- p - lr * (grad + weight_decay * p)` applied to every
/// bound parameter that received a gradient.
pub fn sgd_update(tape: &Tape, pairs: &mut [(&mut Tensor, Var)], lr: f64, weight_decay: f64) {
    for (param, var) in pairs.iter_mut() {
        if let Some(grad) = tape.grad(*var) {
            let data = param.data_mut();
            for (p, &g) in data.iter_mut().zip(grad) {
                *p -= lr * (g + weight_decay * *p);
            }
        }
    }
}
