//! Gated Batch Normalization: N+1 BN branches, one per input domain, plus
//! a small gated sub-network that predicts the domain of a layer input.
//!
//! During training each labeled batch is routed through exactly one branch,
//! so branch statistics stay domain-specific. At inference the gate produces
//! per-sample confidences `g` and the block emits either the `g`-weighted
//! convex combination of branch outputs (soft), the top-1 branch (hard), or
//! a manually selected branch (forced).

use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::layers::{
    bn_eval, bn_train, conv_forward, dense_forward, BnBranchState, BnVars, ConvLayer, ConvVars,
    DenseLayer, DenseVars,
};
use crate::tape::{Tape, Tensor, Var};

/// Domain index: 0 = clean, 1..=N = perturbation types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainLabel(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    Soft,
    Hard,
    Forced(usize),
}

/// Gate over image-shaped inputs: 7x7 conv (stride 1, padding 3), ReLU,
/// 3x3 conv (stride 2, padding 1), ReLU, then a fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGate {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub fc: DenseLayer,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGate {
    pub fn init(
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        hidden_ch: usize,
        n_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = ConvLayer::init(hidden_ch, in_ch, 7, 1, 3, rng);
        let conv2 = ConvLayer::init(hidden_ch, hidden_ch, 3, 2, 1, rng);
        let oh = (in_h + 2 - 3) / 2 + 1;
        let ow = (in_w + 2 - 3) / 2 + 1;
        let fc = DenseLayer::init(hidden_ch * oh * ow, n_out, rng);
        ConvGate { conv1, conv2, fc, in_h, in_w }
    }
}

/// Gate over flattened features: FC(hidden), ReLU, FC(N+1).
#[derive(Debug, Clone, PartialEq)]
pub struct FcGate {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl FcGate {
    pub fn init(d_in: usize, hidden: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        FcGate {
            fc1: DenseLayer::init(d_in, hidden, rng),
            fc2: DenseLayer::init(hidden, n_out, rng),
        }
    }
}

/// The gated sub-network predicting a layer input's domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Conv(ConvGate),
    Fc(FcGate),
}

impl Gate {
    pub fn output_dim(&self) -> usize {
        match self {
            Gate::Conv(g) => g.fc.d_out(),
            Gate::Fc(g) => g.fc2.d_out(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum GateVars {
    Conv { conv1: ConvVars, conv2: ConvVars, fc: DenseVars },
    Fc { fc1: DenseVars, fc2: DenseVars },
}

impl GateVars {
    pub fn bind(tape: &mut Tape, gate: &Gate, requires_grad: bool) -> Self {
        match gate {
            Gate::Conv(g) => GateVars::Conv {
                conv1: ConvVars::bind(tape, &g.conv1, requires_grad),
                conv2: ConvVars::bind(tape, &g.conv2, requires_grad),
                fc: DenseVars::bind(tape, &g.fc, requires_grad),
            },
            Gate::Fc(g) => GateVars::Fc {
                fc1: DenseVars::bind(tape, &g.fc1, requires_grad),
                fc2: DenseVars::bind(tape, &g.fc2, requires_grad),
            },
        }
    }
}

/// Per-sample standardization of the gate input: each sample is shifted
/// and scaled to zero mean and unit variance over all of its elements.
/// Layer inputs arrive pre-normalization and their scale drifts freely
/// during training; without this the gate's logits track that scale and
/// its optimization diverges. Fully differentiable.
fn standardize_rows(tape: &mut Tape, x: Var) -> Result<Var, Error> {
    let sh = tape.shape(x).to_vec();
    let n = sh[0];
    let d: usize = sh[1..].iter().product();
    let flat = tape.reshape(x, vec![n, d])?;
    let avg_col = tape.leaf_owned(Tensor::new(vec![d, 1], vec![1.0 / d as f64; d]), false);
    let ones_row = tape.leaf_owned(Tensor::new(vec![1, d], vec![1.0; d]), false);
    let mean = tape.matmul(flat, avg_col)?;
    let mean_b = tape.matmul(mean, ones_row)?;
    let centered = tape.sub(flat, mean_b)?;
    let sq = tape.square(centered);
    let var = tape.matmul(sq, avg_col)?;
    let var_flat = tape.reshape(var, vec![n])?;
    let inv_std = tape.rsqrt_eps(var_flat, 1e-5);
    let out = tape.mul_rows(centered, inv_std)?;
    tape.reshape(out, sh)
}

/// Raw gate logits `[n, N+1]` for a layer input.
pub fn gate_logits(tape: &mut Tape, x: Var, gate: &Gate, vars: &GateVars) -> Result<Var, Error> {
    let x = standardize_rows(tape, x)?;
    match (gate, vars) {
        (Gate::Conv(g), GateVars::Conv { conv1, conv2, fc }) => {
            let h = conv_forward(tape, x, &g.conv1, conv1)?;
            let h = tape.relu(h);
            let h = conv_forward(tape, h, &g.conv2, conv2)?;
            let h = tape.relu(h);
            let sh = tape.shape(h).to_vec();
            let flat = tape.reshape(h, vec![sh[0], sh[1] * sh[2] * sh[3]])?;
            dense_forward(tape, flat, fc)
        }
        (Gate::Fc(_), GateVars::Fc { fc1, fc2 }) => {
            let sh = tape.shape(x).to_vec();
            let flat = tape.reshape(x, vec![sh[0], sh[1..].iter().product()])?;
            let h = dense_forward(tape, flat, fc1)?;
            let h = tape.relu(h);
            dense_forward(tape, h, fc2)
        }
        _ => Err(Error::usage("gate/vars kind mismatch")),
    }
}

/// Softmax confidences `g` per sample, rows on the probability simplex.
pub fn gate_predict(tape: &mut Tape, x: Var, gate: &Gate, vars: &GateVars) -> Result<Var, Error> {
    let logits = gate_logits(tape, x, gate, vars)?;
    tape.softmax_rows(logits)
}

/// One GBN block: branches, gate and the inference gating mode.
#[derive(Debug, Clone)]
pub struct GbnBlock {
    pub branches: Vec<BnBranchState>,
    pub gate: Gate,
    pub gating: GatingMode,
}

impl GbnBlock {
    pub fn new(branches: Vec<BnBranchState>, gate: Gate) -> Self {
        assert_eq!(branches.len(), gate.output_dim(), "branch count must match gate output");
        GbnBlock { branches, gate, gating: GatingMode::Soft }
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }
}

#[derive(Debug, Clone)]
pub struct GbnVars {
    pub branches: Vec<BnVars>,
    pub gate: GateVars,
}

impl GbnVars {
    pub fn bind(tape: &mut Tape, block: &GbnBlock, branch_grad: bool, gate_grad: bool) -> Self {
        GbnVars {
            branches: block
                .branches
                .iter()
                .map(|b| BnVars::bind(tape, b, branch_grad))
                .collect(),
            gate: GateVars::bind(tape, &block.gate, gate_grad),
        }
    }
}

/// Training routing: the batch goes through exactly the branch named by its
/// domain label; only that branch's statistics are updated and the gate is
/// not touched.
pub fn gbn_forward_train(
    tape: &mut Tape,
    x: Var,
    label: DomainLabel,
    block: &mut GbnBlock,
    vars: &GbnVars,
) -> Result<Var, Error> {
    let k = label.0;
    if k >= block.branches.len() {
        return Err(Error::BranchOutOfRange { index: k, count: block.branches.len() });
    }
    bn_train(tape, x, &mut block.branches[k], &vars.branches[k])
}

/// Inference through the block. Soft combines all branch outputs by the
/// gate confidences, hard picks the top-1 branch per sample, forced ignores
/// the gate. No state is mutated in any mode.
pub fn gbn_forward_infer(
    tape: &mut Tape,
    x: Var,
    block: &GbnBlock,
    vars: &GbnVars,
    mode: GatingMode,
    gate_logit_tap: Option<&mut Vec<Var>>,
) -> Result<Var, Error> {
    if let GatingMode::Forced(k) = mode {
        if k >= block.branches.len() {
            return Err(Error::BranchOutOfRange { index: k, count: block.branches.len() });
        }
        // forced mode bypasses the gate entirely
        if let Some(tap) = gate_logit_tap {
            let logits = gate_logits(tape, x, &block.gate, &vars.gate)?;
            tap.push(logits);
        }
        return bn_eval(tape, x, &block.branches[k]);
    }

    let logits = gate_logits(tape, x, &block.gate, &vars.gate)?;
    if let Some(tap) = gate_logit_tap {
        tap.push(logits);
    }
    let outs: Vec<Var> = block
        .branches
        .iter()
        .map(|b| bn_eval(tape, x, b))
        .collect::<Result<_, _>>()?;

    match mode {
        GatingMode::Soft => {
            let g = tape.softmax_rows(logits)?;
            let mut acc: Option<Var> = None;
            for (k, &bo) in outs.iter().enumerate() {
                let gk = tape.select_col(g, k)?;
                let term = tape.mul_rows(bo, gk)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.expect("at least one branch"))
        }
        GatingMode::Hard => {
            let ld = tape.data(logits);
            let n = tape.shape(logits)[0];
            let c = tape.shape(logits)[1];
            let picks: Vec<usize> = (0..n)
                .map(|i| {
                    let row = &ld[i * c..(i + 1) * c];
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            tape.gather_rows(&outs, &picks)
        }
        GatingMode::Forced(_) => unreachable!(),
    }
}
