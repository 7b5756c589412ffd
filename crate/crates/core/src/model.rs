//! LeNet-style convolutional classifier with a pluggable normalization
//! slot after each convolution: none, plain BN, multi-branch BN (no gate),
//! or a full GBN block.
//!
//! Training keeps two disjoint parameter sets: the gate parameters (theta),
//! updated only by the domain prediction loss, and everything else (Theta),
//! updated only by the classification loss. Gate inputs are detached copies
//! of the pre-normalization activations, so neither loss leaks gradient
//! into the other set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gbn::{
    gate_logits, gbn_forward_infer, gbn_forward_train, ConvGate, DomainLabel, FcGate, Gate,
    GatingMode, GbnBlock, GbnVars,
};
use crate::layers::{
    bn_eval, bn_train, conv_forward, dense_forward, BnBranchState, BnVars, ConvLayer, ConvVars,
    DenseLayer, DenseVars,
};
use crate::tape::{Tape, Tensor, Var};

/// Which normalization the two norm slots carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormKind {
    None,
    Bn,
    MultiBn { branches: usize },
    Gbn { branches: usize, conv_gate_hidden: usize, fc_gate_hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeNetConfig {
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub fc_hidden: usize,
    pub norm: NormKind,
    pub xi: f64,
    pub alpha: f64,
}

impl Default for LeNetConfig {
    fn default() -> Self {
        LeNetConfig {
            conv1_out: 6,
            conv2_out: 16,
            fc_hidden: 120,
            norm: NormKind::Bn,
            xi: crate::layers::DEFAULT_XI,
            alpha: crate::layers::DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone)]
pub enum NormSlot {
    None,
    Bn(BnBranchState),
    MultiBn(Vec<BnBranchState>),
    Gbn(GbnBlock),
}

impl NormSlot {
    pub fn branch_count(&self) -> usize {
        match self {
            NormSlot::None => 0,
            NormSlot::Bn(_) => 1,
            NormSlot::MultiBn(b) => b.len(),
            NormSlot::Gbn(b) => b.n_branches(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum NormVars {
    None,
    Bn(BnVars),
    MultiBn(Vec<BnVars>),
    Gbn(GbnVars),
}

/// The classifier: conv-norm-relu-pool twice, then two dense layers.
#[derive(Debug, Clone)]
pub struct LeNet {
    pub cfg: LeNetConfig,
    pub conv1: ConvLayer,
    pub norm1: NormSlot,
    pub conv2: ConvLayer,
    pub norm2: NormSlot,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

/// Tape handles for every parameter of one forward pass.
pub struct LeNetVars {
    pub conv1: ConvVars,
    pub norm1: NormVars,
    pub conv2: ConvVars,
    pub norm2: NormVars,
    pub fc1: DenseVars,
    pub fc2: DenseVars,
}

/// Side outputs a forward pass can collect.
#[derive(Default)]
pub struct Taps {
    /// Detached pre-normalization activations, one per norm site.
    pub pre_norm: Option<Vec<Tensor>>,
    /// Gate logit nodes, one per GBN site (eval only).
    pub gate_logits: Option<Vec<Var>>,
}

fn make_slot(kind: &NormKind, channels: usize, site: usize, in_hw: (usize, usize), xi: f64, alpha: f64, rng: &mut ChaCha8Rng) -> NormSlot {
    match kind {
        NormKind::None => NormSlot::None,
        NormKind::Bn => NormSlot::Bn(BnBranchState::new(channels, xi, alpha)),
        NormKind::MultiBn { branches } => NormSlot::MultiBn(
            (0..*branches).map(|_| BnBranchState::new(channels, xi, alpha)).collect(),
        ),
        NormKind::Gbn { branches, conv_gate_hidden, fc_gate_hidden } => {
            let states = (0..*branches).map(|_| BnBranchState::new(channels, xi, alpha)).collect();
            // first GBN site carries a conv gate, later sites fc gates
            let gate = if site == 0 {
                Gate::Conv(ConvGate::init(channels, in_hw.0, in_hw.1, *conv_gate_hidden, *branches, rng))
            } else {
                Gate::Fc(FcGate::init(channels * in_hw.0 * in_hw.1, *fc_gate_hidden, *branches, rng))
            };
            NormSlot::Gbn(GbnBlock::new(states, gate))
        }
    }
}

impl LeNet {
    pub fn init(cfg: LeNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = ConvLayer::init(cfg.conv1_out, 1, 5, 1, 0, &mut rng);
        let conv2 = ConvLayer::init(cfg.conv2_out, cfg.conv1_out, 5, 1, 0, &mut rng);
        let fc1 = DenseLayer::init(cfg.conv2_out * 4 * 4, cfg.fc_hidden, &mut rng);
        let fc2 = DenseLayer::init(cfg.fc_hidden, 10, &mut rng);
        let norm1 = make_slot(&cfg.norm, cfg.conv1_out, 0, (24, 24), cfg.xi, cfg.alpha, &mut rng);
        let norm2 = make_slot(&cfg.norm, cfg.conv2_out, 1, (8, 8), cfg.xi, cfg.alpha, &mut rng);
        LeNet { cfg, conv1, norm1, conv2, norm2, fc1, fc2 }
    }

    pub fn norm_slots(&self) -> [&NormSlot; 2] {
        [&self.norm1, &self.norm2]
    }

    pub fn gbn_blocks(&self) -> Vec<&GbnBlock> {
        self.norm_slots()
            .into_iter()
            .filter_map(|s| match s {
                NormSlot::Gbn(b) => Some(b),
                _ => None,
            })
            .collect()
    }

    pub fn has_gbn(&self) -> bool {
        !self.gbn_blocks().is_empty()
    }

    /// Set the inference gating mode on every GBN block.
    pub fn set_gating(&mut self, mode: GatingMode) {
        for slot in [&mut self.norm1, &mut self.norm2] {
            if let NormSlot::Gbn(b) = slot {
                b.gating = mode;
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, backbone_grad: bool, gate_grad: bool) -> LeNetVars {
        let bind_slot = |tape: &mut Tape, slot: &NormSlot| match slot {
            NormSlot::None => NormVars::None,
            NormSlot::Bn(s) => NormVars::Bn(BnVars::bind(tape, s, backbone_grad)),
            NormSlot::MultiBn(ss) => {
                NormVars::MultiBn(ss.iter().map(|s| BnVars::bind(tape, s, backbone_grad)).collect())
            }
            NormSlot::Gbn(b) => NormVars::Gbn(GbnVars::bind(tape, b, backbone_grad, gate_grad)),
        };
        LeNetVars {
            conv1: ConvVars::bind(tape, &self.conv1, backbone_grad),
            norm1: bind_slot(tape, &self.norm1),
            conv2: ConvVars::bind(tape, &self.conv2, backbone_grad),
            norm2: bind_slot(tape, &self.norm2),
            fc1: DenseVars::bind(tape, &self.fc1, backbone_grad),
            fc2: DenseVars::bind(tape, &self.fc2, backbone_grad),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(), Error> {
        let sh = tape.shape(x);
        if sh.len() != 4 || sh[1] != 1 || sh[2] != 28 || sh[3] != 28 {
            return Err(Error::DimMismatch {
                op: "lenet_forward",
                left: sh.to_vec(),
                right: vec![0, 1, 28, 28],
            });
        }
        Ok(())
    }

    /// Train-mode forward: batch statistics, routed norm branches, running
    /// statistic updates. Returns the logits.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: Var,
        vars: &LeNetVars,
        domain: DomainLabel,
        taps: &mut Taps,
    ) -> Result<Var, Error> {
        self.check_input(tape, x)?;
        let mut h = conv_forward(tape, x, &self.conv1, &vars.conv1)?;
        h = Self::norm_train(tape, h, &mut self.norm1, &vars.norm1, domain, taps)?;
        h = tape.relu(h);
        h = tape.maxpool2(h)?;
        h = conv_forward(tape, h, &self.conv2, &vars.conv2)?;
        h = Self::norm_train(tape, h, &mut self.norm2, &vars.norm2, domain, taps)?;
        h = tape.relu(h);
        h = tape.maxpool2(h)?;
        let sh = tape.shape(h).to_vec();
        h = tape.reshape(h, vec![sh[0], sh[1] * sh[2] * sh[3]])?;
        h = dense_forward(tape, h, &vars.fc1)?;
        h = tape.relu(h);
        dense_forward(tape, h, &vars.fc2)
    }

    fn norm_train(
        tape: &mut Tape,
        x: Var,
        slot: &mut NormSlot,
        vars: &NormVars,
        domain: DomainLabel,
        taps: &mut Taps,
    ) -> Result<Var, Error> {
        if let Some(acts) = taps.pre_norm.as_mut() {
            acts.push(tape.value(x));
        }
        match (slot, vars) {
            (NormSlot::None, _) => Ok(x),
            (NormSlot::Bn(s), NormVars::Bn(v)) => bn_train(tape, x, s, v),
            (NormSlot::MultiBn(ss), NormVars::MultiBn(vs)) => {
                let k = domain.0;
                if k >= ss.len() {
                    return Err(Error::BranchOutOfRange { index: k, count: ss.len() });
                }
                bn_train(tape, x, &mut ss[k], &vs[k])
            }
            (NormSlot::Gbn(b), NormVars::Gbn(v)) => gbn_forward_train(tape, x, domain, b, v),
            _ => Err(Error::usage("norm slot/vars mismatch")),
        }
    }

    /// Eval-mode forward: running statistics only, gated normalization for
    /// GBN slots. Never mutates state. `gating` overrides each block's own
    /// mode when given; multi-branch BN without a gate requires a
    /// `Forced(k)` override.
    pub fn forward_eval(
        &self,
        tape: &mut Tape,
        x: Var,
        vars: &LeNetVars,
        gating: Option<GatingMode>,
        taps: &mut Taps,
    ) -> Result<Var, Error> {
        self.check_input(tape, x)?;
        let mut h = conv_forward(tape, x, &self.conv1, &vars.conv1)?;
        h = Self::norm_eval(tape, h, &self.norm1, &vars.norm1, gating, taps)?;
        h = tape.relu(h);
        h = tape.maxpool2(h)?;
        h = conv_forward(tape, h, &self.conv2, &vars.conv2)?;
        h = Self::norm_eval(tape, h, &self.norm2, &vars.norm2, gating, taps)?;
        h = tape.relu(h);
        h = tape.maxpool2(h)?;
        let sh = tape.shape(h).to_vec();
        h = tape.reshape(h, vec![sh[0], sh[1] * sh[2] * sh[3]])?;
        h = dense_forward(tape, h, &vars.fc1)?;
        h = tape.relu(h);
        dense_forward(tape, h, &vars.fc2)
    }

    fn norm_eval(
        tape: &mut Tape,
        x: Var,
        slot: &NormSlot,
        vars: &NormVars,
        gating: Option<GatingMode>,
        taps: &mut Taps,
    ) -> Result<Var, Error> {
        if let Some(acts) = taps.pre_norm.as_mut() {
            acts.push(tape.value(x));
        }
        match (slot, vars) {
            (NormSlot::None, _) => Ok(x),
            (NormSlot::Bn(s), NormVars::Bn(_)) => bn_eval(tape, x, s),
            (NormSlot::MultiBn(ss), NormVars::MultiBn(_)) => match gating {
                Some(GatingMode::Forced(k)) => {
                    if k >= ss.len() {
                        return Err(Error::BranchOutOfRange { index: k, count: ss.len() });
                    }
                    bn_eval(tape, x, &ss[k])
                }
                _ => Err(Error::usage(
                    "multi-branch BN without a gate needs forced branch selection at eval",
                )),
            },
            (NormSlot::Gbn(b), NormVars::Gbn(v)) => {
                let mode = gating.unwrap_or(b.gating);
                gbn_forward_infer(tape, x, b, v, mode, taps.gate_logits.as_mut())
            }
            _ => Err(Error::usage("norm slot/vars mismatch")),
        }
    }

    /// Apply `p <- p - lr * (grad + wd * p)` to every parameter whose bound
    /// leaf received a gradient on this tape.
    pub fn sgd_step(&mut self, tape: &Tape, vars: &LeNetVars, lr: f64, wd: f64) {
        let step = |t: &mut Tensor, v: Var| {
            if let Some(grad) = tape.grad(v) {
                for (p, &g) in t.data_mut().iter_mut().zip(grad) {
                    *p -= lr * (g + wd * *p);
                }
            }
        };
        step(&mut self.conv1.kernel, vars.conv1.kernel);
        step(&mut self.conv1.bias, vars.conv1.bias);
        step(&mut self.conv2.kernel, vars.conv2.kernel);
        step(&mut self.conv2.bias, vars.conv2.bias);
        step(&mut self.fc1.w, vars.fc1.w);
        step(&mut self.fc1.b, vars.fc1.b);
        step(&mut self.fc2.w, vars.fc2.w);
        step(&mut self.fc2.b, vars.fc2.b);
        for (slot, nv) in [(&mut self.norm1, &vars.norm1), (&mut self.norm2, &vars.norm2)] {
            match (slot, nv) {
                (NormSlot::Bn(s), NormVars::Bn(v)) => {
                    step(&mut s.gamma, v.gamma);
                    step(&mut s.beta, v.beta);
                }
                (NormSlot::MultiBn(ss), NormVars::MultiBn(vs)) => {
                    for (s, v) in ss.iter_mut().zip(vs) {
                        step(&mut s.gamma, v.gamma);
                        step(&mut s.beta, v.beta);
                    }
                }
                (NormSlot::Gbn(b), NormVars::Gbn(v)) => {
                    for (s, bv) in b.branches.iter_mut().zip(&v.branches) {
                        step(&mut s.gamma, bv.gamma);
                        step(&mut s.beta, bv.beta);
                    }
                    match (&mut b.gate, &v.gate) {
                        (Gate::Conv(g), crate::gbn::GateVars::Conv { conv1, conv2, fc }) => {
                            step(&mut g.conv1.kernel, conv1.kernel);
                            step(&mut g.conv1.bias, conv1.bias);
                            step(&mut g.conv2.kernel, conv2.kernel);
                            step(&mut g.conv2.bias, conv2.bias);
                            step(&mut g.fc.w, fc.w);
                            step(&mut g.fc.b, fc.b);
                        }
                        (Gate::Fc(g), crate::gbn::GateVars::Fc { fc1, fc2 }) => {
                            step(&mut g.fc1.w, fc1.w);
                            step(&mut g.fc1.b, fc1.b);
                            step(&mut g.fc2.w, fc2.w);
                            step(&mut g.fc2.b, fc2.b);
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
    }
}

/// Classification loss over domain-labeled batches: each batch is routed
/// through its own BN branch in train mode and the per-batch mean cross
/// entropies are summed over domains. Gradient reaches only non-gate
/// parameters; gates never run on this path.
pub fn classification_loss(
    tape: &mut Tape,
    model: &mut LeNet,
    vars: &LeNetVars,
    batches: &[(Tensor, Vec<usize>, DomainLabel)],
    mut taps_out: Option<&mut Vec<(Vec<Tensor>, usize)>>,
) -> Result<Var, Error> {
    if batches.is_empty() {
        return Err(Error::usage("classification_loss: no batches"));
    }
    let mut total: Option<Var> = None;
    for (x, labels, domain) in batches {
        let xv = tape.leaf(x, false);
        let mut taps = Taps::default();
        if taps_out.is_some() {
            taps.pre_norm = Some(Vec::new());
        }
        let logits = model.forward_train(tape, xv, vars, *domain, &mut taps)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        if let Some(out) = taps_out.as_mut() {
            out.push((taps.pre_norm.take().unwrap(), domain.0));
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    Ok(total.expect("non-empty batches"))
}

/// Domain prediction loss: every gate classifies detached pre-normalization
/// activations against the true domain label; per-batch mean cross
/// entropies are summed over gates and domains. Gradient reaches only gate
/// parameters.
pub fn domain_prediction_loss(
    tape: &mut Tape,
    model: &LeNet,
    vars: &LeNetVars,
    taps: &[(Vec<Tensor>, usize)],
) -> Result<Var, Error> {
    if taps.is_empty() {
        return Err(Error::usage("domain_prediction_loss: no batches"));
    }
    let sites: Vec<(usize, &GbnBlock, &GbnVars)> = [(&model.norm1, &vars.norm1), (&model.norm2, &vars.norm2)]
        .into_iter()
        .enumerate()
        .filter_map(|(i, (slot, nv))| match (slot, nv) {
            (NormSlot::Gbn(b), NormVars::Gbn(v)) => Some((i, b, v)),
            _ => None,
        })
        .collect();
    if sites.is_empty() {
        return Err(Error::usage("domain_prediction_loss: model has no gates"));
    }
    let mut total: Option<Var> = None;
    for (acts, domain) in taps {
        for (site_idx, block, gvars) in &sites {
            // taps carry one activation per norm site, in site order
            let act = &acts[*site_idx];
            let n = act.shape()[0];
            let xv = tape.leaf(act, false);
            let logits = gate_logits(tape, xv, &block.gate, &gvars.gate)?;
            let loss = tape.softmax_cross_entropy(logits, &vec![*domain; n])?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
    }
    Ok(total.expect("non-empty taps"))
}
