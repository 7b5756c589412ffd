//! The finite-difference battery shared by the gradcheck target and the
//! acceptance suite: every differentiable building block across many seeds.
#![allow(dead_code)]

use super::{gradcheck, rand_labels, rand_tensor, rng};

use gbn_core::gbn::{
    gate_logits, gbn_forward_infer, ConvGate, DomainLabel, FcGate, Gate, GateVars, GatingMode,
    GbnBlock, GbnVars,
};
use gbn_core::layers::{bn_eval, bn_train, BnBranchState, BnVars, DEFAULT_ALPHA, DEFAULT_XI};
use gbn_core::model::{
    classification_loss, domain_prediction_loss, LeNet, LeNetConfig, NormKind, NormSlot, NormVars,
};
use gbn_core::tape::{Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

/// Split a flat parameter vector into tensors of the given shapes.
fn unflatten(params: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for sh in shapes {
        let n: usize = sh.iter().product();
        out.push(Tensor::new(sh.clone(), params[off..off + n].to_vec()));
        off += n;
    }
    assert_eq!(off, params.len());
    out
}

fn collect_grads(tape: &Tape, vars: &[Var], total: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(total);
    for &v in vars {
        match tape.grad(v) {
            Some(gv) => g.extend_from_slice(gv),
            None => g.extend(std::iter::repeat(0.0).take(tape.data(v).len())),
        }
    }
    g
}

pub fn dense_layer_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x0 = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let w0 = rand_tensor(&mut r, vec![4, 5], -1.0, 1.0);
        let b0 = rand_tensor(&mut r, vec![5], -0.5, 0.5);
        let labels = rand_labels(&mut r, 3, 5);
        let shapes = vec![vec![3, 4], vec![4, 5], vec![5]];
        let params: Vec<f64> = [x0.data(), w0.data(), b0.data()].concat();

        gradcheck(&params, TOL, &mut |p, want_grad| {
            let ts = unflatten(p, &shapes);
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t, want_grad)).collect();
            let h = tape.matmul(vars[0], vars[1]).unwrap();
            let h = tape.dense_bias_add(h, vars[2]).unwrap();
            let h = tape.relu(h);
            let loss = tape.softmax_cross_entropy(h, &labels).unwrap();
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                collect_grads(&tape, &vars, p.len())
            });
            (value, grads)
        });
    }
}

fn conv_case(seed: u64, stride: usize, padding: usize) {
    let mut r = rng(seed);
    let x0 = rand_tensor(&mut r, vec![2, 2, 6, 6], -1.0, 1.0);
    let k0 = rand_tensor(&mut r, vec![3, 2, 3, 3], -1.0, 1.0);
    let shapes = vec![vec![2, 2, 6, 6], vec![3, 2, 3, 3]];
    let params: Vec<f64> = [x0.data(), k0.data()].concat();

    gradcheck(&params, TOL, &mut |p, want_grad| {
        let ts = unflatten(p, &shapes);
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t, want_grad)).collect();
        let h = tape.conv2d(vars[0], vars[1], stride, padding).unwrap();
        let h = tape.square(h);
        let loss = tape.mean_all(h);
        let value = tape.data(loss)[0];
        let grads = want_grad.then(|| {
            tape.backward(loss).unwrap();
            collect_grads(&tape, &vars, p.len())
        });
        (value, grads)
    });
}

pub fn conv_gradients_stride1_nopad() {
    for seed in 0..SEEDS {
        conv_case(seed, 1, 0);
    }
}

pub fn conv_gradients_stride2_pad1() {
    for seed in 0..SEEDS {
        conv_case(100 + seed, 2, 1);
    }
}

pub fn relu_maxpool_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(200 + seed);
        let x0 = rand_tensor(&mut r, vec![2, 1, 6, 6], -1.0, 1.0);
        let params = x0.data().to_vec();
        gradcheck(&params, TOL, &mut |p, want_grad| {
            let t = Tensor::new(vec![2, 1, 6, 6], p.to_vec());
            let mut tape = Tape::new();
            let xv = tape.leaf(&t, want_grad);
            let h = tape.relu(xv);
            let h = tape.maxpool2(h).unwrap();
            let h = tape.square(h);
            let loss = tape.sum_all(h);
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                collect_grads(&tape, &[xv], p.len())
            });
            (value, grads)
        });
    }
}

pub fn bn_train_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        let x0 = rand_tensor(&mut r, vec![4, 3, 2, 2], -1.0, 1.0);
        let g0 = rand_tensor(&mut r, vec![3], 0.5, 1.5);
        let b0 = rand_tensor(&mut r, vec![3], -0.5, 0.5);
        let shapes = vec![vec![4, 3, 2, 2], vec![3], vec![3]];
        let params: Vec<f64> = [x0.data(), g0.data(), b0.data()].concat();

        gradcheck(&params, TOL, &mut |p, want_grad| {
            let ts = unflatten(p, &shapes);
            let mut tape = Tape::new();
            let xv = tape.leaf(&ts[0], want_grad);
            let gv = tape.leaf(&ts[1], want_grad);
            let bv = tape.leaf(&ts[2], want_grad);
            let mut state = BnBranchState::new(3, DEFAULT_XI, DEFAULT_ALPHA);
            let vars = BnVars { gamma: gv, beta: bv };
            let h = bn_train(&mut tape, xv, &mut state, &vars).unwrap();
            let h = tape.square(h);
            let loss = tape.sum_all(h);
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                collect_grads(&tape, &[xv, gv, bv], p.len())
            });
            (value, grads)
        });
    }
}

pub fn bn_eval_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        let x0 = rand_tensor(&mut r, vec![3, 2, 2, 2], -1.0, 1.0);
        let mut state = BnBranchState::new(2, DEFAULT_XI, DEFAULT_ALPHA);
        state.running_mean = vec![0.3, -0.2];
        state.running_var = vec![0.8, 1.4];
        state.gamma = rand_tensor(&mut r, vec![2], 0.5, 1.5);
        state.beta = rand_tensor(&mut r, vec![2], -0.5, 0.5);
        let params = x0.data().to_vec();

        gradcheck(&params, TOL, &mut |p, want_grad| {
            let t = Tensor::new(vec![3, 2, 2, 2], p.to_vec());
            let mut tape = Tape::new();
            let xv = tape.leaf(&t, want_grad);
            let h = bn_eval(&mut tape, xv, &state).unwrap();
            let h = tape.square(h);
            let loss = tape.sum_all(h);
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                collect_grads(&tape, &[xv], p.len())
            });
            (value, grads)
        });
    }
}

/// A two-branch block over flat features with an fc gate and distinct
/// running statistics per branch.
fn feature_block(seed: u64) -> GbnBlock {
    let mut r = rng(7000 + seed);
    let mut branches = Vec::new();
    for _ in 0..2 {
        let mut s = BnBranchState::new(3, DEFAULT_XI, DEFAULT_ALPHA);
        s.running_mean = rand_tensor(&mut r, vec![3], -0.5, 0.5).data().to_vec();
        s.running_var = rand_tensor(&mut r, vec![3], 0.5, 1.5).data().to_vec();
        s.gamma = rand_tensor(&mut r, vec![3], 0.5, 1.5);
        s.beta = rand_tensor(&mut r, vec![3], -0.5, 0.5);
        branches.push(s);
    }
    let gate = Gate::Fc(FcGate::init(3, 4, 2, &mut r));
    GbnBlock::new(branches, gate)
}

fn gbn_infer_case(seed: u64, mode: GatingMode) {
    let mut r = rng(500 + seed);
    let x0 = rand_tensor(&mut r, vec![4, 3], -1.0, 1.0);
    let block = feature_block(seed);
    let params = x0.data().to_vec();

    gradcheck(&params, TOL, &mut |p, want_grad| {
        let t = Tensor::new(vec![4, 3], p.to_vec());
        let mut tape = Tape::new();
        let xv = tape.leaf(&t, want_grad);
        let vars = GbnVars::bind(&mut tape, &block, false, false);
        let h = gbn_forward_infer(&mut tape, xv, &block, &vars, mode, None).unwrap();
        let h = tape.square(h);
        let loss = tape.sum_all(h);
        let value = tape.data(loss)[0];
        let grads = want_grad.then(|| {
            tape.backward(loss).unwrap();
            collect_grads(&tape, &[xv], p.len())
        });
        (value, grads)
    });
}

pub fn gbn_soft_input_gradients() {
    for seed in 0..SEEDS {
        gbn_infer_case(seed, GatingMode::Soft);
    }
}

pub fn gbn_hard_input_gradients() {
    for seed in 0..SEEDS {
        gbn_infer_case(50 + seed, GatingMode::Hard);
    }
}

pub fn gbn_forced_input_gradients() {
    for seed in 0..SEEDS {
        gbn_infer_case(80 + seed, GatingMode::Forced(1));
    }
}

/// Soft gating also backpropagates into the gate parameters.
pub fn gbn_soft_gate_parameter_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(600 + seed);
        let x0 = rand_tensor(&mut r, vec![4, 3], -1.0, 1.0);
        let block = feature_block(900 + seed);
        let Gate::Fc(fc) = &block.gate else { unreachable!() };
        let shapes = vec![vec![3, 4], vec![4], vec![4, 2], vec![2]];
        let params: Vec<f64> =
            [fc.fc1.w.data(), fc.fc1.b.data(), fc.fc2.w.data(), fc.fc2.b.data()].concat();

        gradcheck(&params, TOL, &mut |p, want_grad| {
            let ts = unflatten(p, &shapes);
            let mut block = block.clone();
            let Gate::Fc(fc) = &mut block.gate else { unreachable!() };
            fc.fc1.w = ts[0].clone();
            fc.fc1.b = ts[1].clone();
            fc.fc2.w = ts[2].clone();
            fc.fc2.b = ts[3].clone();
            let mut tape = Tape::new();
            let xv = tape.leaf(&x0, false);
            let vars = GbnVars::bind(&mut tape, &block, false, want_grad);
            let h = gbn_forward_infer(&mut tape, xv, &block, &vars, GatingMode::Soft, None).unwrap();
            let h = tape.square(h);
            let loss = tape.sum_all(h);
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                let GateVars::Fc { fc1, fc2 } = &vars.gate else { unreachable!() };
                collect_grads(&tape, &[fc1.w, fc1.b, fc2.w, fc2.b], p.len())
            });
            (value, grads)
        });
    }
}

pub fn conv_gate_parameter_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(700 + seed);
        let x0 = rand_tensor(&mut r, vec![2, 2, 8, 8], -1.0, 1.0);
        let labels = rand_labels(&mut r, 2, 3);
        let mut gate = Gate::Conv(ConvGate::init(2, 8, 8, 2, 3, &mut r));
        // move zero-initialized biases off the ReLU kink so finite
        // differences stay one-sided
        if let Gate::Conv(cg) = &mut gate {
            cg.conv1.bias = rand_tensor(&mut r, vec![2], 0.1, 0.3);
            cg.conv2.bias = rand_tensor(&mut r, vec![2], 0.1, 0.3);
        }
        let Gate::Conv(cg) = &gate else { unreachable!() };
        let shapes = vec![
            cg.conv1.kernel.shape().to_vec(),
            cg.conv1.bias.shape().to_vec(),
            cg.conv2.kernel.shape().to_vec(),
            cg.conv2.bias.shape().to_vec(),
            cg.fc.w.shape().to_vec(),
            cg.fc.b.shape().to_vec(),
        ];
        let params: Vec<f64> = [
            cg.conv1.kernel.data(),
            cg.conv1.bias.data(),
            cg.conv2.kernel.data(),
            cg.conv2.bias.data(),
            cg.fc.w.data(),
            cg.fc.b.data(),
        ]
        .concat();

        gradcheck(&params, TOL, &mut |p, want_grad| {
            let ts = unflatten(p, &shapes);
            let mut gate = gate.clone();
            let Gate::Conv(cg) = &mut gate else { unreachable!() };
            cg.conv1.kernel = ts[0].clone();
            cg.conv1.bias = ts[1].clone();
            cg.conv2.kernel = ts[2].clone();
            cg.conv2.bias = ts[3].clone();
            cg.fc.w = ts[4].clone();
            cg.fc.b = ts[5].clone();
            let mut tape = Tape::new();
            let xv = tape.leaf(&x0, false);
            let vars = GateVars::bind(&mut tape, &gate, want_grad);
            let logits = gate_logits(&mut tape, xv, &gate, &vars).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                let GateVars::Conv { conv1, conv2, fc } = &vars else { unreachable!() };
                collect_grads(
                    &tape,
                    &[conv1.kernel, conv1.bias, conv2.kernel, conv2.bias, fc.w, fc.b],
                    p.len(),
                )
            });
            (value, grads)
        });
    }
}

fn tiny_gbn_config() -> LeNetConfig {
    LeNetConfig {
        conv1_out: 2,
        conv2_out: 2,
        fc_hidden: 6,
        norm: NormKind::Gbn { branches: 2, conv_gate_hidden: 2, fc_gate_hidden: 4 },
        xi: DEFAULT_XI,
        alpha: DEFAULT_ALPHA,
    }
}

/// Flat views of every non-gate parameter tensor, in a fixed order.
fn backbone_tensors(model: &mut LeNet) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = vec![
        &mut model.conv1.kernel,
        &mut model.conv1.bias,
        &mut model.conv2.kernel,
        &mut model.conv2.bias,
        &mut model.fc1.w,
        &mut model.fc1.b,
        &mut model.fc2.w,
        &mut model.fc2.b,
    ];
    for slot in [&mut model.norm1, &mut model.norm2] {
        if let NormSlot::Gbn(b) = slot {
            for s in &mut b.branches {
                out.push(&mut s.gamma);
                out.push(&mut s.beta);
            }
        }
    }
    out
}

fn backbone_vars(vars: &gbn_core::model::LeNetVars) -> Vec<Var> {
    let mut out = vec![
        vars.conv1.kernel,
        vars.conv1.bias,
        vars.conv2.kernel,
        vars.conv2.bias,
        vars.fc1.w,
        vars.fc1.b,
        vars.fc2.w,
        vars.fc2.b,
    ];
    for nv in [&vars.norm1, &vars.norm2] {
        if let NormVars::Gbn(v) = nv {
            for bv in &v.branches {
                out.push(bv.gamma);
                out.push(bv.beta);
            }
        }
    }
    out
}

/// Eq. 5: the routed classification loss reaches every non-gate parameter.
pub fn classification_loss_backbone_gradients() {
    for seed in 0..5 {
        let mut r = rng(800 + seed);
        let base = LeNet::init(tiny_gbn_config(), seed);
        let x0 = rand_tensor(&mut r, vec![2, 1, 28, 28], 0.0, 1.0);
        let x1 = rand_tensor(&mut r, vec![2, 1, 28, 28], 0.0, 1.0);
        let y0 = rand_labels(&mut r, 2, 10);
        let y1 = rand_labels(&mut r, 2, 10);

        let shapes: Vec<Vec<usize>> = {
            let mut m = base.clone();
            backbone_tensors(&mut m).iter().map(|t| t.shape().to_vec()).collect()
        };
        let params: Vec<f64> = {
            let mut m = base.clone();
            backbone_tensors(&mut m)
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect()
        };

        gradcheck(&params, TOL, &mut |p, want_grad| {
            let ts = unflatten(p, &shapes);
            let mut model = base.clone();
            for (dst, src) in backbone_tensors(&mut model).into_iter().zip(&ts) {
                *dst = src.clone();
            }
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, want_grad, false);
            let batches = vec![
                (x0.clone(), y0.clone(), DomainLabel(0)),
                (x1.clone(), y1.clone(), DomainLabel(1)),
            ];
            let loss = classification_loss(&mut tape, &mut model, &vars, &batches, None).unwrap();
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                collect_grads(&tape, &backbone_vars(&vars), p.len())
            });
            (value, grads)
        });
    }
}

/// Eq. 4: the domain prediction loss reaches every gate parameter.
pub fn domain_prediction_loss_gate_gradients() {
    for seed in 0..5 {
        let mut r = rng(900 + seed);
        let mut base = LeNet::init(tiny_gbn_config(), 100 + seed);
        // keep gate conv biases off the ReLU kink
        for t in gate_tensors(&mut base) {
            if t.shape().len() == 1 {
                let n = t.len();
                *t = rand_tensor(&mut r, vec![n], 0.1, 0.3);
            }
        }
        // detached pre-normalization activations for two domains
        let taps: Vec<(Vec<Tensor>, usize)> = (0..2)
            .map(|d| {
                (
                    vec![
                        rand_tensor(&mut r, vec![2, 2, 24, 24], -1.0, 1.0),
                        rand_tensor(&mut r, vec![2, 2, 8, 8], -1.0, 1.0),
                    ],
                    d,
                )
            })
            .collect();

        let gate_tensor_shapes: Vec<Vec<usize>> = {
            let mut m = base.clone();
            gate_tensors(&mut m).iter().map(|t| t.shape().to_vec()).collect()
        };
        let params: Vec<f64> = {
            let mut m = base.clone();
            gate_tensors(&mut m).iter().flat_map(|t| t.data().to_vec()).collect()
        };

        gradcheck(&params, TOL, &mut |p, want_grad| {
            let ts = unflatten(p, &gate_tensor_shapes);
            let mut model = base.clone();
            for (dst, src) in gate_tensors(&mut model).into_iter().zip(&ts) {
                *dst = src.clone();
            }
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false, want_grad);
            let loss = domain_prediction_loss(&mut tape, &model, &vars, &taps).unwrap();
            let value = tape.data(loss)[0];
            let grads = want_grad.then(|| {
                tape.backward(loss).unwrap();
                collect_grads(&tape, &gate_vars(&vars), p.len())
            });
            (value, grads)
        });
    }
}

fn gate_tensors(model: &mut LeNet) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for slot in [&mut model.norm1, &mut model.norm2] {
        if let NormSlot::Gbn(b) = slot {
            match &mut b.gate {
                Gate::Conv(g) => {
                    out.push(&mut g.conv1.kernel);
                    out.push(&mut g.conv1.bias);
                    out.push(&mut g.conv2.kernel);
                    out.push(&mut g.conv2.bias);
                    out.push(&mut g.fc.w);
                    out.push(&mut g.fc.b);
                }
                Gate::Fc(g) => {
                    out.push(&mut g.fc1.w);
                    out.push(&mut g.fc1.b);
                    out.push(&mut g.fc2.w);
                    out.push(&mut g.fc2.b);
                }
            }
        }
    }
    out
}

fn gate_vars(vars: &gbn_core::model::LeNetVars) -> Vec<Var> {
    let mut out = Vec::new();
    for nv in [&vars.norm1, &vars.norm2] {
        if let NormVars::Gbn(v) = nv {
            match &v.gate {
                GateVars::Conv { conv1, conv2, fc } => {
                    out.extend([conv1.kernel, conv1.bias, conv2.kernel, conv2.bias, fc.w, fc.b]);
                }
                GateVars::Fc { fc1, fc2 } => {
                    out.extend([fc1.w, fc1.b, fc2.w, fc2.b]);
                }
            }
        }
    }
    out
}

/// Run the whole battery; returns the number of seed-runs executed.
pub fn run_all() -> usize {
    dense_layer_gradients();
    conv_gradients_stride1_nopad();
    conv_gradients_stride2_pad1();
    relu_maxpool_gradients();
    bn_train_gradients();
    bn_eval_gradients();
    gbn_soft_input_gradients();
    gbn_hard_input_gradients();
    gbn_forced_input_gradients();
    gbn_soft_gate_parameter_gradients();
    conv_gate_parameter_gradients();
    classification_loss_backbone_gradients();
    domain_prediction_loss_gate_gradients();
    11 * SEEDS as usize + 2 * 5
}
