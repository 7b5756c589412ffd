//! White-box gradient attacks on [0,1] images: PGD under l1/l2/linf budgets,
//! FGSM, MI-FGSM, a Gaussian noise attack, and the two adaptive variants
//! against gated normalization (gate fooling and forced-branch gradients).
//!
//! All attacks are deterministic: every random draw is seeded from
//! `(spec.seed, sample index, restart)`, so per-sample sharding can never
//! change results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::gbn::GatingMode;
use crate::geometry::PNorm;
use crate::model::{LeNet, Taps};
use crate::tape::{Tape, Tensor};

/// Hyperparameters of one iterated attack.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub norm: PNorm,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// MI-FGSM momentum decay; unused elsewhere.
    #[serde(default)]
    pub decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_restarts() -> usize {
    1
}

impl AttackSpec {
    /// Default MNIST budgets, with the iteration count as a knob. The step
    /// size scales as 2.5 ε / k so any iteration count can traverse the
    /// ball and reach its boundary.
    pub fn mnist_default(norm: PNorm, iterations: usize, seed: u64) -> Self {
        let epsilon = match norm {
            PNorm::L1 => 10.0,
            PNorm::L2 => 2.0,
            PNorm::Linf => 0.3,
        };
        let step_size = 2.5 * epsilon / iterations as f64;
        AttackSpec { norm, epsilon, step_size, iterations, restarts: 1, decay: 0.0, seed }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.epsilon < 0.0 || self.iterations == 0 || self.restarts == 0 || self.step_size <= 0.0 {
            return Err(Error::usage(format!("invalid attack spec: {self:?}")));
        }
        Ok(())
    }
}

/// Attack output with its feasibility contract.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    pub x_clean: Tensor,
    pub norm: PNorm,
    pub epsilon: f64,
    pub success_mask: Vec<bool>,
}

impl AdversarialBatch {
    /// Ball feasibility and pixel range, asserted after every attack.
    pub fn assert_feasible(&self) {
        let n = self.x_clean.shape()[0];
        let sp = self.x_clean.len() / n;
        for i in 0..n {
            let a = &self.x_adv.data()[i * sp..(i + 1) * sp];
            let c = &self.x_clean.data()[i * sp..(i + 1) * sp];
            let mut l1 = 0.0;
            let mut l2 = 0.0;
            let mut linf: f64 = 0.0;
            for (av, cv) in a.iter().zip(c) {
                assert!((0.0..=1.0).contains(av), "adversarial pixel out of range: {av}");
                let d = (av - cv).abs();
                l1 += d;
                l2 += d * d;
                linf = linf.max(d);
            }
            let norm = match self.norm {
                PNorm::L1 => l1,
                PNorm::L2 => l2.sqrt(),
                PNorm::Linf => linf,
            };
            assert!(
                norm <= self.epsilon + 1e-6,
                "perturbation norm {norm} exceeds budget {}",
                self.epsilon
            );
        }
    }
}

// ---- exact Euclidean projections onto lp balls ----

/// Clamp each coordinate to [-eps, eps].
pub fn project_linf(delta: &mut [f64], eps: f64) {
    for v in delta {
        *v = v.clamp(-eps, eps);
    }
}

/// Radial scaling onto the l2 ball.
pub fn project_l2(delta: &mut [f64], eps: f64) {
    let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > eps {
        let s = eps / norm;
        for v in delta {
            *v *= s;
        }
    }
}

/// Euclidean projection onto the l1 ball via sort-based soft thresholding.
pub fn project_l1(delta: &mut [f64], eps: f64) {
    let l1: f64 = delta.iter().map(|v| v.abs()).sum();
    if l1 <= eps {
        return;
    }
    let mut mags: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - eps) / (j + 1) as f64;
        if m - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    for v in delta.iter_mut() {
        let m = (v.abs() - tau).max(0.0);
        *v = v.signum() * m;
        if m == 0.0 {
            *v = 0.0;
        }
    }
}

fn project(norm: PNorm, delta: &mut [f64], eps: f64) {
    match norm {
        PNorm::L1 => project_l1(delta, eps),
        PNorm::L2 => project_l2(delta, eps),
        PNorm::Linf => project_linf(delta, eps),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, sample: u64, restart: u64) -> u64 {
    splitmix(splitmix(base ^ splitmix(sample)) ^ splitmix(restart.wrapping_add(0x5bd1e995)))
}

/// What the gradient ascends on.
#[derive(Debug, Clone, Copy)]
pub enum Objective {
    /// Classification cross entropy against the true labels.
    Classification,
    /// Summed domain-prediction loss of every gate against the given
    /// domain label (ascending drives the gates away from it).
    GateFooling { domain: usize },
}

/// Forward the batch in eval mode and return per-sample objective values,
/// optionally with the gradient w.r.t. the input.
fn objective_eval(
    model: &LeNet,
    x: &Tensor,
    y: &[usize],
    gating: Option<GatingMode>,
    objective: Objective,
    want_grad: bool,
    context: &str,
) -> Result<(Vec<f64>, Option<Tensor>), Error> {
    let n = x.shape()[0];
    let mut tape = Tape::new();
    let xv = tape.leaf(x, want_grad);
    let vars = model.bind(&mut tape, false, false);
    let mut taps = Taps::default();
    if matches!(objective, Objective::GateFooling { .. }) {
        taps.gate_logits = Some(Vec::new());
    }
    let logits = model.forward_eval(&mut tape, xv, &vars, gating, &mut taps)?;

    let (loss_var, per_sample) = match objective {
        Objective::Classification => {
            let loss = tape.softmax_cross_entropy(logits, y)?;
            let per = per_sample_ce(tape.data(logits), y, tape.shape(logits)[1]);
            (loss, per)
        }
        Objective::GateFooling { domain } => {
            let gate_vars = taps.gate_logits.take().unwrap();
            if gate_vars.is_empty() {
                return Err(Error::usage("gate fooling requires a model with GBN blocks"));
            }
            let labels = vec![domain; n];
            let mut per = vec![0.0; n];
            let mut total = None;
            for gv in gate_vars {
                let l = tape.softmax_cross_entropy(gv, &labels)?;
                for (p, v) in per
                    .iter_mut()
                    .zip(per_sample_ce(tape.data(gv), &labels, tape.shape(gv)[1]))
                {
                    *p += v;
                }
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            (total.unwrap(), per)
        }
    };

    let grad = if want_grad {
        tape.backward(loss_var)?;
        let g = tape
            .grad_tensor(xv)
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        if !g.all_finite() {
            return Err(Error::NonFiniteGrad { context: context.to_string() });
        }
        Some(g)
    } else {
        None
    };
    Ok((per_sample, grad))
}

fn per_sample_ce(logits: &[f64], labels: &[usize], c: usize) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            z.ln() + mx - row[y]
        })
        .collect()
}

/// Predicted classes under the model's normal inference path.
pub fn predict(model: &LeNet, x: &Tensor, gating: Option<GatingMode>) -> Result<Vec<usize>, Error> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let vars = model.bind(&mut tape, false, false);
    let logits = model.forward_eval(&mut tape, xv, &vars, gating, &mut Taps::default())?;
    let c = tape.shape(logits)[1];
    let ld = tape.data(logits);
    Ok((0..x.shape()[0])
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
        .collect())
}

fn success_mask(
    model: &LeNet,
    x: &Tensor,
    y: &[usize],
    gating: Option<GatingMode>,
) -> Result<Vec<bool>, Error> {
    let preds = predict(model, x, gating)?;
    Ok(preds.iter().zip(y).map(|(p, t)| p != t).collect())
}

/// Per-sample classification cross entropy in eval mode.
pub fn per_sample_loss(
    model: &LeNet,
    x: &Tensor,
    y: &[usize],
    gating: Option<GatingMode>,
) -> Result<Vec<f64>, Error> {
    let (losses, _) =
        objective_eval(model, x, y, gating, Objective::Classification, false, "per_sample_loss")?;
    Ok(losses)
}

fn clamp_delta(x: &[f64], delta: &mut [f64]) {
    for (d, &xv) in delta.iter_mut().zip(x) {
        *d = (xv + *d).clamp(0.0, 1.0) - xv;
    }
}

fn random_start(norm: PNorm, eps: f64, sp: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match norm {
        PNorm::Linf => (0..sp).map(|_| rng.gen_range(-eps..=eps)).collect(),
        PNorm::L2 => {
            let mut v: Vec<f64> = (0..sp).map(|_| gauss(rng)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let r = eps * rng.gen::<f64>().powf(1.0 / sp as f64);
            if n > 0.0 {
                for a in &mut v {
                    *a *= r / n;
                }
            }
            v
        }
        PNorm::L1 => {
            // a few random signed coordinates summing to at most eps
            let mut v = vec![0.0; sp];
            let k = 10.min(sp);
            let scale = eps * rng.gen::<f64>() / k as f64;
            for _ in 0..k {
                let idx = rng.gen_range(0..sp);
                let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                v[idx] += s * scale;
            }
            project_l1(&mut v, eps);
            v
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Iterated projected ascent with per-sample best-of-restarts. The restart
/// candidates include each restart's starting point, so the chosen loss can
/// never fall below the initial one. Restart 0 starts at zero; later
/// restarts start uniformly inside the ball.
pub fn pgd(
    model: &LeNet,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    grad_gating: Option<GatingMode>,
    objective: Objective,
) -> Result<AdversarialBatch, Error> {
    spec.validate()?;
    let n = x.shape()[0];
    let sp = x.len() / n;
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut best_delta = vec![0.0; n * sp];

    for restart in 0..spec.restarts {
        let mut delta = vec![0.0; n * sp];
        if restart > 0 {
            for i in 0..n {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64, restart as u64));
                let d = random_start(spec.norm, spec.epsilon, sp, &mut rng);
                delta[i * sp..(i + 1) * sp].copy_from_slice(&d);
            }
        }
        for i in 0..n {
            clamp_delta(
                &x.data()[i * sp..(i + 1) * sp],
                &mut delta[i * sp..(i + 1) * sp],
            );
        }

        // starting point counts as a candidate
        let x_start = add_delta(x, &delta);
        let (start_loss, _) = objective_eval(model, &x_start, y, grad_gating, objective, false, "pgd start")?;
        for i in 0..n {
            if start_loss[i] > best_loss[i] {
                best_loss[i] = start_loss[i];
                best_delta[i * sp..(i + 1) * sp].copy_from_slice(&delta[i * sp..(i + 1) * sp]);
            }
        }

        for step in 0..spec.iterations {
            let x_cur = add_delta(x, &delta);
            let ctx = format!("pgd step {step}");
            let (_, grad) = objective_eval(model, &x_cur, y, grad_gating, objective, true, &ctx)?;
            let grad = grad.unwrap();
            for i in 0..n {
                let g = &grad.data()[i * sp..(i + 1) * sp];
                let d = &mut delta[i * sp..(i + 1) * sp];
                match spec.norm {
                    PNorm::Linf => {
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += spec.step_size * sign(gv);
                        }
                    }
                    PNorm::L2 => {
                        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if gn > 0.0 {
                            for (dv, &gv) in d.iter_mut().zip(g) {
                                *dv += spec.step_size * gv / gn;
                            }
                        }
                    }
                    PNorm::L1 => {
                        let gn = g.iter().map(|v| v.abs()).sum::<f64>();
                        if gn > 0.0 {
                            for (dv, &gv) in d.iter_mut().zip(g) {
                                *dv += spec.step_size * gv / gn;
                            }
                        }
                    }
                }
                project(spec.norm, d, spec.epsilon);
                clamp_delta(&x.data()[i * sp..(i + 1) * sp], d);
            }
        }

        let x_end = add_delta(x, &delta);
        let (end_loss, _) = objective_eval(model, &x_end, y, grad_gating, objective, false, "pgd end")?;
        for i in 0..n {
            if end_loss[i] > best_loss[i] {
                best_loss[i] = end_loss[i];
                best_delta[i * sp..(i + 1) * sp].copy_from_slice(&delta[i * sp..(i + 1) * sp]);
            }
        }
    }

    // gated models report success under their normal gating; gate-less
    // multi-branch models have no normal mode, so reuse the grad gating
    let eval_gating = if model.has_gbn() { None } else { grad_gating };
    let x_adv = add_delta(x, &best_delta);
    let batch = AdversarialBatch {
        success_mask: success_mask(model, &x_adv, y, eval_gating)?,
        x_adv,
        x_clean: x.clone(),
        norm: spec.norm,
        epsilon: spec.epsilon,
    };
    batch.assert_feasible();
    Ok(batch)
}

fn add_delta(x: &Tensor, delta: &[f64]) -> Tensor {
    let data: Vec<f64> = x.data().iter().zip(delta).map(|(&a, &d)| a + d).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Single signed-gradient step of size epsilon.
pub fn fgsm(model: &LeNet, x: &Tensor, y: &[usize], epsilon: f64) -> Result<AdversarialBatch, Error> {
    let (_, grad) = objective_eval(model, x, y, None, Objective::Classification, true, "fgsm")?;
    let grad = grad.unwrap();
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xv, &gv)| (xv + epsilon * sign(gv)).clamp(0.0, 1.0))
        .collect();
    let x_adv = Tensor::new(x.shape().to_vec(), data);
    let batch = AdversarialBatch {
        success_mask: success_mask(model, &x_adv, y, None)?,
        x_adv,
        x_clean: x.clone(),
        norm: PNorm::Linf,
        epsilon,
    };
    batch.assert_feasible();
    Ok(batch)
}

/// Momentum iterative FGSM: `m <- mu * m + grad / ||grad||_1`, linf steps
/// of size epsilon / k.
pub fn mi_fgsm(model: &LeNet, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AdversarialBatch, Error> {
    spec.validate()?;
    let n = x.shape()[0];
    let sp = x.len() / n;
    let alpha = spec.epsilon / spec.iterations as f64;
    let mut delta = vec![0.0; n * sp];
    let mut momentum = vec![0.0; n * sp];
    for step in 0..spec.iterations {
        let x_cur = add_delta(x, &delta);
        let ctx = format!("mi-fgsm step {step}");
        let (_, grad) = objective_eval(model, &x_cur, y, None, Objective::Classification, true, &ctx)?;
        let grad = grad.unwrap();
        for i in 0..n {
            let g = &grad.data()[i * sp..(i + 1) * sp];
            let m = &mut momentum[i * sp..(i + 1) * sp];
            let gn = g.iter().map(|v| v.abs()).sum::<f64>();
            for j in 0..sp {
                let unit = if gn > 0.0 { g[j] / gn } else { 0.0 };
                m[j] = spec.decay * m[j] + unit;
            }
            let d = &mut delta[i * sp..(i + 1) * sp];
            for j in 0..sp {
                d[j] += alpha * sign(m[j]);
            }
            project_linf(d, spec.epsilon);
            clamp_delta(&x.data()[i * sp..(i + 1) * sp], d);
        }
    }
    let x_adv = add_delta(x, &delta);
    let batch = AdversarialBatch {
        success_mask: success_mask(model, &x_adv, y, None)?,
        x_adv,
        x_clean: x.clone(),
        norm: PNorm::Linf,
        epsilon: spec.epsilon,
    };
    batch.assert_feasible();
    Ok(batch)
}

/// Random isotropic noise projected to the l2 ball; keeps the first
/// misclassifying trial per sample, else the last.
pub fn gaussian_noise_attack(
    model: &LeNet,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<AdversarialBatch, Error> {
    let n = x.shape()[0];
    let sp = x.len() / n;
    let mut chosen = vec![0.0; n * sp];
    let mut done = vec![false; n];
    for trial in 0..trials {
        let mut delta = vec![0.0; n * sp];
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, trial as u64));
            let d = &mut delta[i * sp..(i + 1) * sp];
            for v in d.iter_mut() {
                *v = epsilon * gauss(&mut rng);
            }
            project_l2(d, epsilon);
            clamp_delta(&x.data()[i * sp..(i + 1) * sp], d);
        }
        let x_try = add_delta(x, &delta);
        let miss = success_mask(model, &x_try, y, None)?;
        for i in 0..n {
            if !done[i] && (miss[i] || trial == trials - 1) {
                chosen[i * sp..(i + 1) * sp].copy_from_slice(&delta[i * sp..(i + 1) * sp]);
                done[i] = miss[i];
            }
        }
    }
    let x_adv = add_delta(x, &chosen);
    let batch = AdversarialBatch {
        success_mask: success_mask(model, &x_adv, y, None)?,
        x_adv,
        x_clean: x.clone(),
        norm: PNorm::L2,
        epsilon,
    };
    batch.assert_feasible();
    Ok(batch)
}

/// Adaptive attack driving every gate away from the given true domain.
pub fn gate_fooling_pgd(
    model: &LeNet,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    domain: usize,
) -> Result<AdversarialBatch, Error> {
    if !model.has_gbn() {
        return Err(Error::usage("gate fooling requires a model with GBN blocks"));
    }
    pgd(model, x, y, spec, None, Objective::GateFooling { domain })
}

/// Adaptive attack computing gradients with every GBN block forced to one
/// branch; the result is evaluated under normal gating.
pub fn branch_forced_attack(
    model: &LeNet,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    branch: usize,
) -> Result<AdversarialBatch, Error> {
    let max_branches = model
        .norm_slots()
        .iter()
        .map(|s| s.branch_count())
        .max()
        .unwrap_or(0);
    if !model.has_gbn() {
        return Err(Error::usage("branch forcing requires a model with GBN blocks"));
    }
    if branch >= max_branches {
        return Err(Error::BranchOutOfRange { index: branch, count: max_branches });
    }
    pgd(model, x, y, spec, Some(GatingMode::Forced(branch)), Objective::Classification)
}
