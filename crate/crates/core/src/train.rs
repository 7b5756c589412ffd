//! Training loops (gated multi-branch training, vanilla, AVG/MAX baselines,
//! the separate-BN statistics probe) and the evaluation protocol: per-attack
//! accuracy, per-type worst case and the per-example all-attacks union.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    branch_forced_attack, fgsm, gate_fooling_pgd, gaussian_noise_attack, mi_fgsm, per_sample_loss,
    pgd, predict, AttackSpec, Objective,
};
use crate::data::{batches, Dataset, EpochField, MetricLine};
use crate::error::Error;
use crate::gbn::{DomainLabel, GatingMode};
use crate::geometry::PNorm;
use crate::model::{
    classification_loss, domain_prediction_loss, LeNet, LeNetConfig, NormKind, Taps,
};
use crate::tape::{Tape, Tensor};

/// Training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    Vanilla,
    Gbn,
    Avg,
    Max,
    SeparateBn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub defense: Defense,
    /// One spec per adversarial domain; domain k+1 uses `attack_specs[k]`.
    pub attack_specs: Vec<AttackSpec>,
    /// Domains to train on: 0 is clean, k in 1..=N is `attack_specs[k-1]`.
    /// Defaults to all of them.
    #[serde(default)]
    pub domains: Option<Vec<usize>>,
    #[serde(default = "default_conv_gate_hidden")]
    pub conv_gate_hidden: usize,
    #[serde(default = "default_fc_gate_hidden")]
    pub fc_gate_hidden: usize,
    /// Learning rate for the gate parameters (Eq. 4 step). Defaults to
    /// `learning_rate`. The gate's loss surface is rougher than the
    /// backbone's, so it usually wants a smaller step.
    #[serde(default)]
    pub gate_learning_rate: Option<f64>,
    /// Gate SGD steps per iteration on the current batch's (detached)
    /// activations. The gate chases a representation that moves under it;
    /// extra inner steps let it track without raising its learning rate.
    #[serde(default = "default_gate_steps")]
    pub gate_steps: usize,
}

fn default_gate_steps() -> usize {
    1
}

fn default_conv_gate_hidden() -> usize {
    16
}

fn default_fc_gate_hidden() -> usize {
    512
}

impl TrainConfig {
    /// Active domain list, sorted, clean first.
    pub fn domain_list(&self) -> Vec<usize> {
        match &self.domains {
            Some(d) => {
                let mut d = d.clone();
                d.sort_unstable();
                d.dedup();
                d
            }
            None => (0..=self.attack_specs.len()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::usage("epochs must be positive and batch_size at least 2"));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::usage("learning_rate must be positive, weight_decay non-negative"));
        }
        if self.gate_learning_rate.is_some_and(|lr| lr <= 0.0) || self.gate_steps == 0 {
            return Err(Error::usage("gate_learning_rate and gate_steps must be positive"));
        }
        for spec in &self.attack_specs {
            spec.validate()?;
        }
        let domains = self.domain_list();
        if let Some(&d) = domains.iter().find(|&&d| d > self.attack_specs.len()) {
            return Err(Error::usage(format!(
                "domain {d} has no attack spec (got {} specs)",
                self.attack_specs.len()
            )));
        }
        match self.defense {
            Defense::Gbn | Defense::SeparateBn => {
                if domains.len() < 2 || domains[0] != 0 {
                    return Err(Error::usage(
                        "gated and separate-BN training need domain 0 plus at least one adversarial domain",
                    ));
                }
            }
            Defense::Avg | Defense::Max => {
                if domains.len() < 2 {
                    return Err(Error::usage("avg/max training needs at least one adversarial domain"));
                }
            }
            Defense::Vanilla => {}
        }
        Ok(())
    }

    /// Model topology implied by the strategy.
    pub fn model_config(&self) -> LeNetConfig {
        let branches = self.domain_list().len();
        let norm = match self.defense {
            Defense::Vanilla | Defense::Avg | Defense::Max => NormKind::Bn,
            Defense::Gbn => NormKind::Gbn {
                branches,
                conv_gate_hidden: self.conv_gate_hidden,
                fc_gate_hidden: self.fc_gate_hidden,
            },
            Defense::SeparateBn => NormKind::MultiBn { branches },
        };
        LeNetConfig { norm, ..LeNetConfig::default() }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Attack seed contract: derived from (train seed, epoch, batch index) plus
/// the domain so no two generated batches share a stream.
fn attack_seed(seed: u64, epoch: u64, batch: u64, domain: u64) -> u64 {
    mix(mix(mix(seed, epoch), batch), domain)
}

fn concat(parts: &[(&Tensor, &[usize])]) -> (Tensor, Vec<usize>) {
    let mut shape = parts[0].0.shape().to_vec();
    shape[0] = parts.iter().map(|(t, _)| t.shape()[0]).sum();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (t, y) in parts {
        data.extend_from_slice(t.data());
        labels.extend_from_slice(y);
    }
    (Tensor::new(shape, data), labels)
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_cls_loss: f64,
    pub mean_domain_loss: Option<f64>,
}

/// Train a model from scratch per the config. Returns the model and
/// per-epoch statistics.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(LeNet, Vec<EpochStats>), Error> {
    cfg.validate()?;
    let mut model = LeNet::init(cfg.model_config(), cfg.seed);
    let stats = train_into(&mut model, ds, cfg)?;
    Ok((model, stats))
}

/// Train an already-initialized model in place.
pub fn train_into(model: &mut LeNet, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>, Error> {
    cfg.validate()?;
    let domains = cfg.domain_list();
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut cls_sum = 0.0;
        let mut dp_sum = 0.0;
        let mut steps = 0usize;
        for (bi, (x, y)) in batches(ds, cfg.batch_size, cfg.seed, epoch as u64).into_iter().enumerate() {
            let (cls, dp) = train_step(model, cfg, &domains, epoch as u64, bi as u64, &x, &y)?;
            cls_sum += cls;
            dp_sum += dp.unwrap_or(0.0);
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::usage("dataset too small for one batch"));
        }
        out.push(EpochStats {
            epoch,
            mean_cls_loss: cls_sum / steps as f64,
            mean_domain_loss: matches!(cfg.defense, Defense::Gbn)
                .then_some(dp_sum / steps as f64),
        });
    }
    Ok(out)
}

/// Generate the adversarial batch for one training domain. Gradients on
/// branch-routed models flow through the branch the batch will train.
fn gen_domain_batch(
    model: &LeNet,
    cfg: &TrainConfig,
    domain: usize,
    branch: usize,
    epoch: u64,
    batch_idx: u64,
    x: &Tensor,
    y: &[usize],
) -> Result<Tensor, Error> {
    let mut spec = cfg.attack_specs[domain - 1].clone();
    spec.seed = attack_seed(cfg.seed, epoch, batch_idx, domain as u64);
    let routed = !matches!(model.cfg.norm, NormKind::None | NormKind::Bn);
    let gating = routed.then_some(GatingMode::Forced(branch));
    let adv = pgd(model, x, y, &spec, gating, Objective::Classification)?;
    Ok(adv.x_adv)
}

fn train_step(
    model: &mut LeNet,
    cfg: &TrainConfig,
    domains: &[usize],
    epoch: u64,
    batch_idx: u64,
    x: &Tensor,
    y: &[usize],
) -> Result<(f64, Option<f64>), Error> {
    match cfg.defense {
        Defense::Vanilla => {
            let loss = fit_batches(model, cfg, &[(x.clone(), y.to_vec(), DomainLabel(0))], None)?;
            Ok((loss, None))
        }
        Defense::Gbn | Defense::SeparateBn => {
            let mut dom_batches = Vec::with_capacity(domains.len());
            for (branch, &d) in domains.iter().enumerate() {
                let xb = if d == 0 {
                    x.clone()
                } else {
                    gen_domain_batch(model, cfg, d, branch, epoch, batch_idx, x, y)?
                };
                dom_batches.push((xb, y.to_vec(), DomainLabel(branch)));
            }
            if matches!(cfg.defense, Defense::Gbn) {
                let mut taps = Vec::new();
                let loss = fit_batches(model, cfg, &dom_batches, Some(&mut taps))?;
                let dp = fit_gates(model, cfg, &taps)?;
                Ok((loss, Some(dp)))
            } else {
                Ok((fit_batches(model, cfg, &dom_batches, None)?, None))
            }
        }
        Defense::Avg => {
            let mut parts: Vec<(Tensor, Vec<usize>)> = vec![(x.clone(), y.to_vec())];
            for &d in domains.iter().filter(|&&d| d != 0) {
                let xb = gen_domain_batch(model, cfg, d, 0, epoch, batch_idx, x, y)?;
                parts.push((xb, y.to_vec()));
            }
            let refs: Vec<(&Tensor, &[usize])> =
                parts.iter().map(|(t, l)| (t, l.as_slice())).collect();
            let (xa, ya) = concat(&refs);
            let loss = fit_batches(model, cfg, &[(xa, ya, DomainLabel(0))], None)?;
            Ok((loss, None))
        }
        Defense::Max => {
            let adv_domains: Vec<usize> = domains.iter().copied().filter(|&d| d != 0).collect();
            let mut candidates = Vec::with_capacity(adv_domains.len());
            for &d in &adv_domains {
                let xb = gen_domain_batch(model, cfg, d, 0, epoch, batch_idx, x, y)?;
                let losses = per_sample_loss(model, &xb, y, None)?;
                candidates.push((xb, losses));
            }
            let n = x.shape()[0];
            let sp = x.len() / n;
            let losses: Vec<&[f64]> = candidates.iter().map(|(_, l)| l.as_slice()).collect();
            let picks = max_loss_selection(&losses);
            let mut worst = vec![0.0; n * sp];
            for (i, &pick) in picks.iter().enumerate() {
                worst[i * sp..(i + 1) * sp]
                    .copy_from_slice(&candidates[pick].0.data()[i * sp..(i + 1) * sp]);
            }
            let x_worst = Tensor::new(x.shape().to_vec(), worst);
            let (xa, ya) = concat(&[(x, y), (&x_worst, y)]);
            let loss = fit_batches(model, cfg, &[(xa, ya, DomainLabel(0))], None)?;
            Ok((loss, None))
        }
    }
}

/// Per sample, the index of the candidate with the highest loss (first on
/// ties). `losses[c][i]` is candidate c's loss on sample i.
pub fn max_loss_selection(losses: &[&[f64]]) -> Vec<usize> {
    assert!(!losses.is_empty(), "no candidates");
    let n = losses[0].len();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..losses.len() {
                if losses[c][i] > losses[best][i] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// One SGD step on the classification loss (non-gate parameters only).
fn fit_batches(
    model: &mut LeNet,
    cfg: &TrainConfig,
    dom_batches: &[(Tensor, Vec<usize>, DomainLabel)],
    taps_out: Option<&mut Vec<(Vec<Tensor>, usize)>>,
) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true, false);
    let loss = classification_loss(&mut tape, model, &vars, dom_batches, taps_out)?;
    let value = tape.data(loss)[0];
    tape.backward(loss)?;
    model.sgd_step(&tape, &vars, cfg.learning_rate, cfg.weight_decay);
    Ok(value)
}

/// `gate_steps` SGD steps on the domain prediction loss (gate parameters
/// only). Returns the loss before the first step.
fn fit_gates(
    model: &mut LeNet,
    cfg: &TrainConfig,
    taps: &[(Vec<Tensor>, usize)],
) -> Result<f64, Error> {
    let lr = cfg.gate_learning_rate.unwrap_or(cfg.learning_rate);
    let mut first = 0.0;
    for step in 0..cfg.gate_steps.max(1) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false, true);
        let loss = domain_prediction_loss(&mut tape, model, &vars, taps)?;
        if step == 0 {
            first = tape.data(loss)[0];
        }
        tape.backward(loss)?;
        model.sgd_step(&tape, &vars, lr, cfg.weight_decay);
    }
    Ok(first)
}

// ---- separate-BN statistics probe ----

/// One (layer, branch, channel) running-statistics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatRecord {
    pub layer: usize,
    pub branch: usize,
    pub channel: usize,
    pub running_mean: f64,
    pub running_var: f64,
}

/// All running statistics of a model, one record per (layer, branch, channel).
pub fn bn_stat_records(model: &LeNet) -> Vec<BnStatRecord> {
    use crate::layers::BnBranchState;
    use crate::model::NormSlot;
    let mut out = Vec::new();
    let mut push = |layer: usize, branch: usize, s: &BnBranchState| {
        for c in 0..s.channels() {
            out.push(BnStatRecord {
                layer,
                branch,
                channel: c,
                running_mean: s.running_mean[c],
                running_var: s.running_var[c],
            });
        }
    };
    for (layer, slot) in model.norm_slots().into_iter().enumerate() {
        match slot {
            NormSlot::None => {}
            NormSlot::Bn(s) => push(layer, 0, s),
            NormSlot::MultiBn(ss) => {
                for (b, s) in ss.iter().enumerate() {
                    push(layer, b, s);
                }
            }
            NormSlot::Gbn(block) => {
                for (b, s) in block.branches.iter().enumerate() {
                    push(layer, b, s);
                }
            }
        }
    }
    out
}

/// Mean absolute difference of running means between two branches at a layer.
pub fn mean_stat_divergence(records: &[BnStatRecord], layer: usize, a: usize, b: usize) -> f64 {
    let pick = |branch: usize| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.layer == layer && r.branch == branch)
            .map(|r| r.running_mean)
            .collect()
    };
    let ma = pick(a);
    let mb = pick(b);
    assert_eq!(ma.len(), mb.len(), "branch channel counts differ");
    assert!(!ma.is_empty(), "no records at layer {layer}");
    ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ma.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsProbeReport {
    pub records: Vec<BnStatRecord>,
    /// Mean |running_mean(branch k) - running_mean(branch 0)| at the first
    /// normalized layer, for every adversarial branch k.
    pub divergence_vs_clean: BTreeMap<usize, f64>,
    /// Same statistic between two branches fed disjoint halves of the clean
    /// stream only.
    pub control_divergence: f64,
}

/// Appendix-style probe: train a gate-less multi-branch model with manual
/// branch activation per domain, then compare branch statistics against a
/// clean-split control trained identically on clean data alone.
pub fn separate_bn_probe(ds: &Dataset, cfg: &TrainConfig) -> Result<(LeNet, StatsProbeReport), Error> {
    if !matches!(cfg.defense, Defense::SeparateBn) {
        return Err(Error::usage("stats probe requires the separate_bn defense"));
    }
    let (model, _) = train(ds, cfg)?;
    let records = bn_stat_records(&model);
    let branches = cfg.domain_list().len();
    let divergence_vs_clean = (1..branches)
        .map(|k| (k, mean_stat_divergence(&records, 0, 0, k)))
        .collect();

    // control: two branches, each seeing one half of every clean batch
    let ctrl_cfg = LeNetConfig { norm: NormKind::MultiBn { branches: 2 }, ..LeNetConfig::default() };
    let mut ctrl = LeNet::init(ctrl_cfg, cfg.seed);
    for epoch in 0..cfg.epochs {
        for (x, y) in batches(ds, cfg.batch_size, cfg.seed, epoch as u64) {
            let n = x.shape()[0];
            if n < 4 {
                continue;
            }
            let sp = x.len() / n;
            let half = n / 2;
            let xa = Tensor::new(
                {
                    let mut s = x.shape().to_vec();
                    s[0] = half;
                    s
                },
                x.data()[..half * sp].to_vec(),
            );
            let xb = Tensor::new(
                {
                    let mut s = x.shape().to_vec();
                    s[0] = n - half;
                    s
                },
                x.data()[half * sp..].to_vec(),
            );
            let dom_batches = vec![
                (xa, y[..half].to_vec(), DomainLabel(0)),
                (xb, y[half..].to_vec(), DomainLabel(1)),
            ];
            fit_batches(&mut ctrl, cfg, &dom_batches, None)?;
        }
    }
    let ctrl_records = bn_stat_records(&ctrl);
    let control_divergence = mean_stat_divergence(&ctrl_records, 0, 0, 1);

    Ok((model, StatsProbeReport { records, divergence_vs_clean, control_divergence }))
}

// ---- evaluation ----

/// The attack battery evaluate() runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSuite {
    /// One PGD spec per perturbation type.
    pub pgd: Vec<AttackSpec>,
    pub fgsm_epsilon: f64,
    pub mi_fgsm: AttackSpec,
    pub gaussian_epsilon: f64,
    pub gaussian_trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Also run the gate-fooling and forced-branch adaptive attacks on
    /// gated models.
    #[serde(default)]
    pub adaptive: bool,
}

impl EvalSuite {
    /// Paper-default budgets with the iteration count as a knob.
    pub fn mnist_default(iterations: usize, seed: u64) -> Self {
        let mut mi = AttackSpec::mnist_default(PNorm::Linf, iterations, mix(seed, 4));
        mi.decay = 1.0;
        EvalSuite {
            pgd: vec![
                AttackSpec::mnist_default(PNorm::L1, iterations, mix(seed, 1)),
                AttackSpec::mnist_default(PNorm::L2, iterations, mix(seed, 2)),
                AttackSpec::mnist_default(PNorm::Linf, iterations, mix(seed, 3)),
            ],
            fgsm_epsilon: 0.3,
            mi_fgsm: mi,
            gaussian_epsilon: 2.0,
            gaussian_trials: 10,
            seed,
            adaptive: false,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.pgd.is_empty() {
            return Err(Error::usage("evaluation suite has no attacks"));
        }
        for spec in &self.pgd {
            spec.validate()?;
        }
        self.mi_fgsm.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_accuracy: f64,
    pub per_attack_accuracy: BTreeMap<String, f64>,
    /// Per perturbation type, the per-example worst case over that type's
    /// attacks.
    pub per_type_worst: BTreeMap<String, f64>,
    /// Fraction of samples correct under every attack simultaneously.
    pub all_attacks_accuracy: f64,
    /// Per GBN layer: domain index -> gate accuracy on that domain's inputs.
    pub gate_accuracy_per_layer: Option<Vec<BTreeMap<usize, f64>>>,
}

impl EvalReport {
    /// The ordering invariant every emitted report must satisfy.
    pub fn check_ordering(&self) -> Result<(), Error> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.clean_accuracy) || !in_unit(self.all_attacks_accuracy) {
            return Err(Error::usage("accuracy outside [0,1]"));
        }
        for (name, &v) in self.per_attack_accuracy.iter().chain(self.per_type_worst.iter()) {
            if !in_unit(v) {
                return Err(Error::usage(format!("accuracy outside [0,1]: {name}")));
            }
            if self.all_attacks_accuracy > v + 1e-12 {
                return Err(Error::usage(format!(
                    "all-attacks accuracy {} exceeds {name} = {v}",
                    self.all_attacks_accuracy
                )));
            }
        }
        Ok(())
    }
}

fn and_into(acc: &mut Vec<bool>, mask: &[bool]) {
    for (a, &m) in acc.iter_mut().zip(mask) {
        *a = *a && m;
    }
}

struct MaskAcc {
    correct: BTreeMap<String, Vec<bool>>,
}

impl MaskAcc {
    fn push(&mut self, name: &str, mask: Vec<bool>) {
        self.correct.entry(name.to_string()).or_default().extend(mask);
    }
}

const EVAL_CHUNK: usize = 100;

/// Run the full suite. `gating` overrides the gating mode of gated models
/// (and is required, as `Forced(k)`, for gate-less multi-branch models).
pub fn evaluate(
    model: &LeNet,
    ds: &Dataset,
    suite: &EvalSuite,
    gating: Option<GatingMode>,
) -> Result<EvalReport, Error> {
    suite.validate()?;
    if ds.is_empty() {
        return Err(Error::usage("evaluation dataset is empty"));
    }

    // bake a gating override into a local copy so every attack sees it as
    // the model's normal mode
    let mut model = model.clone();
    let pass_gating = if model.has_gbn() {
        if let Some(mode) = gating {
            model.set_gating(mode);
        }
        None
    } else {
        gating
    };
    let model = &model;

    let n = ds.len();
    let n_branches = model
        .norm_slots()
        .iter()
        .map(|s| s.branch_count())
        .max()
        .unwrap_or(0);
    let want_gate_acc = model.has_gbn() && suite.pgd.len() + 1 == n_branches;

    let mut clean_correct = Vec::with_capacity(n);
    let mut acc = MaskAcc { correct: BTreeMap::new() };
    // per (layer, domain): (correct gate picks, total)
    let mut gate_counts: Vec<BTreeMap<usize, (usize, usize)>> = Vec::new();

    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (x, y) = ds.select(&idx);
        let chunk_seed = mix(suite.seed, start as u64);

        let correct = |x_adv: &Tensor| -> Result<Vec<bool>, Error> {
            let preds = predict(model, x_adv, pass_gating)?;
            Ok(preds.iter().zip(&y).map(|(p, t)| p == t).collect())
        };

        clean_correct.extend(correct(&x)?);

        for spec in &suite.pgd {
            let mut spec = spec.clone();
            spec.seed = mix(spec.seed, chunk_seed);
            let adv = pgd(model, &x, &y, &spec, pass_gating, Objective::Classification)?;
            acc.push(&format!("pgd_{}", spec.norm), correct(&adv.x_adv)?);
        }

        let adv = fgsm(model, &x, &y, suite.fgsm_epsilon)?;
        acc.push("fgsm", correct(&adv.x_adv)?);

        let mut mi = suite.mi_fgsm.clone();
        mi.seed = mix(mi.seed, chunk_seed);
        let adv = mi_fgsm(model, &x, &y, &mi)?;
        acc.push("mi_fgsm", correct(&adv.x_adv)?);

        if suite.gaussian_trials > 0 {
            let adv = gaussian_noise_attack(
                model,
                &x,
                &y,
                suite.gaussian_epsilon,
                suite.gaussian_trials,
                mix(suite.seed, chunk_seed),
            )?;
            acc.push("gaussian", correct(&adv.x_adv)?);
        }

        if suite.adaptive && model.has_gbn() {
            let linf = suite
                .pgd
                .iter()
                .find(|s| s.norm == PNorm::Linf)
                .cloned()
                .unwrap_or_else(|| AttackSpec::mnist_default(PNorm::Linf, 10, 0));
            let mut spec = linf.clone();
            spec.seed = mix(mix(spec.seed, chunk_seed), 101);
            let adv = gate_fooling_pgd(model, &x, &y, &spec, 0)?;
            acc.push("gate_fooling", correct(&adv.x_adv)?);
            for branch in 0..n_branches {
                let mut spec = linf.clone();
                spec.seed = mix(mix(spec.seed, chunk_seed), 200 + branch as u64);
                let adv = branch_forced_attack(model, &x, &y, &spec, branch)?;
                acc.push(&format!("branch_forced_{branch}"), correct(&adv.x_adv)?);
            }
        }

        if want_gate_acc {
            // Domain-labeled held-out inputs: domain k's samples are
            // generated the same way its training batches were, by
            // attacking through branch k (Forced routing). Attacks run
            // against the soft-gated model probe the gate itself and are
            // scored as adaptive attacks, not as domain samples.
            let mut domain_inputs: Vec<Tensor> = vec![x.clone()];
            for (i, spec) in suite.pgd.iter().enumerate() {
                let mut spec = spec.clone();
                spec.seed = mix(spec.seed, chunk_seed);
                let adv =
                    pgd(model, &x, &y, &spec, Some(GatingMode::Forced(i + 1)), Objective::Classification)?;
                domain_inputs.push(adv.x_adv);
            }
            let counts = gate_accuracy_counts(model, &domain_inputs)?;
            if gate_counts.is_empty() {
                gate_counts = counts;
            } else {
                for (layer, per_domain) in counts.into_iter().enumerate() {
                    for (d, (c, t)) in per_domain {
                        let e = gate_counts[layer].entry(d).or_insert((0, 0));
                        e.0 += c;
                        e.1 += t;
                    }
                }
            }
        }

        start += EVAL_CHUNK;
    }

    let frac = |mask: &[bool]| mask.iter().filter(|&&b| b).count() as f64 / n as f64;

    let mut per_attack_accuracy = BTreeMap::new();
    let mut all_mask = vec![true; n];
    // per-type worst-case masks over the standard suite
    let mut type_masks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (name, mask) in &acc.correct {
        per_attack_accuracy.insert(name.clone(), frac(mask));
        and_into(&mut all_mask, mask);
        let ty = match name.as_str() {
            "pgd_l1" => Some("l1"),
            "pgd_l2" | "gaussian" => Some("l2"),
            "pgd_linf" | "fgsm" | "mi_fgsm" => Some("linf"),
            _ => None,
        };
        if let Some(ty) = ty {
            type_masks
                .entry(ty.to_string())
                .and_modify(|m| and_into(m, mask))
                .or_insert_with(|| mask.clone());
        }
    }
    let per_type_worst = type_masks.iter().map(|(k, m)| (k.clone(), frac(m))).collect();

    let gate_accuracy_per_layer = want_gate_acc.then(|| {
        gate_counts
            .into_iter()
            .map(|per_domain| {
                per_domain
                    .into_iter()
                    .map(|(d, (c, t))| (d, c as f64 / t.max(1) as f64))
                    .collect()
            })
            .collect()
    });

    let report = EvalReport {
        clean_accuracy: frac(&clean_correct),
        per_attack_accuracy,
        per_type_worst,
        all_attacks_accuracy: frac(&all_mask),
        gate_accuracy_per_layer,
    };
    report.check_ordering()?;
    Ok(report)
}

/// Same protocol; named entry point for models trained on a domain subset,
/// where the suite deliberately includes the held-out type.
pub fn held_out_perturbation_eval(
    model: &LeNet,
    ds: &Dataset,
    suite: &EvalSuite,
    gating: Option<GatingMode>,
) -> Result<EvalReport, Error> {
    evaluate(model, ds, suite, gating)
}

/// Accuracy under a single PGD attack, without the rest of the suite.
pub fn attack_accuracy(
    model: &LeNet,
    ds: &Dataset,
    spec: &AttackSpec,
    gating: Option<GatingMode>,
) -> Result<f64, Error> {
    let mut correct = 0usize;
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (x, y) = ds.select(&idx);
        let mut spec = spec.clone();
        spec.seed = mix(spec.seed, start as u64);
        let adv = pgd(model, &x, &y, &spec, gating, Objective::Classification)?;
        let preds = predict(model, &adv.x_adv, gating)?;
        correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
        start += EVAL_CHUNK;
    }
    Ok(correct as f64 / n as f64)
}

/// Per-layer gate hit counts: input k of `domain_inputs` carries domain
/// label k; a gate is correct when its argmax logit equals k.
fn gate_accuracy_counts(
    model: &LeNet,
    domain_inputs: &[Tensor],
) -> Result<Vec<BTreeMap<usize, (usize, usize)>>, Error> {
    let mut out: Vec<BTreeMap<usize, (usize, usize)>> = Vec::new();
    for (domain, x) in domain_inputs.iter().enumerate() {
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let vars = model.bind(&mut tape, false, false);
        let mut taps = Taps::default();
        taps.gate_logits = Some(Vec::new());
        model.forward_eval(&mut tape, xv, &vars, None, &mut taps)?;
        let logits = taps.gate_logits.take().unwrap();
        if out.is_empty() {
            out = vec![BTreeMap::new(); logits.len()];
        }
        for (layer, &lv) in logits.iter().enumerate() {
            let c = tape.shape(lv)[1];
            let ld = tape.data(lv);
            let n = tape.shape(lv)[0];
            let mut hits = 0;
            for i in 0..n {
                let row = &ld[i * c..(i + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == domain {
                    hits += 1;
                }
            }
            let e = out[layer].entry(domain).or_insert((0, 0));
            e.0 += hits;
            e.1 += n;
        }
    }
    Ok(out)
}

/// Flatten a report into metric lines.
pub fn report_metrics(run_id: &str, epoch: EpochField, report: &EvalReport) -> Vec<MetricLine> {
    let line = |metric: &str, value: f64, attack: Option<String>, domain: Option<usize>, layer: Option<usize>| MetricLine {
        run_id: run_id.to_string(),
        epoch: epoch.clone(),
        metric: metric.to_string(),
        value,
        attack,
        domain,
        layer,
    };
    let mut out = vec![line("clean_accuracy", report.clean_accuracy, None, None, None)];
    for (name, &v) in &report.per_attack_accuracy {
        out.push(line("attack_accuracy", v, Some(name.clone()), None, None));
    }
    for (ty, &v) in &report.per_type_worst {
        out.push(line("per_type_worst", v, Some(ty.clone()), None, None));
    }
    out.push(line("all_attacks_accuracy", report.all_attacks_accuracy, None, None, None));
    if let Some(layers) = &report.gate_accuracy_per_layer {
        for (layer, per_domain) in layers.iter().enumerate() {
            for (&d, &v) in per_domain {
                out.push(line("gate_accuracy", v, None, Some(d), Some(layer)));
            }
        }
    }
    out
}

/// Per-epoch training metric lines.
pub fn epoch_metrics(run_id: &str, stats: &[EpochStats]) -> Vec<MetricLine> {
    let mut out = Vec::new();
    for s in stats {
        out.push(MetricLine {
            run_id: run_id.to_string(),
            epoch: EpochField::Num(s.epoch as u64),
            metric: "train_cls_loss".into(),
            value: s.mean_cls_loss,
            attack: None,
            domain: None,
            layer: None,
        });
        if let Some(dp) = s.mean_domain_loss {
            out.push(MetricLine {
                run_id: run_id.to_string(),
                epoch: EpochField::Num(s.epoch as u64),
                metric: "train_domain_loss".into(),
                value: dp,
                attack: None,
                domain: None,
                layer: None,
            });
        }
    }
    out
}
