//! `gbn` command line: reproducible train / eval / geometry / stats-probe
//! experiments driven by strict TOML configs. Exit codes: 0 success,
//! 1 runtime error, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gbn_core::data::{
    load_checkpoint, read_idx, save_checkpoint, write_metrics, Dataset, EpochField,
};
use gbn_core::error::Error;
use gbn_core::gbn::GatingMode;
use gbn_core::geometry::{
    optimal_perturbation, wasserstein_oracle, wasserstein_pair, LinearClassifier, PNorm,
};
use gbn_core::model::LeNet;
use gbn_core::train::{
    epoch_metrics, evaluate, report_metrics, separate_bn_probe, train, Defense, EvalSuite,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "gbn", about = "Gated batch normalization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per the config and write checkpoint + metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the attack suite against a checkpoint and print the report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Gating mode override: soft | hard | forced:K
        #[arg(long)]
        gating: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the suite seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-form optimal perturbations and Wasserstein distances for a
    /// linear classifier.
    Geometry {
        /// Comma-separated weight vector, e.g. "3,4".
        #[arg(long)]
        w: String,
        #[arg(long)]
        epsilon: f64,
    },
    /// Train the gate-less multi-branch probe and dump per-branch
    /// running statistics plus the clean-split control.
    StatsProbe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    train_images: PathBuf,
    train_labels: PathBuf,
    test_images: PathBuf,
    test_labels: PathBuf,
    #[serde(default)]
    train_limit: Option<usize>,
    #[serde(default)]
    test_limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    run_id: String,
    data: DataConfig,
    train: TrainConfig,
    eval: EvalSuite,
    /// Default gating mode for gated models: soft | hard | forced:K.
    #[serde(default)]
    gating: Option<String>,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 2, message: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Failure { code: 1, message: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

impl From<gbn_core::data::DataError> for Failure {
    fn from(e: gbn_core::data::DataError) -> Self {
        Failure::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, out_dir, seed } => cmd_train(&config, out_dir, seed),
        Command::Eval { config, checkpoint, gating, out_dir, seed } => {
            cmd_eval(&config, &checkpoint, gating, out_dir, seed)
        }
        Command::Geometry { w, epsilon } => cmd_geometry(&w, epsilon),
        Command::StatsProbe { config, out_dir, seed } => cmd_stats_probe(&config, out_dir, seed),
    }
}

/// Strict parse; unknown keys are rejected with the parser's line/column.
fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn prepare_out_dir(path: &Path, config_path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))?;
    // echo the config verbatim for provenance
    let echo = path.join("config.toml");
    if fs::canonicalize(config_path).ok() != fs::canonicalize(&echo).ok() {
        fs::copy(config_path, &echo)
            .map_err(|e| Failure::runtime(format!("cannot copy config: {e}")))?;
    }
    Ok(())
}

fn default_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(&cfg.run_id)
}

fn load_train_data(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    let ds = read_idx(&cfg.data.train_images, &cfg.data.train_labels)?;
    Ok(match cfg.data.train_limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn load_test_data(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    let ds = read_idx(&cfg.data.test_images, &cfg.data.test_labels)?;
    Ok(match cfg.data.test_limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn parse_gating(s: &str) -> Result<GatingMode, Failure> {
    match s {
        "soft" => Ok(GatingMode::Soft),
        "hard" => Ok(GatingMode::Hard),
        _ => match s.strip_prefix("forced:").and_then(|k| k.parse::<usize>().ok()) {
            Some(k) => Ok(GatingMode::Forced(k)),
            None => Err(Failure::usage(format!(
                "bad gating mode '{s}' (expected soft, hard or forced:K)"
            ))),
        },
    }
}

fn cmd_train(config_path: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = out_dir.unwrap_or_else(|| default_out_dir(&cfg));
    prepare_out_dir(&out, config_path)?;

    let ds = load_train_data(&cfg)?;
    let (model, stats) = train(&ds, &cfg.train)?;

    save_checkpoint(&model, &cfg.train.seed.to_le_bytes(), &out.join("checkpoint.bin"))?;
    write_metrics(&epoch_metrics(&cfg.run_id, &stats), &out.join("metrics.jsonl"))?;
    println!("trained {} epochs; artifacts in {}", cfg.train.epochs, out.display());
    Ok(())
}

fn cmd_eval(
    config_path: &Path,
    checkpoint: &Path,
    gating: Option<String>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    let out = out_dir.unwrap_or_else(|| default_out_dir(&cfg));
    prepare_out_dir(&out, config_path)?;

    let mut model = LeNet::init(cfg.train.model_config(), 0);
    load_checkpoint(&mut model, checkpoint)
        .map_err(|e| Failure::runtime(format!("checkpoint does not match config model: {e}")))?;

    let mode = match &gating {
        Some(s) => Some(parse_gating(s)?),
        None => cfg.gating.as_deref().map(parse_gating).transpose()?,
    };

    let ds = load_test_data(&cfg)?;
    let report = evaluate(&model, &ds, &cfg.eval, mode)?;
    write_metrics(
        &report_metrics(&cfg.run_id, EpochField::final_tag(), &report),
        &out.join("metrics_eval.jsonl"),
    )?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Failure::runtime(e.to_string()))?;

    println!("{:<14} {:>8}", "metric", "accuracy");
    for ty in ["l1", "l2", "linf"] {
        if let Some(v) = report.per_type_worst.get(ty) {
            println!("{:<14} {:>8.4}", format!("{ty} (worst)"), v);
        }
    }
    println!("{:<14} {:>8.4}", "All attacks", report.all_attacks_accuracy);
    println!("{:<14} {:>8.4}", "Clean", report.clean_accuracy);
    Ok(())
}

fn cmd_geometry(w_csv: &str, epsilon: f64) -> Result<(), Failure> {
    let w: Vec<f64> = w_csv
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("bad weight vector '{w_csv}': {e}")))?;
    let clf = LinearClassifier::new(w, 0.0)?;

    for p in [PNorm::L1, PNorm::L2, PNorm::Linf] {
        let d = optimal_perturbation(&clf, 1, epsilon, p)?;
        let formatted: Vec<String> = d.iter().map(|v| format!("{v:.6}")).collect();
        println!("delta_{p} = [{}]", formatted.join(", "));
    }
    println!("{:<12} {:>12} {:>12} {:>12}", "pair", "closed_form", "oracle", "residual");
    for (p, q) in [(PNorm::L1, PNorm::L2), (PNorm::L1, PNorm::Linf), (PNorm::L2, PNorm::Linf)] {
        let cf = wasserstein_pair(&clf, epsilon, p, q)?;
        let or = wasserstein_oracle(&clf, epsilon, p, q)?;
        println!("{:<12} {:>12.6} {:>12.6} {:>12.3e}", format!("({p},{q})"), cf, or, (cf - or).abs());
    }
    Ok(())
}

fn cmd_stats_probe(
    config_path: &Path,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if !matches!(cfg.train.defense, Defense::SeparateBn) || cfg.train.domain_list().len() < 2 {
        return Err(Failure::runtime(
            "stats probe needs a multi-branch model (defense = \"separate_bn\" with adversarial domains)"
                .to_string(),
        ));
    }
    let out = out_dir.unwrap_or_else(|| default_out_dir(&cfg));
    prepare_out_dir(&out, config_path)?;

    let ds = load_train_data(&cfg)?;
    let (_, probe) = separate_bn_probe(&ds, &cfg.train)?;

    let mut csv = String::from("layer,branch,channel,running_mean,running_var\n");
    for r in &probe.records {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer, r.branch, r.channel, r.running_mean, r.running_var
        ));
    }
    let csv_path = out.join("bn_stats.csv");
    fs::write(&csv_path, csv).map_err(|e| Failure::runtime(e.to_string()))?;

    for (branch, div) in &probe.divergence_vs_clean {
        println!("divergence branch {branch} vs clean: {div:.6}");
    }
    println!("clean-split control:          {:.6}", probe.control_divergence);
    println!("statistics written to {}", csv_path.display());
    Ok(())
}
