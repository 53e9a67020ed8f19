use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crtnet::eval::{
    ablation_suite, emit_report, evaluate, pearson, PerformanceVector, ReportFormat,
};
use crtnet::gradcheck::full_suite;
use crtnet::model::checkpoint::{Checkpoint, OPTIMIZER_PREFIX};
use crtnet::model::FusionMode;
use crtnet::synth::{default_roster, SceneGenerator, Split, MANIFEST_FILE};
use crtnet::train::{
    check_labels, checkpoint_path, load_examples, train_loop, Ablation, Example, Trainer,
};
use crtnet::{Error, Result};
use crtnet_cli::{parse_override, RunConfig};

#[derive(Parser)]
#[command(
    name = "crtnet",
    version,
    about = "Context-aware object recognition on synthetic out-of-context scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a train/test dataset of room scenes.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint per condition and size bin.
    Eval(EvalArgs),
    /// Train and evaluate the full model and its ablations.
    Ablate(AblateArgs),
    /// Pearson correlation of two performance vectors.
    Correlate(CorrelateArgs),
    /// Finite-difference gradient checks at the tiny size.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for generation and evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Test samples per condition, e.g. `normal=100,gravity=100`.
    #[arg(long)]
    counts: Option<String>,
    /// Normal-condition training samples.
    #[arg(long)]
    train_count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset root holding `train/` and optionally `test/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A split directory, or a dataset root whose `test/` is used.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluate with a different fusion rule than the one trained.
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated variants; all five by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Ablation>,
}

#[derive(Args)]
struct CorrelateArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random seeds, starting at 0.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Correlate(a) => correlate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Flags become overrides placed after `--set`, so they win.
fn resolve(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    overrides.extend(
        flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
    );
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &overrides)?;
    cfg.dataset.threads = common.threads;
    Ok(cfg)
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let cfg = resolve(
        &a.common,
        vec![
            ("data.seed", a.seed.map(|v| v.to_string())),
            ("data.test_counts", a.counts),
            ("data.train_count", a.train_count.map(|v| v.to_string())),
        ],
    )?;
    let generator = SceneGenerator::new(default_roster(), cfg.scene.clone())?;
    let (train, test) = generator.build_dataset(&cfg.dataset, cfg.data_seed, &a.out)?;
    cfg.save(&a.out)?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        let epoch = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
            n.strip_prefix("checkpoint-")?
                .strip_suffix(".ckpt")?
                .parse::<usize>()
                .ok()
        });
        if let Some(epoch) = epoch {
            if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
                best = Some((epoch, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve(
        &a.common,
        vec![
            ("train.epochs", a.epochs.map(|v| v.to_string())),
            ("train.ablation", a.ablation.map(|v| v.to_string())),
            ("train.seed", a.seed.map(|v| v.to_string())),
            ("train.lr", a.lr.map(|v| v.to_string())),
            ("train.batch_size", a.batch_size.map(|v| v.to_string())),
        ],
    )?;
    let train = load_examples(&a.data.join(Split::Train.as_str()))?;
    let test_dir = a.data.join(Split::Test.as_str());
    let test = if test_dir.join(MANIFEST_FILE).exists() {
        Some(load_examples(&test_dir)?)
    } else {
        None
    };
    check_labels(&train, cfg.model.num_classes)?;
    if let Some(t) = &test {
        check_labels(t, cfg.model.num_classes)?;
    }
    let mut trainer = match latest_checkpoint(&a.out)? {
        Some(path) if a.resume => {
            println!("resuming from {}", path.display());
            Trainer::resume(
                &Checkpoint::load(&path)?,
                cfg.model.clone(),
                cfg.train.clone(),
            )?
        }
        _ => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    cfg.save(&a.out)?;
    let log = train_loop(&mut trainer, &train, test.as_deref(), &a.out)?;
    for m in log.iter().filter(|m| m.epoch > 0) {
        println!("{}", m.to_line());
    }
    println!("saved {}", checkpoint_path(&a.out, trainer.epoch).display());
    Ok(ExitCode::SUCCESS)
}

fn eval_split(data: &Path) -> PathBuf {
    if data.join(MANIFEST_FILE).exists() {
        data.to_path_buf()
    } else {
        data.join(Split::Test.as_str())
    }
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    if a.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model(OPTIMIZER_PREFIX)?;
    let data = load_examples(&eval_split(&a.data))?;
    let report = evaluate(&model, &data, a.fusion, a.threads)?;
    let table = report.table();
    let csv = emit_report(&table, ReportFormat::Csv, &a.out, "report")?;
    emit_report(&table, ReportFormat::PlotData, &a.out, "report")?;
    PerformanceVector::from_table(&table).save(&a.out.join("vector.tsv"))?;
    let mut echo = String::from("# effective configuration\n");
    echo.push_str(&format!("# checkpoint = {}\n", a.checkpoint.display()));
    for (k, v) in ck.config_map() {
        if k.starts_with("model.") {
            echo.push_str(&format!("{k} = {v}\n"));
        }
    }
    if let Some(f) = a.fusion {
        echo.push_str(&format!("# evaluated with fusion_mode = {f}\n"));
    }
    fs::write(a.out.join(crtnet_cli::RUN_CONFIG_FILE), echo).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    print!(
        "{}",
        fs::read_to_string(&csv).map_err(|e| Error::Io {
            path: csv.clone(),
            source: e
        })?
    );
    Ok(ExitCode::SUCCESS)
}

fn load_split(dir: &Path, num_classes: usize) -> Result<Vec<Example>> {
    let data = load_examples(dir)?;
    check_labels(&data, num_classes)?;
    Ok(data)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let cfg = resolve(
        &a.common,
        vec![
            ("train.epochs", a.epochs.map(|v| v.to_string())),
            ("train.seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    let variants = if a.variants.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let train = load_split(&a.data.join(Split::Train.as_str()), cfg.model.num_classes)?;
    let test = load_split(&a.data.join(Split::Test.as_str()), cfg.model.num_classes)?;
    cfg.save(&a.out)?;
    let suite = ablation_suite(
        &variants,
        &train,
        &test,
        &cfg.model,
        &cfg.train,
        Some(&a.out),
        cfg.dataset.threads,
    )?;
    for v in &suite.variants {
        let dir = a.out.join(v.ablation.as_str());
        let table = v.report.table();
        emit_report(&table, ReportFormat::Csv, &dir, "report")?;
        emit_report(&table, ReportFormat::PlotData, &dir, "report")?;
        v.vector.save(&dir.join("vector.tsv"))?;
    }
    let summary = suite.summary();
    fs::write(a.out.join("summary.txt"), &summary).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn correlate(a: CorrelateArgs) -> Result<ExitCode> {
    let x = PerformanceVector::load(&a.a)?;
    let y = PerformanceVector::load(&a.b)?;
    println!("{:.2}", pearson(&x, &y)?);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let checks = full_suite(0..a.seeds)?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    for c in &failed {
        println!(
            "FAIL {} seed {} worst relative error {:.3e}",
            c.name, c.seed, c.worst
        );
    }
    println!(
        "{} checks over {} seeds, {} failed, worst relative error {:.3e}",
        checks.len(),
        a.seeds,
        failed.len(),
        worst
    );
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
