use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semppl_harness::config::{extract_overrides, BASE_PRESET};
use semppl_harness::experiments::{render_ablation_csv, run_ablation, run_oracle, GridSpec};
use semppl_harness::metrics::{parse_csv, render_csv};
use semppl_harness::probe::ProbeMode;
use semppl_harness::{checkpoint, report, HarnessError, Result, TrainConfig, Trainer64};

const CHECKPOINT_FILE: &str = "checkpoint.sppl";
const METRICS_FILE: &str = "metrics.csv";

/// Semantic-positive contrastive learning on synthetic data.
///
/// Any configuration key can be overridden with `--section.key=value`,
/// e.g. `--loss.alpha=0 --train.epochs=20`.
#[derive(Parser)]
#[command(name = "semppl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, a summary and a checkpoint.
    Train {
        /// Config file, or `base` for the built-in desk configuration.
        #[arg(long, default_value = BASE_PRESET)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write SVG charts.
        #[arg(long)]
        charts: bool,
    },
    /// Probe a checkpoint's frozen encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Both)]
        mode: EvalMode,
    },
    /// Sweep a grid of settings, one run per cell.
    Ablate {
        #[arg(long, default_value = BASE_PRESET)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// `name=v1,v2,...`; repeat for a product grid. Names: P, epochs,
        /// voting, k, C, alpha.
        #[arg(long, required = true)]
        grid: Vec<String>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Paired runs with and without ground-truth pseudo-labels.
    Oracle {
        #[arg(long, default_value = BASE_PRESET)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/oracle")]
        out: PathBuf,
    },
    /// Rebuild the summary and charts of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Linear,
    Knn,
    Both,
}

fn with_seed(seed: Option<u64>, overrides: &[(String, String)]) -> Vec<(String, String)> {
    let mut all = overrides.to_vec();
    if let Some(seed) = seed {
        all.push(("train.seed".into(), seed.to_string()));
    }
    all
}

fn load_config(
    source: &str,
    seed: Option<u64>,
    overrides: &[(String, String)],
) -> Result<TrainConfig> {
    TrainConfig::load(source, &with_seed(seed, overrides))
}

fn write_run(out: &Path, trainer: &Trainer64, charts: bool) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(METRICS_FILE), render_csv(trainer.metrics()))?;
    checkpoint::save(trainer, &out.join(CHECKPOINT_FILE))?;
    report::write_report(
        out,
        trainer.metrics(),
        trainer.diagnostics(),
        Some(&trainer.config().to_toml()),
        charts,
    )
}

fn train(
    config: String,
    seed: Option<u64>,
    out: PathBuf,
    resume: Option<PathBuf>,
    charts: bool,
    overrides: &[(String, String)],
) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let mut t = checkpoint::load::<f64>(&path)?;
            let wanted = t.config().with_overrides(&with_seed(seed, overrides))?;
            if wanted.train.epochs != t.config().train.epochs {
                t.set_total_epochs(wanted.train.epochs)?;
            }
            let mut check = wanted.clone();
            check.train.epochs = t.config().train.epochs;
            if &check != t.config() {
                return Err(HarnessError::Config(
                    "only train.epochs may change when resuming".into(),
                ));
            }
            t
        }
        None => Trainer64::new(load_config(&config, seed, overrides)?)?,
    };
    while !trainer.is_finished() {
        let row = trainer.run_epoch()?;
        eprintln!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  pl_accuracy {:.3}",
            row.epoch, row.lr, row.loss_total, row.pl_accuracy
        );
    }
    write_run(&out, &trainer, charts)?;
    if let Some(last) = trainer.metrics().last() {
        println!(
            "epochs {}  pl_accuracy {:.4}  probe_linear {}  probe_knn {}",
            last.epoch,
            last.pl_accuracy,
            last.probe_linear.map_or("-".into(), |v| format!("{v:.4}")),
            last.probe_knn.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(path: PathBuf, mode: EvalMode) -> Result<()> {
    let trainer = checkpoint::load::<f64>(&path)?;
    let modes: &[(ProbeMode, &str)] = match mode {
        EvalMode::Linear => &[(ProbeMode::Linear, "linear")],
        EvalMode::Knn => &[(ProbeMode::Knn, "knn")],
        EvalMode::Both => &[(ProbeMode::Linear, "linear"), (ProbeMode::Knn, "knn")],
    };
    for (m, name) in modes {
        println!("{name} {:.4}", trainer.probe(*m)?);
    }
    Ok(())
}

fn ablate(
    config: String,
    seed: Option<u64>,
    grid: Vec<String>,
    out: PathBuf,
    overrides: &[(String, String)],
) -> Result<()> {
    let grid = GridSpec::parse(&grid)?;
    let base = load_config(&config, seed, overrides)?;
    let rows = run_ablation(&base, &grid, |row| {
        let cell: Vec<String> = row
            .cell
            .iter()
            .map(|(k, v)| format!("{}={v}", k.name()))
            .collect();
        eprintln!(
            "{}  probe_linear {}  pl_accuracy {:.4}",
            cell.join(" "),
            row.outcome
                .probe_linear
                .map_or("-".into(), |v| format!("{v:.4}")),
            row.outcome.pl_accuracy
        );
    })?;
    std::fs::create_dir_all(&out)?;
    let csv = render_ablation_csv(&grid, &rows);
    std::fs::write(out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn oracle(
    config: String,
    seed: Option<u64>,
    out: PathBuf,
    overrides: &[(String, String)],
) -> Result<()> {
    let report = run_oracle(&load_config(&config, seed, overrides)?)?;
    std::fs::create_dir_all(&out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("oracle.json"), format!("{text}\n"))?;
    println!("{text}");
    if !report.views_match {
        return Err(HarnessError::Malformed(
            "paired runs consumed different view streams".into(),
        ));
    }
    Ok(())
}

fn report_cmd(run: PathBuf) -> Result<()> {
    let rows = parse_csv(&std::fs::read_to_string(run.join(METRICS_FILE))?)?;
    let ckpt = run.join(CHECKPOINT_FILE);
    let (diagnostics, config) = if ckpt.exists() {
        let t = checkpoint::load::<f64>(&ckpt)?;
        (t.diagnostics().to_vec(), Some(t.config().to_toml()))
    } else {
        (Vec::new(), None)
    };
    report::write_report(&run, &rows, &diagnostics, config.as_deref(), true)?;
    println!("wrote {}", run.display());
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let takes_overrides = !matches!(cli.command, Command::Eval { .. } | Command::Report { .. });
    if !takes_overrides && !overrides.is_empty() {
        eprintln!("error: this subcommand does not take configuration overrides");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
            charts,
        } => train(config, seed, out, resume, charts, &overrides),
        Command::Eval { checkpoint, mode } => eval(checkpoint, mode),
        Command::Ablate {
            config,
            seed,
            grid,
            out,
        } => ablate(config, seed, grid, out, &overrides),
        Command::Oracle { config, seed, out } => oracle(config, seed, out, &overrides),
        Command::Report { run } => report_cmd(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
