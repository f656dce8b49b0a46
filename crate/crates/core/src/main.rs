use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shiftcp::config::{EvalMode, RunConfig};
use shiftcp::experiment;
use shiftcp::io::{self, Cell, Orientation, Table};
use shiftcp::metrics::{self, SlopeFit};
use shiftcp::{numkit, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "shiftcp", version, about = "Conformal prediction sets under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the synthetic classifier and export model, data and probability tables.
    TrainDemo(RunArgs),
    /// Fit the conformal threshold and report calibration statistics.
    Calibrate(RunArgs),
    /// Offline evaluation of the configured methods.
    Evaluate(RunArgs),
    /// Online evaluation: predict, emit sets, then adapt, batch by batch.
    Stream(RunArgs),
    /// Coverage and size as a function of the entropy quantile level beta.
    SweepBeta(RunArgs),
    /// Log-log fit of the threshold ratio against the entropy quantile.
    DiagnoseScaling(RunArgs),
    /// Validate a logit table and optionally rewrite it as probabilities.
    Ingest(IngestArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Comma-separated list of methods.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    order: Option<String>,
    /// Entropy quantile level, or `auto` for 1 - alpha.
    #[arg(long)]
    beta: Option<String>,
    /// Sliding window for local coverage metrics.
    #[arg(long)]
    window: Option<String>,
    /// Comma-separated list of seeds.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    /// ACI step size.
    #[arg(long)]
    gamma: Option<String>,
    /// e.g. stationary(3), gradual, sudden.
    #[arg(long)]
    shift: Option<String>,
    /// Test (or combined) logit table.
    #[arg(long)]
    logits: Option<String>,
    /// Separate calibration logit table.
    #[arg(long)]
    cal_logits: Option<String>,
    /// raw_logits or probabilities.
    #[arg(long)]
    orientation: Option<String>,
    /// Calibration fraction when a single table is split.
    #[arg(long)]
    split: Option<String>,
    /// Output directory for CSV artifacts.
    #[arg(long)]
    output: Option<String>,
    /// Also write per-point records.
    #[arg(long)]
    per_point: bool,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Logit table to validate.
    path: PathBuf,
    #[arg(long, default_value = "probabilities")]
    orientation: String,
    /// Write the validated table as probabilities to this file.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self, mode: Option<EvalMode>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = mode {
            cfg.mode = mode;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("alpha", &self.alpha),
            ("methods", &self.method),
            ("order", &self.order),
            ("beta", &self.beta),
            ("window", &self.window),
            ("seeds", &self.seed),
            ("tta.batch_size", &self.batch_size),
            ("tta.lr", &self.lr),
            ("tta.momentum", &self.momentum),
            ("gamma", &self.gamma),
            ("shift.mode", &self.shift),
            ("input.logits", &self.logits),
            ("input.cal_logits", &self.cal_logits),
            ("input.orientation", &self.orientation),
            ("input.split", &self.split),
            ("output.dir", &self.output),
        ];
        for (key, val) in flags {
            if let Some(v) = val {
                cfg.set(key, v)?;
            }
        }
        if self.per_point {
            cfg.per_point = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(table: &Table, cfg: &RunConfig, file: &str) -> Result<()> {
    let bytes = table.to_csv()?;
    if let Some(dir) = &cfg.output_dir {
        io::write_bytes(&dir.join(file), &bytes)?;
    }
    io::print_bytes(&bytes);
    Ok(())
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let out = experiment::run_experiment(cfg)?;
    warn_all(&out.warnings);
    io::print_bytes(&io::report_csv(&out.report_rows())?);
    Ok(())
}

fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    let mut table = Table::new(&["dataset", "seed", "alpha", "n_cal", "tau", "temperature"]);
    for &seed in &cfg.seeds {
        let prep = experiment::prepare(cfg, seed)?;
        table.push(vec![
            prep.dataset.clone().into(),
            seed.into(),
            cfg.alpha.into(),
            prep.calib.n_cal().into(),
            prep.calib.tau().into(),
            prep.temperature.map_or(Cell::Text(String::new()), Cell::Real),
        ]);
    }
    emit(&table, cfg, "calibration.csv")
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let mut table = Table::new(&["dataset", "seed", "beta", "u_test", "coverage", "avg_size"]);
    for &seed in &cfg.seeds {
        let prep = experiment::prepare(cfg, seed)?;
        let rows = metrics::beta_sweep(&prep.test_probs, &prep.test_labels, &prep.calib, &cfg.betas, cfg.order, cfg.measure)?;
        for r in rows {
            table.push(vec![
                prep.dataset.clone().into(),
                seed.into(),
                r.beta.into(),
                r.u_test.into(),
                r.coverage.into(),
                r.avg_size.into(),
            ]);
        }
    }
    emit(&table, cfg, "beta_sweep.csv")
}

fn cmd_diagnose(cfg: &RunConfig) -> Result<()> {
    let mut points = Table::new(&["dataset", "seed", "alpha", "u_test", "tau_d", "tau_test", "ratio", "in_fit"]);
    for &seed in &cfg.seeds {
        let prep = experiment::prepare(cfg, seed)?;
        let diag = experiment::scaling_diagnostic(cfg, &prep)?;
        warn_all(&diag.warnings);
        for p in &diag.points {
            points.push(vec![
                prep.dataset.clone().into(),
                seed.into(),
                p.alpha.into(),
                p.u_test.into(),
                p.tau_d.into(),
                p.tau_test.into(),
                p.ratio.into(),
                p.in_fit.into(),
            ]);
        }
        match diag.fit {
            SlopeFit::Fitted { slope, intercept } => {
                eprintln!("seed {seed}: slope {} intercept {}", io::fmt_sig6(slope), io::fmt_sig6(intercept))
            }
            SlopeFit::NotApplicable(why) => eprintln!("seed {seed}: fit not applicable: {why}"),
        }
    }
    emit(&points, cfg, "scaling_diagnostic.csv")
}

fn cmd_train_demo(cfg: &RunConfig) -> Result<()> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("train-demo needs --output".into()))?;
    let out = experiment::train_demo(cfg, &dir)?;
    warn_all(&out.warnings);
    println!("clean_accuracy,{}", io::fmt_sig6(out.clean_accuracy));
    println!("temperature,{}", io::fmt_sig6(out.params.temperature));
    for path in &out.written {
        println!("wrote,{}", path.display());
    }
    Ok(())
}

fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    let orientation: Orientation = args
        .orientation
        .parse()
        .map_err(|_| Error::Config(format!("unknown orientation '{}'", args.orientation)))?;
    let table = io::load_logit_table(&args.path, orientation)?;
    let n = table.len();
    let correct = table.probs.iter().zip(&table.labels).filter(|(p, &y)| p.argmax() == y).count();
    let mean_entropy = table.probs.iter().map(numkit::entropy).sum::<f64>() / n.max(1) as f64;
    println!("rows,{n}");
    println!("classes,{}", table.num_classes());
    println!("accuracy,{}", io::fmt_sig6(correct as f64 / n.max(1) as f64));
    println!("mean_entropy,{}", io::fmt_sig6(mean_entropy));
    if let Some(out) = &args.output {
        let rows: Vec<Vec<f64>> = table.probs.iter().map(|p| p.as_slice().to_vec()).collect();
        write_table(out, &table.labels, &rows)?;
    }
    Ok(())
}

fn write_table(path: &Path, labels: &[usize], rows: &[Vec<f64>]) -> Result<()> {
    io::write_bytes(path, &io::logit_table_csv(labels, rows)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDemo(a) => cmd_train_demo(&a.into_config(None)?),
        Command::Calibrate(a) => cmd_calibrate(&a.into_config(None)?),
        Command::Evaluate(a) => cmd_run(&a.into_config(Some(EvalMode::Offline))?),
        Command::Stream(a) => cmd_run(&a.into_config(Some(EvalMode::Stream))?),
        Command::SweepBeta(a) => cmd_sweep(&a.into_config(None)?),
        Command::DiagnoseScaling(a) => cmd_diagnose(&a.into_config(None)?),
        Command::Ingest(a) => cmd_ingest(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
