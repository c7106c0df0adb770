//! Command-line front end: `evaluate`, `simulate`, `metrics`, `report`.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, Scenario, ScenarioConfig, CONFIG_ENV};
use crate::domain::{ConfusionMatrix, PredictionRecord};
use crate::energy::{evaluate_policy, extension_ratio, write_report_csv, ScenarioReport};
use crate::metrics::{macro_metrics, macro_pr, write_pr_csv};
use crate::net::{run_realtime, RealtimeOptions};
use crate::qrm::log::{read_log_file, NdjsonSink, Tee};
use crate::qrm::{summarize, Collector, Summarizer, Summary};
use crate::sim::{run_virtual, RunOptions, SharedSink};

#[derive(Debug, Parser)]
#[command(name = "qrm-edge", version, about = "Energy-aware reconfigurable edge runtime")]
pub struct Cli {
    /// Scenario configuration (TOML). Defaults to the built-in scenarios.
    #[arg(long, global = true, value_name = "PATH", env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form working time and weighted F1 for policies.
    Evaluate(EvaluateArgs),
    /// Run simulated nodes against the collector until their batteries die.
    Simulate(SimulateArgs),
    /// Accuracy, macro precision/recall/F1 and PR curves from predictions.
    Metrics(MetricsArgs),
    /// Re-summarize an existing monitoring log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Policy names to evaluate.
    #[arg(value_name = "NAME", required_unless_present = "all")]
    pub names: Vec<String>,
    /// Evaluate every configured policy.
    #[arg(long, conflicts_with = "names")]
    pub all: bool,
    /// Add extension and F1 delta columns relative to this policy.
    #[arg(long, value_name = "NAME")]
    pub baseline: Option<String>,
    /// Output directory for scenarios.csv and scenarios.ndjson.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Policy applied to every node (default: per-node or active policy).
    #[arg(long, value_name = "NAME")]
    pub policy: Option<String>,
    /// Replace the configured node list with `node-1..=node-N`.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..=1000))]
    pub nodes: Option<u32>,
    /// Base RNG seed; node i uses seed + i unless configured explicitly.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Collector TCP port for real-time runs.
    #[arg(long, value_name = "N")]
    pub port: Option<u16>,
    /// Run over TCP against the wall clock instead of in virtual time.
    #[arg(long)]
    pub realtime: bool,
    /// Virtual seconds per wall-clock second in real-time runs.
    #[arg(long, value_name = "N", requires = "realtime")]
    pub speedup: Option<f64>,
    /// Output directory for the log, summary and CSVs.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// NDJSON file, one `{"true":k,"confidences":[...]}` per line.
    #[arg(value_name = "FILE")]
    pub file: PathBuf,
    /// Output directory for pr_curve.csv and metrics.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Monitoring log written by `simulate`.
    #[arg(value_name = "LOG")]
    pub log: PathBuf,
    /// Output directory (default: the log's directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

fn runtime(context: &str) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

/// Parse arguments, run, and map the outcome onto the exit-code contract.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut stdout = io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let config = ScenarioConfig::load_or_default(cli.config.as_deref())?;
    let scenario = config.resolve()?;
    match cli.command {
        Command::Evaluate(args) => evaluate(&scenario, args, stdout),
        Command::Simulate(args) => simulate(&scenario, args, stdout),
        Command::Metrics(args) => metrics(&scenario, args, stdout),
        Command::Report(args) => report(&scenario, args, stdout),
    }
}

fn out_dir(explicit: Option<PathBuf>, scenario: &Scenario) -> Result<PathBuf, CliError> {
    let dir = explicit.unwrap_or_else(|| scenario.config.output.dir.clone());
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, fill: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
    let context = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(runtime(&context))?);
    fill(&mut w).and_then(|()| w.flush()).map_err(runtime(&context))
}

fn print(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout.write_all(text.as_bytes()).map_err(runtime("stdout"))
}

fn evaluate(scenario: &Scenario, args: EvaluateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let names: Vec<String> = if args.all {
        scenario.policies.iter().map(|p| p.name.clone()).collect()
    } else {
        args.names
    };
    let capacity = scenario.config.capacity_wh;
    let eval = |name: &str| -> Result<ScenarioReport, CliError> {
        let policy = scenario.policy(name)?;
        evaluate_policy(policy, &scenario.modes, capacity).map_err(|e| CliError::Usage(format!("{name}: {e}")))
    };
    let reports = names.iter().map(|n| eval(n)).collect::<Result<Vec<_>, _>>()?;
    let baseline = args.baseline.as_deref().map(eval).transpose()?;

    let mut table = String::new();
    let _ = write!(table, "{:<14} {:>10} {:>12} {:>8} {:>9}", "scenario", "time", "seconds", "F1", "reconfigs");
    if baseline.is_some() {
        let _ = write!(table, " {:>10} {:>8}", "extension", "F1 delta");
    }
    table.push('\n');
    for r in &reports {
        let _ = write!(
            table,
            "{:<14} {:>10} {:>12.3} {:>8.2} {:>9}",
            r.policy,
            r.display_time(),
            r.total_working_time_s,
            r.weighted_f1_pct,
            r.reconfiguration_count
        );
        if let Some(b) = &baseline {
            let ext = extension_ratio(r, b).unwrap_or(f64::NAN);
            let _ = write!(table, " {:>9.2}% {:>8.2}", ext, r.weighted_f1_pct - b.weighted_f1_pct);
        }
        table.push('\n');
    }
    print(stdout, &table)?;

    let dir = out_dir(args.out, scenario)?;
    write_file(&dir.join("scenarios.csv"), |w| write_report_csv(w, &reports, baseline.as_ref()))?;
    write_file(&dir.join("scenarios.ndjson"), |w| {
        reports.iter().try_for_each(|r| writeln!(w, "{}", r.to_ndjson()))
    })
}

fn write_summary_files(dir: &Path, summary: &Summary) -> Result<(), CliError> {
    write_file(&dir.join("summary.txt"), |w| w.write_all(summary.render_text().as_bytes()))?;
    write_file(&dir.join("histogram.csv"), |w| summary.write_histogram_csv(w))?;
    write_file(&dir.join("timeline.csv"), |w| summary.write_timeline_csv(w))
}

fn simulate(scenario: &Scenario, args: SimulateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let nodes = scenario.node_configs(
        args.policy.as_deref(),
        args.nodes.map(|n| n as usize),
        args.seed,
    )?;
    let speedup = args.speedup.unwrap_or(scenario.config.time_scale);
    if !(speedup.is_finite() && speedup > 0.0) {
        return Err(CliError::Usage(format!("speedup must be positive, got {speedup}")));
    }
    let assignment = scenario.policy_assignment(&nodes)?;
    let configs: Vec<_> = nodes.into_iter().map(|(c, _)| c).collect();
    let dir = out_dir(args.out, scenario)?;
    let log_path = dir.join(&scenario.config.output.log_file);
    let log_file = File::create(&log_path).map_err(runtime(&log_path.display().to_string()))?;

    let summary = if args.realtime {
        // unbuffered so an interrupted run still leaves a complete prefix
        let summarizer = Arc::new(Mutex::new(Summarizer::new()));
        let sink = Tee(NdjsonSink::new(log_file), SharedSink(Arc::clone(&summarizer)));
        let collector = Collector::new(assignment, scenario.collector_settings(), Box::new(sink));
        let port = args.port.unwrap_or(scenario.config.collector.port);
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
        eprintln!("collector listening on {addr}, speed-up {speedup}x");
        let options = RealtimeOptions {
            speedup,
            ..Default::default()
        };
        let (collector, _) = run_realtime(collector, addr, configs, &scenario.modes, options)
            .map_err(|e| CliError::Runtime(format!("real-time run: {e}")))?;
        drop(collector);
        let summarizer = Arc::try_unwrap(summarizer)
            .map_err(|_| CliError::Runtime("collector still running".into()))?
            .into_inner()
            .unwrap_or_else(|p| p.into_inner());
        summarizer.finish(&scenario.modes)
    } else {
        let sink = NdjsonSink::new(BufWriter::new(log_file));
        let outcome = run_virtual(
            configs,
            assignment,
            scenario.collector_settings(),
            &scenario.modes,
            Box::new(sink),
            RunOptions {
                record_predictions: true,
                horizon: None,
            },
        )
        .map_err(|e| CliError::Runtime(format!("simulation: {e}")))?;
        write_file(&dir.join("predictions.ndjson"), |w| {
            for r in &outcome.predictions {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        outcome.summary
    };
    write_summary_files(&dir, &summary)?;
    print(stdout, &summary.render_text())
}

/// Read prediction records, reporting the first bad line by number.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
    let mut records = Vec::new();
    let mut num_classes = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| CliError::Usage(format!("{}:{}: {msg}", path.display(), i + 1));
        let record: PredictionRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let k = *num_classes.get_or_insert(record.confidences.len());
        record.validate(k).map_err(|e| at(e.to_string()))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!("{}: no prediction records", path.display())));
    }
    Ok(records)
}

fn metrics(scenario: &Scenario, args: MetricsArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let records = read_predictions(&args.file)?;
    let k = records[0].confidences.len();
    let labels: Vec<String> = if scenario.class_labels.len() == k {
        scenario.class_labels.clone()
    } else {
        (0..k).map(|c| c.to_string()).collect()
    };
    let cm = ConfusionMatrix::from_records(labels.clone(), &records).map_err(|e| CliError::Usage(e.to_string()))?;
    let m = macro_metrics(&cm).map_err(|e| CliError::Usage(e.to_string()))?;
    let pr = macro_pr(&records, k).map_err(|e| CliError::Usage(e.to_string()))?;
    for &c in &pr.excluded {
        eprintln!("warning: class `{}` has no positive examples; excluded from PR averages", labels[c]);
    }
    let mut text = String::new();
    let _ = writeln!(text, "records          {}", records.len());
    let _ = writeln!(text, "accuracy         {:.6}", m.accuracy);
    let _ = writeln!(text, "macro precision  {:.6}", m.precision);
    let _ = writeln!(text, "macro recall     {:.6}", m.recall);
    let _ = writeln!(text, "macro F1         {:.6}", m.f1);
    let _ = writeln!(text, "macro AUC        {:.6}", pr.macro_auc);
    print(stdout, &text)?;

    let dir = out_dir(args.out, scenario)?;
    write_file(&dir.join("pr_curve.csv"), |w| write_pr_csv(w, &labels, &pr))?;
    let excluded: Vec<&str> = pr.excluded.iter().map(|&c| labels[c].as_str()).collect();
    let report = serde_json::json!({
        "records": records.len(),
        "accuracy": m.accuracy,
        "macro_precision": m.precision,
        "macro_recall": m.recall,
        "macro_f1": m.f1,
        "macro_auc": pr.macro_auc,
        "excluded_classes": excluded,
    });
    write_file(&dir.join("metrics.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n")
    })
}

fn report(scenario: &Scenario, args: ReportArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let entries = read_log_file(&args.log).map_err(|e| CliError::Usage(format!("{}: {e}", args.log.display())))?;
    let summary = summarize(&entries, &scenario.modes);
    let dir = match args.out {
        Some(d) => d,
        None => args.log.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    fs::create_dir_all(&dir).map_err(runtime(&dir.display().to_string()))?;
    write_summary_files(&dir, &summary)?;
    print(stdout, &summary.render_text())
}
