//! Command-line front end: simulate, train, track, eval and plot-data.
//!
//! Failures print one JSON line on stderr,
//! `{"error":"<kind>","code":<exit code>,"message":"..."}`, and exit with a
//! code that identifies the kind. Set `GRUTRACK_LOG=info` for progress
//! messages on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gkf::{GainArch, GainNetwork};
use crate::io::{read_scenario, read_tracks, tool_version, write_scenario, write_text, write_tracks};
use crate::metrics::evaluate;
use crate::motion::{MotionModel, StateSpace};
use crate::neural::Checkpoint;
use crate::scene::Scenario;
use crate::simulator::generate_scenario;
use crate::tracker::{track_sequence, MotionMode};
use crate::trainer::{train, StepLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;
pub const EXIT_CONFIG: i32 = 6;
pub const EXIT_DIVERGED: i32 = 7;

const LOG_FORMAT: &str = "grutrack-train-log";
const REPORT_FORMAT: &str = "grutrack-eval-report";

#[derive(Debug, Parser)]
#[command(name = "grutrack", version, about = "3D multi-object tracking with a learnable Kalman gain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenarios.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output file, or directory when --count is above 1.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Number of scenarios, seeded consecutively.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Train the gain network on scenario files.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training scenario files.
        #[arg(long = "scenario", num_args = 1..)]
        scenarios: Vec<PathBuf>,
        /// Validation scenario files.
        #[arg(long = "val", num_args = 1..)]
        validation: Vec<PathBuf>,
        /// Checkpoint to continue from, including optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the tracker over a scenario or detection file.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        /// Motion module; defaults to the configured one.
        #[arg(long)]
        mode: Option<MotionMode>,
        /// Gain network checkpoint (gru mode).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Score a track file against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tracks: PathBuf,
        /// Scenario file holding the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Report file (JSON).
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Per class and recall level table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export training logs or evaluation reports as CSV series.
    PlotData {
        /// Training logs; each becomes one series named after its file.
        #[arg(long = "log", num_args = 1..)]
        logs: Vec<PathBuf>,
        /// Evaluation reports.
        #[arg(long = "report", num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

impl std::str::FromStr for MotionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ekf" => Ok(MotionMode::Ekf),
            "gru" => Ok(MotionMode::Gru),
            _ => Err(format!("unknown motion mode `{s}` (expected ekf or gru)")),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Schema { .. } | Error::InvalidBox(_) => EXIT_SCHEMA,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Config { .. } => EXIT_CONFIG,
        Error::Diverged(_) => EXIT_DIVERGED,
        Error::Shape { .. } | Error::NonFinite { .. } => EXIT_INTERNAL,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Schema { .. } => "schema",
        Error::InvalidBox(_) => "invalid_box",
        Error::Checkpoint(_) => "checkpoint",
        Error::Config { .. } => "config",
        Error::Diverged(_) => "diverged",
        Error::Shape { .. } => "shape",
        Error::NonFinite { .. } => "non_finite",
    }
}

/// The single stderr line printed for a failure.
pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    json!({ "error": kind, "code": code, "message": message.replace('\n', " ") }).to_string()
}

fn info(msg: impl AsRef<str>) {
    if matches!(std::env::var("GRUTRACK_LOG").as_deref(), Ok("info" | "debug")) {
        eprintln!("{}", msg.as_ref());
    }
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", EXIT_USAGE, first));
            return EXIT_USAGE;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(error_kind(&e), code, &e.to_string()));
            code
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(field, "no path given on the command line or in [paths]"))
}

fn load_scenarios(paths: &[PathBuf]) -> Result<Vec<Scenario>> {
    paths.iter().map(|p| read_scenario(p).map(|(_, s)| s)).collect()
}

fn model_name(cfg: &RunConfig) -> String {
    cfg.tracker.model.to_string()
}

fn configured_arch(cfg: &RunConfig) -> GainArch {
    let model = MotionModel::new(cfg.tracker.model);
    GainArch::new(model.dim(), model.obs_dim(), &cfg.train.gain)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, out, count } => {
            let cfg = load_config(&common)?;
            let out = required(out, &cfg.paths.output, "paths.output")?;
            if count == 0 {
                return Err(Error::config("count", "must be at least 1"));
            }
            for k in 0..count {
                let seed = cfg.seed + k;
                let scenario = generate_scenario(&cfg.simulate, seed)?;
                let mut echo = cfg.clone();
                echo.seed = seed;
                let path = if count == 1 {
                    out.clone()
                } else {
                    out.join(format!("scenario_{seed:06}.jsonl"))
                };
                write_scenario(&path, &scenario, &echo.echo())?;
                info(format!("wrote {}", path.display()));
            }
            Ok(())
        }
        Command::Train {
            common,
            scenarios,
            validation,
            resume,
            checkpoint,
            log,
        } => {
            let mut cfg = load_config(&common)?;
            if common.seed.is_some() {
                cfg.train.seed = cfg.seed;
            }
            let scenarios = if scenarios.is_empty() { cfg.paths.scenarios.clone() } else { scenarios };
            let validation = if validation.is_empty() { cfg.paths.validation.clone() } else { validation };
            let ck_path = required(checkpoint, &cfg.paths.checkpoint, "paths.checkpoint")?;
            let train_set = load_scenarios(&scenarios)?;
            let val_set = load_scenarios(&validation)?;
            let init = match resume {
                Some(p) => {
                    let ck = Checkpoint::read(&p)?;
                    let net = GainNetwork::from_checkpoint(&ck, &configured_arch(&cfg), &model_name(&cfg))?;
                    let opt = ck.optimizer_state(&net.params)?;
                    Some((net, opt))
                }
                None => None,
            };
            info(format!("training on {} scenarios", train_set.len()));
            let outcome = train(&train_set, &val_set, &cfg.tracker, &cfg.train, init)?;
            let mut ck = outcome.net.to_checkpoint(&model_name(&cfg), Some(&outcome.optimizer));
            ck.header["config"] = cfg.echo();
            ck.header["tool"] = Value::String(tool_version());
            write_text(&ck_path, &ck.to_json())?;
            if let Some(log_path) = log.or(cfg.paths.log.clone()) {
                write_text(&log_path, &train_log_to_string(&outcome.log, &cfg))?;
            }
            Ok(())
        }
        Command::Track {
            common,
            input,
            mode,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mode = mode.unwrap_or(cfg.motion_mode);
            let out = required(out, &cfg.paths.output, "paths.output")?;
            let (_, scenario) = read_scenario(&input)?;
            let net = match mode {
                MotionMode::Ekf => None,
                MotionMode::Gru => {
                    let path = required(checkpoint, &cfg.paths.checkpoint, "paths.checkpoint")?;
                    let ck = Checkpoint::read(&path)?;
                    Some(GainNetwork::from_checkpoint(&ck, &configured_arch(&cfg), &model_name(&cfg))?)
                }
            };
            let frames = track_sequence(&scenario.frames, mode, &cfg.tracker, net.as_ref())?;
            let mut echo = cfg.clone();
            echo.motion_mode = mode;
            write_tracks(&out, &frames, &echo.echo())
        }
        Command::Eval { common, tracks, gt, out, csv } => {
            let cfg = load_config(&common)?;
            let (_, pred) = read_tracks(&tracks)?;
            let (_, scenario) = read_scenario(&gt)?;
            let report = evaluate(&pred, &scenario.frames, &cfg.eval)?;
            println!("amota={} amotp={} ids={}", report.amota, report.amotp, report.ids);
            if let Some(out) = out.or(cfg.paths.output.clone()) {
                let doc = json!({
                    "format": REPORT_FORMAT,
                    "version": 1,
                    "tool": tool_version(),
                    "config": cfg.echo(),
                    "report": report,
                });
                write_text(&out, &(serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"))?;
            }
            if let Some(csv) = csv {
                write_text(&csv, &report.to_csv())?;
            }
            Ok(())
        }
        Command::PlotData { logs, reports, out } => {
            if logs.is_empty() == reports.is_empty() {
                return Err(Error::config("plot-data", "give either --log or --report inputs"));
            }
            let text = if logs.is_empty() {
                reports_to_csv(&reports)?
            } else {
                logs_to_csv(&logs)?
            };
            write_text(&out, &text)
        }
    }
}

pub fn train_log_to_string(log: &[StepLog], cfg: &RunConfig) -> String {
    let header = json!({
        "format": LOG_FORMAT,
        "version": 1,
        "tool": tool_version(),
        "config": cfg.echo(),
    });
    let mut out = header.to_string() + "\n";
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("log serializes"));
        out.push('\n');
    }
    out
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn schema(path: &Path, line: usize, field: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse_json(path: &Path, line: usize, text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| schema(path, line, "record", e.to_string()))
}

fn check_format(path: &Path, header: &Value, format: &str) -> Result<()> {
    if header["format"] != format {
        return Err(schema(path, 1, "format", format!("expected `{format}`")));
    }
    Ok(())
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn series_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loss and validation curves, one row per optimizer step.
fn logs_to_csv(paths: &[PathBuf]) -> Result<String> {
    let cols = ["step", "epoch", "lr", "loss", "annotation_loss", "pseudo_loss", "coverage", "grad_norm", "val_amota"];
    let mut out = format!("series,{}\n", cols.join(","));
    for path in paths {
        let lines = read_lines(path)?;
        let Some(first) = lines.first() else {
            return Err(schema(path, 1, "header", "empty file"));
        };
        check_format(path, &parse_json(path, 1, first)?, LOG_FORMAT)?;
        let name = series_name(path);
        for (i, line) in lines.iter().enumerate().skip(1) {
            let v = parse_json(path, i + 1, line)?;
            if v.get("step").is_none() {
                return Err(schema(path, i + 1, "step", "missing"));
            }
            let row: Vec<String> = cols.iter().map(|c| cell(&v[*c])).collect();
            out.push_str(&format!("{name},{}\n", row.join(",")));
        }
    }
    Ok(out)
}

/// MOTAR and MOTP against recall, one row per report, class and level.
fn reports_to_csv(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::from("series,class,recall,achieved,motar,motp,tp,fp,fn,ids\n");
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc = parse_json(path, 1, &text)?;
        check_format(path, &doc, REPORT_FORMAT)?;
        let report: crate::metrics::EvalReport = serde_json::from_value(doc["report"].clone())
            .map_err(|e| schema(path, 1, "report", e.to_string()))?;
        let name = series_name(path);
        for c in &report.classes {
            for r in &c.thresholds {
                out.push_str(&format!(
                    "{name},{},{},{},{},{},{},{},{},{}\n",
                    c.class_id,
                    r.recall,
                    r.achieved,
                    r.motar,
                    r.motp.map(|v| v.to_string()).unwrap_or_default(),
                    r.tp,
                    r.fp,
                    r.fn_,
                    r.ids
                ));
            }
        }
    }
    Ok(out)
}
