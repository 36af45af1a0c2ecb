//! `wban`: run simulations, sweeps, model tables and the payload optimizer.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 optimizer did not
//! converge (its trace is still written), 1 anything else (I/O).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use wban_core::analytics::{
    fer_analytic, residual_per, retry_success_geometric, retry_success_binomial, DEFAULT_J_MAX,
};
use wban_core::frame::dump;
use wban_core::optimizer::{optimize_payload, GradientMode, OptimizeError, OptimizeOptions};
use wban_core::sim::{
    parse_values, run_experiment, sweep, ConfigError, ExperimentConfig, SimError, SweepAxis,
};
use wban_core::{PayloadModel, RetryModel};

const SEED_ENV: &str = "WBAN_SEED";

#[derive(Parser)]
#[command(name = "wban", version, about = "Body-area network MAC simulator and models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; one CSV row per node link.
    Simulate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Write the primitive trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run one experiment per value of a parameter.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// distance, max_retries or payload_len.
        #[arg(long)]
        axis: String,
        /// `1,2,5`, `0..4` or `5..30 step 5`.
        #[arg(long)]
        values: String,
    },
    /// Tabulate a closed-form model.
    Analyze {
        #[command(subcommand)]
        model: Model,
    },
    /// Barrier optimization of the payload length.
    Optimize {
        #[arg(long)]
        p_ber: f64,
        #[arg(long, default_value_t = 10.0)]
        start: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iterations: usize,
        /// Upper end of the payload search interval in bytes.
        #[arg(long, default_value_t = 255.0)]
        max_payload: f64,
        /// Descend along the reduced gradient formula instead of the exact one.
        #[arg(long)]
        reduced_gradient: bool,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Frame codec utilities.
    Codec {
        #[command(subcommand)]
        cmd: CodecCmd,
    },
}

#[derive(Subcommand)]
enum Model {
    /// Retry success models over attempts and frame error rates.
    Retry {
        /// Attempt counts m (`1..30`).
        #[arg(long, default_value = "1..30")]
        attempts: String,
        #[arg(long, default_value = "0.005,0.01,0.05,0.1,0.2,0.3")]
        p_fer: String,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Frame error rate over payload lengths and bit error rates.
    Payload {
        #[arg(long, default_value = "0..30")]
        payload: String,
        #[arg(long, default_value = "0.00001,0.0001,0.001,0.01")]
        p_ber: String,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Subcommand)]
enum CodecCmd {
    /// Print hex and decoded fields of an encoded frame.
    Dump { hex: String },
}

#[derive(Args)]
struct ExperimentArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct OutputArgs {
    /// CSV destination; a `.manifest.json` is written beside it. Stdout if omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    NoConvergence,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Other(e.into())
    }
}

fn load_config(args: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("seed", &seed).map_err(|_| {
            Failure::Usage(format!("{SEED_ENV}=`{seed}` is not an unsigned integer"))
        })?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn num(v: f64) -> String {
    v.to_string()
}

/// CSV sink: a file plus manifest, or stdout.
struct Sink {
    path: Option<PathBuf>,
    writer: csv::Writer<Box<dyn Write>>,
}

impl Sink {
    fn open(out: &OutputArgs) -> Result<Self> {
        let inner: Box<dyn Write> = match &out.output {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                }
                Box::new(io::BufWriter::new(
                    fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                ))
            }
            None => Box::new(io::stdout()),
        };
        Ok(Self {
            path: out.output.clone(),
            writer: csv::Writer::from_writer(inner),
        })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    /// Flush and, for file output, write the manifest.
    fn finish(mut self, manifest: serde_json::Value, extra: &[&Path]) -> Result<()> {
        self.writer.flush()?;
        if let Some(path) = &self.path {
            let mut outputs = vec![path.display().to_string()];
            outputs.extend(extra.iter().map(|p| p.display().to_string()));
            let mut m = manifest;
            m["tool_version"] = json!(env!("CARGO_PKG_VERSION"));
            m["outputs"] = json!(outputs);
            let mpath = manifest_path(path);
            fs::write(&mpath, serde_json::to_string_pretty(&m)? + "\n")
                .with_context(|| format!("writing {}", mpath.display()))?;
        }
        Ok(())
    }
}

fn manifest_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    csv.with_file_name(name)
}

fn experiment_manifest(command: &str, cfg: &ExperimentConfig) -> serde_json::Value {
    json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_text(),
    })
}

fn simulate(exp: &ExperimentArgs, trace: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = load_config(exp)?;
    cfg.trace = trace.is_some();
    let result = run_experiment(&cfg)?;
    let mut sink = Sink::open(&exp.out)?;
    sink.row(["node", "distance_m", "ber", "s_frm", "r_frm", "s_pkt", "r_pkt", "fer", "per"])?;
    for l in &result.links {
        let c = l.counters;
        sink.row([
            l.node.0.to_string(),
            num(l.distance_m),
            num(l.ber),
            c.s_frm.to_string(),
            c.r_frm.to_string(),
            c.s_pkt.to_string(),
            c.r_pkt.to_string(),
            num(c.fer()),
            num(c.per()),
        ])?;
    }
    let mut extra = Vec::new();
    if let Some(path) = trace {
        let lines: String = result.trace.iter().map(|r| format!("{r}\n")).collect();
        fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
        extra.push(path);
    }
    sink.finish(experiment_manifest("simulate", &cfg), &extra)?;
    Ok(())
}

fn run_sweep(exp: &ExperimentArgs, axis: &str, values: &str) -> Result<(), Failure> {
    let cfg = load_config(exp)?;
    let axis: SweepAxis = axis.parse()?;
    let values = parse_values(values)?;
    let rows = sweep(&cfg, axis, &values)?;
    let mut sink = Sink::open(&exp.out)?;
    sink.row(["axis", "value", "s_frm", "r_frm", "s_pkt", "r_pkt", "fer", "per"])?;
    for r in &rows {
        let c = r.counters;
        sink.row([
            axis.to_string(),
            num(r.value),
            c.s_frm.to_string(),
            c.r_frm.to_string(),
            c.s_pkt.to_string(),
            c.r_pkt.to_string(),
            num(c.fer()),
            num(c.per()),
        ])?;
    }
    let mut m = experiment_manifest("sweep", &cfg);
    m["axis"] = json!(axis.to_string());
    m["values"] = json!(values);
    sink.finish(m, &[])?;
    Ok(())
}

fn grid(key: &str, values: &str) -> Result<Vec<f64>, Failure> {
    parse_values(values).map_err(|e| Failure::Usage(format!("--{key}: {e}")))
}

fn analyze(model: &Model) -> Result<(), Failure> {
    match model {
        Model::Retry {
            attempts,
            p_fer,
            out,
        } => {
            let ms = grid("attempts", attempts)?;
            let ps = grid("p-fer", p_fer)?;
            let mut sink = Sink::open(out)?;
            sink.row(["attempts", "p_fer", "success_binomial", "success_geometric", "residual_per"])?;
            for &m in &ms {
                if m.fract() != 0.0 || m < 1.0 {
                    return Err(Failure::Usage(format!("--attempts: {m} is not a positive integer")));
                }
                for &p in &ps {
                    let params = RetryModel::new(m as u32, p)
                        .map_err(|e| Failure::Usage(format!("m={m} p_fer={p}: {e}")))?;
                    sink.row([
                        (m as u32).to_string(),
                        num(p),
                        num(retry_success_binomial(&params)),
                        num(retry_success_geometric(&params)),
                        num(residual_per(&params)),
                    ])?;
                }
            }
            sink.finish(
                json!({"command": "analyze retry", "attempts": ms, "p_fer": ps}),
                &[],
            )?;
        }
        Model::Payload {
            payload,
            p_ber,
            out,
        } => {
            let xs = grid("payload", payload)?;
            let ps = grid("p-ber", p_ber)?;
            let mut sink = Sink::open(out)?;
            sink.row(["payload", "p_ber", "l_data", "l_ack", "fer"])?;
            for &x in &xs {
                for &p in &ps {
                    let params = PayloadModel::new(x, p)
                        .map_err(|e| Failure::Usage(format!("payload={x} p_ber={p}: {e}")))?;
                    sink.row([
                        num(x),
                        num(p),
                        num(params.l_data()),
                        num(params.l_ack()),
                        num(fer_analytic(&params)),
                    ])?;
                }
            }
            sink.finish(
                json!({"command": "analyze payload", "payload": xs, "p_ber": ps, "j_max": DEFAULT_J_MAX}),
                &[],
            )?;
        }
    }
    Ok(())
}

fn optimize(
    p_ber: f64,
    start: f64,
    tolerance: f64,
    max_iterations: usize,
    max_payload: f64,
    reduced: bool,
    out: &OutputArgs,
) -> Result<(), Failure> {
    let opts = OptimizeOptions {
        tolerance,
        max_iterations,
        max_payload,
        mode: if reduced {
            GradientMode::Reduced
        } else {
            GradientMode::True
        },
        ..Default::default()
    };
    let (report, converged) = match optimize_payload(p_ber, start, &opts) {
        Ok(r) => (r, true),
        Err(OptimizeError::NonConvergence(r)) => (*r, false),
        Err(OptimizeError::Domain(e)) => return Err(Failure::Usage(e.to_string())),
    };
    let mut sink = Sink::open(out)?;
    sink.row(["iteration", "payload", "epsilon", "objective"])?;
    for t in &report.trace {
        sink.row([t.iteration.to_string(), num(t.payload), num(t.epsilon), num(t.objective)])?;
    }
    sink.finish(
        json!({
            "command": "optimize",
            "p_ber": p_ber,
            "start": start,
            "tolerance": tolerance,
            "max_iterations": max_iterations,
            "max_payload": max_payload,
            "gradient": if reduced { "reduced" } else { "true" },
        }),
        &[],
    )?;
    eprintln!(
        "payload* = {} after {} iterations ({}); floor {} fer {}; ceil {} fer {}; best integer {} fer {}",
        report.payload,
        report.iterations,
        if converged { "converged" } else { "not converged" },
        report.floor,
        report.floor_fer,
        report.ceil,
        report.ceil_fer,
        report.best_integer,
        report.best_fer,
    );
    if converged {
        Ok(())
    } else {
        Err(Failure::NoConvergence)
    }
}

fn codec_dump(hex_str: &str) -> Result<(), Failure> {
    let cleaned: String = hex_str.chars().filter(|c| !c.is_whitespace()).collect();
    let bytes = hex::decode(&cleaned).map_err(|e| Failure::Usage(format!("bad hex: {e}")))?;
    println!("{}", dump(&bytes));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { exp, trace } => simulate(exp, trace.as_deref()),
        Command::Sweep { exp, axis, values } => run_sweep(exp, axis, values),
        Command::Analyze { model } => analyze(model),
        Command::Optimize {
            p_ber,
            start,
            tolerance,
            max_iterations,
            max_payload,
            reduced_gradient,
            out,
        } => optimize(
            *p_ber,
            *start,
            *tolerance,
            *max_iterations,
            *max_payload,
            *reduced_gradient,
            out,
        ),
        Command::Codec {
            cmd: CodecCmd::Dump { hex },
        } => codec_dump(hex),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::NoConvergence) => ExitCode::from(3),
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
