//! Command-line front end: `simulate`, `estimate` and `evaluate`.
//!
//! Results go to standard output (or `--out`), diagnostics and the resolved
//! parameter echo to standard error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::estimator::{self, EstimationReport, EstimatorError, EstimatorParams, SweepRow, SweepSpec};
use crate::events::{self, EventError, EventFormat, EventStream, Micros};
use crate::extraction;
use crate::simulator::{self, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NO_ESTIMATE: i32 = 3;

/// Caps the worker pool size.
pub const THREADS_ENV: &str = "EVTACH_THREADS";

#[derive(Parser, Debug)]
#[command(name = "evtach", version, about = "Rotational speed estimation from event camera streams")]
pub struct Cli {
    /// More diagnostics on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a scene and write its events and ground truth.
    Simulate(SimulateArgs),
    /// Estimate the speed of every rotating target in an event file.
    Estimate(EstimateArgs),
    /// Run a seeded accuracy sweep over speeds and blade counts.
    Evaluate(EvaluateArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scene JSON; a single 3-blade propeller at 3000 rpm when omitted.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Event file; `.bin`/`.evt` selects the binary format.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth JSON; defaults to `truth.json` next to the event file.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Overrides the scene seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct ParamArgs {
    /// Slice length (µs).
    #[arg(long)]
    pub t_l: Option<Micros>,
    /// Coarse step between slice starts (µs).
    #[arg(long)]
    pub t_s_initial: Option<Micros>,
    /// Refinement scale factor in (0, 1).
    #[arg(long)]
    pub eta: Option<f64>,
    /// Spatial units per millisecond on the time axis.
    #[arg(long)]
    pub temporal_scale: Option<f64>,
    /// Heatmap cell size (px).
    #[arg(long)]
    pub grid_size: Option<u32>,
    /// Heatmap candidate threshold, fraction of the hottest cell.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Largest number of targets considered.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Slice pairs per estimate.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Capture window analysed from the start of the stream (µs).
    #[arg(long)]
    pub capture_len: Option<Micros>,
}

impl ParamArgs {
    pub fn resolve(&self) -> EstimatorParams {
        let mut p = EstimatorParams::default();
        if let Some(v) = self.t_l {
            p.t_l = v;
        }
        if let Some(v) = self.t_s_initial {
            p.t_s_initial = v;
        }
        if let Some(v) = self.eta {
            p.eta = v;
        }
        if let Some(v) = self.temporal_scale {
            p.temporal_scale = v;
        }
        if let Some(v) = self.grid_size {
            p.extraction.grid_size = v;
        }
        if let Some(v) = self.epsilon {
            p.extraction.epsilon = v;
        }
        if let Some(v) = self.k_max {
            p.extraction.k_max = v;
        }
        if let Some(v) = self.pairs {
            p.n_pairs = v;
        }
        if let Some(v) = self.capture_len {
            p.capture_len = v;
        }
        p
    }
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Event file (CSV or binary by extension).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutputFormat,
    /// Also write the capture-window heatmap as CSV.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[command(flatten)]
    pub params: ParamArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Base scene JSON; a single 3-blade propeller when omitted. Every
    /// propeller is set to the swept speed and blade count.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: OutputFormat,
    #[arg(long, value_delimiter = ',', default_values_t = [300.0, 600.0, 1000.0, 2000.0, 3000.0, 4500.0, 6000.0])]
    pub speeds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [3u32])]
    pub blades: Vec<u32>,
    /// Seeded runs per configuration.
    #[arg(long, default_value_t = 30)]
    pub repeats: usize,
    /// Seed of the first run; run i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub params: ParamArgs,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<EventError> for CliError {
    fn from(e: EventError) -> Self {
        let code = match e {
            EventError::Io { .. } => EXIT_IO,
            _ => EXIT_INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn read_scene(path: &Path) -> Result<SceneSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_INVALID, format!("{}: invalid scene: {e}", path.display())))
}

fn write_output(out: Option<&Path>, body: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, body).map_err(|e| io_error(path, e)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(body.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| io_error(Path::new("<stdout>"), e))
        }
    }
}

fn echo<T: Serialize>(label: &str, value: &T) {
    eprintln!("{label}: {}", serde_json::to_string(value).expect("serializable"));
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut scene = match &args.input {
        Some(path) => read_scene(path)?,
        None => SceneSpec::single(3000.0, 0),
    };
    if let Some(seed) = args.seed {
        scene.seed = seed;
    }
    echo("scene", &scene);
    let sim = simulator::simulate(&scene).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?;
    log::info!("simulated {} events", sim.stream.len());

    events::store_events(&sim.stream, &args.out, EventFormat::from_path(&args.out))?;
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("truth.json"));
    let truth = serde_json::to_string_pretty(&sim.truth).expect("serializable") + "\n";
    fs::write(&truth_path, truth).map_err(|e| io_error(&truth_path, e))?;
    log::info!("wrote {} and {}", args.out.display(), truth_path.display());
    Ok(())
}

#[derive(Serialize)]
struct TargetJson {
    id: usize,
    centroid: [f64; 2],
    rpm_initial: Option<f64>,
    rpm_refined: Option<f64>,
    direction: Option<i8>,
    theta_c: Option<f64>,
    n_blades: Option<u32>,
    n_events: usize,
    pairs_converged: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct EstimateJson<'a> {
    targets: Vec<TargetJson>,
    params: &'a EstimatorParams,
}

fn targets_json(report: &EstimationReport) -> Vec<TargetJson> {
    report
        .targets
        .iter()
        .map(|t| match &t.outcome {
            Ok(e) => TargetJson {
                id: t.id,
                centroid: t.centroid,
                rpm_initial: Some(e.rpm_initial),
                rpm_refined: Some(e.rpm_refined),
                direction: Some(e.direction),
                theta_c: Some(e.theta_c),
                n_blades: Some(e.n_blades),
                n_events: t.n_events,
                pairs_converged: Some(e.pairs_converged()),
                error: None,
            },
            Err(msg) => TargetJson {
                id: t.id,
                centroid: t.centroid,
                rpm_initial: None,
                rpm_refined: None,
                direction: None,
                theta_c: None,
                n_blades: None,
                n_events: t.n_events,
                pairs_converged: None,
                error: Some(msg.clone()),
            },
        })
        .collect()
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn estimate_csv(targets: &[TargetJson]) -> String {
    let mut out = String::from("id,cx,cy,rpm_initial,rpm_refined,direction,theta_c,n_blades,n_events,pairs_converged,error\n");
    for t in targets {
        let error = t.error.as_deref().unwrap_or("").replace(['"', ','], " ");
        out += &format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            t.id,
            t.centroid[0],
            t.centroid[1],
            opt(&t.rpm_initial),
            opt(&t.rpm_refined),
            opt(&t.direction),
            opt(&t.theta_c),
            opt(&t.n_blades),
            t.n_events,
            opt(&t.pairs_converged),
            error
        );
    }
    out
}

fn load_input(path: &Path) -> Result<Option<EventStream>, CliError> {
    let meta = fs::metadata(path).map_err(|e| io_error(path, e))?;
    if meta.len() == 0 {
        return Ok(None);
    }
    Ok(Some(events::load_events(path, EventFormat::from_path(path))?))
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let params = args.params.resolve();
    echo("params", &params);
    params.validate().map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?;
    let Some(stream) = load_input(&args.input)? else {
        return Err(CliError::new(EXIT_NO_ESTIMATE, format!("{}: no events", args.input.display())));
    };
    log::info!("loaded {} events, duration {} us", stream.len(), stream.duration());

    if let Some(path) = &args.heatmap {
        let capture = stream.slice(0, params.capture_len);
        let map = extraction::build_heatmap(&capture, params.extraction.grid_size);
        fs::write(path, map.to_csv()).map_err(|e| io_error(path, e))?;
    }

    let report = estimator::estimate_speed(&stream, &params).map_err(|e| match e {
        EstimatorError::InvalidParams(_) => CliError::new(EXIT_INVALID, e.to_string()),
        _ => CliError::new(EXIT_NO_ESTIMATE, e.to_string()),
    })?;
    for t in &report.targets {
        if let Err(msg) = &t.outcome {
            log::warn!("target {} failed: {msg}", t.id);
        }
    }
    let targets = targets_json(&report);
    let body = match args.format {
        OutputFormat::Json => {
            serde_json::to_string_pretty(&EstimateJson {
                targets,
                params: &params,
            })
            .expect("serializable")
                + "\n"
        }
        OutputFormat::Csv => estimate_csv(&targets),
    };
    write_output(args.out.as_deref(), &body)?;
    if report.estimates().next().is_none() {
        return Err(CliError::new(EXIT_NO_ESTIMATE, "no target produced an estimate"));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateJson<'a> {
    rows: &'a [SweepRow],
    sweep: &'a SweepSpec,
    params: &'a EstimatorParams,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("speed,n_blades,rmae_initial,rmae_refined,mean_runtime_ms\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{}\n",
            r.speed, r.n_blades, r.rmae_initial, r.rmae_refined, r.mean_runtime_ms
        );
    }
    out
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let base = match &args.input {
        Some(path) => read_scene(path)?,
        None => SceneSpec::single(3000.0, args.seed),
    };
    let sweep = SweepSpec {
        speeds: args.speeds.clone(),
        blades: args.blades.clone(),
        repeats: args.repeats,
        seed: args.seed,
    };
    let params = args.params.resolve();
    echo("params", &params);
    echo("sweep", &sweep);
    let rows = estimator::evaluate_sweep(&base, &sweep, &params).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?;
    let body = match args.format {
        OutputFormat::Csv => sweep_csv(&rows),
        OutputFormat::Json => {
            serde_json::to_string_pretty(&EvaluateJson {
                rows: &rows,
                sweep: &sweep,
                params: &params,
            })
            .expect("serializable")
                + "\n"
        }
    };
    write_output(args.out.as_deref(), &body)
}

/// Worker count from `EVTACH_THREADS`; `None` when unset or invalid.
pub fn thread_cap() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}, expected a positive integer");
            None
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_INVALID;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("EVTACH_LOG")
        .target(env_logger::Target::Stderr)
        .init();
}
