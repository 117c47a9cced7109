//! The `flowgem` command line: `simulate`, `generate` and `evaluate`.
//!
//! Every option can also come from a flat `key=value` config file passed with
//! `--config` (keys are the long flag names without dashes, `#` starts a
//! comment). Flags override the file, the file overrides defaults. Each run
//! writes a `<subcommand>_manifest.txt` in the same format next to its
//! outputs, so `--config <manifest>` replays the run.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::dataset::{self, filter_low_unique_columns, load_csv, write_csv, write_matrix_csv, MaskedDataset};
use crate::error::Error;
use crate::evaluate::{energy_distance, energy_distance_with, quantile, standardized_energy, EnergyEstimator};
use crate::flow::{self, FlowConfig, FlowOutput, SigmaChoice};
use crate::kernel::Bandwidth;
use crate::rng::{self, Stream};
use crate::simulate::{self, Family, SyntheticSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "flowgem", version, about = "Generate complete samples from data with values missing at random")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset, mask it, and draw an independent held-out sample.
    Simulate(SimulateArgs),
    /// Run the particle flow on a CSV with missing values.
    Generate(GenerateArgs),
    /// Score a generated sample against a complete held-out sample.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Config file with key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `uniform` or `gaussian`.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Correlation between X1 and X2.
    #[arg(long)]
    pub dependence: Option<f64>,
    /// `paper` (three fixed patterns) or `logistic` (random patterns).
    #[arg(long)]
    pub mechanism: Option<String>,
    /// Number of patterns for the logistic mechanism, including the complete one.
    #[arg(long)]
    pub patterns: Option<usize>,
    /// Target share of masked cells for the logistic mechanism.
    #[arg(long)]
    pub missing_frac: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV with a header row; missing cells are empty or equal to --missing-token.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub missing_token: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Maximum number of flow steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Kernel bandwidth, or `median` for the median heuristic.
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub tikhonov_eps: Option<f64>,
    #[arg(long)]
    pub early_stop_eps: Option<f64>,
    /// Run in original coordinates instead of standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
    /// Number of generated rows (defaults to the input row count).
    #[arg(long)]
    pub n_tilde: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write a per-step trace to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Snapshot cadence (steps) for energies in the trace.
    #[arg(long)]
    pub trace_every: Option<usize>,
    /// Complete held-out CSV used to add energy distances to the trace.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Drop columns whose share of distinct observed values is below this (0.1 if given bare).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.1")]
    pub min_unique_frac: Option<f64>,
    /// Worker threads; output does not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also report the unbiased (U-statistic) energy distance.
    #[arg(long)]
    pub u_statistic: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical abort: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            Error::FlowAborted { .. } | Error::NonFinite(_) | Error::Singular { .. } | Error::ZeroBandwidth => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Keys that manifests carry for the record but that do not configure a run.
const META_KEYS: [&str; 5] = ["subcommand", "tool_version", "wall_clock_secs", "sigma_resolved", "steps_run"];

/// Parsed `key=value` config file.
#[derive(Debug, Default, Clone)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", lineno + 1)))?;
            map.insert(k.trim().replace('_', "-"), v.trim().to_owned());
        }
        Ok(Self(map))
    }

    fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> CliResult<()> {
        for k in self.0.keys() {
            if !allowed.contains(&k.as_str()) && !META_KEYS.contains(&k.replace('-', "_").as_str()) {
                return Err(CliError::Usage(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.0
            .get(key)
            .map(|v| v.parse().map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}"))))
            .transpose()
    }
}

/// Flag value, else config value, else default.
fn resolve<T: FromStr>(flag: Option<T>, file: &KeyValues, key: &str, default: T) -> CliResult<T> {
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

fn resolve_opt<T: FromStr>(flag: Option<T>, file: &KeyValues, key: &str) -> CliResult<Option<T>> {
    Ok(match flag {
        Some(v) => Some(v),
        None => file.get(key)?,
    })
}

/// Ordered `key=value` lines written next to a run's outputs.
#[derive(Debug, Default)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    fn new(subcommand: &str) -> Self {
        let mut m = Self::default();
        m.push("subcommand", subcommand);
        m.push("tool_version", env!("CARGO_PKG_VERSION"));
        m
    }

    fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_owned(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# flowgem run manifest\n");
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.render()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn thread_pool(threads: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        b = b.num_threads(t);
    }
    b.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<PathBuf> {
    let started = Instant::now();
    let file = KeyValues::load(args.config.as_deref())?;
    file.check_keys(&["family", "n", "seed", "dependence", "mechanism", "patterns", "missing-frac", "out-dir"])?;
    let family: Family = resolve(args.family.clone(), &file, "family", "uniform".into())?
        .parse::<Family>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut spec = SyntheticSpec::new(family, resolve(args.n, &file, "n", 2000)?, resolve(args.seed, &file, "seed", 0)?);
    spec.dependence = resolve(args.dependence, &file, "dependence", simulate::DEFAULT_DEPENDENCE)?;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mechanism_name = resolve(args.mechanism.clone(), &file, "mechanism", "paper".to_owned())?;
    let n_patterns = resolve(args.patterns, &file, "patterns", 4usize)?;
    let missing_frac = resolve(args.missing_frac, &file, "missing-frac", 0.45)?;
    let out_dir = resolve(args.out_dir.clone(), &file, "out-dir", PathBuf::from("."))?;
    ensure_dir(&out_dir)?;

    let train = simulate::sample_family(&spec, Stream::Simulation)?;
    let heldout = simulate::sample_family(&spec, Stream::Heldout)?;
    let mech = match mechanism_name.as_str() {
        "paper" => simulate::paper_mar_mechanism(family),
        "logistic" => simulate::generic_logistic_mar(
            train.view(),
            n_patterns,
            missing_frac,
            &mut rng::stream(spec.seed, Stream::Mechanism),
        )?,
        other => return Err(CliError::Usage(format!("unknown mechanism {other:?}"))),
    };
    let masked = simulate::amputate(train.view(), &mech, &mut rng::stream(spec.seed, Stream::Amputation))?;

    let names = dataset::default_column_names(train.ncols());
    write_csv(out_dir.join("train_masked.csv"), &masked)?;
    write_matrix_csv(out_dir.join("heldout_complete.csv"), &names, heldout.view())?;
    write_matrix_csv(out_dir.join("train_complete.csv"), &names, train.view())?;

    let mut m = RunManifest::new("simulate");
    m.push("family", family);
    m.push("n", spec.n);
    m.push("seed", spec.seed);
    m.push("dependence", spec.dependence);
    m.push("mechanism", &mechanism_name);
    if mechanism_name == "logistic" {
        m.push("patterns", n_patterns);
        m.push("missing-frac", missing_frac);
    }
    m.push("out-dir", out_dir.display());
    m.push("wall_clock_secs", started.elapsed().as_secs_f64());
    m.write(&out_dir.join("simulate_manifest.txt"))?;
    log::info!(
        "simulated {} rows, {:.1}% cells masked",
        spec.n,
        100.0 * masked.missing_fraction()
    );
    Ok(out_dir)
}

fn load_complete(path: &Path) -> CliResult<(Vec<String>, Array2<f64>)> {
    let ds = load_csv(path, dataset::DEFAULT_MISSING_TOKEN)?;
    let values = ds
        .complete_values()
        .map_err(|_| CliError::Data(format!("{} has missing values", path.display())))?
        .clone();
    Ok((ds.column_names().to_vec(), values))
}

fn write_trace(path: &Path, out: &FlowOutput, energies: Option<&[f64]>) -> CliResult<()> {
    let mut by_step = BTreeMap::new();
    if let Some(e) = energies {
        for (s, v) in out.snapshots.iter().zip(e) {
            by_step.insert(s.step, *v);
        }
    }
    let mut text = String::from("step,rho_t,g_t,eta,energy\n");
    for r in &out.report.trace {
        let energy = by_step.get(&r.step).map(|e| dataset::format_float(*e)).unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            r.step,
            dataset::format_float(r.rho),
            dataset::format_float(r.grad_norm),
            dataset::format_float(r.eta),
            energy
        );
    }
    let last = out.report.steps_run;
    if let Some(e) = by_step.get(&last) {
        let _ = writeln!(text, "{last},,,,{}", dataset::format_float(*e));
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<PathBuf> {
    let started = Instant::now();
    let file = KeyValues::load(args.config.as_deref())?;
    file.check_keys(&[
        "input",
        "out-dir",
        "missing-token",
        "eta",
        "steps",
        "sigma",
        "tikhonov-eps",
        "early-stop-eps",
        "standardize",
        "n-tilde",
        "seed",
        "trace",
        "trace-every",
        "heldout",
        "min-unique-frac",
        "threads",
    ])?;
    let input: PathBuf = resolve_opt(args.input.clone(), &file, "input")?
        .ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let out_dir = resolve(args.out_dir.clone(), &file, "out-dir", PathBuf::from("."))?;
    let missing_token = resolve(args.missing_token.clone(), &file, "missing-token", dataset::DEFAULT_MISSING_TOKEN.to_owned())?;
    let sigma_text = resolve(args.sigma.clone(), &file, "sigma", "median".to_owned())?;
    let sigma = if sigma_text == "median" {
        SigmaChoice::MedianHeuristic
    } else {
        let v: f64 = sigma_text
            .parse()
            .map_err(|_| CliError::Usage(format!("--sigma must be a number or `median`, got {sigma_text:?}")))?;
        SigmaChoice::Fixed(Bandwidth::new(v).map_err(|e| CliError::Usage(e.to_string()))?)
    };
    let standardize = if args.no_standardize {
        false
    } else {
        file.get("standardize")?.unwrap_or(true)
    };
    let trace_path: Option<PathBuf> = resolve_opt(args.trace.clone(), &file, "trace")?;
    let heldout_path: Option<PathBuf> = resolve_opt(args.heldout.clone(), &file, "heldout")?;
    let min_unique: Option<f64> = resolve_opt(args.min_unique_frac, &file, "min-unique-frac")?;
    let threads: Option<usize> = resolve_opt(args.threads, &file, "threads")?;
    let config = FlowConfig {
        eta: resolve(args.eta, &file, "eta", flow::DEFAULT_ETA)?,
        steps: resolve(args.steps, &file, "steps", flow::DEFAULT_STEPS)?,
        sigma,
        tikhonov_eps: resolve(args.tikhonov_eps, &file, "tikhonov-eps", crate::velocity::DEFAULT_TIKHONOV_EPS)?,
        early_stop_eps: resolve(args.early_stop_eps, &file, "early-stop-eps", flow::DEFAULT_EARLY_STOP_EPS)?,
        standardize,
        n_tilde: resolve_opt(args.n_tilde, &file, "n-tilde")?,
        seed: resolve(args.seed, &file, "seed", 0)?,
        trace: trace_path.is_some(),
        trace_every: resolve(args.trace_every, &file, "trace-every", flow::DEFAULT_TRACE_EVERY)?,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_dir(&out_dir)?;

    let mut ds: MaskedDataset = load_csv(&input, &missing_token)?;
    if let Some(frac) = min_unique {
        let (kept, dropped) = filter_low_unique_columns(&ds, frac)?;
        if !dropped.is_empty() {
            log::info!("dropped low-cardinality columns: {}", dropped.join(", "));
        }
        ds = kept;
    }
    let heldout = match &heldout_path {
        Some(p) => {
            let (_, h) = load_complete(p)?;
            if h.ncols() != ds.ncols() {
                return Err(CliError::Usage(format!(
                    "held-out file has {} columns, input has {}",
                    h.ncols(),
                    ds.ncols()
                )));
            }
            Some(h)
        }
        None => None,
    };

    let pool = thread_pool(threads)?;
    let out = pool.install(|| flow::run(&ds, &config))?;

    write_matrix_csv(out_dir.join("generated.csv"), ds.column_names(), out.generated.view())?;
    let report_json = serde_json::to_string_pretty(&out.report)
        .map_err(|e| CliError::Data(format!("report serialization: {e}")))?;
    fs::write(out_dir.join("flow_report.json"), report_json)
        .map_err(|e| CliError::Data(format!("flow_report.json: {e}")))?;
    if let Some(path) = &trace_path {
        let energies = match &heldout {
            Some(h) => Some(flow::objective_trace(&out.snapshots, h.view())?),
            None => None,
        };
        write_trace(path, &out, energies.as_deref())?;
    }

    let mut m = RunManifest::new("generate");
    m.push("input", input.display());
    m.push("out-dir", out_dir.display());
    m.push("missing-token", &missing_token);
    m.push("eta", config.eta);
    m.push("steps", config.steps);
    m.push("sigma", &sigma_text);
    m.push("sigma_resolved", out.report.sigma);
    m.push("tikhonov-eps", config.tikhonov_eps);
    m.push("early-stop-eps", config.early_stop_eps);
    m.push("standardize", config.standardize);
    if let Some(n) = config.n_tilde {
        m.push("n-tilde", n);
    }
    m.push("seed", config.seed);
    if let Some(p) = &trace_path {
        m.push("trace", p.display());
        m.push("trace-every", config.trace_every);
    }
    if let Some(p) = &heldout_path {
        m.push("heldout", p.display());
    }
    if let Some(f) = min_unique {
        m.push("min-unique-frac", f);
    }
    if let Some(t) = threads {
        m.push("threads", t);
    }
    m.push("steps_run", out.report.steps_run);
    m.push("wall_clock_secs", started.elapsed().as_secs_f64());
    m.write(&out_dir.join("generate_manifest.txt"))?;
    log::info!(
        "ran {} steps (stopped early: {}), sigma {:.4}",
        out.report.steps_run,
        out.report.stopped_early,
        out.report.sigma
    );
    Ok(out_dir)
}

/// Header and values of the evaluation report.
pub fn evaluation_record(
    generated: &Array2<f64>,
    heldout: &Array2<f64>,
    with_u: bool,
) -> crate::Result<(Vec<String>, Vec<f64>)> {
    let std_report = standardized_energy(generated.view(), heldout.view())?;
    let mut header = vec!["e2_standardized".to_owned(), "e2_raw".to_owned()];
    let mut values = vec![std_report.e2, energy_distance(generated.view(), heldout.view())?];
    if with_u {
        let s = dataset::Standardizer::fit_complete(heldout.view())?;
        let g = s.apply_matrix(generated.view(), dataset::Direction::Forward)?;
        let h = s.apply_matrix(heldout.view(), dataset::Direction::Forward)?;
        header.push("e2_standardized_u".to_owned());
        values.push(energy_distance_with(g.view(), h.view(), EnergyEstimator::UStatistic)?);
    }
    for j in 0..generated.ncols() {
        header.push(format!("q10_col{}", j + 1));
        values.push(quantile(&generated.column(j).to_vec(), 0.1)?);
    }
    Ok((header, values))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<PathBuf> {
    let started = Instant::now();
    let file = KeyValues::load(args.config.as_deref())?;
    file.check_keys(&["generated", "heldout", "out-dir", "u-statistic"])?;
    let gen_path: PathBuf = resolve_opt(args.generated.clone(), &file, "generated")?
        .ok_or_else(|| CliError::Usage("--generated is required".into()))?;
    let held_path: PathBuf = resolve_opt(args.heldout.clone(), &file, "heldout")?
        .ok_or_else(|| CliError::Usage("--heldout is required".into()))?;
    let out_dir = resolve(args.out_dir.clone(), &file, "out-dir", PathBuf::from("."))?;
    let with_u = args.u_statistic || file.get("u-statistic")?.unwrap_or(false);
    let (_, generated) = load_complete(&gen_path)?;
    let (_, heldout) = load_complete(&held_path)?;
    if generated.ncols() != heldout.ncols() {
        return Err(CliError::Usage(format!(
            "generated file has {} columns, held-out file has {}",
            generated.ncols(),
            heldout.ncols()
        )));
    }
    ensure_dir(&out_dir)?;
    let (header, values) = evaluation_record(&generated, &heldout, with_u)?;
    let line: Vec<String> = values.iter().map(|v| dataset::format_float(*v)).collect();
    let text = format!("{}\n{}\n", header.join(","), line.join(","));
    let report_path = out_dir.join("evaluation.csv");
    fs::write(&report_path, &text).map_err(|e| CliError::Data(format!("{}: {e}", report_path.display())))?;
    print!("{text}");

    let mut m = RunManifest::new("evaluate");
    m.push("generated", gen_path.display());
    m.push("heldout", held_path.display());
    m.push("out-dir", out_dir.display());
    m.push("u-statistic", with_u);
    m.push("wall_clock_secs", started.elapsed().as_secs_f64());
    m.write(&out_dir.join("evaluate_manifest.txt"))?;
    Ok(out_dir)
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("flowgem: {e}");
            e.exit_code()
        }
    }
}
