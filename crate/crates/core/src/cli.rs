//! The `mbbsim` command-line front end.
//!
//! ```text
//! mbbsim list
//! mbbsim run case-a --out results/case-a --plots
//! mbbsim run --all --out results
//! mbbsim report results/case-b --vuf-limit 2
//! mbbsim export case-c --out case-c.json
//! ```
//!
//! Exit status is 0 on success, 1 when a simulation aborts and 2 on any
//! input error. Log verbosity follows the `MBBSIM_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`, `trace`).
//!
//! Every CSV file is long-form with the header
//! `t,object_id,phase,quantity,value,unit`. Times and values are written
//! in `{:.16e}` form (17 significant digits); `phase` is `A`, `B`, `C` or
//! `-` for quantities that are not per phase. Undefined values are `NaN`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dynamics::{run, SimulationConfig, SimulationError, TimeSeriesRecord};
use crate::exec::{self, ExecutionMode};
use crate::metrics::{threshold_report_from_samples, ThresholdReport, UnbalanceMetrics};
use crate::network::NetworkModel;
use crate::phasor::Phase;
use crate::scenarios::{builtin, load_scenario, Scenario, BUILTIN};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ABORT: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

pub const CSV_HEADER: [&str; 6] = ["t", "object_id", "phase", "quantity", "value", "unit"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "mbbsim", version, about = "Phasor-domain simulator for microgrids joined by a back-to-back converter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a built-in case or a scenario file.
    Run(RunArgs),
    /// Summarise VUF limit crossings of a finished run.
    Report(ReportArgs),
    /// List the built-in scenarios.
    List,
    /// Write a built-in scenario as JSON.
    Export {
        name: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecutionArg {
    Parallel,
    Sequential,
}

impl From<ExecutionArg> for ExecutionMode {
    fn from(a: ExecutionArg) -> Self {
        match a {
            ExecutionArg::Parallel => ExecutionMode::Parallel,
            ExecutionArg::Sequential => ExecutionMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Built-in case name (see `list`) or path to a scenario file.
    #[arg(required_unless_present = "all", conflicts_with = "all")]
    pub scenario: Option<String>,
    /// Run every built-in case, each into its own subdirectory of `--out`.
    #[arg(long)]
    pub all: bool,
    /// Time step, seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Simulated horizon, seconds; defaults to the scenario's own.
    #[arg(long = "t-end")]
    pub t_end: Option<f64>,
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Record every N-th step.
    #[arg(long)]
    pub decimation: Option<usize>,
    /// VUF limit (percent) for the end-of-run summary.
    #[arg(long = "vuf-limit", default_value_t = 2.0)]
    pub vuf_limit: f64,
    /// Reserved; runs are deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    /// Also write SVG plots.
    #[arg(long)]
    pub plots: bool,
    #[arg(long, value_enum)]
    pub execution: Option<ExecutionArg>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
    #[arg(long = "vuf-limit", default_value_t = 2.0)]
    pub vuf_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub dt: f64,
    pub t_end: f64,
    pub decimation: usize,
    pub tolerance_w: f64,
    pub max_iter: usize,
    pub execution: ExecutionMode,
    pub vuf_limit: f64,
    pub seed: Option<u64>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceStats {
    pub records: usize,
    pub max_pf_iterations: usize,
    pub max_mismatch_w: f64,
    pub max_balance_residual_va: f64,
}

impl ConvergenceStats {
    fn of(records: &[TimeSeriesRecord]) -> Self {
        ConvergenceStats {
            records: records.len(),
            max_pf_iterations: records.iter().map(|r| r.pf_iterations).max().unwrap_or(0),
            max_mismatch_w: records.iter().map(|r| r.pf_mismatch_w).fold(0.0, f64::max),
            max_balance_residual_va: records.iter().map(|r| r.balance_residual_va).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted,
    InputError,
}

/// Machine-readable failure description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBlock {
    pub kind: String,
    pub t: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub description: String,
    pub config: Option<ConfigEcho>,
    pub monitored_buses: Vec<String>,
    /// File names relative to the run directory.
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub convergence: ConvergenceStats,
    pub status: RunStatus,
    pub exit_code: i32,
    pub error: Option<ErrorBlock>,
}

/// Entry point used by the binary.
pub fn main_entry() -> i32 {
    init_logging();
    match Cli::try_parse() {
        Ok(cli) => dispatch(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MBBSIM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Report(args) => cmd_report(&args.run_dir, args.vuf_limit),
        Command::List => cmd_list(),
        Command::Export { name, out } => cmd_export(&name, out.as_deref()),
    }
}

pub fn cmd_list() -> i32 {
    for (name, description) in BUILTIN {
        println!("{name:<8} {description}");
    }
    EXIT_OK
}

pub fn cmd_export(name: &str, out: Option<&Path>) -> i32 {
    let Some(s) = builtin(name) else {
        eprintln!("unknown built-in scenario {name:?}");
        return EXIT_INPUT;
    };
    match out {
        Some(path) => match s.save(path) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("{e}");
                EXIT_INPUT
            }
        },
        None => {
            use std::io::Write;
            // A closed pipe (e.g. `| head`) is not an error.
            let _ = writeln!(std::io::stdout().lock(), "{}", s.to_json());
            EXIT_OK
        }
    }
}

/// Built-in name first, then a file path.
pub fn resolve_scenario(reference: &str) -> Result<Scenario, ErrorBlock> {
    if let Some(s) = builtin(reference) {
        return Ok(s);
    }
    load_scenario(Path::new(reference)).map_err(|e| ErrorBlock {
        kind: scenario_error_kind(&e).into(),
        t: None,
        message: e.to_string(),
    })
}

fn scenario_error_kind(e: &crate::scenarios::ScenarioError) -> &'static str {
    use crate::scenarios::ScenarioError as E;
    match e {
        E::Io { .. } | E::Parse { .. } | E::Version(_) => "parse_error",
        E::UnknownTarget { .. } => "unknown_target",
        E::Invalid(_) => "invalid_scenario",
        E::Network(_) => "network_error",
    }
}

pub fn cmd_run(args: &RunArgs) -> i32 {
    if args.all {
        let names: Vec<&str> = BUILTIN.iter().map(|(n, _)| *n).collect();
        let mode = args.execution.map(ExecutionMode::from).unwrap_or_default();
        let codes = exec::map(mode, &names, |name| run_one(name, args, &args.out.join(name)));
        return codes.into_iter().max().unwrap_or(EXIT_OK);
    }
    let reference = args.scenario.as_deref().unwrap_or_default();
    run_one(reference, args, &args.out)
}

fn config_for(scenario: &Scenario, args: &RunArgs) -> SimulationConfig {
    let mut c = SimulationConfig::for_scenario(scenario);
    if let Some(dt) = args.dt {
        c.dt = dt;
    }
    if let Some(t) = args.t_end {
        c.t_end = t;
    }
    if let Some(d) = args.decimation {
        c.decimation = d;
    }
    if let Some(e) = args.execution {
        c.execution = e.into();
    }
    c
}

fn echo(c: &SimulationConfig, args: &RunArgs) -> ConfigEcho {
    ConfigEcho {
        dt: c.dt,
        t_end: c.t_end,
        decimation: c.decimation,
        tolerance_w: c.tolerance,
        max_iter: c.max_iter,
        execution: c.execution,
        vuf_limit: args.vuf_limit,
        seed: args.seed,
        format: args.format,
    }
}

fn input_failure(out: &Path, name: &str, config: Option<ConfigEcho>, error: ErrorBlock) -> i32 {
    eprintln!("{}", serde_json::json!({ "error": &error }));
    let manifest = RunManifest {
        scenario: name.into(),
        description: String::new(),
        config,
        monitored_buses: Vec::new(),
        outputs: Vec::new(),
        wall_clock_s: 0.0,
        convergence: ConvergenceStats::default(),
        status: RunStatus::InputError,
        exit_code: EXIT_INPUT,
        error: Some(error),
    };
    if let Err(e) = write_manifest(out, &manifest) {
        log::warn!("could not write manifest: {e}");
    }
    EXIT_INPUT
}

fn run_one(reference: &str, args: &RunArgs, out: &Path) -> i32 {
    let scenario = match resolve_scenario(reference) {
        Ok(s) => s,
        Err(e) => return input_failure(out, reference, None, e),
    };
    let config = config_for(&scenario, args);
    let config_echo = echo(&config, args);
    let invalid = |message: String| ErrorBlock { kind: "invalid_input".into(), t: None, message };
    if let Err(m) = config.validate() {
        return input_failure(out, &scenario.name, Some(config_echo), invalid(m));
    }
    if !(args.vuf_limit >= 0.0) {
        return input_failure(out, &scenario.name, Some(config_echo), invalid(format!("negative VUF limit {}", args.vuf_limit)));
    }
    let base = match scenario.resolve_base() {
        Ok(b) => b,
        Err(e) => {
            let block = ErrorBlock { kind: scenario_error_kind(&e).into(), t: None, message: e.to_string() };
            return input_failure(out, &scenario.name, Some(config_echo), block);
        }
    };
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("cannot create {}: {e}", out.display());
        return EXIT_INPUT;
    }

    log::info!("running {} for {} s at dt = {} s", scenario.name, config.t_end, config.dt);
    let started = Instant::now();
    let result = run(&base, &scenario, &config);
    let wall = started.elapsed().as_secs_f64();
    let (records, error) = match result {
        Ok(r) => (r, None),
        Err(SimulationError { kind, t, message, records }) => {
            let kind = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            (records, Some(ErrorBlock { kind, t: Some(t), message }))
        }
    };
    let model = scenario.apply(&base).unwrap_or(base);

    let mut manifest = RunManifest {
        scenario: scenario.name.clone(),
        description: scenario.description.clone(),
        config: Some(config_echo),
        monitored_buses: scenario.monitored_buses.clone(),
        outputs: Vec::new(),
        wall_clock_s: wall,
        convergence: ConvergenceStats::of(&records),
        status: if error.is_some() { RunStatus::Aborted } else { RunStatus::Completed },
        exit_code: if error.is_some() { EXIT_ABORT } else { EXIT_OK },
        error: error.clone(),
    };
    match write_outputs(out, &model, &scenario.monitored_buses, &records) {
        Ok(files) => manifest.outputs = files,
        Err(e) => {
            manifest.status = RunStatus::InputError;
            manifest.exit_code = EXIT_INPUT;
            manifest.error = Some(ErrorBlock { kind: "output_error".into(), t: None, message: e.to_string() });
        }
    }
    if args.plots && manifest.exit_code != EXIT_INPUT {
        match write_plots(out, &model, &scenario.monitored_buses, &records) {
            Ok(files) => manifest.outputs.extend(files),
            Err(e) => log::warn!("plotting failed: {e}"),
        }
    }
    manifest.outputs.push(MANIFEST_FILE.into());
    if let Err(e) = write_manifest(out, &manifest) {
        eprintln!("cannot write manifest: {e}");
        return EXIT_INPUT;
    }

    if let Some(err) = &manifest.error {
        eprintln!("{}", serde_json::json!({ "error": err }));
        return manifest.exit_code;
    }
    println!(
        "{}: {} records, {:.2} s wall clock, outputs in {}",
        scenario.name,
        records.len(),
        wall,
        out.display()
    );
    match crate::metrics::threshold_report(&records, args.vuf_limit) {
        Ok(report) => print_report(&report),
        Err(e) => log::warn!("{e}"),
    }
    EXIT_OK
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, String> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// `{:.16e}` formatting used for every number in the CSV files.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

struct Rows {
    w: csv::Writer<fs::File>,
}

impl Rows {
    fn create(path: &Path) -> Result<Self, csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_HEADER)?;
        Ok(Rows { w })
    }

    fn row(&mut self, t: f64, object: &str, phase: &str, quantity: &str, value: f64, unit: &str) -> Result<(), csv::Error> {
        self.w.write_record([fmt_num(t).as_str(), object, phase, quantity, fmt_num(value).as_str(), unit])
    }

    fn finish(mut self) -> Result<(), csv::Error> {
        self.w.flush()?;
        Ok(())
    }
}

fn phase_label(p: Phase) -> &'static str {
    match p {
        Phase::A => "A",
        Phase::B => "B",
        Phase::C => "C",
    }
}

/// Writes the four CSV groups; returns their file names.
pub fn write_outputs(
    dir: &Path,
    model: &NetworkModel,
    monitored: &[String],
    records: &[TimeSeriesRecord],
) -> Result<Vec<String>, csv::Error> {
    let mut v = Rows::create(&dir.join("voltages.csv"))?;
    for r in records {
        for bus in monitored {
            let (Some(b), Some(set)) = (model.bus(bus), r.bus_voltages.get(bus)) else { continue };
            let base = b.nominal_ln();
            for p in b.phases.iter() {
                let x = set[p];
                let ph = phase_label(p);
                v.row(r.t, bus, ph, "v_mag", x.norm(), "V")?;
                v.row(r.t, bus, ph, "v_pu", x.norm() / base, "pu")?;
                v.row(r.t, bus, ph, "v_angle", x.arg().to_degrees(), "deg")?;
            }
        }
    }
    v.finish()?;

    let mut u = Rows::create(&dir.join("vuf.csv"))?;
    for r in records {
        for (bus, m) in &r.vuf {
            let (v2, v0) = m.map_or((f64::NAN, f64::NAN), |m| (m.vuf2, m.vuf0));
            u.row(r.t, bus, "-", "vuf2", v2, "%")?;
            u.row(r.t, bus, "-", "vuf0", v0, "%")?;
        }
    }
    u.finish()?;

    let mut b = Rows::create(&dir.join("btb.csv"))?;
    for r in records {
        for (id, x) in &r.btb {
            b.row(r.t, id, "-", "vdc", x.vdc, "V")?;
            b.row(r.t, id, "-", "vdc_pu", x.vdc_pu, "pu")?;
            b.row(r.t, id, "-", "p_transfer", x.transferred_kw, "kW")?;
            b.row(r.t, id, "-", "p_mg_side", x.mg_side_kw, "kW")?;
            b.row(r.t, id, "-", "dc_energy", x.dc_energy_j, "J")?;
            b.row(r.t, id, "-", "dc_energy_in", x.dc_energy_in_j, "J")?;
        }
    }
    b.finish()?;

    let mut d = Rows::create(&dir.join("devices.csv"))?;
    for r in records {
        for (id, x) in &r.devices {
            d.row(r.t, id, "-", "p", x.p_kw, "kW")?;
            d.row(r.t, id, "-", "q", x.q_kvar, "kvar")?;
        }
        for (id, f) in &r.frequencies {
            d.row(r.t, id, "-", "frequency", *f, "Hz")?;
        }
        for (id, s) in &r.source_phase_power {
            for p in Phase::ALL {
                d.row(r.t, id, phase_label(p), "p_phase", s[p].re / 1e3, "kW")?;
                d.row(r.t, id, phase_label(p), "q_phase", s[p].im / 1e3, "kvar")?;
            }
        }
    }
    d.finish()?;
    Ok(["voltages.csv", "vuf.csv", "btb.csv", "devices.csv"].map(String::from).to_vec())
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn plot(path: &Path, title: &str, y_label: &str, series: &Series) -> Result<(), String> {
    use plotters::prelude::*;

    let points = || series.iter().flat_map(|(_, s)| s.iter()).filter(|(_, y)| y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Ok(());
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6 * y1.abs().max(1.0));
    let (y0, y1) = (y0 - pad, y1 + pad);
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };

    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("t (s)")
        .y_desc(y_label)
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.iter().copied().filter(|(_, y)| y.is_finite()), color.stroke_width(2)))
            .map_err(|e| e.to_string())?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

/// Frequencies, VUFs, DC voltage, powers and voltages as SVG files.
pub fn write_plots(
    dir: &Path,
    model: &NetworkModel,
    monitored: &[String],
    records: &[TimeSeriesRecord],
) -> Result<Vec<String>, String> {
    fn push(map: &mut BTreeMap<String, Vec<(f64, f64)>>, key: String, t: f64, y: f64) {
        map.entry(key).or_default().push((t, y));
    }
    let (mut freq, mut vuf, mut vdc, mut power, mut volts) =
        (BTreeMap::new(), BTreeMap::new(), BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for r in records {
        for (id, f) in &r.frequencies {
            push(&mut freq, id.clone(), r.t, *f);
        }
        for (bus, m) in &r.vuf {
            let m: Option<&UnbalanceMetrics> = m.as_ref();
            push(&mut vuf, format!("{bus} VUF2"), r.t, m.map_or(f64::NAN, |m| m.vuf2));
            push(&mut vuf, format!("{bus} VUF0"), r.t, m.map_or(f64::NAN, |m| m.vuf0));
        }
        for (id, b) in &r.btb {
            push(&mut vdc, id.clone(), r.t, b.vdc_pu);
        }
        for (id, d) in &r.devices {
            push(&mut power, id.clone(), r.t, d.p_kw);
        }
        for bus in monitored {
            let (Some(b), Some(set)) = (model.bus(bus), r.bus_voltages.get(bus)) else { continue };
            for p in b.phases.iter() {
                push(&mut volts, format!("{bus}.{}", phase_label(p)), r.t, set[p].norm() / b.nominal_ln());
            }
        }
    }
    let plots = [
        ("frequency.svg", "Island frequency", "Hz", freq),
        ("vuf.svg", "Voltage unbalance", "%", vuf),
        ("vdc.svg", "DC-link voltage", "pu", vdc),
        ("power.svg", "Active power", "kW", power),
        ("voltage.svg", "Monitored bus voltage", "pu", volts),
    ];
    let mut written = Vec::new();
    for (file, title, unit, data) in plots {
        if data.is_empty() {
            continue;
        }
        plot(&dir.join(file), title, unit, &data.into_iter().collect())?;
        written.push(file.to_string());
    }
    Ok(written)
}

/// Reads `vuf.csv` back into `(t, bus, metrics)` samples in file order.
pub fn read_vuf_samples(path: &Path) -> Result<Vec<(f64, String, Option<UnbalanceMetrics>)>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header: Vec<String> = reader.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(format!("{}: unexpected header {header:?}", path.display()));
    }
    let mut out: Vec<(f64, String, [f64; 2])> = Vec::new();
    let mut index: BTreeMap<(u64, String), usize> = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        let bad = |what: &str| format!("{}: row {}: bad {what}", path.display(), line + 2);
        let t: f64 = rec[0].parse().map_err(|_| bad("time"))?;
        let bus = rec[1].to_string();
        let value: f64 = rec[4].parse().map_err(|_| bad("value"))?;
        let slot = match &rec[3] {
            "vuf2" => 0,
            "vuf0" => 1,
            _ => return Err(bad("quantity")),
        };
        let i = *index.entry((t.to_bits(), bus.clone())).or_insert_with(|| {
            out.push((t, bus, [f64::NAN; 2]));
            out.len() - 1
        });
        out[i].2[slot] = value;
    }
    Ok(out
        .into_iter()
        .map(|(t, bus, [v2, v0])| {
            let m = (v2.is_finite() && v0.is_finite()).then_some(UnbalanceMetrics { vuf2: v2, vuf0: v0 });
            (t, bus, m)
        })
        .collect())
}

fn print_report(report: &ThresholdReport) {
    if report.is_empty() {
        println!("no VUF above {}%", report.limit);
        return;
    }
    println!("VUF above {}%:", report.limit);
    println!("  {:<8} {:<5} {:>10} {:>10} {:>10}", "bus", "qty", "start s", "end s", "peak %");
    for c in &report.crossings {
        println!("  {:<8} {:<5} {:>10.3} {:>10.3} {:>10.4}", c.bus, c.quantity.name(), c.start, c.end, c.peak);
    }
}

pub fn write_report_csv(path: &Path, report: &ThresholdReport) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bus", "quantity", "start_s", "end_s", "peak_percent", "limit_percent"])?;
    for c in &report.crossings {
        w.write_record([
            c.bus.as_str(),
            c.quantity.name(),
            &fmt_num(c.start),
            &fmt_num(c.end),
            &fmt_num(c.peak),
            &fmt_num(report.limit),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn build_report(run_dir: &Path, limit: f64) -> Result<ThresholdReport, String> {
    let manifest = read_manifest(run_dir)?;
    if !manifest.outputs.iter().any(|f| f == "vuf.csv") {
        return Err(format!("{}: run has no VUF output (status {:?})", run_dir.display(), manifest.status));
    }
    let samples = read_vuf_samples(&run_dir.join("vuf.csv"))?;
    threshold_report_from_samples(samples.iter().map(|(t, b, m)| (*t, b.as_str(), *m)), limit).map_err(|e| e.to_string())
}

pub fn cmd_report(run_dir: &Path, limit: f64) -> i32 {
    let report = match build_report(run_dir, limit) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": { "kind": "invalid_run", "message": e } }));
            return EXIT_INPUT;
        }
    };
    print_report(&report);
    if let Err(e) = write_report_csv(&run_dir.join(REPORT_FILE), &report) {
        eprintln!("cannot write report: {e}");
        return EXIT_INPUT;
    }
    EXIT_OK
}
