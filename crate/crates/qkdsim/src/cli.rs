//! Command definitions and bodies.
//!
//! Exit codes are part of the interface: 0 success, 2 validation
//! failure, 3 calibration failure, 4 security abort, 1 anything else.
//! Argument-syntax errors exit 2 through clap. Every failure prints one
//! `error: <class>: <detail>` line on stderr.

use std::fmt;
use std::fmt::Write as _;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use qkdsim_core::netlink::{BobHooks, SessionOutcome};
use qkdsim_core::photonics::DeadTimeScope;
use qkdsim_core::rate_model::{
    eve_info, net_rate, observed_prediction, predict, ModelError, RateReport,
};
use qkdsim_core::simengine::{
    calibrate_line_length, measure_visibility, run_exchange, AbortReason, CalibrationError,
    LineScan, RunError, RunOutcome, VisibilityPlan,
};

use crate::config::{ReferenceRow, RunMode, Scenario};
use crate::net::{self, NetError};
use crate::report::{emit_csv, ReportRow, Source};
use crate::scenarios::{self, LoadError, SCENARIO_NAMES};

/// Environment variable overriding the receiver's listen address.
pub const BIND_ENV: &str = "QKDSIM_BIND";
const DEFAULT_ENDPOINT: &str = "127.0.0.1:20811";
/// Below this many pulses the sampled statistics are mostly noise.
const STATS_PULSE_FLOOR: u64 = 10_000;
/// Net-rate reproduction tolerance, relative to the recorded value.
const REPRODUCE_TOLERANCE: f64 = 0.10;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Calibration(String),
    Abort(AbortReason),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Calibration(_) => 3,
            CliError::Abort(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "validation: {msg}"),
            CliError::Calibration(msg) => write!(f, "calibration: {msg}"),
            CliError::Abort(reason) => write!(f, "security-abort: {reason}"),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Model(_) | RunError::Config(_) | RunError::Schedule(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Config(_) => CliError::Validation(e.to_string()),
            CalibrationError::EchoNotFound => CliError::Calibration(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "qkdsim",
    version,
    about = "Fiber QKD link simulator: analytic rate model, Monte Carlo runs, \
             calibration scans and networked key exchanges"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Analytic rate and error budget for a scenario (no simulation)
    Analytic(AnalyticArgs),
    /// Single-process Monte Carlo key exchange
    Simulate(SimulateArgs),
    /// Gate-delay echo scan locating the far end of the line
    Calibrate(CalibrateArgs),
    /// Interference fringe visibility measurement
    Visibility(VisibilityArgs),
    /// Networked sender endpoint (connects to a receiver)
    Alice(AliceArgs),
    /// Networked receiver endpoint (accepts one sender)
    Bob(BobArgs),
    /// Run all bundled scenarios and emit the comparison CSV
    #[command(name = "reproduce-tables")]
    ReproduceTables(ReproduceArgs),
}

#[derive(Args)]
pub struct AnalyticArgs {
    /// Bundled scenario name or path to a config file
    #[arg(long)]
    pub config: String,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Bundled scenario name or path to a config file
    #[arg(long)]
    pub config: String,
    /// Override the scenario's pulse count
    #[arg(long)]
    pub pulses: Option<u64>,
    /// Override the scenario's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write a measured/predicted/recorded CSV report here
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the final keys and sampled error rate here
    #[arg(long)]
    pub key_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Bundled scenario name or path to a config file
    #[arg(long)]
    pub config: String,
    /// Operator's length estimate; default rounds the true length to 5 km
    #[arg(long)]
    pub guess_km: Option<f64>,
    /// Override the scenario's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct VisibilityArgs {
    /// Bundled scenario name or path to a config file
    #[arg(long)]
    pub config: String,
    /// Gates recorded per interferometer setting
    #[arg(long, default_value_t = 500_000)]
    pub gates: u64,
    /// Override the scenario's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct AliceArgs {
    /// Bundled scenario name or path to a config file
    #[arg(long)]
    pub config: String,
    /// Receiver endpoint to connect to
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    pub connect: String,
    /// Write this side's key and sampled error rate here
    #[arg(long)]
    pub key_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BobArgs {
    /// Listen address (QKDSIM_BIND overrides)
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    pub bind: String,
    /// Write this side's key and sampled error rate here
    #[arg(long)]
    pub key_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReproduceArgs {
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override every scenario's pulse count
    #[arg(long)]
    pub pulses: Option<u64>,
    /// Override every scenario's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analytic(args) => cmd_analytic(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Calibrate(args) => cmd_calibrate(&args),
        Command::Visibility(args) => cmd_visibility(&args),
        Command::Alice(args) => cmd_alice(&args),
        Command::Bob(args) => cmd_bob(&args),
        Command::ReproduceTables(args) => cmd_reproduce_tables(&args),
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Key-file lines: one `<role> <hex>` per key, then the shared counters.
/// The single-process and networked paths must produce identical files.
fn write_key_file(
    path: &PathBuf,
    keys: &[(&str, &qkdsim_core::protocol::SiftedKey)],
    estimate: Option<&qkdsim_core::protocol::QberEstimate>,
) -> Result<(), CliError> {
    let mut text = String::new();
    for (role, key) in keys {
        text.push_str(role);
        text.push(' ');
        text.push_str(&hex(&key.to_bytes()));
        text.push('\n');
        let _ = writeln!(text, "bits {}", key.len());
    }
    if let Some(e) = estimate {
        let _ = writeln!(text, "qber {:.6}", e.qber);
        let _ = writeln!(text, "sampled {} errors {}", e.sampled, e.errors);
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn print_scenario_header(s: &Scenario) {
    println!("scenario       {}", s.name);
    println!(
        "link           {:.1} km, {:.1} dB total loss",
        s.config.params.fiber.length_km,
        s.config.params.fiber.total_loss_db()
    );
}

/// Net rate predicted from a recorded raw rate and error rate. The
/// recorded references were themselves derived this way, so this is the
/// prediction a reproduction must land on.
fn anchored_net_khz(s: &Scenario, reference: &ReferenceRow) -> Result<f64, CliError> {
    let i_ae = eve_info(
        s.config.params.fiber.total_loss_db(),
        s.config.params.mu,
        &s.config.eve,
    )?;
    let net = net_rate(reference.r_raw_khz * 1e3, reference.qber_pct / 100.0, i_ae)?;
    Ok(net.r_net_hz / 1e3)
}

fn print_reference(s: &Scenario, reference: &ReferenceRow) -> Result<(), CliError> {
    println!(
        "recorded       r_raw {:.2} kHz  qber {:.1} ± {:.1} %  r_net {:.3} kHz",
        reference.r_raw_khz,
        reference.qber_pct,
        reference.qber_2sigma_pct,
        reference.r_net_khz
    );
    let anchored = anchored_net_khz(s, reference)?;
    let dev = (anchored - reference.r_net_khz) / reference.r_net_khz;
    println!(
        "predicted      r_net {:.3} kHz from the recorded raw rate and error rate \
         ({:+.1} % vs recorded)",
        anchored,
        dev * 100.0
    );
    Ok(())
}

fn cmd_analytic(args: &AnalyticArgs) -> Result<(), CliError> {
    let s = scenarios::load(&args.config)?;
    let report = predict(&s.config.params, &s.config.detector, &s.config.eve)?;
    print_scenario_header(&s);
    println!("{report}");
    if let Some(reference) = &s.reference {
        println!();
        print_reference(&s, reference)?;
    }
    Ok(())
}

/// Net rate from the sampled observables of a finished run, mirroring how
/// the recorded reference rates were derived from field measurements.
fn measured_net_khz(s: &Scenario, out: &RunOutcome) -> Result<f64, CliError> {
    let i_ae = eve_info(
        s.config.params.fiber.total_loss_db(),
        s.config.params.mu,
        &s.config.eve,
    )?;
    let net = net_rate(out.stats.sifted_rate_hz, out.estimate.qber, i_ae)?;
    Ok(net.r_net_hz / 1e3)
}

fn base_row(s: &Scenario) -> ReportRow {
    ReportRow {
        scenario: s.name.clone(),
        length_km: s.config.params.fiber.length_km,
        loss_db: s.config.params.fiber.total_loss_db(),
        r_raw_khz: 0.0,
        qber_pct: 0.0,
        qber_2sigma_pct: 0.0,
        r_net_khz: 0.0,
        source: Source::Predicted,
    }
}

fn published_row(s: &Scenario, reference: &ReferenceRow) -> ReportRow {
    ReportRow {
        r_raw_khz: reference.r_raw_khz,
        qber_pct: reference.qber_pct,
        qber_2sigma_pct: reference.qber_2sigma_pct,
        r_net_khz: reference.r_net_khz,
        source: Source::Published,
        ..base_row(s)
    }
}

fn predicted_row(s: &Scenario, report: &RateReport) -> ReportRow {
    ReportRow {
        r_raw_khz: report.r_raw_hz / 1e3,
        qber_pct: report.qber_total * 100.0,
        qber_2sigma_pct: 0.0,
        r_net_khz: report.r_net_hz / 1e3,
        source: Source::Predicted,
        ..base_row(s)
    }
}

fn measured_row(s: &Scenario, out: &RunOutcome, r_net_khz: f64) -> ReportRow {
    ReportRow {
        r_raw_khz: out.stats.sifted_rate_hz / 1e3,
        qber_pct: out.estimate.qber * 100.0,
        qber_2sigma_pct: out.estimate.ci_2sigma * 100.0,
        r_net_khz,
        source: Source::Measured,
        ..base_row(s)
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut s = scenarios::load(&args.config)?;
    if s.mode == RunMode::Networked {
        return Err(CliError::Validation(format!(
            "scenario `{}` sets run.mode = networked; run it with the `alice` and `bob` \
             subcommands",
            s.name
        )));
    }
    if let Some(pulses) = args.pulses {
        s.config.n_pulses = pulses;
    }
    if let Some(seed) = args.seed {
        s.config.seed = seed;
    }
    s.config.validate()?;
    if s.config.n_pulses < STATS_PULSE_FLOOR {
        eprintln!(
            "warning: {} pulses is below {STATS_PULSE_FLOOR}; sampled statistics will be noisy",
            s.config.n_pulses
        );
    }

    print_scenario_header(&s);
    println!(
        "run            {} pulses, seed {}",
        s.config.n_pulses, s.config.seed
    );
    let started = Instant::now();
    let out = run_exchange(&s.config)?;
    let wall_s = started.elapsed().as_secs_f64();

    println!(
        "counts         {} live gates, {} clicks, {} coincidences",
        out.stats.live_gates, out.stats.clicks, out.stats.coincidences
    );
    println!(
        "sifted         {} bits in {:.3} s link time ({:.3} kHz)",
        out.stats.sifted_bits,
        out.stats.elapsed_s,
        out.stats.sifted_rate_hz / 1e3
    );
    println!(
        "sampled qber   {:.2} ± {:.2} %  ({} sampled, {} errors)",
        out.estimate.qber * 100.0,
        out.estimate.ci_2sigma * 100.0,
        out.estimate.sampled,
        out.estimate.errors
    );
    println!(
        "full-key qber  {:.2} %  ({} errors, simulation ground truth)",
        out.stats.full_key_qber * 100.0,
        out.stats.full_key_errors
    );
    for alert in &out.stats.alerts {
        println!("alert          {alert}");
    }

    // Model expectations for the same counting observables.
    let obs = observed_prediction(
        &s.config.params,
        &s.config.detector,
        out.stats.realized_duty,
    )?;
    println!(
        "expected       qber {:.2} %, sifted rate {:.3} kHz",
        obs.qber * 100.0,
        obs.sifted_rate_hz / 1e3
    );

    if let Some(reason) = out.aborted {
        println!("aborted        {reason}");
        return Err(CliError::Abort(reason));
    }

    let r_net_khz = measured_net_khz(&s, &out)?;
    println!("net rate       {r_net_khz:.3} kHz (from the sampled observables)");
    println!("key bits       {}", out.alice_key.len());
    println!("wall time      {wall_s:.2} s");

    if let Some(path) = &args.csv {
        let report = predict(&s.config.params, &s.config.detector, &s.config.eve)?;
        let mut rows = Vec::new();
        if let Some(reference) = &s.reference {
            rows.push(published_row(&s, reference));
        }
        rows.push(predicted_row(&s, &report));
        rows.push(measured_row(&s, &out, r_net_khz));
        std::fs::write(path, emit_csv(&rows))?;
        println!("csv written    {}", path.display());
    }
    if let Some(path) = &args.key_out {
        write_key_file(
            path,
            &[("alice", &out.alice_key), ("bob", &out.bob_key)],
            Some(&out.estimate),
        )?;
        println!("keys written   {}", path.display());
    }
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let s = scenarios::load(&args.config)?;
    let true_length_km = s.config.params.fiber.length_km;
    // Rounding to 5 km mimics an operator who knows the route, not the fiber.
    let guess_km = args
        .guess_km
        .unwrap_or_else(|| (true_length_km / 5.0).round() * 5.0);
    let scan = LineScan {
        true_length_km,
        guess_km,
        p_dark: s.config.detector.p_dark,
        group_velocity_m_per_s: s.config.params.fiber.group_velocity_m_per_s,
        seed: args.seed.unwrap_or(s.config.seed),
        ..LineScan::default()
    };
    print_scenario_header(&s);
    println!("initial guess  {guess_km:.1} km");
    let report = calibrate_line_length(&scan)?;
    println!("estimated      {:.5} km", report.estimated_length_km);
    println!(
        "error          {:+.2} m",
        (report.estimated_length_km - true_length_km) * 1e3
    );
    println!(
        "scanned        {} coarse + {} fine gate positions",
        report.coarse_positions, report.fine_positions
    );
    Ok(())
}

fn cmd_visibility(args: &VisibilityArgs) -> Result<(), CliError> {
    let s = scenarios::load(&args.config)?;
    let plan = VisibilityPlan {
        mu: s.mu_vis,
        gates_per_setting: args.gates,
        seed: args.seed.unwrap_or(s.config.seed),
    };
    print_scenario_header(&s);
    println!(
        "plan           mu {} with {} gates per setting, seed {}",
        plan.mu, plan.gates_per_setting, plan.seed
    );
    let report = measure_visibility(
        &s.config.params,
        &s.config.detector,
        DeadTimeScope::SystemWide,
        &plan,
    )?;
    for st in &report.settings {
        println!(
            "setting        phase {} basis {}: {} live gates, {} bright, {} dim, V {:.4} ± {:.4}",
            st.alice_phase_index,
            st.bob_basis as u8,
            st.live_gates,
            st.bright_clicks,
            st.dim_clicks,
            st.visibility,
            st.stderr
        );
    }
    println!(
        "visibility     {:.4} ± {:.4}",
        report.visibility, report.stderr
    );
    println!("qber_opt       {:.3} %", report.qber_opt * 100.0);
    let pull = (report.visibility - s.visibility) / report.stderr;
    println!(
        "configured     {:.4}  ({pull:+.2} sigma from measured)",
        s.visibility
    );
    Ok(())
}

fn print_outcome(role: &str, out: &SessionOutcome) {
    println!("role           {role}");
    println!("trains         {}", out.stats.trains_completed);
    if role == "bob" {
        println!(
            "counts         {} live gates, {} clicks, {} coincidences",
            out.stats.live_gates, out.stats.clicks, out.stats.coincidences
        );
    }
    println!(
        "sifted         {} bits, {} kept after sampling",
        out.stats.sifted_bits,
        out.key.len()
    );
    if let Some(e) = &out.estimate {
        println!(
            "sampled qber   {:.2} ± {:.2} %  ({} sampled, {} errors)",
            e.qber * 100.0,
            e.ci_2sigma * 100.0,
            e.sampled,
            e.errors
        );
    }
    for alert in &out.alerts {
        println!("alert          {alert}");
    }
    println!("transcript     {}", hex(&out.transcript_sha256));
}

fn finish_endpoint(
    role: &'static str,
    out: &SessionOutcome,
    key_out: Option<&PathBuf>,
) -> Result<(), CliError> {
    print_outcome(role, out);
    if let Some(reason) = out.aborted {
        println!("aborted        {reason}");
        return Err(CliError::Abort(reason));
    }
    if let Some(path) = key_out {
        write_key_file(path, &[(role, &out.key)], out.estimate.as_ref())?;
        println!("key written    {}", path.display());
    }
    Ok(())
}

fn cmd_alice(args: &AliceArgs) -> Result<(), CliError> {
    let s = scenarios::load(&args.config)?;
    s.config.validate()?;
    print_scenario_header(&s);
    // The seed doubles as the session id so transcripts are reproducible.
    let session_id = s.config.seed;
    let stream = TcpStream::connect(&args.connect)?;
    println!("connected      {}", args.connect);
    let out = net::run_alice(stream, s.config, session_id)?;
    finish_endpoint("alice", &out, args.key_out.as_ref())
}

fn cmd_bob(args: &BobArgs) -> Result<(), CliError> {
    let bind = std::env::var(BIND_ENV).unwrap_or_else(|_| args.bind.clone());
    let listener = TcpListener::bind(&bind)?;
    // Scripts parse this line to learn an ephemeral port; flush it before
    // blocking in accept.
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let (stream, peer) = listener.accept()?;
    println!("peer           {peer}");
    let out = net::run_bob(stream, BobHooks::default())?;
    finish_endpoint("bob", &out, args.key_out.as_ref())
}

fn cmd_reproduce_tables(args: &ReproduceArgs) -> Result<(), CliError> {
    if args.pulses == Some(0) {
        return Err(CliError::Validation("pulse count must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for &name in SCENARIO_NAMES {
        let mut s = scenarios::load(name)?;
        if let Some(pulses) = args.pulses {
            s.config.n_pulses = pulses;
        }
        if let Some(seed) = args.seed {
            s.config.seed = seed;
        }
        let reference = s
            .reference
            .ok_or_else(|| CliError::Other(format!("scenario `{name}` has no reference row")))?;

        rows.push(published_row(&s, &reference));

        let predicted_khz = anchored_net_khz(&s, &reference)?;
        rows.push(ReportRow {
            r_raw_khz: reference.r_raw_khz,
            qber_pct: reference.qber_pct,
            qber_2sigma_pct: 0.0,
            r_net_khz: predicted_khz,
            source: Source::Predicted,
            ..base_row(&s)
        });

        let out = run_exchange(&s.config)?;
        if let Some(reason) = out.aborted {
            return Err(CliError::Abort(reason));
        }
        let measured_khz = measured_net_khz(&s, &out)?;
        rows.push(measured_row(&s, &out, measured_khz));

        let dev = (predicted_khz - reference.r_net_khz) / reference.r_net_khz;
        let ok = dev.abs() <= REPRODUCE_TOLERANCE;
        failures += !ok as usize;
        eprintln!(
            "{}: {} predicted r_net {:.3} kHz vs recorded {:.3} kHz ({:+.1} %, tolerance {:.0} %)",
            if ok { "pass" } else { "FAIL" },
            name,
            predicted_khz,
            reference.r_net_khz,
            dev * 100.0,
            REPRODUCE_TOLERANCE * 100.0
        );
    }
    let csv = emit_csv(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    if failures > 0 {
        return Err(CliError::Other(format!(
            "{failures} scenario(s) outside the net-rate tolerance"
        )));
    }
    Ok(())
}
