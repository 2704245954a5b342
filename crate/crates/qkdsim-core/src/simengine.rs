//! Discrete-event simulation of complete key exchanges.
//!
//! The transmission uses the go-and-return scheme: bright pulse trains
//! travel to Alice, are attenuated, phase-modulated and reflected, and
//! return to Bob's detectors. A train can only be as long as Alice's
//! storage line, and the next train waits for the previous one to clear
//! the link, so emission is active for roughly `l_D/(l_AB + l_D)` of the
//! time. [`TrainSchedule`] turns the geometry into pulse emission and
//! detection times.
//!
//! [`QuantumBench`] is the single Monte Carlo core used by every
//! execution mode: the in-process [`run_exchange`] and the two networked
//! session drivers consume the same random substreams in the same order,
//! so a given seed produces bit-identical keys no matter how the classical
//! messages travel.
//!
//! The module also hosts the two calibration procedures: a time-domain
//! echo scan that locates the reflecting end of the line before key
//! exchange, and a fringe-visibility measurement that estimates the
//! optical error floor with propagated counting uncertainties.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::math;
use crate::photonics::{
    ClickRecord, DeadTimeScope, DetectorBank, DetectorId, PhotonicsError, PulseOptics,
    QuantumFrame,
};
use crate::protocol::{
    qber_from_sample, sample_positions, sift_train, QberEstimate, SecurityAlert, SecurityMonitor,
    SiftError, SiftStats, SiftedKey, QBER_ABORT_THRESHOLD,
};
use crate::rate_model::{
    expected_coincidence_prob, DetectorModel, EveModel, ModelError, SystemParams,
    DEFAULT_GATE_WIDTH_S,
};
use crate::rng::{substream, SimRng, Stream};

/// Fraction of the storage-line round trip filled with pulses, leaving a
/// guard interval so the train never overlaps its own echo.
pub const TRAIN_FILL_FACTOR: f64 = 0.98;

/// Errors from assembling or running a simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Model(ModelError),
    Photonics(PhotonicsError),
    Sift(SiftError),
    /// The train geometry cannot be realized.
    Schedule(&'static str),
    /// A run-level setting failed validation.
    Config(&'static str),
    /// A measurement produced no usable signal.
    Degenerate(&'static str),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Model(e) => write!(f, "model: {e}"),
            RunError::Photonics(e) => write!(f, "photonics: {e}"),
            RunError::Sift(e) => write!(f, "sift: {e}"),
            RunError::Schedule(msg) => write!(f, "schedule: {msg}"),
            RunError::Config(msg) => write!(f, "config: {msg}"),
            RunError::Degenerate(msg) => write!(f, "degenerate measurement: {msg}"),
        }
    }
}

impl core::error::Error for RunError {}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        RunError::Model(e)
    }
}

impl From<PhotonicsError> for RunError {
    fn from(e: PhotonicsError) -> Self {
        RunError::Photonics(e)
    }
}

impl From<SiftError> for RunError {
    fn from(e: SiftError) -> Self {
        RunError::Sift(e)
    }
}

/// Timing of the pulse-train transmission scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    /// Pulses per train.
    pub train_size: u32,
    /// Start-to-start separation of consecutive trains: the full link
    /// round trip `2(l_AB + l_D)/v`.
    pub train_period_s: f64,
    /// `1/ν`.
    pub pulse_spacing_s: f64,
    /// Delay from emission to the detection gate: the transmission-fiber
    /// round trip `2·l_AB/v`.
    pub gate_offset_s: f64,
}

impl TrainSchedule {
    /// Largest train the storage line can hold with the guard interval.
    pub fn default_train_size(params: &SystemParams) -> u32 {
        let storage_round_trip_s =
            2.0 * params.storage_len_km * 1000.0 / params.fiber.group_velocity_m_per_s;
        math::floor(TRAIN_FILL_FACTOR * storage_round_trip_s * params.nu_hz) as u32
    }

    pub fn from_params(params: &SystemParams, train_size_override: Option<u32>) -> Result<Self, RunError> {
        params.validate()?;
        let v = params.fiber.group_velocity_m_per_s;
        let train_period_s = 2.0 * (params.fiber.length_km + params.storage_len_km) * 1000.0 / v;
        let pulse_spacing_s = 1.0 / params.nu_hz;
        let train_size = match train_size_override {
            Some(n) => n,
            None => Self::default_train_size(params),
        };
        if train_size < 1 {
            return Err(RunError::Schedule("storage line too short for one pulse"));
        }
        if train_size as f64 * pulse_spacing_s > train_period_s {
            return Err(RunError::Schedule("train longer than the link round trip"));
        }
        Ok(TrainSchedule {
            train_size,
            train_period_s,
            pulse_spacing_s,
            gate_offset_s: 2.0 * params.fiber.length_km * 1000.0 / v,
        })
    }

    /// Fraction of wall-clock time spent emitting pulses.
    pub fn realized_duty(&self) -> f64 {
        self.train_size as f64 * self.pulse_spacing_s / self.train_period_s
    }

    /// First pulse index of a train.
    pub fn base_index(&self, train: u64) -> u64 {
        train * self.train_size as u64
    }

    pub fn emission_time_s(&self, train: u64, k: u32) -> f64 {
        train as f64 * self.train_period_s + k as f64 * self.pulse_spacing_s
    }

    /// When the reflected pulse reaches the detectors.
    pub fn detection_time_s(&self, train: u64, k: u32) -> f64 {
        self.emission_time_s(train, k) + self.gate_offset_s
    }
}

/// Why a run refused to emit key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    /// A security monitor raised an alert.
    SecurityAlert,
    /// The estimated QBER exceeded the abort threshold.
    QberAboveThreshold,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::SecurityAlert => write!(f, "security alert"),
            AbortReason::QberAboveThreshold => write!(f, "estimated QBER above threshold"),
        }
    }
}

/// Everything needed to run one exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: SystemParams,
    pub detector: DetectorModel,
    pub eve: EveModel,
    /// Requested pulse count; rounded up to whole trains.
    pub n_pulses: u64,
    pub seed: u64,
    /// Fraction of the sifted key disclosed for error estimation.
    pub sample_fraction: f64,
    /// Replaces the computed train size (hardware-compatibility knob).
    pub train_size_override: Option<u32>,
    pub dead_time_scope: DeadTimeScope,
    pub qber_abort_threshold: f64,
    /// Monitored input power in nominal units; `None` reads nominal.
    pub power_actual: Option<f64>,
    pub power_bounds: (f64, f64),
    /// True source intensity when it differs from the configured `mu`
    /// (attack injection for exercising the coincidence monitor).
    pub mu_actual: Option<f64>,
}

impl RunConfig {
    pub fn new(params: SystemParams, detector: DetectorModel, eve: EveModel) -> Self {
        RunConfig {
            params,
            detector,
            eve,
            n_pulses: 1_000_000,
            seed: 1,
            sample_fraction: 0.10,
            train_size_override: None,
            dead_time_scope: DeadTimeScope::SystemWide,
            qber_abort_threshold: QBER_ABORT_THRESHOLD,
            power_actual: None,
            power_bounds: (0.9, 1.1),
            mu_actual: None,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.params.validate()?;
        self.detector.validate()?;
        self.eve.validate()?;
        if self.n_pulses < 1 {
            return Err(RunError::Config("n_pulses"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return Err(RunError::Config("sample_fraction"));
        }
        if !(self.qber_abort_threshold > 0.0 && self.qber_abort_threshold <= 0.5) {
            return Err(RunError::Config("qber_abort_threshold"));
        }
        if !(self.power_bounds.0 < self.power_bounds.1) {
            return Err(RunError::Config("power_bounds"));
        }
        if let Some(mu) = self.mu_actual {
            if !(mu > 0.0 && mu <= 5.0) {
                return Err(RunError::Config("mu_actual"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<TrainSchedule, RunError> {
        TrainSchedule::from_params(&self.params, self.train_size_override)
    }

    /// Monitor primed with this configuration's honest expectations.
    pub fn security_monitor(&self) -> Result<SecurityMonitor, RunError> {
        Ok(SecurityMonitor {
            expected_coincidence_prob: expected_coincidence_prob(&self.params, &self.detector)?,
            power_nominal: 1.0,
            power_bounds: self.power_bounds,
        })
    }
}

/// Draws one train's worth of Alice's modulator settings.
/// Per pulse: first the bit, then the basis.
pub fn draw_alice_settings(rng: &mut SimRng, n: usize) -> (Vec<bool>, Vec<bool>) {
    let mut bits = Vec::with_capacity(n);
    let mut bases = Vec::with_capacity(n);
    for _ in 0..n {
        bits.push(rng.random::<bool>());
        bases.push(rng.random::<bool>());
    }
    (bits, bases)
}

/// Draws one train's worth of Bob's analyzer bases.
pub fn draw_bob_bases(rng: &mut SimRng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Phase indices (`bit·2 + basis`) for transport to the other process.
pub fn phase_indices(bits: &[bool], bases: &[bool]) -> Vec<u8> {
    bits.iter()
        .zip(bases)
        .map(|(&bit, &basis)| (bit as u8) * 2 + basis as u8)
        .collect()
}

/// The Monte Carlo quantum channel and receiver, advanced one train at a
/// time. Owns the optics/detector substreams; protocol-level randomness
/// (settings, sampling) stays with the caller.
#[derive(Debug, Clone)]
pub struct QuantumBench {
    pub schedule: TrainSchedule,
    optics: PulseOptics,
    bank: DetectorBank,
    rng_channel: SimRng,
    rng_d1: SimRng,
    rng_d2: SimRng,
    next_train: u64,
    live_gates: u64,
    clicks: u64,
    coincidences: u64,
}

impl QuantumBench {
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let schedule = config.schedule()?;
        // The channel simulates the true intensity; monitors and analytic
        // expectations elsewhere keep using the configured one.
        let mut physical = config.params.clone();
        if let Some(mu) = config.mu_actual {
            physical.mu = mu;
        }
        let optics = PulseOptics::from_params(&physical)?;
        let bank = DetectorBank::from_models(&config.params, &config.detector, config.dead_time_scope)?;
        Ok(QuantumBench {
            schedule,
            optics,
            bank,
            rng_channel: substream(config.seed, Stream::Channel),
            rng_d1: substream(config.seed, Stream::DetectorD1),
            rng_d2: substream(config.seed, Stream::DetectorD2),
            next_train: 0,
            live_gates: 0,
            clicks: 0,
            coincidences: 0,
        })
    }

    /// Gates applied outside any dead window.
    pub fn live_gates(&self) -> u64 {
        self.live_gates
    }

    /// Pulses that produced at least one click.
    pub fn clicks(&self) -> u64 {
        self.clicks
    }

    /// Pulses that fired both detectors.
    pub fn coincidences(&self) -> u64 {
        self.coincidences
    }

    /// Simulates the next train. Trains must be simulated in order; the
    /// settings slices must match the schedule's train size.
    pub fn simulate_train(
        &mut self,
        train: u64,
        alice_phase_indices: &[u8],
        bob_bases: &[bool],
    ) -> Result<Vec<ClickRecord>, RunError> {
        if train != self.next_train {
            return Err(RunError::Config("trains must be simulated in order"));
        }
        let n = self.schedule.train_size as usize;
        if alice_phase_indices.len() != n || bob_bases.len() != n {
            return Err(RunError::Config("settings length != train size"));
        }
        self.next_train += 1;
        let base = self.schedule.base_index(train);
        let mut records = Vec::new();
        for k in 0..n {
            let idx = alice_phase_indices[k];
            if idx > 3 {
                return Err(RunError::Config("phase index out of range"));
            }
            let frame = QuantumFrame {
                pulse_index: base + k as u64,
                alice_bit: idx & 2 != 0,
                alice_basis: idx & 1 != 0,
                bob_basis: bob_bases[k],
            };
            let t = self.schedule.detection_time_s(train, k as u32);
            // Photons propagate regardless of detector state, so the
            // channel substream advances on every pulse.
            let arriving = self.optics.photons_after_channel(&mut self.rng_channel);
            let (n1, n2) = self
                .optics
                .route(frame.delta_quarter_turns(), arriving, &mut self.rng_channel);
            let live = !self.bank.d1.is_dead_at(t) && !self.bank.d2.is_dead_at(t);
            let (c1, c2) =
                self.bank
                    .gate_pair(t, n1, n2, &mut self.rng_d1, &mut self.rng_d2)?;
            if live {
                self.live_gates += 1;
            }
            if c1 || c2 {
                self.clicks += 1;
            }
            let coincidence = c1 && c2;
            if coincidence {
                self.coincidences += 1;
            }
            if c1 {
                records.push(ClickRecord {
                    pulse_index: frame.pulse_index,
                    detector: DetectorId::D1,
                    time_s: t,
                    coincidence,
                });
            }
            if c2 {
                records.push(ClickRecord {
                    pulse_index: frame.pulse_index,
                    detector: DetectorId::D2,
                    time_s: t,
                    coincidence,
                });
            }
        }
        Ok(records)
    }
}

/// Counters and derived figures from one exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub n_trains: u64,
    pub n_pulses: u64,
    pub live_gates: u64,
    pub clicks: u64,
    pub coincidences: u64,
    pub sift: SiftStats,
    /// Sifted bits before error-estimation disclosure.
    pub sifted_bits: usize,
    /// Errors over the full sifted key (simulation-side observable).
    pub full_key_errors: usize,
    pub full_key_qber: f64,
    /// Wall-clock link time covered by the run.
    pub elapsed_s: f64,
    pub realized_duty: f64,
    /// Sifted bits per second of link time.
    pub sifted_rate_hz: f64,
    pub alerts: Vec<SecurityAlert>,
}

/// Result of one complete exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Alice's final key (empty if aborted).
    pub alice_key: SiftedKey,
    /// Bob's final key (empty if aborted).
    pub bob_key: SiftedKey,
    pub estimate: QberEstimate,
    pub stats: RunStats,
    pub aborted: Option<AbortReason>,
}

/// Runs a whole exchange in-process: quantum transmission, per-train
/// sifting, sampled error estimation and the security checks.
///
/// The networked session drivers perform exactly these steps with the
/// classical data crossing a byte stream; both consume the same substreams
/// in the same order, so outcomes are bit-identical for a given seed.
pub fn run_exchange(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let mut bench = QuantumBench::new(config)?;
    let schedule = bench.schedule;
    let n = schedule.train_size as usize;
    let n_trains = config.n_pulses.div_ceil(schedule.train_size as u64).max(1);

    let mut rng_alice = substream(config.seed, Stream::AliceSettings);
    let mut rng_bob = substream(config.seed, Stream::BobBases);
    let mut rng_sampling = substream(config.seed, Stream::Sampling);

    let mut alice_key = SiftedKey::default();
    let mut bob_key = SiftedKey::default();
    let mut sift_stats = SiftStats::default();

    for train in 0..n_trains {
        let (bits, bases) = draw_alice_settings(&mut rng_alice, n);
        let bob_bases = draw_bob_bases(&mut rng_bob, n);
        let phases = phase_indices(&bits, &bases);
        let records = bench.simulate_train(train, &phases, &bob_bases)?;
        let outcome = sift_train(&bits, &bases, &bob_bases, &records, schedule.base_index(train))?;
        sift_stats.disclosed += outcome.stats.disclosed;
        sift_stats.coincidences += outcome.stats.coincidences;
        sift_stats.incompatible += outcome.stats.incompatible;
        sift_stats.kept += outcome.stats.kept;
        alice_key.append(&outcome.indices, &outcome.alice_bits);
        bob_key.append(&outcome.indices, &outcome.bob_bits);
    }

    let sifted_bits = alice_key.len();
    let full_key_errors = alice_key
        .bits
        .iter()
        .zip(&bob_key.bits)
        .filter(|(a, b)| a != b)
        .count();
    let elapsed_s = n_trains as f64 * schedule.train_period_s;

    let positions = sample_positions(sifted_bits, config.sample_fraction, &mut rng_sampling);
    if positions.is_empty() {
        return Err(RunError::Degenerate("no sifted bits to estimate from"));
    }
    let alice_sample = alice_key.extract_sample(&positions)?;
    let bob_sample = bob_key.extract_sample(&positions)?;
    let estimate = qber_from_sample(&alice_sample, &bob_sample)?;

    let monitor = config.security_monitor()?;
    let mut alerts = Vec::new();
    if let Some(alert) = monitor.check_coincidences(bench.live_gates(), bench.coincidences()) {
        alerts.push(alert);
    }
    if let Some(alert) = monitor.check_power(config.power_actual) {
        alerts.push(alert);
    }

    let aborted = if !alerts.is_empty() {
        Some(AbortReason::SecurityAlert)
    } else if estimate.exceeds(config.qber_abort_threshold) {
        Some(AbortReason::QberAboveThreshold)
    } else {
        None
    };
    if aborted.is_some() {
        // No key material may survive an abort.
        alice_key = SiftedKey::default();
        bob_key = SiftedKey::default();
    }

    let stats = RunStats {
        n_trains,
        n_pulses: n_trains * schedule.train_size as u64,
        live_gates: bench.live_gates(),
        clicks: bench.clicks(),
        coincidences: bench.coincidences(),
        sift: sift_stats,
        sifted_bits,
        full_key_errors,
        full_key_qber: if sifted_bits > 0 {
            full_key_errors as f64 / sifted_bits as f64
        } else {
            0.0
        },
        elapsed_s,
        realized_duty: schedule.realized_duty(),
        sifted_rate_hz: sifted_bits as f64 / elapsed_s,
        alerts,
    };

    Ok(RunOutcome {
        alice_key,
        bob_key,
        estimate,
        stats,
        aborted,
    })
}

/// Errors from the line-length echo scan.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationError {
    /// No gate position produced a qualified echo.
    EchoNotFound,
    Config(&'static str),
}

impl fmt::Display for CalibrationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationError::EchoNotFound => write!(f, "no echo found in the scanned window"),
            CalibrationError::Config(msg) => write!(f, "invalid calibration config: {msg}"),
        }
    }
}

impl core::error::Error for CalibrationError {}

/// Settings for the time-domain echo scan.
#[derive(Debug, Clone, PartialEq)]
pub struct LineScan {
    /// Where the reflecting end actually is (simulation ground truth).
    pub true_length_km: f64,
    /// Operator's initial estimate; the scan covers ± the half width.
    pub guess_km: f64,
    pub scan_halfwidth_km: f64,
    pub gate_width_s: f64,
    /// Probe pulses fired per gate position.
    pub pulses_per_position: u32,
    /// Click probability when the gate overlaps the echo.
    pub echo_click_prob: f64,
    /// Click probability when it does not.
    pub p_dark: f64,
    pub group_velocity_m_per_s: f64,
    pub seed: u64,
}

impl Default for LineScan {
    fn default() -> Self {
        LineScan {
            true_length_km: 22.0,
            guess_km: 22.0,
            scan_halfwidth_km: 5.0,
            gate_width_s: DEFAULT_GATE_WIDTH_S,
            pulses_per_position: 16,
            echo_click_prob: 0.99,
            p_dark: 1e-5,
            group_velocity_m_per_s: crate::rate_model::DEFAULT_GROUP_VELOCITY_M_PER_S,
            seed: 1,
        }
    }
}

/// Result of the echo scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationReport {
    pub estimated_length_km: f64,
    pub coarse_positions: usize,
    pub fine_positions: usize,
}

/// Locates the line's reflecting end by scanning the detection gate delay:
/// a coarse pass at one gate width per step finds the echo, a fine pass at
/// 1/50 gate width maps the plateau, and its midpoint is the estimate.
pub fn calibrate_line_length(scan: &LineScan) -> Result<CalibrationReport, CalibrationError> {
    if !(scan.true_length_km >= 0.0 && scan.guess_km >= 0.0) {
        return Err(CalibrationError::Config("lengths must be >= 0"));
    }
    if !(scan.scan_halfwidth_km > 0.0) {
        return Err(CalibrationError::Config("scan_halfwidth_km"));
    }
    if !(scan.gate_width_s > 0.0) {
        return Err(CalibrationError::Config("gate_width_s"));
    }
    if scan.pulses_per_position < 1 {
        return Err(CalibrationError::Config("pulses_per_position"));
    }
    if !(scan.echo_click_prob > 0.0 && scan.echo_click_prob <= 1.0)
        || !(0.0..1.0).contains(&scan.p_dark)
        || scan.echo_click_prob <= scan.p_dark
    {
        return Err(CalibrationError::Config("click probabilities"));
    }
    let v = scan.group_velocity_m_per_s;
    if !(v > 1.0e8 && v < 3.0e8) {
        return Err(CalibrationError::Config("group_velocity_m_per_s"));
    }

    let mut rng = substream(scan.seed, Stream::Calibration);
    let t_true = 2.0 * scan.true_length_km * 1000.0 / v;
    let t_lo = (2.0 * (scan.guess_km - scan.scan_halfwidth_km) * 1000.0 / v).max(0.0);
    let t_hi = 2.0 * (scan.guess_km + scan.scan_halfwidth_km) * 1000.0 / v;
    let w = scan.gate_width_s;
    let k = scan.pulses_per_position;

    let qualifies = |t_gate: f64, rng: &mut SimRng| -> bool {
        let p = if (t_gate - t_true).abs() <= w / 2.0 {
            scan.echo_click_prob
        } else {
            scan.p_dark
        };
        let clicks = (0..k).filter(|_| rng.random_bool(p)).count() as u32;
        clicks > k / 2
    };

    // Coarse pass: one gate width per step guarantees at least one step
    // lands on the echo plateau if it is inside the window.
    let mut coarse_positions = 0;
    let mut coarse_hit = None;
    let mut t = t_lo;
    while t <= t_hi {
        coarse_positions += 1;
        if qualifies(t, &mut rng) {
            coarse_hit = Some(t);
            break;
        }
        t += w;
    }
    let coarse_hit = coarse_hit.ok_or(CalibrationError::EchoNotFound)?;

    // Fine pass around the hit: map the plateau and take its midpoint.
    let fine_step = w / 50.0;
    let mut fine_positions = 0;
    let mut first_q = None;
    let mut last_q = None;
    let mut t = (coarse_hit - w).max(0.0);
    let fine_end = coarse_hit + w;
    while t <= fine_end {
        fine_positions += 1;
        if qualifies(t, &mut rng) {
            if first_q.is_none() {
                first_q = Some(t);
            }
            last_q = Some(t);
        }
        t += fine_step;
    }
    let (first_q, last_q) = match (first_q, last_q) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CalibrationError::EchoNotFound),
    };
    let t_est = 0.5 * (first_q + last_q);
    Ok(CalibrationReport {
        estimated_length_km: t_est * v / 2000.0,
        coarse_positions,
        fine_positions,
    })
}

/// Settings for the fringe-visibility measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityPlan {
    /// Mean photon number used for the measurement. Fringe contrast does
    /// not depend on intensity, so a bright setting shortens the run.
    pub mu: f64,
    pub gates_per_setting: u64,
    pub seed: u64,
}

impl Default for VisibilityPlan {
    fn default() -> Self {
        VisibilityPlan {
            mu: 2.0,
            gates_per_setting: 500_000,
            seed: 1,
        }
    }
}

/// Counting data from one interferometer setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettingStats {
    /// Alice's phase index and Bob's basis for this setting.
    pub alice_phase_index: u8,
    pub bob_basis: bool,
    pub live_gates: u64,
    pub bright_clicks: u64,
    pub dim_clicks: u64,
    pub visibility: f64,
    pub stderr: f64,
}

/// Result of the visibility measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityReport {
    pub visibility: f64,
    /// Propagated one-sigma counting uncertainty of `visibility`.
    pub stderr: f64,
    pub qber_opt: f64,
    pub settings: [SettingStats; 4],
}

/// Measures the interference fringe visibility.
///
/// Four phase settings are probed, each steering the light fully onto one
/// detector: for every compatible setting the bright port collects
/// `(1+V)/2` of the light and the dim port `(1-V)/2`. Click fractions are
/// converted to mean photon-detection rates with the Poisson saturation
/// inversion `λ = -ln(1-f)` and corrected for dark counts, which makes the
/// estimator usable at bright settings where click fractions saturate.
/// Afterpulsing inflates both ports by the same relative factor (it is
/// proportional to each port's own click rate with a shared gate
/// schedule), so it cancels in the visibility ratio.
pub fn measure_visibility(
    params: &SystemParams,
    detector: &DetectorModel,
    scope: DeadTimeScope,
    plan: &VisibilityPlan,
) -> Result<VisibilityReport, RunError> {
    params.validate()?;
    detector.validate()?;
    if !(plan.mu > 0.0 && plan.mu <= 5.0) {
        return Err(RunError::Config("visibility mu"));
    }
    if plan.gates_per_setting < 100 {
        return Err(RunError::Config("gates_per_setting"));
    }

    let t_ab = params.fiber.transmission()?;
    let optics = PulseOptics::new(plan.mu, t_ab * params.t_bob, params.visibility())?;
    let mut rng_channel = substream(plan.seed, Stream::Visibility);
    let mut rng_d1 = substream(plan.seed, Stream::DetectorD1);
    let mut rng_d2 = substream(plan.seed, Stream::DetectorD2);

    // (alice phase index, bob basis, detector the light steers onto)
    let probe_settings: [(u8, bool, DetectorId); 4] = [
        (0, false, DetectorId::D1),
        (2, false, DetectorId::D2),
        (1, true, DetectorId::D1),
        (3, true, DetectorId::D2),
    ];
    let lambda_dark = -math::ln(1.0 - detector.p_dark);

    let mut settings = [SettingStats {
        alice_phase_index: 0,
        bob_basis: false,
        live_gates: 0,
        bright_clicks: 0,
        dim_clicks: 0,
        visibility: 0.0,
        stderr: 0.0,
    }; 4];
    for (slot, &(phase_idx, bob_basis, bright)) in probe_settings.iter().enumerate() {
        let frame = QuantumFrame {
            pulse_index: 0,
            alice_bit: phase_idx & 2 != 0,
            alice_basis: phase_idx & 1 != 0,
            bob_basis,
        };
        let delta = frame.delta_quarter_turns();
        let mut bank = DetectorBank::from_models(params, detector, scope)?;
        let mut live = 0u64;
        let mut clicks_d1 = 0u64;
        let mut clicks_d2 = 0u64;
        for g in 0..plan.gates_per_setting {
            let t = (g + 1) as f64 / params.nu_hz;
            let arriving = optics.photons_after_channel(&mut rng_channel);
            let (n1, n2) = optics.route(delta, arriving, &mut rng_channel);
            let was_live = !bank.d1.is_dead_at(t) && !bank.d2.is_dead_at(t);
            let (c1, c2) = bank.gate_pair(t, n1, n2, &mut rng_d1, &mut rng_d2)?;
            if was_live {
                live += 1;
                clicks_d1 += c1 as u64;
                clicks_d2 += c2 as u64;
            }
        }
        if live == 0 {
            return Err(RunError::Degenerate("no live gates in visibility scan"));
        }
        let (bright_clicks, dim_clicks) = match bright {
            DetectorId::D1 => (clicks_d1, clicks_d2),
            DetectorId::D2 => (clicks_d2, clicks_d1),
        };
        let f_b = bright_clicks as f64 / live as f64;
        let f_d = scaled_fraction(dim_clicks, live);
        if f_b >= 1.0 {
            return Err(RunError::Degenerate("bright port saturated every gate"));
        }
        let lam_b = (-math::ln(1.0 - f_b) - lambda_dark).max(0.0);
        let lam_d = (-math::ln(1.0 - f_d) - lambda_dark).max(0.0);
        let sum = lam_b + lam_d;
        if sum <= 0.0 {
            return Err(RunError::Degenerate("no optical signal in visibility scan"));
        }
        let vis = (lam_b - lam_d) / sum;
        // Delta method: var(λ) = (k+1)/(n²(1-f)) from the click count k,
        // |∂V/∂λ_b| = 2λ_d/S², |∂V/∂λ_d| = 2λ_b/S². The +1 keeps the
        // variance honest when a port sees only a handful of counts: the
        // observed k understates the Poisson variance on exactly the
        // downward fluctuations that shrink the naive error bar.
        let n = live as f64;
        let var_lb = (bright_clicks + 1) as f64 / (n * n * (1.0 - f_b));
        let var_ld = (dim_clicks + 1) as f64 / (n * n * (1.0 - f_d));
        let s2 = sum * sum;
        let g_b = 2.0 * lam_d / s2;
        let g_d = 2.0 * lam_b / s2;
        let var_v = g_b * g_b * var_lb + g_d * g_d * var_ld;
        settings[slot] = SettingStats {
            alice_phase_index: phase_idx,
            bob_basis,
            live_gates: live,
            bright_clicks,
            dim_clicks,
            visibility: vis,
            stderr: math::sqrt(var_v),
        };
    }

    let mean = settings.iter().map(|s| s.visibility).sum::<f64>() / 4.0;
    let var_mean = settings.iter().map(|s| s.stderr * s.stderr).sum::<f64>() / 16.0;
    Ok(VisibilityReport {
        visibility: mean,
        stderr: math::sqrt(var_mean),
        qber_opt: (1.0 - mean) / 2.0,
        settings,
    })
}

/// Click fraction with zero counts nudged off the boundary so the
/// saturation inversion stays finite (half-count continuity correction).
fn scaled_fraction(clicks: u64, live: u64) -> f64 {
    if clicks == 0 {
        0.5 / live as f64
    } else {
        clicks as f64 / live as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate_model::FiberSpec;

    fn lake_params() -> SystemParams {
        SystemParams {
            qber_opt: 0.0015,
            fiber: FiberSpec::new(22.0, 0.0, 4.8),
            ..SystemParams::default()
        }
    }

    fn small_config(n_pulses: u64, seed: u64) -> RunConfig {
        let mut config = RunConfig::new(
            lake_params(),
            DetectorModel::default(),
            EveModel::default(),
        );
        config.n_pulses = n_pulses;
        config.seed = seed;
        config
    }

    #[test]
    fn schedule_matches_the_link_geometry() {
        let s = TrainSchedule::from_params(&lake_params(), None).unwrap();
        // 10 km storage at 2e8 m/s and 5 MHz: 0.98·500 pulses fit.
        assert_eq!(s.train_size, 490);
        // Round trip of 32 km at 2e8 m/s.
        assert!((s.train_period_s - 3.2e-4).abs() < 1e-18);
        assert!((s.gate_offset_s - 2.2e-4).abs() < 1e-18);
        assert!((s.realized_duty() - 0.30625).abs() < 1e-12);
        // Override shrinks the train but keeps the period.
        let o = TrainSchedule::from_params(&lake_params(), Some(480)).unwrap();
        assert_eq!(o.train_size, 480);
        assert!((o.realized_duty() - 0.3).abs() < 1e-12);
        assert!(TrainSchedule::from_params(&lake_params(), Some(2000)).is_err());
    }

    #[test]
    fn detection_times_fall_inside_later_trains() {
        let s = TrainSchedule::from_params(&lake_params(), None).unwrap();
        assert_eq!(s.base_index(3), 1470);
        let t0 = s.detection_time_s(0, 0);
        assert!((t0 - 2.2e-4).abs() < 1e-18);
        // Strictly increasing gate times across train boundaries.
        let last_of_0 = s.detection_time_s(0, s.train_size - 1);
        let first_of_1 = s.detection_time_s(1, 0);
        assert!(first_of_1 > last_of_0);
    }

    #[test]
    fn exchange_is_reproducible_and_consistent() {
        let config = small_config(100_000, 42);
        let a = run_exchange(&config).unwrap();
        let b = run_exchange(&config).unwrap();
        assert_eq!(a.alice_key, b.alice_key);
        assert_eq!(a.bob_key, b.bob_key);
        assert_eq!(a.estimate, b.estimate);
        assert!(a.aborted.is_none());
        // Keys share pulse indices; bits differ only at errors.
        assert_eq!(a.alice_key.pulse_indices, a.bob_key.pulse_indices);
        assert!(a.stats.full_key_qber < 0.06);
        assert!(a.stats.sifted_bits > 0);
        // Roughly half the detected pulses survive sifting.
        let kept = a.stats.sift.kept as f64;
        let disclosed = a.stats.sift.disclosed as f64;
        assert!(kept / disclosed > 0.35 && kept / disclosed < 0.65);

        let c = run_exchange(&small_config(100_000, 43)).unwrap();
        assert_ne!(a.alice_key.bits, c.alice_key.bits);
    }

    #[test]
    fn sample_disclosure_shrinks_the_final_key() {
        let config = small_config(80_000, 7);
        let out = run_exchange(&config).unwrap();
        let disclosed = out.estimate.sampled;
        assert_eq!(out.alice_key.len() + disclosed, out.stats.sifted_bits);
        assert_eq!(out.alice_key.len(), out.bob_key.len());
    }

    #[test]
    fn high_qber_aborts_without_key_material() {
        let mut config = small_config(60_000, 5);
        // Visibility 0.6 puts the optical QBER floor at 20%.
        config.params.qber_opt = 0.2;
        let out = run_exchange(&config).unwrap();
        assert_eq!(out.aborted, Some(AbortReason::QberAboveThreshold));
        assert!(out.alice_key.is_empty());
        assert!(out.bob_key.is_empty());
        assert!(out.estimate.qber > 0.15);
    }

    #[test]
    fn power_anomaly_aborts_without_key_material() {
        let mut config = small_config(20_000, 5);
        config.power_actual = Some(1.5);
        let out = run_exchange(&config).unwrap();
        assert_eq!(out.aborted, Some(AbortReason::SecurityAlert));
        assert!(out.alice_key.is_empty());
        assert_eq!(out.stats.alerts.len(), 1);
    }

    #[test]
    fn intensity_anomaly_trips_the_coincidence_monitor() {
        let mut config = small_config(200_000, 11);
        config.mu_actual = Some(2.0);
        let out = run_exchange(&config).unwrap();
        assert_eq!(out.aborted, Some(AbortReason::SecurityAlert));
        assert!(out
            .stats
            .alerts
            .iter()
            .any(|a| matches!(a, SecurityAlert::ExcessCoincidences { .. })));
        assert!(out.alice_key.is_empty());

        // The same run at the configured intensity passes the monitor.
        let honest = run_exchange(&small_config(200_000, 11)).unwrap();
        assert!(honest.aborted.is_none());
    }

    #[test]
    fn echo_scan_finds_the_line_end() {
        let scan = LineScan {
            true_length_km: 22.0,
            guess_km: 21.6,
            seed: 3,
            ..LineScan::default()
        };
        let report = calibrate_line_length(&scan).unwrap();
        let err_m = (report.estimated_length_km - 22.0).abs() * 1000.0;
        assert!(err_m < 0.5, "error {err_m} m");
        assert!(report.coarse_positions > 0 && report.fine_positions > 0);
    }

    #[test]
    fn echo_outside_the_window_is_not_found() {
        let scan = LineScan {
            true_length_km: 30.0,
            guess_km: 20.0,
            seed: 3,
            ..LineScan::default()
        };
        assert_eq!(calibrate_line_length(&scan), Err(CalibrationError::EchoNotFound));
    }

    #[test]
    fn visibility_scan_recovers_the_configured_contrast() {
        // Bench configuration: no fiber loss, published-grade visibility.
        let params = SystemParams {
            qber_opt: 0.0015,
            ..SystemParams::default()
        };
        let plan = VisibilityPlan {
            gates_per_setting: 40_000,
            seed: 9,
            ..VisibilityPlan::default()
        };
        let report = measure_visibility(
            &params,
            &DetectorModel::default(),
            DeadTimeScope::SystemWide,
            &plan,
        )
        .unwrap();
        assert!(report.stderr > 0.0 && report.stderr < 0.01);
        // Smoke margin; the statistical acceptance check runs longer.
        assert!(
            (report.visibility - 0.9970).abs() < 5.0 * report.stderr,
            "visibility {} stderr {}",
            report.visibility,
            report.stderr
        );
        assert!((report.qber_opt - (1.0 - report.visibility) / 2.0).abs() < 1e-15);
        for s in &report.settings {
            assert!(s.bright_clicks > s.dim_clicks);
        }
    }
}
