//! Closed-form link budget for an auto-compensating BB84 fiber link.
//!
//! The model predicts, from first principles, what the detectors at Bob's
//! end observe: the raw (sifted) key rate, the quantitative QBER breakdown
//! into optical contrast, dark counts, afterpulses and stray light, and the
//! net key rate left after error correction and privacy amplification
//! against an individual-attack eavesdropper bound.
//!
//! Conventions used throughout:
//!
//! - Losses are in dB, transmissions are linear fractions.
//! - `p_det = μ·t_AB·t_B·η_B` is the per-gate photon detection probability.
//! - Entropy terms use `0·log2(0) = 0`.
//! - QBER estimates above 0.5 are reported clamped to 0.5 with a flag
//!   instead of silently producing nonsense downstream.

use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// Sifting factor: the fraction of detected bits with compatible bases.
pub const DEFAULT_Q: f64 = 0.5;
/// Pulse repetition rate.
pub const DEFAULT_NU_HZ: f64 = 5.0e6;
/// Mean photon number per weak pulse leaving Alice.
pub const DEFAULT_MU: f64 = 0.2;
/// Transmission of Bob's receiver optics.
pub const DEFAULT_T_BOB: f64 = 0.6;
/// Detector quantum efficiency.
pub const DEFAULT_ETA_BOB: f64 = 0.1;
/// Dark-count probability per detector per gate.
pub const DEFAULT_P_DARK: f64 = 1.0e-5;
/// Detector dead time applied after a click.
pub const DEFAULT_DEAD_TIME_S: f64 = 4.0e-6;
/// Longest supported dead time.
pub const MAX_DEAD_TIME_S: f64 = 12.0e-6;
/// Length of Alice's storage line.
pub const DEFAULT_STORAGE_LEN_KM: f64 = 10.0;
/// Group velocity of light in the fiber.
pub const DEFAULT_GROUP_VELOCITY_M_PER_S: f64 = 2.0e8;
/// Thermal expansion coefficient of installed fiber.
pub const DEFAULT_THERMAL_ALPHA_PER_K: f64 = 1.0e-5;
/// Detector gate width.
pub const DEFAULT_GATE_WIDTH_S: f64 = 2.5e-9;

/// Afterpulse-sum terms smaller than this are dropped.
const AFTERPULSE_TERM_CUTOFF: f64 = 1e-15;

/// Errors from invalid model inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// A dB loss figure was negative.
    NegativeLoss(f64),
    /// An operation required a strictly positive detection probability.
    NonPositiveDetectionProb(f64),
    /// A QBER argument was outside [0, 0.5].
    InvalidQber(f64),
    /// A visibility was outside [0, 1].
    InvalidVisibility(f64),
    /// Interference rates unusable (negative, or summing to zero).
    InvalidInterferenceRates { right: f64, wrong: f64 },
    /// The eavesdropper anchors are calibrated for a different mean photon
    /// number; explicit anchors are required.
    EveAnchorsUncalibrated { anchor_mu: f64, mu: f64 },
    /// The eavesdropper anchor table is structurally invalid.
    BadEveAnchors(&'static str),
    /// A named parameter failed validation.
    InvalidParam(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::NegativeLoss(v) => write!(f, "loss must be >= 0 dB, got {v}"),
            ModelError::NonPositiveDetectionProb(v) => {
                write!(f, "detection probability must be > 0, got {v}")
            }
            ModelError::InvalidQber(v) => write!(f, "QBER must lie in [0, 0.5], got {v}"),
            ModelError::InvalidVisibility(v) => {
                write!(f, "visibility must lie in [0, 1], got {v}")
            }
            ModelError::InvalidInterferenceRates { right, wrong } => {
                write!(f, "interference rates unusable: right={right}, wrong={wrong}")
            }
            ModelError::EveAnchorsUncalibrated { anchor_mu, mu } => write!(
                f,
                "eavesdropper anchors are calibrated for mu={anchor_mu}, got mu={mu}; \
                 supply anchors for this pulse intensity"
            ),
            ModelError::BadEveAnchors(msg) => write!(f, "bad eavesdropper anchors: {msg}"),
            ModelError::InvalidParam(name) => write!(f, "invalid parameter: {name}"),
        }
    }
}

impl core::error::Error for ModelError {}

/// Physical description of the transmission fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberSpec {
    pub length_km: f64,
    pub loss_coeff_db_per_km: f64,
    /// Connector/splice/component losses on top of the distributed loss,
    /// so the total can match a measured link budget.
    pub extra_loss_db: f64,
    pub thermal_alpha_per_k: f64,
    pub group_velocity_m_per_s: f64,
}

impl FiberSpec {
    pub fn new(length_km: f64, loss_coeff_db_per_km: f64, extra_loss_db: f64) -> Self {
        FiberSpec {
            length_km,
            loss_coeff_db_per_km,
            extra_loss_db,
            thermal_alpha_per_k: DEFAULT_THERMAL_ALPHA_PER_K,
            group_velocity_m_per_s: DEFAULT_GROUP_VELOCITY_M_PER_S,
        }
    }

    pub fn total_loss_db(&self) -> f64 {
        self.length_km * self.loss_coeff_db_per_km + self.extra_loss_db
    }

    /// Linear one-way transmission of the fiber.
    pub fn transmission(&self) -> Result<f64, ModelError> {
        self.validate()?;
        transmission_from_loss(self.total_loss_db())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.length_km >= 0.0) {
            return Err(ModelError::InvalidParam("fiber.length_km"));
        }
        if !(self.loss_coeff_db_per_km >= 0.0) {
            return Err(ModelError::InvalidParam("fiber.loss_coeff_db_per_km"));
        }
        if !(self.extra_loss_db >= 0.0) {
            return Err(ModelError::InvalidParam("fiber.extra_loss_db"));
        }
        if !(self.thermal_alpha_per_k >= 0.0) {
            return Err(ModelError::InvalidParam("fiber.thermal_alpha_per_k"));
        }
        if !(self.group_velocity_m_per_s > 1.0e8 && self.group_velocity_m_per_s < 3.0e8) {
            return Err(ModelError::InvalidParam("fiber.group_velocity_m_per_s"));
        }
        Ok(())
    }
}

/// Full parameter set of one link configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    /// Sifting factor (basis-compatibility fraction).
    pub q: f64,
    /// Pulse repetition rate in Hz.
    pub nu_hz: f64,
    /// Mean photon number per pulse leaving Alice.
    pub mu: f64,
    /// Transmission of Bob's optics.
    pub t_bob: f64,
    /// Detector quantum efficiency.
    pub eta_bob: f64,
    /// Storage-line length at Alice, in km.
    pub storage_len_km: f64,
    /// Detector dead time in seconds.
    pub dead_time_s: f64,
    /// Optical QBER floor from imperfect interference contrast.
    pub qber_opt: f64,
    /// Residual QBER from stray light (e.g. classical-channel crosstalk
    /// on shared fibers). Enters the analytic budget only.
    pub qber_stray: f64,
    pub fiber: FiberSpec,
}

impl Default for SystemParams {
    /// Bench defaults: reference source/receiver on a zero-length fiber.
    fn default() -> Self {
        SystemParams {
            q: DEFAULT_Q,
            nu_hz: DEFAULT_NU_HZ,
            mu: DEFAULT_MU,
            t_bob: DEFAULT_T_BOB,
            eta_bob: DEFAULT_ETA_BOB,
            storage_len_km: DEFAULT_STORAGE_LEN_KM,
            dead_time_s: DEFAULT_DEAD_TIME_S,
            qber_opt: 0.0,
            qber_stray: 0.0,
            fiber: FiberSpec::new(0.0, 0.0, 0.0),
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(ModelError::InvalidParam("q"));
        }
        if !(self.nu_hz > 0.0) {
            return Err(ModelError::InvalidParam("nu_hz"));
        }
        if !(self.mu > 0.0 && self.mu <= 5.0) {
            return Err(ModelError::InvalidParam("mu"));
        }
        if !(self.t_bob > 0.0 && self.t_bob <= 1.0) {
            return Err(ModelError::InvalidParam("t_bob"));
        }
        if !(self.eta_bob > 0.0 && self.eta_bob <= 1.0) {
            return Err(ModelError::InvalidParam("eta_bob"));
        }
        if !(self.storage_len_km >= 0.0) {
            return Err(ModelError::InvalidParam("storage_len_km"));
        }
        if !(self.dead_time_s >= 0.0 && self.dead_time_s <= MAX_DEAD_TIME_S) {
            return Err(ModelError::InvalidParam("dead_time_s"));
        }
        if !(self.qber_opt >= 0.0 && self.qber_opt <= 0.5) {
            return Err(ModelError::InvalidQber(self.qber_opt));
        }
        if !(self.qber_stray >= 0.0 && self.qber_stray <= 0.5) {
            return Err(ModelError::InvalidQber(self.qber_stray));
        }
        self.fiber.validate()
    }

    /// Per-gate photon detection probability `μ·t_AB·t_B·η_B`.
    pub fn p_det(&self) -> Result<f64, ModelError> {
        Ok(self.mu * self.fiber.transmission()? * self.t_bob * self.eta_bob)
    }

    /// Interference visibility implied by the optical QBER floor.
    pub fn visibility(&self) -> f64 {
        1.0 - 2.0 * self.qber_opt
    }
}

/// Exponential afterpulse probability profile `A·exp(-Δt/t_c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AfterpulseProfile {
    /// Probability of an afterpulse in a gate immediately after an avalanche.
    pub amplitude: f64,
    /// Decay time constant of the trapped-carrier population.
    pub time_const_s: f64,
}

impl AfterpulseProfile {
    pub fn new(amplitude: f64, time_const_s: f64) -> Result<Self, ModelError> {
        if !(amplitude >= 0.0 && amplitude < 1.0) {
            return Err(ModelError::InvalidParam("afterpulse.amplitude"));
        }
        if !(time_const_s > 0.0) {
            return Err(ModelError::InvalidParam("afterpulse.time_const_s"));
        }
        Ok(AfterpulseProfile {
            amplitude,
            time_const_s,
        })
    }

    /// Afterpulse probability in a gate `dt_s` after an avalanche.
    pub fn probability_at(&self, dt_s: f64) -> f64 {
        if dt_s < 0.0 {
            return 0.0;
        }
        self.amplitude * math::exp(-dt_s / self.time_const_s)
    }

    /// Solves `(amplitude, time_const)` so that the afterpulse QBER equals
    /// `qber_at_zero` with no dead time and `qber_at_tau` with dead time
    /// `tau_s`, at the stated operating point.
    ///
    /// The decay constant is found by bisection on the ratio of the two
    /// predicted QBERs (the amplitude cancels there), then the amplitude is
    /// fixed by the zero-dead-time anchor.
    pub fn calibrated(
        qber_at_zero: f64,
        qber_at_tau: f64,
        tau_s: f64,
        p_det: f64,
        nu_hz: f64,
    ) -> Result<Self, ModelError> {
        if !(qber_at_zero > 0.0 && qber_at_tau > 0.0 && qber_at_tau < qber_at_zero) {
            return Err(ModelError::InvalidParam("afterpulse anchor QBERs"));
        }
        if !(tau_s > 0.0 && p_det > 0.0 && nu_hz > 0.0) {
            return Err(ModelError::InvalidParam("afterpulse anchor operating point"));
        }
        let target = qber_at_tau / qber_at_zero;
        let ratio = |tc: f64| -> f64 {
            let unit = AfterpulseProfile {
                amplitude: 1.0,
                time_const_s: tc,
            };
            let at_tau = qber_after(&unit, p_det, nu_hz, tau_s).unwrap_or(0.0);
            let at_zero = qber_after(&unit, p_det, nu_hz, 0.0).unwrap_or(0.0);
            at_tau / at_zero
        };
        // ratio(tc) grows monotonically from 0 towards 1 with tc.
        let mut lo = tau_s / 100.0;
        let mut hi = tau_s * 100.0;
        if ratio(lo) > target || ratio(hi) < target {
            return Err(ModelError::InvalidParam("afterpulse anchors unreachable"));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        let tc = 0.5 * (lo + hi);
        let unit = AfterpulseProfile {
            amplitude: 1.0,
            time_const_s: tc,
        };
        let amplitude = qber_at_zero / qber_after(&unit, p_det, nu_hz, 0.0)?;
        AfterpulseProfile::new(amplitude, tc)
    }

    /// Profile calibrated to the reference detector characterization:
    /// 4.0% afterpulse QBER with no dead time and 1.5% with 4 μs dead time,
    /// at p_det = 0.15% and ν = 5 MHz.
    pub fn default_calibrated() -> Self {
        AfterpulseProfile::calibrated(0.04, 0.015, 4.0e-6, 0.0015, DEFAULT_NU_HZ)
            .expect("reference afterpulse anchors are solvable")
    }
}

/// Detector noise description used by the analytic model.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    /// Dark-count probability per detector per gate.
    pub p_dark: f64,
    pub afterpulse: AfterpulseProfile,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel {
            p_dark: DEFAULT_P_DARK,
            afterpulse: AfterpulseProfile::default_calibrated(),
        }
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.p_dark >= 0.0 && self.p_dark < 1.0) {
            return Err(ModelError::InvalidParam("detector.p_dark"));
        }
        AfterpulseProfile::new(self.afterpulse.amplitude, self.afterpulse.time_const_s)?;
        Ok(())
    }
}

/// Eavesdropper information bound, anchored at measured loss points and
/// interpolated linearly in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct EveModel {
    /// Loss-independent information floor.
    pub base_info: f64,
    /// Mean photon number the anchors were derived for.
    pub anchor_mu: f64,
    /// `(loss_db, info)` anchor points, strictly increasing in loss.
    pub anchors: Vec<(f64, f64)>,
}

impl Default for EveModel {
    fn default() -> Self {
        EveModel {
            base_info: 0.03,
            anchor_mu: DEFAULT_MU,
            anchors: alloc::vec![(5.0, 0.06), (10.0, 0.14), (20.0, 0.40)],
        }
    }
}

impl EveModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.base_info >= 0.0 && self.base_info <= 1.0) {
            return Err(ModelError::BadEveAnchors("base_info outside [0, 1]"));
        }
        if !(self.anchor_mu > 0.0) {
            return Err(ModelError::BadEveAnchors("anchor_mu must be > 0"));
        }
        if self.anchors.len() < 2 {
            return Err(ModelError::BadEveAnchors("need at least two anchors"));
        }
        for pair in self.anchors.windows(2) {
            if !(pair[0].0 < pair[1].0) {
                return Err(ModelError::BadEveAnchors("losses not strictly increasing"));
            }
        }
        for &(loss, info) in &self.anchors {
            if !(loss >= 0.0) || !(0.0..=1.0).contains(&info) {
                return Err(ModelError::BadEveAnchors("anchor outside valid range"));
            }
        }
        Ok(())
    }
}

/// Predicted link performance, broken down by mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// Per-gate photon detection probability.
    pub p_det: f64,
    /// `q·ν·t_B·η_B`, the distance-independent rate prefactor.
    pub prefactor_hz: f64,
    pub r_raw_hz: f64,
    pub qber_opt: f64,
    pub qber_dark: f64,
    pub qber_after: f64,
    pub qber_stray: f64,
    pub qber_total: f64,
    /// True when the component sum exceeded 0.5 and was clamped.
    pub qber_clamped: bool,
    pub eta_duty: f64,
    pub eta_tau: f64,
    pub visibility: f64,
    pub i_ab: f64,
    pub i_ab_corrected: f64,
    pub i_ae: f64,
    /// Net-to-raw rate ratio `(I_AB - I_AE)·I'_AB/I_AB`.
    pub eta_dist: f64,
    pub r_net_hz: f64,
    /// True when the eavesdropper bound wiped out the net rate.
    pub r_net_clamped: bool,
}

impl fmt::Display for RateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "p_det          {:>12.6e}  per gate", self.p_det)?;
        writeln!(f, "prefactor      {:>12.3} kHz", self.prefactor_hz / 1e3)?;
        writeln!(f, "eta_duty       {:>12.4}", self.eta_duty)?;
        writeln!(f, "eta_tau        {:>12.4}", self.eta_tau)?;
        writeln!(f, "r_raw          {:>12.3} kHz", self.r_raw_hz / 1e3)?;
        writeln!(
            f,
            "qber           {:>12.3} %  (opt {:.3} + dark {:.3} + after {:.3} + stray {:.3}){}",
            self.qber_total * 100.0,
            self.qber_opt * 100.0,
            self.qber_dark * 100.0,
            self.qber_after * 100.0,
            self.qber_stray * 100.0,
            if self.qber_clamped { "  [clamped]" } else { "" }
        )?;
        writeln!(f, "visibility     {:>12.4} %", self.visibility * 100.0)?;
        writeln!(f, "I(A;B)         {:>12.4}  (corrected {:.4})", self.i_ab, self.i_ab_corrected)?;
        writeln!(f, "I(A;E)         {:>12.4}", self.i_ae)?;
        writeln!(f, "eta_dist       {:>12.4}", self.eta_dist)?;
        write!(
            f,
            "r_net          {:>12.3} kHz{}",
            self.r_net_hz / 1e3,
            if self.r_net_clamped { "  [clamped to 0]" } else { "" }
        )
    }
}

/// Linear transmission for a dB loss: `10^(-loss/10)`.
pub fn transmission_from_loss(loss_db: f64) -> Result<f64, ModelError> {
    if !(loss_db >= 0.0) {
        return Err(ModelError::NegativeLoss(loss_db));
    }
    Ok(math::powf(10.0, -loss_db / 10.0))
}

/// Duty-cycle efficiency of the go-and-return train scheme:
/// `l_D / (l_AB + l_D)`.
pub fn eta_duty(storage_len_km: f64, link_len_km: f64) -> Result<f64, ModelError> {
    if !(storage_len_km > 0.0) {
        return Err(ModelError::InvalidParam("storage_len_km"));
    }
    if !(link_len_km >= 0.0) {
        return Err(ModelError::InvalidParam("link_len_km"));
    }
    Ok(storage_len_km / (link_len_km + storage_len_km))
}

/// Rate reduction from detector dead time: `1 / (1 + ν·p_det·τ)`.
pub fn eta_tau(nu_hz: f64, p_det: f64, dead_time_s: f64) -> f64 {
    debug_assert!(nu_hz >= 0.0 && p_det >= 0.0 && dead_time_s >= 0.0);
    1.0 / (1.0 + nu_hz * p_det * dead_time_s)
}

/// Dark-count QBER contribution: `p_dark / p_det`, clamped to [0, 0.5].
///
/// `p_dark` is per detector per gate; with two detectors, half of all dark
/// counts land in the wrong detector, which is what the ratio captures.
pub fn qber_dark(p_dark: f64, p_det: f64) -> Result<f64, ModelError> {
    if !(p_det > 0.0) {
        return Err(ModelError::NonPositiveDetectionProb(p_det));
    }
    if !(p_dark >= 0.0) {
        return Err(ModelError::InvalidParam("p_dark"));
    }
    Ok((p_dark / p_det).clamp(0.0, 0.5))
}

/// Afterpulse QBER contribution.
///
/// Sums the afterpulse probability over the gates between two detections
/// (on average `1/p_det` gates at period `1/ν`, first gate delayed by the
/// dead time), halved because afterpulses split evenly between detectors:
/// `(1/2)·Σ_{n=0..⌈1/p_det⌉} A·exp(-(τ + n/ν)/t_c)`.
pub fn qber_after(
    profile: &AfterpulseProfile,
    p_det: f64,
    nu_hz: f64,
    dead_time_s: f64,
) -> Result<f64, ModelError> {
    if !(p_det > 0.0) {
        return Err(ModelError::NonPositiveDetectionProb(p_det));
    }
    if !(nu_hz > 0.0) {
        return Err(ModelError::InvalidParam("nu_hz"));
    }
    if !(dead_time_s >= 0.0) {
        return Err(ModelError::InvalidParam("dead_time_s"));
    }
    if profile.amplitude == 0.0 {
        return Ok(0.0);
    }
    let n_max = math::ceil(1.0 / p_det) as u64;
    let decay_per_gate = math::exp(-1.0 / (nu_hz * profile.time_const_s));
    let mut term = profile.probability_at(dead_time_s);
    let mut sum = 0.0;
    for _ in 0..=n_max {
        if term < AFTERPULSE_TERM_CUTOFF {
            break;
        }
        sum += term;
        term *= decay_per_gate;
    }
    Ok(0.5 * sum)
}

/// Total QBER as the sum of its components, clamped to 0.5.
///
/// Returns `(qber, clamped)`.
pub fn qber_total(opt: f64, dark: f64, after: f64, stray: f64) -> (f64, bool) {
    let sum = opt + dark + after + stray;
    if sum > 0.5 {
        (0.5, true)
    } else {
        (sum.max(0.0), false)
    }
}

/// Raw-rate budget pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRate {
    pub r_raw_hz: f64,
    pub prefactor_hz: f64,
    pub p_det: f64,
    pub eta_duty: f64,
    pub eta_tau: f64,
}

/// Sifted-key rate budget:
/// `R_raw = q·ν·μ·t_AB·t_B·η_B·η_duty·η_τ`.
pub fn raw_rate(params: &SystemParams) -> Result<RawRate, ModelError> {
    let t_ab = params.fiber.transmission()?;
    let p_det = params.mu * t_ab * params.t_bob * params.eta_bob;
    let duty = eta_duty(params.storage_len_km, params.fiber.length_km)?;
    let tau = eta_tau(params.nu_hz, p_det, params.dead_time_s);
    let prefactor = params.q * params.nu_hz * params.t_bob * params.eta_bob;
    Ok(RawRate {
        r_raw_hz: prefactor * params.mu * t_ab * duty * tau,
        prefactor_hz: prefactor,
        p_det,
        eta_duty: duty,
        eta_tau: tau,
    })
}

/// Shannon information between Alice and Bob for error rate `d`, plus the
/// practical error-correction variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoAb {
    /// `1 + d·log2(d) + (1-d)·log2(1-d)`.
    pub i_ab: f64,
    /// `1 + d·log2(d) - 3.5·d`, accounting for realistic error-correction
    /// leakage.
    pub i_ab_corrected: f64,
}

pub fn info_ab(d: f64) -> Result<InfoAb, ModelError> {
    if !(0.0..=0.5).contains(&d) {
        return Err(ModelError::InvalidQber(d));
    }
    Ok(InfoAb {
        i_ab: 1.0 + math::xlog2x(d) + math::xlog2x(1.0 - d),
        i_ab_corrected: 1.0 + math::xlog2x(d) - 3.5 * d,
    })
}

/// Eavesdropper information bound at a given link loss.
///
/// Linear interpolation between anchors in dB; linear extrapolation beyond
/// the outermost segments, clamped to [0, 1]. The anchors are only valid at
/// the pulse intensity they were derived for.
pub fn eve_info(loss_db: f64, mu: f64, model: &EveModel) -> Result<f64, ModelError> {
    model.validate()?;
    if !(loss_db >= 0.0) {
        return Err(ModelError::NegativeLoss(loss_db));
    }
    if math::abs(mu - model.anchor_mu) > 1e-9 {
        return Err(ModelError::EveAnchorsUncalibrated {
            anchor_mu: model.anchor_mu,
            mu,
        });
    }
    let anchors = &model.anchors;
    let segment = if loss_db <= anchors[0].0 {
        (anchors[0], anchors[1])
    } else if loss_db >= anchors[anchors.len() - 1].0 {
        (anchors[anchors.len() - 2], anchors[anchors.len() - 1])
    } else {
        let mut found = (anchors[0], anchors[1]);
        for pair in anchors.windows(2) {
            if loss_db >= pair[0].0 && loss_db <= pair[1].0 {
                found = (pair[0], pair[1]);
                break;
            }
        }
        found
    };
    let ((x0, y0), (x1, y1)) = segment;
    let attack_info = (y0 + (y1 - y0) * (loss_db - x0) / (x1 - x0)).clamp(0.0, 1.0);
    Ok((model.base_info + attack_info).min(1.0))
}

/// Net rate after error correction and privacy amplification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetRate {
    pub r_net_hz: f64,
    pub eta_dist: f64,
    pub i_ab: f64,
    pub i_ab_corrected: f64,
    /// True when `I_AE >= I_AB` forced the rate to zero.
    pub clamped: bool,
}

/// `R_net = (I_AB - I_AE)·(I'_AB/I_AB)·R_raw`, floored at zero.
pub fn net_rate(r_raw_hz: f64, qber: f64, i_ae: f64) -> Result<NetRate, ModelError> {
    if !(r_raw_hz >= 0.0) {
        return Err(ModelError::InvalidParam("r_raw_hz"));
    }
    if !(0.0..=1.0).contains(&i_ae) {
        return Err(ModelError::InvalidParam("i_ae"));
    }
    let info = info_ab(qber)?;
    if info.i_ab <= 0.0 {
        return Ok(NetRate {
            r_net_hz: 0.0,
            eta_dist: 0.0,
            i_ab: info.i_ab,
            i_ab_corrected: info.i_ab_corrected,
            clamped: true,
        });
    }
    // Both factors must be positive: Bob must know more than Eve, and the
    // error-correction-adjusted information must not be exhausted. At high
    // QBER both can go negative at once, so clamp on each factor, not on
    // their product.
    let surplus = info.i_ab - i_ae;
    let clamped = surplus <= 0.0 || info.i_ab_corrected <= 0.0;
    let eta_dist = if clamped {
        0.0
    } else {
        surplus * info.i_ab_corrected / info.i_ab
    };
    Ok(NetRate {
        r_net_hz: eta_dist * r_raw_hz,
        eta_dist,
        i_ab: info.i_ab,
        i_ab_corrected: info.i_ab_corrected,
        clamped,
    })
}

/// Interference visibility and the optical QBER it implies.
///
/// `V = (R_right - R_wrong)/(R_right + R_wrong)`, `QBER_opt = (1-V)/2`.
/// Rates must already be dark-count subtracted and non-negative.
pub fn visibility_stats(r_right: f64, r_wrong: f64) -> Result<(f64, f64), ModelError> {
    if !(r_right >= 0.0 && r_wrong >= 0.0) || r_right + r_wrong <= 0.0 {
        return Err(ModelError::InvalidInterferenceRates {
            right: r_right,
            wrong: r_wrong,
        });
    }
    let v = (r_right - r_wrong) / (r_right + r_wrong);
    Ok((v, (1.0 - v) / 2.0))
}

/// Optical path-length change of the go-and-return loop under a linear
/// temperature drift, accumulated over one pulse round trip separation:
/// `Δl = α·2·l_AB·θ·Δt` (θ in K/h).
pub fn thermal_path_shift(
    alpha_per_k: f64,
    link_len_km: f64,
    drift_k_per_h: f64,
    pulse_separation_s: f64,
) -> f64 {
    let link_m = link_len_km * 1000.0;
    let drift_k_per_s = drift_k_per_h / 3600.0;
    alpha_per_k * 2.0 * link_m * drift_k_per_s * pulse_separation_s
}

/// Full first-principles performance prediction for one configuration.
pub fn predict(
    params: &SystemParams,
    detector: &DetectorModel,
    eve: &EveModel,
) -> Result<RateReport, ModelError> {
    params.validate()?;
    detector.validate()?;
    let raw = raw_rate(params)?;
    let q_dark = qber_dark(detector.p_dark, raw.p_det)?;
    let q_after = qber_after(
        &detector.afterpulse,
        raw.p_det,
        params.nu_hz,
        params.dead_time_s,
    )?;
    let q_stray = params.qber_stray;
    let (q_total, q_clamped) = qber_total(params.qber_opt, q_dark, q_after, q_stray);
    let i_ae = eve_info(params.fiber.total_loss_db(), params.mu, eve)?;
    let net = net_rate(raw.r_raw_hz, q_total, i_ae)?;
    Ok(RateReport {
        p_det: raw.p_det,
        prefactor_hz: raw.prefactor_hz,
        r_raw_hz: raw.r_raw_hz,
        qber_opt: params.qber_opt,
        qber_dark: q_dark,
        qber_after: q_after,
        qber_stray: q_stray,
        qber_total: q_total,
        qber_clamped: q_clamped,
        eta_duty: raw.eta_duty,
        eta_tau: raw.eta_tau,
        visibility: params.visibility(),
        i_ab: net.i_ab,
        i_ab_corrected: net.i_ab_corrected,
        i_ae,
        eta_dist: net.eta_dist,
        r_net_hz: net.r_net_hz,
        r_net_clamped: net.clamped,
    })
}

/// What a detector-level Monte Carlo of the same configuration is expected
/// to *observe* per applied gate, as opposed to the idealized signal-only
/// budget: includes Poissonian saturation, dark counts, the afterpulse
/// cascade, and the schedule's realized duty ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedPrediction {
    /// Probability that at least one detector fires in an applied gate.
    pub p_click: f64,
    /// Probability that exactly one detector fires in an applied gate.
    pub p_single: f64,
    /// Probability that both detectors fire in an applied gate.
    pub p_coincidence: f64,
    /// Dead-time efficiency at the observed (not signal-only) click rate.
    pub eta_tau_obs: f64,
    /// Expected sifted-bit rate per second of wall-clock link time.
    pub sifted_rate_hz: f64,
    /// Expected error fraction of the sifted key.
    pub qber: f64,
}

/// Expected per-gate coincidence probability of an honest link, used as the
/// photon-number-splitting monitor baseline.
pub fn expected_coincidence_prob(
    params: &SystemParams,
    detector: &DetectorModel,
) -> Result<f64, ModelError> {
    let lambda = params.mu * params.fiber.transmission()? * params.t_bob;
    let eta = params.eta_bob;
    let p_dark = detector.p_dark;
    let v = params.visibility();
    let click = |rate: f64| 1.0 - math::exp(-rate) * (1.0 - p_dark);
    // Compatible bases concentrate light in one detector; incompatible
    // bases split it evenly. Both cases occur half the time.
    let compat = click(lambda * eta * (1.0 + v) / 2.0) * click(lambda * eta * (1.0 - v) / 2.0);
    let incompat = click(lambda * eta / 2.0) * click(lambda * eta / 2.0);
    let prim = 0.5 * compat + 0.5 * incompat;
    // Afterpulses can coincide with an ordinary click in the other detector.
    let p_det = lambda * eta;
    let cascade = afterpulse_yield(params, detector)?;
    let p_click = (1.0 - math::exp(-p_det) * (1.0 - p_dark) * (1.0 - p_dark))
        / (1.0 - cascade).max(f64::EPSILON);
    let ap_cross = cascade * p_click * click(p_det / 2.0);
    Ok(prim + ap_cross)
}

/// Expected afterpulses per avalanche given the configured dead time
/// (each one in turn can trigger again, forming a cascade).
fn afterpulse_yield(params: &SystemParams, detector: &DetectorModel) -> Result<f64, ModelError> {
    let p_det = params.p_det()?;
    if p_det <= 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * qber_after(&detector.afterpulse, p_det, params.nu_hz, params.dead_time_s)?)
}

/// Predicts the observable counting statistics for a Monte Carlo run whose
/// schedule achieves `realized_duty` (active emission time over total time).
pub fn observed_prediction(
    params: &SystemParams,
    detector: &DetectorModel,
    realized_duty: f64,
) -> Result<ObservedPrediction, ModelError> {
    params.validate()?;
    detector.validate()?;
    if !(realized_duty > 0.0 && realized_duty <= 1.0) {
        return Err(ModelError::InvalidParam("realized_duty"));
    }
    let p_det = params.p_det()?;
    let p_dark = detector.p_dark;
    let cascade = afterpulse_yield(params, detector)?;
    if cascade >= 1.0 {
        return Err(ModelError::InvalidParam("afterpulse cascade diverges"));
    }
    // Primary clicks: any photon detection or any dark count.
    let p_primary = 1.0 - math::exp(-p_det) * (1.0 - p_dark) * (1.0 - p_dark);
    let p_click = p_primary / (1.0 - cascade);
    let p_coinc = expected_coincidence_prob(params, detector)?;
    let p_single = (p_click - p_coinc).max(0.0);
    let eta_tau_obs = eta_tau(params.nu_hz, p_click, params.dead_time_s);
    let sifted_rate_hz = params.q * params.nu_hz * realized_duty * eta_tau_obs * p_single;
    let q_dark = qber_dark(p_dark, p_det)?;
    let q_after = qber_after(
        &detector.afterpulse,
        p_det,
        params.nu_hz,
        params.dead_time_s,
    )?;
    let (qber, _) = qber_total(params.qber_opt, q_dark, q_after, params.qber_stray);
    Ok(ObservedPrediction {
        p_click,
        p_single,
        p_coincidence: p_coinc,
        eta_tau_obs,
        sifted_rate_hz,
        qber,
    })
}
