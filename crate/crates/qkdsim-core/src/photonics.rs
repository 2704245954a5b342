//! Monte Carlo photon-level model of the quantum channel and receiver.
//!
//! A pulse is traced in stages: Poisson photon statistics at the source,
//! per-photon survival through the lumped channel loss, interferometric
//! routing between the two detectors according to the phase difference, and
//! finally gated detection with dark counts, afterpulses and dead time.
//!
//! Phases are quarter turns (multiples of π/2) represented as integers so
//! that routing probabilities at perfect visibility are exact. Alice's
//! phase index encodes `bit·2 + basis`, Bob's equals his basis, and their
//! difference mod 4 determines the interference:
//!
//! - even difference: compatible bases, photon routed deterministically
//!   (up to visibility) to the detector identifying the bit,
//! - odd difference: incompatible bases, photon routed 50/50.
//!
//! Detectors draw exactly one uniform per applied gate, combining photon
//! absorption, dark counts and afterpulses into a single no-click
//! probability; a gate inside the dead time draws nothing. This keeps the
//! per-substream consumption schedule reproducible for a given seed.

use alloc::collections::VecDeque;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::math;
use crate::rate_model::{AfterpulseProfile, DetectorModel, SystemParams};
use crate::rng::SimRng;

/// Errors from photon-level simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum PhotonicsError {
    /// A detector was gated at a time not after its previous gate.
    GateOutOfOrder { last_s: f64, attempted_s: f64 },
    /// A named parameter failed validation.
    InvalidConfig(&'static str),
}

impl fmt::Display for PhotonicsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhotonicsError::GateOutOfOrder { last_s, attempted_s } => write!(
                f,
                "detector gated out of order: last gate at {last_s} s, attempted {attempted_s} s"
            ),
            PhotonicsError::InvalidConfig(name) => write!(f, "invalid photonics config: {name}"),
        }
    }
}

impl core::error::Error for PhotonicsError {}

/// One pulse's protocol-level randomness: Alice's bit and basis choice and
/// Bob's measurement basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantumFrame {
    pub pulse_index: u64,
    pub alice_bit: bool,
    pub alice_basis: bool,
    pub bob_basis: bool,
}

impl QuantumFrame {
    /// Alice's phase in quarter turns: `bit·2 + basis`.
    pub fn alice_phase_index(&self) -> u8 {
        (self.alice_bit as u8) * 2 + self.alice_basis as u8
    }

    /// Bob's analyzer phase in quarter turns.
    pub fn bob_phase_index(&self) -> u8 {
        self.bob_basis as u8
    }

    /// Interferometer phase difference in quarter turns, mod 4.
    pub fn delta_quarter_turns(&self) -> u8 {
        (self.alice_phase_index() + 4 - self.bob_phase_index()) % 4
    }

    /// True when Alice and Bob used the same basis.
    pub fn compatible(&self) -> bool {
        self.alice_basis == self.bob_basis
    }
}

/// Builds a frame from a phase index Alice announced (simulation transport)
/// and Bob's basis.
pub fn frame_from_phase_index(
    pulse_index: u64,
    alice_phase_index: u8,
    bob_basis: bool,
) -> Result<QuantumFrame, PhotonicsError> {
    if alice_phase_index > 3 {
        return Err(PhotonicsError::InvalidConfig("alice_phase_index"));
    }
    Ok(QuantumFrame {
        pulse_index,
        alice_bit: alice_phase_index & 2 != 0,
        alice_basis: alice_phase_index & 1 != 0,
        bob_basis,
    })
}

/// `cos` of a quarter-turn multiple, exact.
const COS_QUARTER: [f64; 4] = [1.0, 0.0, -1.0, 0.0];

/// Source, channel and interferometer description for pulse tracing.
#[derive(Debug, Clone)]
pub struct PulseOptics {
    /// Mean photon number per pulse at the source.
    pub mu: f64,
    /// Lumped transmission from source to the detectors' photosensitive
    /// area (fiber plus receiver optics, excluding quantum efficiency).
    pub transmission: f64,
    /// Interference fringe visibility.
    pub visibility: f64,
    photon_dist: Option<Poisson<f64>>,
}

impl PulseOptics {
    pub fn new(mu: f64, transmission: f64, visibility: f64) -> Result<Self, PhotonicsError> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(PhotonicsError::InvalidConfig("mu"));
        }
        if !(0.0..=1.0).contains(&transmission) {
            return Err(PhotonicsError::InvalidConfig("transmission"));
        }
        if !(0.0..=1.0).contains(&visibility) {
            return Err(PhotonicsError::InvalidConfig("visibility"));
        }
        let photon_dist = if mu > 0.0 {
            Some(Poisson::new(mu).expect("mu validated positive and finite"))
        } else {
            None
        };
        Ok(PulseOptics {
            mu,
            transmission,
            visibility,
            photon_dist,
        })
    }

    /// Combined optics for a configured link: fiber times Bob's optics,
    /// with the published fringe visibility.
    pub fn from_params(params: &SystemParams) -> Result<Self, PhotonicsError> {
        let t_ab = params
            .fiber
            .transmission()
            .map_err(|_| PhotonicsError::InvalidConfig("fiber loss"))?;
        PulseOptics::new(params.mu, t_ab * params.t_bob, params.visibility())
    }

    /// Photon number leaving the source for one pulse.
    pub fn emitted_photons(&self, rng: &mut SimRng) -> u32 {
        match &self.photon_dist {
            Some(dist) => dist.sample(rng) as u32,
            None => 0,
        }
    }

    /// Thins `n` photons by the channel transmission.
    pub fn surviving_photons(&self, n: u32, rng: &mut SimRng) -> u32 {
        if self.transmission >= 1.0 {
            return n;
        }
        let mut survivors = 0;
        for _ in 0..n {
            if rng.random_bool(self.transmission) {
                survivors += 1;
            }
        }
        survivors
    }

    /// Photon number reaching the detectors for one pulse.
    pub fn photons_after_channel(&self, rng: &mut SimRng) -> u32 {
        let n = self.emitted_photons(rng);
        self.surviving_photons(n, rng)
    }

    /// Probability that a photon exits towards detector D1 for a given
    /// phase difference: `(1 + V·cos Δφ)/2`.
    pub fn d1_probability(&self, delta_quarter_turns: u8) -> f64 {
        let c = COS_QUARTER[(delta_quarter_turns % 4) as usize];
        (1.0 + self.visibility * c) / 2.0
    }

    /// Routes `n` photons through the interferometer; returns the photon
    /// counts arriving at (D1, D2).
    pub fn route(&self, delta_quarter_turns: u8, n: u32, rng: &mut SimRng) -> (u32, u32) {
        let p1 = self.d1_probability(delta_quarter_turns);
        let mut n1 = 0;
        for _ in 0..n {
            if rng.random_bool(p1) {
                n1 += 1;
            }
        }
        (n1, n - n1)
    }
}

/// Which of Bob's two detectors fired. D1 marks bit 0, D2 bit 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorId {
    D1,
    D2,
}

impl DetectorId {
    pub fn bit(&self) -> bool {
        matches!(self, DetectorId::D2)
    }
}

/// Window beyond which stored avalanches contribute nothing measurable.
const AVALANCHE_HISTORY_TIME_CONSTS: f64 = 10.0;

/// A gated single-photon avalanche detector with dark counts, exponential
/// afterpulsing and dead time.
#[derive(Debug, Clone)]
pub struct GatedDetector {
    pub id: DetectorId,
    /// Quantum efficiency per photon.
    pub efficiency: f64,
    /// Dark-count probability per applied gate.
    pub p_dark: f64,
    pub afterpulse: AfterpulseProfile,
    pub dead_time_s: f64,
    dead_until_s: f64,
    last_gate_s: f64,
    avalanche_times_s: VecDeque<f64>,
}

impl GatedDetector {
    pub fn new(
        id: DetectorId,
        efficiency: f64,
        p_dark: f64,
        afterpulse: AfterpulseProfile,
        dead_time_s: f64,
    ) -> Result<Self, PhotonicsError> {
        if !(0.0..=1.0).contains(&efficiency) {
            return Err(PhotonicsError::InvalidConfig("efficiency"));
        }
        if !(0.0..1.0).contains(&p_dark) {
            return Err(PhotonicsError::InvalidConfig("p_dark"));
        }
        if !(dead_time_s >= 0.0) {
            return Err(PhotonicsError::InvalidConfig("dead_time_s"));
        }
        Ok(GatedDetector {
            id,
            efficiency,
            p_dark,
            afterpulse,
            dead_time_s,
            dead_until_s: f64::NEG_INFINITY,
            last_gate_s: f64::NEG_INFINITY,
            avalanche_times_s: VecDeque::new(),
        })
    }

    /// True when a gate at `t_s` would fall inside the dead time.
    pub fn is_dead_at(&self, t_s: f64) -> bool {
        t_s < self.dead_until_s
    }

    /// Extends the dead window, used for receiver-wide blanking after any
    /// click. Never shortens an existing window.
    pub fn suppress_until(&mut self, t_s: f64) {
        if t_s > self.dead_until_s {
            self.dead_until_s = t_s;
        }
    }

    /// Number of remembered avalanches (diagnostic).
    pub fn avalanche_count(&self) -> usize {
        self.avalanche_times_s.len()
    }

    /// Applies one gate at time `t_s` with `n_photons` arriving.
    ///
    /// Gate times must be strictly increasing. A gate inside the dead time
    /// reports no click and consumes no randomness. Otherwise one uniform
    /// decides the outcome against the combined no-click probability
    /// `(1-η)^n · (1-p_dark) · Π_i (1 - A·exp(-(t-t_i)/t_c))`
    /// over the remembered avalanche times `t_i`. A click arms the dead
    /// time and is remembered as a new avalanche.
    pub fn gate(
        &mut self,
        t_s: f64,
        n_photons: u32,
        rng: &mut SimRng,
    ) -> Result<bool, PhotonicsError> {
        if !(t_s > self.last_gate_s) || !t_s.is_finite() {
            return Err(PhotonicsError::GateOutOfOrder {
                last_s: self.last_gate_s,
                attempted_s: t_s,
            });
        }
        self.last_gate_s = t_s;
        let horizon = t_s - AVALANCHE_HISTORY_TIME_CONSTS * self.afterpulse.time_const_s;
        while matches!(self.avalanche_times_s.front(), Some(&t0) if t0 < horizon) {
            self.avalanche_times_s.pop_front();
        }
        if self.is_dead_at(t_s) {
            return Ok(false);
        }
        let mut p_noclick = (1.0 - self.p_dark) * math::powf(1.0 - self.efficiency, n_photons as f64);
        for &t_av in &self.avalanche_times_s {
            p_noclick *= 1.0 - self.afterpulse.probability_at(t_s - t_av);
        }
        let click = rng.random::<f64>() < 1.0 - p_noclick;
        if click {
            self.avalanche_times_s.push_back(t_s);
            self.dead_until_s = t_s + self.dead_time_s;
        }
        Ok(click)
    }
}

/// How a click on one detector affects the other one's dead time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeadTimeScope {
    /// Any click blanks the whole receiver: both detectors share one dead
    /// window. This matches a rate reduction of `1/(1 + ν·p_det·τ)` where
    /// `p_det` counts clicks on either detector.
    SystemWide,
    /// Each detector recovers independently.
    PerDetector,
}

/// Bob's two gated detectors plus the dead-time coupling policy.
#[derive(Debug, Clone)]
pub struct DetectorBank {
    pub d1: GatedDetector,
    pub d2: GatedDetector,
    pub scope: DeadTimeScope,
}

impl DetectorBank {
    pub fn new(d1: GatedDetector, d2: GatedDetector, scope: DeadTimeScope) -> Self {
        DetectorBank { d1, d2, scope }
    }

    /// Two identically configured detectors from the analytic models.
    pub fn from_models(
        params: &SystemParams,
        detector: &DetectorModel,
        scope: DeadTimeScope,
    ) -> Result<Self, PhotonicsError> {
        let build = |id| {
            GatedDetector::new(
                id,
                params.eta_bob,
                detector.p_dark,
                detector.afterpulse,
                params.dead_time_s,
            )
        };
        Ok(DetectorBank::new(
            build(DetectorId::D1)?,
            build(DetectorId::D2)?,
            scope,
        ))
    }

    /// Gates both detectors at `t_s` with the routed photon counts, using
    /// one RNG substream per detector, and applies receiver-wide blanking
    /// when configured.
    pub fn gate_pair(
        &mut self,
        t_s: f64,
        n_d1: u32,
        n_d2: u32,
        rng_d1: &mut SimRng,
        rng_d2: &mut SimRng,
    ) -> Result<(bool, bool), PhotonicsError> {
        let c1 = self.d1.gate(t_s, n_d1, rng_d1)?;
        let c2 = self.d2.gate(t_s, n_d2, rng_d2)?;
        if self.scope == DeadTimeScope::SystemWide && (c1 || c2) {
            let until = t_s + self.d1.dead_time_s.max(self.d2.dead_time_s);
            self.d1.suppress_until(until);
            self.d2.suppress_until(until);
        }
        Ok((c1, c2))
    }
}

/// One recorded detection event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickRecord {
    pub pulse_index: u64,
    pub detector: DetectorId,
    pub time_s: f64,
    /// True when the other detector fired in the same gate.
    pub coincidence: bool,
}
