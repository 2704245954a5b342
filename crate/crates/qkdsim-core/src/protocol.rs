//! Classical post-processing of the raw detection data: sifting, sampled
//! error estimation and the security monitors.
//!
//! The sifting exchange is split into the three views the two parties
//! actually have, so the same functions drive both the single-process
//! simulation and the networked sessions:
//!
//! 1. Bob turns his click records into public disclosures (pulse index,
//!    basis, coincidence flag) with [`disclose_clicks`]. Detector identity,
//!    which encodes the bit value, is never disclosed.
//! 2. Alice keeps the compatible non-coincidence clicks with
//!    [`alice_sift`], learning her key bits in the process.
//! 3. Bob maps the kept indices back to detector outcomes with
//!    [`bob_key_bits`].
//!
//! Coincidences (both detectors firing in one gate) carry no usable bit and
//! are dropped, but they are counted: an elevated coincidence rate is the
//! signature of a multiphoton attack, and [`SecurityMonitor`] compares the
//! observed count against the honest-link expectation.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::math;
use crate::photonics::ClickRecord;
use crate::rng::SimRng;

/// Estimated-QBER level above which a session must abort.
pub const QBER_ABORT_THRESHOLD: f64 = 0.15;

/// Errors from sifting and estimation.
#[derive(Debug, Clone, PartialEq)]
pub enum SiftError {
    LengthMismatch { left: usize, right: usize },
    /// A pulse index fell outside the block being sifted.
    IndexOutOfRange { pulse_index: u64 },
    /// Click records were not sorted by pulse index.
    UnsortedClicks { pulse_index: u64 },
    /// The same detector reported two clicks for one pulse.
    DuplicateClick { pulse_index: u64 },
    /// Coincidence flags disagree with the pairing of the records.
    CoincidenceFlagInconsistent { pulse_index: u64 },
    /// The sift result kept a pulse Bob cannot decode.
    KeptIndexNotClicked { pulse_index: u64 },
    /// Sample positions were not sorted, unique and in range.
    PositionsInvalid,
    EmptySample,
}

impl fmt::Display for SiftError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiftError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            SiftError::IndexOutOfRange { pulse_index } => {
                write!(f, "pulse index {pulse_index} outside the sifted block")
            }
            SiftError::UnsortedClicks { pulse_index } => {
                write!(f, "click records not sorted at pulse {pulse_index}")
            }
            SiftError::DuplicateClick { pulse_index } => {
                write!(f, "duplicate click for pulse {pulse_index}")
            }
            SiftError::CoincidenceFlagInconsistent { pulse_index } => {
                write!(f, "coincidence flags inconsistent at pulse {pulse_index}")
            }
            SiftError::KeptIndexNotClicked { pulse_index } => {
                write!(f, "sift kept pulse {pulse_index} with no usable click")
            }
            SiftError::PositionsInvalid => write!(f, "sample positions invalid"),
            SiftError::EmptySample => write!(f, "empty QBER sample"),
        }
    }
}

impl core::error::Error for SiftError {}

/// Bob's public statement about one gated pulse that produced a click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickDisclosure {
    pub pulse_index: u64,
    /// Bob's measurement basis for this pulse.
    pub basis: bool,
    /// True when both detectors fired; such pulses carry no bit.
    pub coincidence: bool,
}

/// Counters from one sifting round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SiftStats {
    /// Disclosed click events (coincidence pairs count once).
    pub disclosed: usize,
    pub coincidences: usize,
    pub incompatible: usize,
    pub kept: usize,
}

/// One party's accumulated sifted key.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiftedKey {
    pub pulse_indices: Vec<u64>,
    pub bits: Vec<bool>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn append(&mut self, indices: &[u64], bits: &[bool]) {
        debug_assert_eq!(indices.len(), bits.len());
        self.pulse_indices.extend_from_slice(indices);
        self.bits.extend_from_slice(bits);
    }

    /// Removes the bits at `positions` (sorted, unique) and returns them,
    /// for disclosure during error estimation.
    pub fn extract_sample(&mut self, positions: &[usize]) -> Result<Vec<bool>, SiftError> {
        validate_positions(positions, self.len())?;
        let sample: Vec<bool> = positions.iter().map(|&p| self.bits[p]).collect();
        let mut keep = alloc::vec![true; self.len()];
        for &p in positions {
            keep[p] = false;
        }
        let mut slot = 0;
        self.bits.retain(|_| {
            let k = keep[slot];
            slot += 1;
            k
        });
        slot = 0;
        self.pulse_indices.retain(|_| {
            let k = keep[slot];
            slot += 1;
            k
        });
        Ok(sample)
    }

    /// Key bits packed big-endian (bit 0 in the top bit of byte 0).
    pub fn to_bytes(&self) -> Vec<u8> {
        pack_bits(&self.bits)
    }
}

/// Packs bits MSB-first into bytes, zero-padding the final byte.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = alloc::vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Inverse of [`pack_bits`]; the padding bits must be zero.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>, SiftError> {
    if bytes.len() != n.div_ceil(8) {
        return Err(SiftError::LengthMismatch {
            left: bytes.len(),
            right: n.div_ceil(8),
        });
    }
    let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    for i in n..bytes.len() * 8 {
        if bytes[i / 8] & (0x80 >> (i % 8)) != 0 {
            return Err(SiftError::PositionsInvalid);
        }
    }
    Ok(bits)
}

/// Turns raw click records for the block starting at `base_index` into
/// public disclosures, merging coincidence pairs into single entries.
///
/// Records must be sorted by pulse index; a pulse may appear at most twice
/// (once per detector), and exactly the paired records must carry the
/// coincidence flag.
pub fn disclose_clicks(
    bob_bases: &[bool],
    clicks: &[ClickRecord],
    base_index: u64,
) -> Result<Vec<ClickDisclosure>, SiftError> {
    let n = bob_bases.len() as u64;
    let mut out: Vec<ClickDisclosure> = Vec::new();
    let mut i = 0;
    while i < clicks.len() {
        let c = clicks[i];
        let idx = c.pulse_index;
        if idx < base_index || idx >= base_index + n {
            return Err(SiftError::IndexOutOfRange { pulse_index: idx });
        }
        if let Some(prev) = out.last() {
            if idx < prev.pulse_index {
                return Err(SiftError::UnsortedClicks { pulse_index: idx });
            }
            if idx == prev.pulse_index {
                return Err(SiftError::DuplicateClick { pulse_index: idx });
            }
        }
        let paired = clicks.get(i + 1).filter(|d| d.pulse_index == idx);
        if let Some(d) = paired {
            if d.detector == c.detector {
                return Err(SiftError::DuplicateClick { pulse_index: idx });
            }
            if !c.coincidence || !d.coincidence {
                return Err(SiftError::CoincidenceFlagInconsistent { pulse_index: idx });
            }
            out.push(ClickDisclosure {
                pulse_index: idx,
                basis: bob_bases[(idx - base_index) as usize],
                coincidence: true,
            });
            i += 2;
        } else {
            if c.coincidence {
                return Err(SiftError::CoincidenceFlagInconsistent { pulse_index: idx });
            }
            out.push(ClickDisclosure {
                pulse_index: idx,
                basis: bob_bases[(idx - base_index) as usize],
                coincidence: false,
            });
            i += 1;
        }
    }
    Ok(out)
}

/// Alice's half of sifting: keeps the disclosed clicks that used her basis
/// and carried a bit. Returns the kept pulse indices, her key bits for
/// them, and the round's counters.
pub fn alice_sift(
    alice_bits: &[bool],
    alice_bases: &[bool],
    disclosures: &[ClickDisclosure],
    base_index: u64,
) -> Result<(Vec<u64>, Vec<bool>, SiftStats), SiftError> {
    if alice_bits.len() != alice_bases.len() {
        return Err(SiftError::LengthMismatch {
            left: alice_bits.len(),
            right: alice_bases.len(),
        });
    }
    let n = alice_bits.len() as u64;
    let mut stats = SiftStats {
        disclosed: disclosures.len(),
        ..SiftStats::default()
    };
    let mut kept = Vec::new();
    let mut bits = Vec::new();
    let mut last: Option<u64> = None;
    for d in disclosures {
        let idx = d.pulse_index;
        if idx < base_index || idx >= base_index + n {
            return Err(SiftError::IndexOutOfRange { pulse_index: idx });
        }
        if matches!(last, Some(prev) if idx <= prev) {
            return Err(SiftError::UnsortedClicks { pulse_index: idx });
        }
        last = Some(idx);
        let offset = (idx - base_index) as usize;
        if d.coincidence {
            stats.coincidences += 1;
        } else if alice_bases[offset] != d.basis {
            stats.incompatible += 1;
        } else {
            kept.push(idx);
            bits.push(alice_bits[offset]);
        }
    }
    stats.kept = kept.len();
    Ok((kept, bits, stats))
}

/// Bob's half of sifting: detector outcomes for the kept pulses.
///
/// Every kept index must correspond to exactly one of Bob's single-click
/// records; anything else means the peers disagree about the data.
pub fn bob_key_bits(clicks: &[ClickRecord], kept: &[u64]) -> Result<Vec<bool>, SiftError> {
    let mut bits = Vec::with_capacity(kept.len());
    let mut ci = 0;
    for &idx in kept {
        while ci < clicks.len() && clicks[ci].pulse_index < idx {
            ci += 1;
        }
        let c = clicks
            .get(ci)
            .filter(|c| c.pulse_index == idx && !c.coincidence)
            .ok_or(SiftError::KeptIndexNotClicked { pulse_index: idx })?;
        bits.push(c.detector.bit());
        ci += 1;
    }
    Ok(bits)
}

/// Both halves of one sifting round in one call, for in-process runs and
/// exhaustive tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    pub indices: Vec<u64>,
    pub alice_bits: Vec<bool>,
    pub bob_bits: Vec<bool>,
    pub stats: SiftStats,
}

pub fn sift_train(
    alice_bits: &[bool],
    alice_bases: &[bool],
    bob_bases: &[bool],
    clicks: &[ClickRecord],
    base_index: u64,
) -> Result<SiftOutcome, SiftError> {
    if alice_bits.len() != bob_bases.len() {
        return Err(SiftError::LengthMismatch {
            left: alice_bits.len(),
            right: bob_bases.len(),
        });
    }
    let disclosures = disclose_clicks(bob_bases, clicks, base_index)?;
    let (indices, alice_bits, stats) = alice_sift(alice_bits, alice_bases, &disclosures, base_index)?;
    let bob_bits = bob_key_bits(clicks, &indices)?;
    Ok(SiftOutcome {
        indices,
        alice_bits,
        bob_bits,
        stats,
    })
}

fn validate_positions(positions: &[usize], len: usize) -> Result<(), SiftError> {
    for (i, &p) in positions.iter().enumerate() {
        if p >= len || (i > 0 && positions[i - 1] >= p) {
            return Err(SiftError::PositionsInvalid);
        }
    }
    Ok(())
}

/// Draws `max(1, round(fraction·len))` distinct positions in `0..len`,
/// returned sorted. Uses a partial Fisher-Yates shuffle so the draw count
/// depends only on the sample size.
pub fn sample_positions(len: usize, fraction: f64, rng: &mut SimRng) -> Vec<usize> {
    if len == 0 || !(fraction > 0.0) {
        return Vec::new();
    }
    let m = (math::round(fraction * len as f64) as usize).clamp(1, len);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..m {
        let j = rng.random_range(i..len);
        pool.swap(i, j);
    }
    let mut sample = pool[..m].to_vec();
    sample.sort_unstable();
    sample
}

/// Result of a sampled QBER estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberEstimate {
    pub qber: f64,
    /// Two-sigma binomial half width `2·sqrt(q(1-q)/m)`.
    pub ci_2sigma: f64,
    pub sampled: usize,
    pub errors: usize,
}

impl QberEstimate {
    pub fn exceeds(&self, threshold: f64) -> bool {
        self.qber > threshold
    }
}

/// Compares the disclosed sample bits.
pub fn qber_from_sample(alice: &[bool], bob: &[bool]) -> Result<QberEstimate, SiftError> {
    if alice.len() != bob.len() {
        return Err(SiftError::LengthMismatch {
            left: alice.len(),
            right: bob.len(),
        });
    }
    if alice.is_empty() {
        return Err(SiftError::EmptySample);
    }
    let m = alice.len();
    let errors = alice.iter().zip(bob).filter(|(a, b)| a != b).count();
    let q = errors as f64 / m as f64;
    Ok(QberEstimate {
        qber: q,
        ci_2sigma: 2.0 * math::sqrt(q * (1.0 - q) / m as f64),
        sampled: m,
        errors,
    })
}

/// Anomalies that must abort a session without emitting key material.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SecurityAlert {
    /// More two-detector events than an honest link can explain.
    ExcessCoincidences {
        observed: u64,
        expected: f64,
        threshold: f64,
    },
    /// The monitored pulse energy left its calibrated window.
    PowerOutOfBounds { actual: f64, lo: f64, hi: f64 },
}

impl fmt::Display for SecurityAlert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecurityAlert::ExcessCoincidences {
                observed,
                expected,
                threshold,
            } => write!(
                f,
                "coincidence monitor: observed {observed}, expected {expected:.2}, \
                 threshold {threshold:.2}"
            ),
            SecurityAlert::PowerOutOfBounds { actual, lo, hi } => {
                write!(f, "power monitor: {actual} outside [{lo}, {hi}]")
            }
        }
    }
}

/// Watches the two observable attack signatures: excess coincidences
/// (multiphoton splitting) and incoming pulse energy (Trojan light).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityMonitor {
    /// Honest per-gate coincidence probability.
    pub expected_coincidence_prob: f64,
    /// Calibrated incoming power, in units of the nominal level.
    pub power_nominal: f64,
    pub power_bounds: (f64, f64),
}

impl Default for SecurityMonitor {
    fn default() -> Self {
        SecurityMonitor {
            expected_coincidence_prob: 0.0,
            power_nominal: 1.0,
            power_bounds: (0.9, 1.1),
        }
    }
}

impl SecurityMonitor {
    /// Flags a coincidence count more than five standard deviations above
    /// the honest expectation for `gates` applied gates.
    pub fn check_coincidences(&self, gates: u64, observed: u64) -> Option<SecurityAlert> {
        let expected = self.expected_coincidence_prob * gates as f64;
        let threshold = expected + 5.0 * math::sqrt(expected);
        if observed as f64 > threshold {
            Some(SecurityAlert::ExcessCoincidences {
                observed,
                expected,
                threshold,
            })
        } else {
            None
        }
    }

    /// Flags a measured power outside the calibrated window. `None` means
    /// the monitor read exactly the nominal level.
    pub fn check_power(&self, actual: Option<f64>) -> Option<SecurityAlert> {
        let actual = actual.unwrap_or(self.power_nominal);
        let (lo, hi) = self.power_bounds;
        if actual < lo || actual > hi {
            Some(SecurityAlert::PowerOutOfBounds { actual, lo, hi })
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonics::DetectorId;
    use crate::rng::{substream, Stream};

    fn click(pulse_index: u64, detector: DetectorId, coincidence: bool) -> ClickRecord {
        ClickRecord {
            pulse_index,
            detector,
            time_s: pulse_index as f64 * 2e-7,
            coincidence,
        }
    }

    #[test]
    fn sift_keeps_compatible_single_clicks() {
        let alice_bits = [false, true, true, false];
        let alice_bases = [false, false, true, true];
        let bob_bases = [false, true, true, false];
        let clicks = [
            click(0, DetectorId::D1, false),
            click(1, DetectorId::D2, false),
            click(2, DetectorId::D2, false),
        ];
        let out = sift_train(&alice_bits, &alice_bases, &bob_bases, &clicks, 0).unwrap();
        // Pulse 1 used mismatched bases; pulses 0 and 2 survive.
        assert_eq!(out.indices, [0, 2]);
        assert_eq!(out.alice_bits, [false, true]);
        assert_eq!(out.bob_bits, [false, true]);
        assert_eq!(
            out.stats,
            SiftStats {
                disclosed: 3,
                coincidences: 0,
                incompatible: 1,
                kept: 2
            }
        );
    }

    #[test]
    fn coincidences_are_dropped_but_counted() {
        let bits = [true, true];
        let bases = [false, false];
        let clicks = [
            click(0, DetectorId::D1, true),
            click(0, DetectorId::D2, true),
            click(1, DetectorId::D2, false),
        ];
        let out = sift_train(&bits, &bases, &bases, &clicks, 0).unwrap();
        assert_eq!(out.indices, [1]);
        assert_eq!(out.stats.coincidences, 1);
        assert_eq!(out.stats.kept, 1);
    }

    #[test]
    fn malformed_click_reports_are_rejected() {
        let bases = [false, false];
        // Same detector twice.
        let dup = [click(0, DetectorId::D1, true), click(0, DetectorId::D1, true)];
        assert_eq!(
            disclose_clicks(&bases, &dup, 0),
            Err(SiftError::DuplicateClick { pulse_index: 0 })
        );
        // Pair without coincidence flags.
        let unflagged = [click(0, DetectorId::D1, false), click(0, DetectorId::D2, true)];
        assert_eq!(
            disclose_clicks(&bases, &unflagged, 0),
            Err(SiftError::CoincidenceFlagInconsistent { pulse_index: 0 })
        );
        // Lone record claiming a coincidence.
        let lone = [click(1, DetectorId::D1, true)];
        assert_eq!(
            disclose_clicks(&bases, &lone, 0),
            Err(SiftError::CoincidenceFlagInconsistent { pulse_index: 1 })
        );
        // Out of order.
        let unsorted = [click(1, DetectorId::D1, false), click(0, DetectorId::D2, false)];
        assert_eq!(
            disclose_clicks(&bases, &unsorted, 0),
            Err(SiftError::UnsortedClicks { pulse_index: 0 })
        );
        // Outside the block.
        let outside = [click(7, DetectorId::D1, false)];
        assert_eq!(
            disclose_clicks(&bases, &outside, 0),
            Err(SiftError::IndexOutOfRange { pulse_index: 7 })
        );
    }

    #[test]
    fn bob_rejects_kept_indices_he_cannot_decode() {
        let clicks = [click(3, DetectorId::D1, false)];
        assert_eq!(
            bob_key_bits(&clicks, &[4]),
            Err(SiftError::KeptIndexNotClicked { pulse_index: 4 })
        );
        assert_eq!(bob_key_bits(&clicks, &[3]).unwrap(), [false]);
    }

    #[test]
    fn block_offsets_are_respected() {
        let bits = [true];
        let bases = [true];
        let clicks = [click(490, DetectorId::D2, false)];
        let out = sift_train(&bits, &bases, &bases, &clicks, 490).unwrap();
        assert_eq!(out.indices, [490]);
        assert_eq!(out.alice_bits, [true]);
        assert_eq!(out.bob_bits, [true]);
    }

    #[test]
    fn sample_positions_are_sorted_unique_and_sized() {
        let mut rng = substream(11, Stream::Sampling);
        let pos = sample_positions(1000, 0.1, &mut rng);
        assert_eq!(pos.len(), 100);
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(pos.iter().all(|&p| p < 1000));
        // Tiny keys still disclose at least one bit.
        assert_eq!(sample_positions(5, 0.01, &mut rng).len(), 1);
        assert_eq!(sample_positions(5, 1.0, &mut rng).len(), 5);
        assert!(sample_positions(0, 0.1, &mut rng).is_empty());
        // Deterministic for a fixed substream.
        let a = sample_positions(100, 0.2, &mut substream(3, Stream::Sampling));
        let b = sample_positions(100, 0.2, &mut substream(3, Stream::Sampling));
        assert_eq!(a, b);
    }

    #[test]
    fn extract_sample_removes_disclosed_bits() {
        let mut key = SiftedKey {
            pulse_indices: alloc::vec![10, 20, 30, 40],
            bits: alloc::vec![true, false, true, true],
        };
        let sample = key.extract_sample(&[1, 3]).unwrap();
        assert_eq!(sample, [false, true]);
        assert_eq!(key.pulse_indices, [10, 30]);
        assert_eq!(key.bits, [true, true]);
        assert_eq!(key.extract_sample(&[5]), Err(SiftError::PositionsInvalid));
        assert_eq!(key.extract_sample(&[0, 0]), Err(SiftError::PositionsInvalid));
    }

    #[test]
    fn qber_from_sample_counts_mismatches() {
        let alice = [true, true, false, false];
        let bob = [true, false, false, false];
        let est = qber_from_sample(&alice, &bob).unwrap();
        assert_eq!(est.errors, 1);
        assert_eq!(est.sampled, 4);
        assert!((est.qber - 0.25).abs() < 1e-15);
        let expect_ci = 2.0 * (0.25f64 * 0.75 / 4.0).sqrt();
        assert!((est.ci_2sigma - expect_ci).abs() < 1e-15);
        assert!(est.exceeds(QBER_ABORT_THRESHOLD));
        assert!(qber_from_sample(&[], &[]).is_err());
    }

    #[test]
    fn key_bits_pack_big_endian() {
        let mut bits = alloc::vec![false; 9];
        bits[0] = true;
        bits[8] = true;
        assert_eq!(pack_bits(&bits), [0x80, 0x80]);
        assert_eq!(unpack_bits(&[0x80, 0x80], 9).unwrap(), bits);
        // Nonzero padding is rejected.
        assert!(unpack_bits(&[0x80, 0xC0], 9).is_err());
        assert!(unpack_bits(&[0x80], 9).is_err());
    }

    #[test]
    fn coincidence_monitor_trips_on_excess() {
        let monitor = SecurityMonitor {
            expected_coincidence_prob: 2e-6,
            ..SecurityMonitor::default()
        };
        // 2e6 gates: expect 4, threshold 14.
        assert!(monitor.check_coincidences(2_000_000, 6).is_none());
        let alert = monitor.check_coincidences(2_000_000, 40).unwrap();
        assert!(matches!(alert, SecurityAlert::ExcessCoincidences { observed: 40, .. }));
    }

    #[test]
    fn power_monitor_enforces_bounds() {
        let monitor = SecurityMonitor::default();
        assert!(monitor.check_power(None).is_none());
        assert!(monitor.check_power(Some(1.05)).is_none());
        assert!(monitor.check_power(Some(1.3)).is_some());
        assert!(monitor.check_power(Some(0.5)).is_some());
    }
}
