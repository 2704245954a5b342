//! Turn-based session state machines for the two endpoints.
//!
//! Sessions do no IO. [`AliceSession::start`] yields the opening frames;
//! thereafter each received frame goes through `handle`, which returns the
//! frames to send back. A transport only has to deliver whole frames in
//! order (TCP with length-prefixed framing, an in-memory queue in tests).
//!
//! Message flow, strictly alternating:
//!
//! ```text
//! Alice                                Bob
//! HELLO                ->
//!                      <-              HELLO
//! PARAMS               ->
//!                      <-              PARAMS (echo)
//! per train:
//!   SIMQ               ->
//!                      <-              CLICK_REPORT, BASIS_REVEAL
//!   SIFT_RESULT        ->
//!                      <-              TRAIN_DONE [, SAMPLE_REQUEST]
//! SAMPLE_BITS          ->
//!                      <-              QBER_REPORT   (proceed)
//! BYE                  ->
//!                      <-              BYE
//! ```
//!
//! On a failed estimate or a security alert Bob replaces the happy path
//! with ABORT (after QBER_REPORT or SECURITY_ALERT frames), and both sides
//! discard all key material.
//!
//! Both sides hash every frame except SIMQ and BYE into a running SHA-256
//! transcript; the BYE exchange compares digests, so any tampering with
//! the classical channel is detected before keys are accepted. SIMQ
//! frames stand in for the photons themselves and are excluded: they are
//! not classical messages, and nothing secret may ever depend on their
//! confidentiality anyway.
//!
//! The protocol-level randomness consumes the same seeded substreams in
//! the same order as the in-process [`run_exchange`], which makes a
//! networked exchange bit-identical to a single-process one.
//!
//! [`run_exchange`]: crate::simengine::run_exchange

use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest, Sha256};

use crate::netlink::codec::{
    AbortWire, BasisRevealMsg, ClickReportMsg, DecodeError, Frame, Message, MessageType,
    QberReportMsg, Role, SampleBitsMsg, SampleRequestMsg, SiftResultMsg, SimQMsg, WireParams,
};
use crate::photonics::ClickRecord;
use crate::protocol::{
    alice_sift, bob_key_bits, disclose_clicks, qber_from_sample, sample_positions,
    ClickDisclosure, QberEstimate, SecurityAlert, SiftError, SiftStats, SiftedKey,
};
use crate::rng::{substream, SimRng, Stream};
use crate::simengine::{
    draw_alice_settings, draw_bob_bases, phase_indices, AbortReason, QuantumBench, RunConfig,
    RunError, TrainSchedule,
};

/// Where a session currently stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Greeting and parameter agreement.
    Init,
    /// Parameters agreed, no quantum data yet.
    Configured,
    /// Pulse trains in flight.
    Exchanging,
    /// Sift results for the current train in flight.
    Sifting,
    /// Sampled error estimation and closing handshake.
    Estimating,
    Done,
    Aborted,
}

/// Errors that end a session without a valid outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionError {
    Decode(DecodeError),
    Run(RunError),
    Sift(SiftError),
    /// A well-formed message arrived in the wrong phase.
    UnexpectedMessage { got: MessageType },
    SessionIdMismatch { expected: u64, got: u64 },
    /// The echoed parameters differ from the ones sent.
    ParamsEchoMismatch,
    /// The peers saw different classical transcripts.
    TranscriptMismatch,
    Violation(&'static str),
}

impl fmt::Display for SessionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionError::Decode(e) => write!(f, "decode: {e}"),
            SessionError::Run(e) => write!(f, "run: {e}"),
            SessionError::Sift(e) => write!(f, "sift: {e}"),
            SessionError::UnexpectedMessage { got } => {
                write!(f, "unexpected message {got:?} for the current phase")
            }
            SessionError::SessionIdMismatch { expected, got } => {
                write!(f, "session id mismatch: expected {expected:#x}, got {got:#x}")
            }
            SessionError::ParamsEchoMismatch => write!(f, "parameter echo mismatch"),
            SessionError::TranscriptMismatch => write!(f, "transcript digest mismatch"),
            SessionError::Violation(msg) => write!(f, "protocol violation: {msg}"),
        }
    }
}

impl core::error::Error for SessionError {}

impl From<DecodeError> for SessionError {
    fn from(e: DecodeError) -> Self {
        SessionError::Decode(e)
    }
}

impl From<RunError> for SessionError {
    fn from(e: RunError) -> Self {
        SessionError::Run(e)
    }
}

impl From<SiftError> for SessionError {
    fn from(e: SiftError) -> Self {
        SessionError::Sift(e)
    }
}

/// Counting summary of a finished session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SessionStats {
    pub trains_completed: u64,
    /// Sifted bits before estimation disclosure.
    pub sifted_bits: usize,
    /// Receiver-side counters; zero on Alice's side.
    pub live_gates: u64,
    pub clicks: u64,
    pub coincidences: u64,
}

/// What a session ends with.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    /// This side's final key (empty if aborted).
    pub key: SiftedKey,
    pub estimate: Option<QberEstimate>,
    pub aborted: Option<AbortReason>,
    pub alerts: Vec<SecurityAlert>,
    pub transcript_sha256: [u8; 32],
    pub stats: SessionStats,
}

/// Running hash of the classical transcript.
#[derive(Debug, Clone)]
struct Transcript {
    hasher: Sha256,
}

impl Transcript {
    fn new() -> Self {
        Transcript {
            hasher: Sha256::new(),
        }
    }

    fn absorb(&mut self, frame_bytes: &[u8], msg_type: MessageType) {
        // SIMQ models the photons, BYE carries the digest itself.
        if msg_type != MessageType::SimQ && msg_type != MessageType::Bye {
            self.hasher.update(frame_bytes);
        }
    }

    fn digest(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

/// Decodes and checks one raw frame against the expected session id.
fn decode_frame(raw: &[u8], expected_session: Option<u64>) -> Result<Frame, SessionError> {
    let (frame, consumed) = Frame::decode(raw)?.ok_or(SessionError::Violation("partial frame"))?;
    if consumed != raw.len() {
        return Err(SessionError::Violation("multiple frames in one delivery"));
    }
    if let Some(expected) = expected_session {
        if frame.session_id != expected {
            return Err(SessionError::SessionIdMismatch {
                expected,
                got: frame.session_id,
            });
        }
    }
    Ok(frame)
}

/// The initiator: sources the pulses, keeps the reference key.
#[derive(Debug, Clone)]
pub struct AliceSession {
    session_id: u64,
    config: RunConfig,
    schedule: TrainSchedule,
    n_trains: u64,
    phase: Phase,
    started: bool,
    rng_settings: SimRng,
    current_train: u64,
    train_bits: Vec<bool>,
    train_bases: Vec<bool>,
    pending_report: Option<ClickReportMsg>,
    key: SiftedKey,
    sift_stats: SiftStats,
    sifted_bits_total: usize,
    estimate: Option<QberEstimate>,
    alerts: Vec<SecurityAlert>,
    sent_params_payload: Vec<u8>,
    transcript: Transcript,
    sent_digest: Option<[u8; 32]>,
    outcome: Option<SessionOutcome>,
}

impl AliceSession {
    pub fn new(config: RunConfig, session_id: u64) -> Result<Self, SessionError> {
        config.validate()?;
        let schedule = config.schedule()?;
        let n_trains = config.n_pulses.div_ceil(schedule.train_size as u64).max(1);
        let rng_settings = substream(config.seed, Stream::AliceSettings);
        Ok(AliceSession {
            session_id,
            config,
            schedule,
            n_trains,
            phase: Phase::Init,
            started: false,
            rng_settings,
            current_train: 0,
            train_bits: Vec::new(),
            train_bases: Vec::new(),
            pending_report: None,
            key: SiftedKey::default(),
            sift_stats: SiftStats::default(),
            sifted_bits_total: 0,
            estimate: None,
            alerts: Vec::new(),
            sent_params_payload: Vec::new(),
            transcript: Transcript::new(),
            sent_digest: None,
            outcome: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Done | Phase::Aborted)
    }

    pub fn outcome(&self) -> Option<&SessionOutcome> {
        self.outcome.as_ref()
    }

    fn emit(&mut self, msg: &Message) -> Result<Vec<u8>, SessionError> {
        let bytes = msg.to_frame_bytes(self.session_id)?;
        self.transcript.absorb(&bytes, msg.msg_type());
        Ok(bytes)
    }

    /// Opening frames. Call exactly once, before any `handle`.
    pub fn start(&mut self) -> Result<Vec<Vec<u8>>, SessionError> {
        if self.started {
            return Err(SessionError::Violation("session already started"));
        }
        self.started = true;
        Ok(alloc::vec![self.emit(&Message::Hello(Role::Alice))?])
    }

    fn next_train_frames(&mut self) -> Result<Vec<Vec<u8>>, SessionError> {
        let n = self.schedule.train_size as usize;
        let (bits, bases) = draw_alice_settings(&mut self.rng_settings, n);
        let phases = phase_indices(&bits, &bases);
        self.train_bits = bits;
        self.train_bases = bases;
        let msg = Message::SimQ(SimQMsg {
            train_index: self.current_train as u32,
            base_pulse_index: self.schedule.base_index(self.current_train),
            phase_indices: phases,
        });
        self.phase = Phase::Exchanging;
        Ok(alloc::vec![self.emit(&msg)?])
    }

    fn finish(&mut self, aborted: Option<AbortReason>) {
        if aborted.is_some() {
            self.key = SiftedKey::default();
        }
        self.phase = if aborted.is_some() {
            Phase::Aborted
        } else {
            Phase::Done
        };
        self.outcome = Some(SessionOutcome {
            key: core::mem::take(&mut self.key),
            estimate: self.estimate,
            aborted,
            alerts: core::mem::take(&mut self.alerts),
            transcript_sha256: self.transcript.digest(),
            stats: SessionStats {
                trains_completed: self.current_train,
                sifted_bits: self.sifted_bits_total,
                live_gates: 0,
                clicks: 0,
                coincidences: 0,
            },
        });
    }

    /// Processes one received frame; returns the frames to send.
    pub fn handle(&mut self, raw: &[u8]) -> Result<Vec<Vec<u8>>, SessionError> {
        if !self.started {
            return Err(SessionError::Violation("handle before start"));
        }
        if self.is_finished() {
            return Err(SessionError::Violation("session finished"));
        }
        let frame = decode_frame(raw, Some(self.session_id))?;
        self.transcript.absorb(raw, frame.msg_type);
        let msg = Message::decode(frame.msg_type, &frame.payload)?;

        match msg {
            Message::SecurityAlert(alert) => {
                self.alerts.push(alert);
                return Ok(Vec::new());
            }
            Message::Abort(wire) => {
                return match wire.reason() {
                    Some(reason) => {
                        self.finish(Some(reason));
                        Ok(Vec::new())
                    }
                    None => Err(SessionError::Violation("peer reported a protocol error")),
                };
            }
            _ => {}
        }

        match self.phase {
            Phase::Init => match msg {
                Message::Hello(Role::Bob) => {
                    let wire = WireParams::from_config(&self.config)?;
                    let msg = Message::Params(wire);
                    self.sent_params_payload = msg.encode_payload();
                    let bytes = self.emit(&msg)?;
                    self.phase = Phase::Configured;
                    Ok(alloc::vec![bytes])
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Configured => match msg {
                Message::Params(_) => {
                    if frame.payload != self.sent_params_payload {
                        return Err(SessionError::ParamsEchoMismatch);
                    }
                    self.next_train_frames()
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Exchanging => match msg {
                Message::ClickReport(report) if self.pending_report.is_none() => {
                    if report.train_index as u64 != self.current_train
                        || report.base_pulse_index != self.schedule.base_index(self.current_train)
                    {
                        return Err(SessionError::Violation("click report for wrong train"));
                    }
                    self.pending_report = Some(report);
                    Ok(Vec::new())
                }
                Message::BasisReveal(reveal) if self.pending_report.is_some() => {
                    let report = self.pending_report.take().expect("checked above");
                    if reveal.train_index != report.train_index {
                        return Err(SessionError::Violation("basis reveal for wrong train"));
                    }
                    if reveal.bases.len() != report.entries.len() {
                        return Err(SessionError::Violation("basis count != click count"));
                    }
                    let disclosures: Vec<ClickDisclosure> = report
                        .entries
                        .iter()
                        .zip(&reveal.bases)
                        .map(|(&(pulse_index, coincidence), &basis)| ClickDisclosure {
                            pulse_index,
                            basis,
                            coincidence,
                        })
                        .collect();
                    let base = report.base_pulse_index;
                    let (kept, bits, stats) =
                        alice_sift(&self.train_bits, &self.train_bases, &disclosures, base)?;
                    self.sift_stats.disclosed += stats.disclosed;
                    self.sift_stats.coincidences += stats.coincidences;
                    self.sift_stats.incompatible += stats.incompatible;
                    self.sift_stats.kept += stats.kept;
                    self.key.append(&kept, &bits);
                    let msg = Message::SiftResult(SiftResultMsg {
                        train_index: report.train_index,
                        base_pulse_index: base,
                        kept,
                    });
                    let bytes = self.emit(&msg)?;
                    self.phase = Phase::Sifting;
                    Ok(alloc::vec![bytes])
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Sifting => match msg {
                Message::TrainDone { train_index } => {
                    if train_index as u64 != self.current_train {
                        return Err(SessionError::Violation("train done for wrong train"));
                    }
                    self.current_train += 1;
                    if self.current_train < self.n_trains {
                        self.next_train_frames()
                    } else {
                        self.sifted_bits_total = self.key.len();
                        self.phase = Phase::Estimating;
                        Ok(Vec::new())
                    }
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Estimating => match msg {
                Message::SampleRequest(req) => {
                    let positions: Vec<usize> = req.positions.iter().map(|&p| p as usize).collect();
                    let sample = self.key.extract_sample(&positions)?;
                    let msg = Message::SampleBits(SampleBitsMsg { bits: sample });
                    Ok(alloc::vec![self.emit(&msg)?])
                }
                Message::QberReport(report) => {
                    self.estimate = Some(report.estimate());
                    if report.proceed {
                        let digest = self.transcript.digest();
                        self.sent_digest = Some(digest);
                        let msg = Message::Bye {
                            transcript_sha256: digest,
                        };
                        Ok(alloc::vec![self.emit(&msg)?])
                    } else {
                        // An ABORT follows; nothing to send.
                        Ok(Vec::new())
                    }
                }
                Message::Bye { transcript_sha256 } => {
                    let mine = self
                        .sent_digest
                        .ok_or(SessionError::Violation("peer BYE before QBER report"))?;
                    if transcript_sha256 != mine {
                        return Err(SessionError::TranscriptMismatch);
                    }
                    self.finish(None);
                    Ok(Vec::new())
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Done | Phase::Aborted => unreachable!("checked is_finished above"),
        }
    }
}

/// Local receiver-side hooks that never travel on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BobHooks {
    /// Monitored input power reading, in nominal units.
    pub power_actual: Option<f64>,
    /// True source intensity override (attack injection).
    pub mu_actual: Option<f64>,
}

/// The receiver: runs the detectors, estimates the QBER, owns the verdict.
#[derive(Debug, Clone)]
pub struct BobSession {
    hooks: BobHooks,
    session_id: Option<u64>,
    phase: Phase,
    config: Option<RunConfig>,
    schedule: Option<TrainSchedule>,
    n_trains: u64,
    bench: Option<QuantumBench>,
    rng_bases: Option<SimRng>,
    rng_sampling: Option<SimRng>,
    current_train: u64,
    last_records: Vec<ClickRecord>,
    key: SiftedKey,
    sift_stats: SiftStats,
    sifted_bits_total: usize,
    sent_positions: Option<Vec<usize>>,
    estimate: Option<QberEstimate>,
    alerts: Vec<SecurityAlert>,
    transcript: Transcript,
    outcome: Option<SessionOutcome>,
}

impl BobSession {
    pub fn new(hooks: BobHooks) -> Self {
        BobSession {
            hooks,
            session_id: None,
            phase: Phase::Init,
            config: None,
            schedule: None,
            n_trains: 0,
            bench: None,
            rng_bases: None,
            rng_sampling: None,
            current_train: 0,
            last_records: Vec::new(),
            key: SiftedKey::default(),
            sift_stats: SiftStats::default(),
            sifted_bits_total: 0,
            sent_positions: None,
            estimate: None,
            alerts: Vec::new(),
            transcript: Transcript::new(),
            outcome: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Done | Phase::Aborted)
    }

    pub fn outcome(&self) -> Option<&SessionOutcome> {
        self.outcome.as_ref()
    }

    fn emit(&mut self, msg: &Message) -> Result<Vec<u8>, SessionError> {
        let session_id = self.session_id.expect("emit before hello");
        let bytes = msg.to_frame_bytes(session_id)?;
        self.transcript.absorb(&bytes, msg.msg_type());
        Ok(bytes)
    }

    fn stats(&self) -> SessionStats {
        let (live_gates, clicks, coincidences) = match &self.bench {
            Some(b) => (b.live_gates(), b.clicks(), b.coincidences()),
            None => (0, 0, 0),
        };
        SessionStats {
            trains_completed: self.current_train,
            sifted_bits: self.sifted_bits_total,
            live_gates,
            clicks,
            coincidences,
        }
    }

    fn finish(&mut self, aborted: Option<AbortReason>) {
        if aborted.is_some() {
            self.key = SiftedKey::default();
        }
        self.phase = if aborted.is_some() {
            Phase::Aborted
        } else {
            Phase::Done
        };
        self.outcome = Some(SessionOutcome {
            key: core::mem::take(&mut self.key),
            estimate: self.estimate,
            aborted,
            alerts: self.alerts.clone(),
            transcript_sha256: self.transcript.digest(),
            stats: self.stats(),
        });
    }

    /// Processes one received frame; returns the frames to send.
    pub fn handle(&mut self, raw: &[u8]) -> Result<Vec<Vec<u8>>, SessionError> {
        if self.is_finished() {
            return Err(SessionError::Violation("session finished"));
        }
        let frame = decode_frame(raw, self.session_id)?;
        self.transcript.absorb(raw, frame.msg_type);
        let msg = Message::decode(frame.msg_type, &frame.payload)?;

        match msg {
            Message::SecurityAlert(alert) => {
                self.alerts.push(alert);
                return Ok(Vec::new());
            }
            Message::Abort(wire) => {
                return match wire.reason() {
                    Some(reason) => {
                        self.finish(Some(reason));
                        Ok(Vec::new())
                    }
                    None => Err(SessionError::Violation("peer reported a protocol error")),
                };
            }
            _ => {}
        }

        match self.phase {
            Phase::Init if self.session_id.is_none() => match msg {
                Message::Hello(Role::Alice) => {
                    self.session_id = Some(frame.session_id);
                    Ok(alloc::vec![self.emit(&Message::Hello(Role::Bob))?])
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Init => match msg {
                Message::Params(wire) => {
                    let mut config = wire.to_config();
                    config.power_actual = self.hooks.power_actual;
                    config.mu_actual = self.hooks.mu_actual;
                    let bench = QuantumBench::new(&config)?;
                    self.schedule = Some(bench.schedule);
                    self.n_trains = config
                        .n_pulses
                        .div_ceil(bench.schedule.train_size as u64)
                        .max(1);
                    self.rng_bases = Some(substream(config.seed, Stream::BobBases));
                    self.rng_sampling = Some(substream(config.seed, Stream::Sampling));
                    self.bench = Some(bench);
                    self.config = Some(config);
                    let echo = self.emit(&Message::Params(wire))?;
                    self.phase = Phase::Configured;
                    Ok(alloc::vec![echo])
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Configured | Phase::Exchanging => match msg {
                Message::SimQ(simq) => {
                    let schedule = *self.schedule.as_ref().expect("configured");
                    if simq.train_index as u64 != self.current_train
                        || simq.base_pulse_index != schedule.base_index(self.current_train)
                    {
                        return Err(SessionError::Violation("pulse train out of order"));
                    }
                    if simq.phase_indices.len() != schedule.train_size as usize {
                        return Err(SessionError::Violation("pulse train size mismatch"));
                    }
                    let n = schedule.train_size as usize;
                    let bases = draw_bob_bases(self.rng_bases.as_mut().expect("configured"), n);
                    let records = self.bench.as_mut().expect("configured").simulate_train(
                        self.current_train,
                        &simq.phase_indices,
                        &bases,
                    )?;
                    let disclosures = disclose_clicks(&bases, &records, simq.base_pulse_index)?;
                    self.last_records = records;
                    let report = Message::ClickReport(ClickReportMsg {
                        train_index: simq.train_index,
                        base_pulse_index: simq.base_pulse_index,
                        entries: disclosures
                            .iter()
                            .map(|d| (d.pulse_index, d.coincidence))
                            .collect(),
                    });
                    let reveal = Message::BasisReveal(BasisRevealMsg {
                        train_index: simq.train_index,
                        bases: disclosures.iter().map(|d| d.basis).collect(),
                    });
                    let out = alloc::vec![self.emit(&report)?, self.emit(&reveal)?];
                    self.phase = Phase::Sifting;
                    Ok(out)
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Sifting => match msg {
                Message::SiftResult(result) => {
                    let schedule = *self.schedule.as_ref().expect("configured");
                    if result.train_index as u64 != self.current_train
                        || result.base_pulse_index != schedule.base_index(self.current_train)
                    {
                        return Err(SessionError::Violation("sift result for wrong train"));
                    }
                    let bits = bob_key_bits(&self.last_records, &result.kept)?;
                    self.key.append(&result.kept, &bits);
                    self.sift_stats.kept += result.kept.len();
                    self.last_records = Vec::new();
                    let done = Message::TrainDone {
                        train_index: result.train_index,
                    };
                    let mut out = alloc::vec![self.emit(&done)?];
                    self.current_train += 1;
                    if self.current_train < self.n_trains {
                        self.phase = Phase::Exchanging;
                    } else {
                        self.sifted_bits_total = self.key.len();
                        let fraction = self.config.as_ref().expect("configured").sample_fraction;
                        let positions = sample_positions(
                            self.key.len(),
                            fraction,
                            self.rng_sampling.as_mut().expect("configured"),
                        );
                        if positions.is_empty() {
                            return Err(SessionError::Run(RunError::Degenerate(
                                "no sifted bits to sample",
                            )));
                        }
                        let request = Message::SampleRequest(SampleRequestMsg {
                            positions: positions.iter().map(|&p| p as u64).collect(),
                        });
                        out.push(self.emit(&request)?);
                        self.sent_positions = Some(positions);
                        self.phase = Phase::Estimating;
                    }
                    Ok(out)
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Estimating => match msg {
                Message::SampleBits(sample) => {
                    let positions = self
                        .sent_positions
                        .take()
                        .ok_or(SessionError::Violation("sample bits without request"))?;
                    if sample.bits.len() != positions.len() {
                        return Err(SessionError::Violation("sample size mismatch"));
                    }
                    let mine = self.key.extract_sample(&positions)?;
                    let estimate = qber_from_sample(&sample.bits, &mine)?;
                    self.estimate = Some(estimate);
                    let config = self.config.as_ref().expect("configured");
                    let monitor = config.security_monitor()?;
                    let bench = self.bench.as_ref().expect("configured");
                    let mut alerts = Vec::new();
                    if let Some(alert) =
                        monitor.check_coincidences(bench.live_gates(), bench.coincidences())
                    {
                        alerts.push(alert);
                    }
                    if let Some(alert) = monitor.check_power(config.power_actual) {
                        alerts.push(alert);
                    }
                    if !alerts.is_empty() {
                        let mut out = Vec::new();
                        for alert in &alerts {
                            out.push(self.emit(&Message::SecurityAlert(*alert))?);
                        }
                        out.push(self.emit(&Message::Abort(AbortWire::Security))?);
                        self.alerts = alerts;
                        self.finish(Some(AbortReason::SecurityAlert));
                        return Ok(out);
                    }
                    if estimate.exceeds(config.qber_abort_threshold) {
                        let report = Message::QberReport(QberReportMsg::from_estimate(
                            &estimate, false,
                        ));
                        let out = alloc::vec![
                            self.emit(&report)?,
                            self.emit(&Message::Abort(AbortWire::QberTooHigh))?,
                        ];
                        self.finish(Some(AbortReason::QberAboveThreshold));
                        return Ok(out);
                    }
                    let report = Message::QberReport(QberReportMsg::from_estimate(&estimate, true));
                    Ok(alloc::vec![self.emit(&report)?])
                }
                Message::Bye { transcript_sha256 } => {
                    let mine = self.transcript.digest();
                    if transcript_sha256 != mine {
                        return Err(SessionError::TranscriptMismatch);
                    }
                    let bye = Message::Bye {
                        transcript_sha256: mine,
                    };
                    let out = alloc::vec![self.emit(&bye)?];
                    self.finish(None);
                    Ok(out)
                }
                other => Err(SessionError::UnexpectedMessage {
                    got: other.msg_type(),
                }),
            },
            Phase::Done | Phase::Aborted => unreachable!("checked is_finished above"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate_model::{DetectorModel, EveModel, FiberSpec, SystemParams};
    use crate::simengine::run_exchange;
    use alloc::collections::VecDeque;

    fn lake_config(n_pulses: u64, seed: u64) -> RunConfig {
        let mut config = RunConfig::new(
            SystemParams {
                qber_opt: 0.0015,
                fiber: FiberSpec::new(22.0, 0.0, 4.8),
                ..SystemParams::default()
            },
            DetectorModel::default(),
            EveModel::default(),
        );
        config.n_pulses = n_pulses;
        config.seed = seed;
        config
    }

    /// Shuttles frames between the two sessions until both finish.
    fn pump(alice: &mut AliceSession, bob: &mut BobSession) -> Result<(), SessionError> {
        let mut to_bob: VecDeque<Vec<u8>> = alice.start()?.into();
        let mut to_alice: VecDeque<Vec<u8>> = VecDeque::new();
        for _ in 0..1_000_000u64 {
            if let Some(frame) = to_bob.pop_front() {
                if !bob.is_finished() {
                    to_alice.extend(bob.handle(&frame)?);
                }
                continue;
            }
            if let Some(frame) = to_alice.pop_front() {
                if !alice.is_finished() {
                    to_bob.extend(alice.handle(&frame)?);
                }
                continue;
            }
            break;
        }
        Ok(())
    }

    #[test]
    fn networked_exchange_matches_the_in_process_run() {
        let config = lake_config(30_000, 97);
        let reference = run_exchange(&config).unwrap();

        let mut alice = AliceSession::new(config.clone(), 0x5EED).unwrap();
        let mut bob = BobSession::new(BobHooks::default());
        pump(&mut alice, &mut bob).unwrap();

        let a = alice.outcome().expect("alice finished").clone();
        let b = bob.outcome().expect("bob finished").clone();
        assert_eq!(a.aborted, None);
        assert_eq!(b.aborted, None);
        // Same bits as the single-process run, on both sides.
        assert_eq!(a.key, reference.alice_key);
        assert_eq!(b.key, reference.bob_key);
        assert_eq!(a.estimate.unwrap(), reference.estimate);
        assert_eq!(b.estimate.unwrap(), reference.estimate);
        // Both sides agree on the classical transcript.
        assert_eq!(a.transcript_sha256, b.transcript_sha256);
        assert_eq!(b.stats.coincidences, reference.stats.coincidences);
        assert_eq!(alice.phase(), Phase::Done);
        assert_eq!(bob.phase(), Phase::Done);
    }

    #[test]
    fn qber_failure_aborts_both_sides() {
        let mut config = lake_config(20_000, 5);
        config.params.qber_opt = 0.2;
        let mut alice = AliceSession::new(config, 1).unwrap();
        let mut bob = BobSession::new(BobHooks::default());
        pump(&mut alice, &mut bob).unwrap();
        let a = alice.outcome().unwrap();
        let b = bob.outcome().unwrap();
        assert_eq!(a.aborted, Some(AbortReason::QberAboveThreshold));
        assert_eq!(b.aborted, Some(AbortReason::QberAboveThreshold));
        assert!(a.key.is_empty() && b.key.is_empty());
        // Alice still learned the estimate that sank the session.
        assert!(a.estimate.unwrap().qber > 0.15);
    }

    #[test]
    fn power_alert_aborts_both_sides() {
        let config = lake_config(10_000, 5);
        let mut alice = AliceSession::new(config, 2).unwrap();
        let mut bob = BobSession::new(BobHooks {
            power_actual: Some(1.4),
            mu_actual: None,
        });
        pump(&mut alice, &mut bob).unwrap();
        let a = alice.outcome().unwrap();
        let b = bob.outcome().unwrap();
        assert_eq!(a.aborted, Some(AbortReason::SecurityAlert));
        assert_eq!(b.aborted, Some(AbortReason::SecurityAlert));
        assert!(a.key.is_empty() && b.key.is_empty());
        assert!(matches!(
            a.alerts[0],
            SecurityAlert::PowerOutOfBounds { .. }
        ));
    }

    #[test]
    fn tampered_frames_break_the_transcript_check() {
        let mut config = lake_config(30_000, 13);
        // A large sample keeps one flipped bit well under the abort
        // threshold, so the session reaches the digest comparison.
        config.sample_fraction = 0.5;
        let mut alice = AliceSession::new(config, 3).unwrap();
        let mut bob = BobSession::new(BobHooks::default());

        let mut to_bob: VecDeque<Vec<u8>> = alice.start().unwrap().into();
        let mut to_alice: VecDeque<Vec<u8>> = VecDeque::new();
        let mut tampered = false;
        let result = loop {
            if let Some(mut frame) = to_bob.pop_front() {
                // Flip one sample bit in flight: the keys still match the
                // transcript each side saw, but the digests diverge.
                if !tampered && frame[3] == MessageType::SampleBits as u8 {
                    let last = frame.len() - 1;
                    frame[last] ^= 0x80;
                    tampered = true;
                }
                match bob.handle(&frame) {
                    Ok(frames) => to_alice.extend(frames),
                    Err(e) => break Err(e),
                }
                continue;
            }
            if let Some(frame) = to_alice.pop_front() {
                match alice.handle(&frame) {
                    Ok(frames) => to_bob.extend(frames),
                    Err(e) => break Err(e),
                }
                continue;
            }
            break Ok(());
        };
        assert!(tampered);
        assert_eq!(result, Err(SessionError::TranscriptMismatch));
    }

    #[test]
    fn out_of_phase_messages_are_rejected() {
        let config = lake_config(10_000, 5);
        let mut bob = BobSession::new(BobHooks::default());
        let params = Message::Params(WireParams::from_config(&config).unwrap())
            .to_frame_bytes(9)
            .unwrap();
        assert!(matches!(
            bob.handle(&params),
            Err(SessionError::UnexpectedMessage {
                got: MessageType::Params
            })
        ));

        let mut alice = AliceSession::new(config, 9).unwrap();
        alice.start().unwrap();
        let bye = Message::Bye {
            transcript_sha256: [0; 32],
        }
        .to_frame_bytes(9)
        .unwrap();
        assert!(matches!(
            alice.handle(&bye),
            Err(SessionError::UnexpectedMessage { .. })
        ));
    }

    #[test]
    fn session_id_is_enforced() {
        let config = lake_config(10_000, 5);
        let mut alice = AliceSession::new(config, 7).unwrap();
        alice.start().unwrap();
        let hello = Message::Hello(Role::Bob).to_frame_bytes(8).unwrap();
        assert_eq!(
            alice.handle(&hello),
            Err(SessionError::SessionIdMismatch {
                expected: 7,
                got: 8
            })
        );
    }
}
