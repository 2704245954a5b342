//! Binary framing and message encoding for the classical channel.
//!
//! Frame layout (big-endian throughout):
//!
//! ```text
//! magic   2 bytes  0x51 0x4B
//! version 1 byte
//! type    1 byte
//! session 8 bytes
//! length  3 bytes  payload length
//! payload
//! ```
//!
//! Click and sift indices are delta-encoded LEB128 varints; bit vectors
//! are packed MSB-first with zero padding; phase indices travel four to a
//! byte. Every decoder rejects trailing bytes, nonzero padding and
//! out-of-range values, so a malformed peer cannot corrupt local state.

use alloc::vec::Vec;
use core::fmt;

use crate::photonics::DeadTimeScope;
use crate::protocol::{pack_bits, unpack_bits, QberEstimate, SecurityAlert};
use crate::rate_model::{
    AfterpulseProfile, DetectorModel, EveModel, FiberSpec, SystemParams,
};
use crate::simengine::{AbortReason, RunConfig, RunError};

/// First two bytes of every frame.
pub const MAGIC: [u8; 2] = [0x51, 0x4B];
/// Current protocol version.
pub const VERSION: u8 = 1;
/// Bytes before the payload.
pub const HEADER_LEN: usize = 15;
/// Largest payload the 3-byte length field can carry.
pub const MAX_PAYLOAD: usize = (1 << 24) - 1;

/// Errors from decoding frames or payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    BadMagic,
    UnsupportedVersion(u8),
    UnknownType(u8),
    /// The payload ended before the message was complete.
    Truncated,
    /// The payload continued past the end of the message.
    TrailingBytes,
    VarintOverflow,
    Malformed(&'static str),
    /// Encoding-side: the payload does not fit the length field.
    PayloadTooLarge(usize),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::BadMagic => write!(f, "bad frame magic"),
            DecodeError::UnsupportedVersion(v) => write!(f, "unsupported protocol version {v}"),
            DecodeError::UnknownType(t) => write!(f, "unknown message type {t}"),
            DecodeError::Truncated => write!(f, "truncated payload"),
            DecodeError::TrailingBytes => write!(f, "trailing bytes after message"),
            DecodeError::VarintOverflow => write!(f, "varint overflow"),
            DecodeError::Malformed(what) => write!(f, "malformed field: {what}"),
            DecodeError::PayloadTooLarge(n) => write!(f, "payload of {n} bytes too large"),
        }
    }
}

impl core::error::Error for DecodeError {}

/// Message discriminants on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Params = 2,
    TrainDone = 3,
    ClickReport = 4,
    BasisReveal = 5,
    SiftResult = 6,
    SampleRequest = 7,
    SampleBits = 8,
    QberReport = 9,
    SecurityAlert = 10,
    Abort = 11,
    Bye = 12,
    /// Simulated quantum pulses: Alice's phase indices for one train.
    /// Exists only because the photons are simulated; excluded from the
    /// transcript digest, and its payload is never treated as secret.
    SimQ = 13,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            1 => MessageType::Hello,
            2 => MessageType::Params,
            3 => MessageType::TrainDone,
            4 => MessageType::ClickReport,
            5 => MessageType::BasisReveal,
            6 => MessageType::SiftResult,
            7 => MessageType::SampleRequest,
            8 => MessageType::SampleBits,
            9 => MessageType::QberReport,
            10 => MessageType::SecurityAlert,
            11 => MessageType::Abort,
            12 => MessageType::Bye,
            13 => MessageType::SimQ,
            other => return Err(DecodeError::UnknownType(other)),
        })
    }
}

/// One framed message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub session_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>, DecodeError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(DecodeError::PayloadTooLarge(self.payload.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session_id.to_be_bytes());
        let len = self.payload.len() as u32;
        out.extend_from_slice(&len.to_be_bytes()[1..4]);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses the fixed header; returns the payload length still to read.
    pub fn decode_header(header: &[u8; HEADER_LEN]) -> Result<(MessageType, u64, usize), DecodeError> {
        if header[0..2] != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        if header[2] != VERSION {
            return Err(DecodeError::UnsupportedVersion(header[2]));
        }
        let msg_type = MessageType::from_u8(header[3])?;
        let session_id = u64::from_be_bytes(header[4..12].try_into().expect("8 bytes"));
        let len = u32::from_be_bytes([0, header[12], header[13], header[14]]) as usize;
        Ok((msg_type, session_id, len))
    }

    /// Decodes one frame from the front of `buf`. Returns `None` when more
    /// bytes are needed, and the frame plus its consumed size otherwise.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, DecodeError> {
        if buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let header: &[u8; HEADER_LEN] = buf[..HEADER_LEN].try_into().expect("checked length");
        let (msg_type, session_id, len) = Frame::decode_header(header)?;
        let total = HEADER_LEN + len;
        if buf.len() < total {
            return Ok(None);
        }
        Ok(Some((
            Frame {
                msg_type,
                session_id,
                payload: buf[HEADER_LEN..total].to_vec(),
            },
            total,
        )))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
    }

    fn varint(&mut self, mut v: u64) {
        loop {
            let byte = (v & 0x7F) as u8;
            v >>= 7;
            if v == 0 {
                self.buf.push(byte);
                return;
            }
            self.buf.push(byte | 0x80);
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn finish(self) -> Vec<u8> {
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn varint(&mut self) -> Result<u64, DecodeError> {
        let mut value = 0u64;
        let mut shift = 0u32;
        loop {
            let byte = self.u8()?;
            if shift == 63 && byte > 1 {
                return Err(DecodeError::VarintOverflow);
            }
            value |= u64::from(byte & 0x7F) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
            shift += 7;
            if shift > 63 {
                return Err(DecodeError::VarintOverflow);
            }
        }
    }

    fn expect_end(&self) -> Result<(), DecodeError> {
        if self.pos != self.buf.len() {
            return Err(DecodeError::TrailingBytes);
        }
        Ok(())
    }

    /// Upper bound for preallocating from untrusted counts: every encoded
    /// element costs at least one byte, so a count beyond this is a lie.
    fn alloc_bound(&self, count: usize) -> usize {
        count.min(self.buf.len() - self.pos)
    }
}

/// Who is speaking in a HELLO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
}

/// Everything the two sides must agree on before exchanging pulses.
/// Local test hooks (power/intensity injection) never travel.
#[derive(Debug, Clone, PartialEq)]
pub struct WireParams {
    pub params: SystemParams,
    pub detector: DetectorModel,
    pub eve: EveModel,
    pub n_pulses: u64,
    pub seed: u64,
    pub sample_fraction: f64,
    /// Resolved pulses per train.
    pub train_size: u32,
    pub dead_time_scope: DeadTimeScope,
    pub qber_abort_threshold: f64,
    pub power_bounds: (f64, f64),
}

impl WireParams {
    pub fn from_config(config: &RunConfig) -> Result<Self, RunError> {
        let schedule = config.schedule()?;
        Ok(WireParams {
            params: config.params.clone(),
            detector: config.detector.clone(),
            eve: config.eve.clone(),
            n_pulses: config.n_pulses,
            seed: config.seed,
            sample_fraction: config.sample_fraction,
            train_size: schedule.train_size,
            dead_time_scope: config.dead_time_scope,
            qber_abort_threshold: config.qber_abort_threshold,
            power_bounds: config.power_bounds,
        })
    }

    /// The receiving side's runnable configuration. Local hooks default
    /// off; the caller applies its own.
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            params: self.params.clone(),
            detector: self.detector.clone(),
            eve: self.eve.clone(),
            n_pulses: self.n_pulses,
            seed: self.seed,
            sample_fraction: self.sample_fraction,
            train_size_override: Some(self.train_size),
            dead_time_scope: self.dead_time_scope,
            qber_abort_threshold: self.qber_abort_threshold,
            power_actual: None,
            power_bounds: self.power_bounds,
            mu_actual: None,
        }
    }
}

/// One click disclosure on the wire: pulse index plus coincidence flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickReportMsg {
    pub train_index: u32,
    pub base_pulse_index: u64,
    /// `(pulse_index, coincidence)`, strictly increasing.
    pub entries: Vec<(u64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisRevealMsg {
    pub train_index: u32,
    /// Bob's basis for each disclosed click, in report order.
    pub bases: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiftResultMsg {
    pub train_index: u32,
    pub base_pulse_index: u64,
    /// Kept pulse indices, strictly increasing.
    pub kept: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRequestMsg {
    /// Positions into the accumulated sifted key, strictly increasing.
    pub positions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBitsMsg {
    pub bits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QberReportMsg {
    pub qber: f64,
    pub ci_2sigma: f64,
    pub sampled: u64,
    pub errors: u64,
    pub proceed: bool,
}

impl QberReportMsg {
    pub fn from_estimate(est: &QberEstimate, proceed: bool) -> Self {
        QberReportMsg {
            qber: est.qber,
            ci_2sigma: est.ci_2sigma,
            sampled: est.sampled as u64,
            errors: est.errors as u64,
            proceed,
        }
    }

    pub fn estimate(&self) -> QberEstimate {
        QberEstimate {
            qber: self.qber,
            ci_2sigma: self.ci_2sigma,
            sampled: self.sampled as usize,
            errors: self.errors as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimQMsg {
    pub train_index: u32,
    pub base_pulse_index: u64,
    /// Alice's phase index (0..=3) per pulse.
    pub phase_indices: Vec<u8>,
}

/// All protocol messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Role),
    Params(WireParams),
    TrainDone { train_index: u32 },
    ClickReport(ClickReportMsg),
    BasisReveal(BasisRevealMsg),
    SiftResult(SiftResultMsg),
    SampleRequest(SampleRequestMsg),
    SampleBits(SampleBitsMsg),
    QberReport(QberReportMsg),
    SecurityAlert(SecurityAlert),
    Abort(AbortWire),
    Bye { transcript_sha256: [u8; 32] },
    SimQ(SimQMsg),
}

/// Abort reasons on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortWire {
    Security,
    QberTooHigh,
    ProtocolError,
}

impl AbortWire {
    pub fn reason(self) -> Option<AbortReason> {
        match self {
            AbortWire::Security => Some(AbortReason::SecurityAlert),
            AbortWire::QberTooHigh => Some(AbortReason::QberAboveThreshold),
            AbortWire::ProtocolError => None,
        }
    }
}

impl Message {
    pub fn msg_type(&self) -> MessageType {
        match self {
            Message::Hello(_) => MessageType::Hello,
            Message::Params(_) => MessageType::Params,
            Message::TrainDone { .. } => MessageType::TrainDone,
            Message::ClickReport(_) => MessageType::ClickReport,
            Message::BasisReveal(_) => MessageType::BasisReveal,
            Message::SiftResult(_) => MessageType::SiftResult,
            Message::SampleRequest(_) => MessageType::SampleRequest,
            Message::SampleBits(_) => MessageType::SampleBits,
            Message::QberReport(_) => MessageType::QberReport,
            Message::SecurityAlert(_) => MessageType::SecurityAlert,
            Message::Abort(_) => MessageType::Abort,
            Message::Bye { .. } => MessageType::Bye,
            Message::SimQ(_) => MessageType::SimQ,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Hello(role) => {
                w.u8(match role {
                    Role::Alice => 0,
                    Role::Bob => 1,
                });
            }
            Message::Params(p) => {
                let s = &p.params;
                w.f64(s.q);
                w.f64(s.nu_hz);
                w.f64(s.mu);
                w.f64(s.t_bob);
                w.f64(s.eta_bob);
                w.f64(s.storage_len_km);
                w.f64(s.dead_time_s);
                w.f64(s.qber_opt);
                w.f64(s.qber_stray);
                w.f64(s.fiber.length_km);
                w.f64(s.fiber.loss_coeff_db_per_km);
                w.f64(s.fiber.extra_loss_db);
                w.f64(s.fiber.thermal_alpha_per_k);
                w.f64(s.fiber.group_velocity_m_per_s);
                w.f64(p.detector.p_dark);
                w.f64(p.detector.afterpulse.amplitude);
                w.f64(p.detector.afterpulse.time_const_s);
                w.f64(p.eve.base_info);
                w.f64(p.eve.anchor_mu);
                w.u16(p.eve.anchors.len() as u16);
                for &(loss, info) in &p.eve.anchors {
                    w.f64(loss);
                    w.f64(info);
                }
                w.u64(p.n_pulses);
                w.u64(p.seed);
                w.f64(p.sample_fraction);
                w.u32(p.train_size);
                w.u8(match p.dead_time_scope {
                    DeadTimeScope::SystemWide => 0,
                    DeadTimeScope::PerDetector => 1,
                });
                w.f64(p.qber_abort_threshold);
                w.f64(p.power_bounds.0);
                w.f64(p.power_bounds.1);
            }
            Message::TrainDone { train_index } => {
                w.u32(*train_index);
            }
            Message::ClickReport(m) => {
                w.u32(m.train_index);
                w.u64(m.base_pulse_index);
                w.u32(m.entries.len() as u32);
                let mut prev = m.base_pulse_index;
                for (i, &(idx, coincidence)) in m.entries.iter().enumerate() {
                    // First delta is from the train base, later ones from
                    // the previous entry; the coincidence flag rides in
                    // the low bit.
                    let delta = if i == 0 { idx - prev } else { idx - prev - 1 };
                    w.varint(delta << 1 | coincidence as u64);
                    prev = idx;
                }
            }
            Message::BasisReveal(m) => {
                w.u32(m.train_index);
                w.u32(m.bases.len() as u32);
                w.bytes(&pack_bits(&m.bases));
            }
            Message::SiftResult(m) => {
                w.u32(m.train_index);
                w.u64(m.base_pulse_index);
                w.u32(m.kept.len() as u32);
                let mut prev = m.base_pulse_index;
                for (i, &idx) in m.kept.iter().enumerate() {
                    let delta = if i == 0 { idx - prev } else { idx - prev - 1 };
                    w.varint(delta);
                    prev = idx;
                }
            }
            Message::SampleRequest(m) => {
                w.u32(m.positions.len() as u32);
                let mut prev = 0u64;
                for (i, &p) in m.positions.iter().enumerate() {
                    let delta = if i == 0 { p } else { p - prev - 1 };
                    w.varint(delta);
                    prev = p;
                }
            }
            Message::SampleBits(m) => {
                w.u32(m.bits.len() as u32);
                w.bytes(&pack_bits(&m.bits));
            }
            Message::QberReport(m) => {
                w.f64(m.qber);
                w.f64(m.ci_2sigma);
                w.u64(m.sampled);
                w.u64(m.errors);
                w.u8(m.proceed as u8);
            }
            Message::SecurityAlert(alert) => match alert {
                SecurityAlert::ExcessCoincidences {
                    observed,
                    expected,
                    threshold,
                } => {
                    w.u8(1);
                    w.u64(*observed);
                    w.f64(*expected);
                    w.f64(*threshold);
                }
                SecurityAlert::PowerOutOfBounds { actual, lo, hi } => {
                    w.u8(2);
                    w.f64(*actual);
                    w.f64(*lo);
                    w.f64(*hi);
                }
            },
            Message::Abort(reason) => {
                w.u8(match reason {
                    AbortWire::Security => 1,
                    AbortWire::QberTooHigh => 2,
                    AbortWire::ProtocolError => 3,
                });
            }
            Message::Bye { transcript_sha256 } => {
                w.bytes(transcript_sha256);
            }
            Message::SimQ(m) => {
                w.u32(m.train_index);
                w.u64(m.base_pulse_index);
                w.u32(m.phase_indices.len() as u32);
                let mut packed = alloc::vec![0u8; m.phase_indices.len().div_ceil(4)];
                for (i, &p) in m.phase_indices.iter().enumerate() {
                    packed[i / 4] |= (p & 0x03) << (6 - 2 * (i % 4));
                }
                w.bytes(&packed);
            }
        }
        w.finish()
    }

    pub fn decode(msg_type: MessageType, payload: &[u8]) -> Result<Message, DecodeError> {
        let mut r = Reader::new(payload);
        let msg = match msg_type {
            MessageType::Hello => {
                let role = match r.u8()? {
                    0 => Role::Alice,
                    1 => Role::Bob,
                    _ => return Err(DecodeError::Malformed("hello role")),
                };
                Message::Hello(role)
            }
            MessageType::Params => {
                let q = r.f64()?;
                let nu_hz = r.f64()?;
                let mu = r.f64()?;
                let t_bob = r.f64()?;
                let eta_bob = r.f64()?;
                let storage_len_km = r.f64()?;
                let dead_time_s = r.f64()?;
                let qber_opt = r.f64()?;
                let qber_stray = r.f64()?;
                let length_km = r.f64()?;
                let loss_coeff_db_per_km = r.f64()?;
                let extra_loss_db = r.f64()?;
                let thermal_alpha_per_k = r.f64()?;
                let group_velocity_m_per_s = r.f64()?;
                let p_dark = r.f64()?;
                let ap_amplitude = r.f64()?;
                let ap_time_const_s = r.f64()?;
                let base_info = r.f64()?;
                let anchor_mu = r.f64()?;
                let n_anchors = r.u16()? as usize;
                let mut anchors = Vec::with_capacity(r.alloc_bound(n_anchors));
                for _ in 0..n_anchors {
                    let loss = r.f64()?;
                    let info = r.f64()?;
                    anchors.push((loss, info));
                }
                let n_pulses = r.u64()?;
                let seed = r.u64()?;
                let sample_fraction = r.f64()?;
                let train_size = r.u32()?;
                let dead_time_scope = match r.u8()? {
                    0 => DeadTimeScope::SystemWide,
                    1 => DeadTimeScope::PerDetector,
                    _ => return Err(DecodeError::Malformed("dead time scope")),
                };
                let qber_abort_threshold = r.f64()?;
                let power_lo = r.f64()?;
                let power_hi = r.f64()?;
                let afterpulse = AfterpulseProfile::new(ap_amplitude, ap_time_const_s)
                    .map_err(|_| DecodeError::Malformed("afterpulse profile"))?;
                Message::Params(WireParams {
                    params: SystemParams {
                        q,
                        nu_hz,
                        mu,
                        t_bob,
                        eta_bob,
                        storage_len_km,
                        dead_time_s,
                        qber_opt,
                        qber_stray,
                        fiber: FiberSpec {
                            length_km,
                            loss_coeff_db_per_km,
                            extra_loss_db,
                            thermal_alpha_per_k,
                            group_velocity_m_per_s,
                        },
                    },
                    detector: DetectorModel { p_dark, afterpulse },
                    eve: EveModel {
                        base_info,
                        anchor_mu,
                        anchors,
                    },
                    n_pulses,
                    seed,
                    sample_fraction,
                    train_size,
                    dead_time_scope,
                    qber_abort_threshold,
                    power_bounds: (power_lo, power_hi),
                })
            }
            MessageType::TrainDone => Message::TrainDone {
                train_index: r.u32()?,
            },
            MessageType::ClickReport => {
                let train_index = r.u32()?;
                let base_pulse_index = r.u64()?;
                let count = r.u32()? as usize;
                let mut entries = Vec::with_capacity(r.alloc_bound(count));
                let mut prev = base_pulse_index;
                for i in 0..count {
                    let raw = r.varint()?;
                    let coincidence = raw & 1 != 0;
                    let delta = raw >> 1;
                    let idx = if i == 0 {
                        prev.checked_add(delta)
                    } else {
                        prev.checked_add(delta).and_then(|v| v.checked_add(1))
                    }
                    .ok_or(DecodeError::Malformed("click index overflow"))?;
                    entries.push((idx, coincidence));
                    prev = idx;
                }
                Message::ClickReport(ClickReportMsg {
                    train_index,
                    base_pulse_index,
                    entries,
                })
            }
            MessageType::BasisReveal => {
                let train_index = r.u32()?;
                let count = r.u32()? as usize;
                let packed = r.take(count.div_ceil(8))?;
                let bases = unpack_bits(packed, count)
                    .map_err(|_| DecodeError::Malformed("basis bit vector"))?;
                Message::BasisReveal(BasisRevealMsg { train_index, bases })
            }
            MessageType::SiftResult => {
                let train_index = r.u32()?;
                let base_pulse_index = r.u64()?;
                let count = r.u32()? as usize;
                let mut kept = Vec::with_capacity(r.alloc_bound(count));
                let mut prev = base_pulse_index;
                for i in 0..count {
                    let delta = r.varint()?;
                    let idx = if i == 0 {
                        prev.checked_add(delta)
                    } else {
                        prev.checked_add(delta).and_then(|v| v.checked_add(1))
                    }
                    .ok_or(DecodeError::Malformed("kept index overflow"))?;
                    kept.push(idx);
                    prev = idx;
                }
                Message::SiftResult(SiftResultMsg {
                    train_index,
                    base_pulse_index,
                    kept,
                })
            }
            MessageType::SampleRequest => {
                let count = r.u32()? as usize;
                let mut positions = Vec::with_capacity(r.alloc_bound(count));
                let mut prev = 0u64;
                for i in 0..count {
                    let delta = r.varint()?;
                    let p = if i == 0 {
                        Some(delta)
                    } else {
                        prev.checked_add(delta).and_then(|v| v.checked_add(1))
                    }
                    .ok_or(DecodeError::Malformed("sample position overflow"))?;
                    positions.push(p);
                    prev = p;
                }
                Message::SampleRequest(SampleRequestMsg { positions })
            }
            MessageType::SampleBits => {
                let count = r.u32()? as usize;
                let packed = r.take(count.div_ceil(8))?;
                let bits = unpack_bits(packed, count)
                    .map_err(|_| DecodeError::Malformed("sample bit vector"))?;
                Message::SampleBits(SampleBitsMsg { bits })
            }
            MessageType::QberReport => Message::QberReport(QberReportMsg {
                qber: r.f64()?,
                ci_2sigma: r.f64()?,
                sampled: r.u64()?,
                errors: r.u64()?,
                proceed: match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(DecodeError::Malformed("proceed flag")),
                },
            }),
            MessageType::SecurityAlert => match r.u8()? {
                1 => Message::SecurityAlert(SecurityAlert::ExcessCoincidences {
                    observed: r.u64()?,
                    expected: r.f64()?,
                    threshold: r.f64()?,
                }),
                2 => Message::SecurityAlert(SecurityAlert::PowerOutOfBounds {
                    actual: r.f64()?,
                    lo: r.f64()?,
                    hi: r.f64()?,
                }),
                _ => return Err(DecodeError::Malformed("alert kind")),
            },
            MessageType::Abort => Message::Abort(match r.u8()? {
                1 => AbortWire::Security,
                2 => AbortWire::QberTooHigh,
                3 => AbortWire::ProtocolError,
                _ => return Err(DecodeError::Malformed("abort reason")),
            }),
            MessageType::Bye => {
                let digest: [u8; 32] = r
                    .take(32)?
                    .try_into()
                    .expect("checked length");
                Message::Bye {
                    transcript_sha256: digest,
                }
            }
            MessageType::SimQ => {
                let train_index = r.u32()?;
                let base_pulse_index = r.u64()?;
                let count = r.u32()? as usize;
                let packed = r.take(count.div_ceil(4))?;
                let mut phase_indices = Vec::with_capacity(count);
                for i in 0..count {
                    phase_indices.push((packed[i / 4] >> (6 - 2 * (i % 4))) & 0x03);
                }
                // Padding must be zero so every message has one encoding.
                if count % 4 != 0 {
                    let last = packed[packed.len() - 1];
                    let used_bits = 2 * (count % 4);
                    if last & (0xFF >> used_bits) != 0 {
                        return Err(DecodeError::Malformed("phase index padding"));
                    }
                }
                Message::SimQ(SimQMsg {
                    train_index,
                    base_pulse_index,
                    phase_indices,
                })
            }
        };
        r.expect_end()?;
        Ok(msg)
    }

    /// Encodes the full frame for a session.
    pub fn to_frame_bytes(&self, session_id: u64) -> Result<Vec<u8>, DecodeError> {
        Frame {
            msg_type: self.msg_type(),
            session_id,
            payload: self.encode_payload(),
        }
        .encode()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate_model::FiberSpec;

    fn roundtrip(msg: Message) {
        let payload = msg.encode_payload();
        let decoded = Message::decode(msg.msg_type(), &payload).unwrap();
        assert_eq!(decoded, msg);
        // And through full framing.
        let bytes = msg.to_frame_bytes(0xA1B2).unwrap();
        let (frame, consumed) = Frame::decode(&bytes).unwrap().unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(frame.session_id, 0xA1B2);
        assert_eq!(Message::decode(frame.msg_type, &frame.payload).unwrap(), msg);
    }

    fn sample_wire_params() -> WireParams {
        let config = RunConfig::new(
            SystemParams {
                qber_opt: 0.0015,
                fiber: FiberSpec::new(22.0, 0.2, 0.4),
                ..SystemParams::default()
            },
            DetectorModel::default(),
            EveModel::default(),
        );
        WireParams::from_config(&config).unwrap()
    }

    #[test]
    fn every_message_round_trips() {
        roundtrip(Message::Hello(Role::Alice));
        roundtrip(Message::Hello(Role::Bob));
        roundtrip(Message::Params(sample_wire_params()));
        roundtrip(Message::TrainDone { train_index: 7 });
        roundtrip(Message::ClickReport(ClickReportMsg {
            train_index: 3,
            base_pulse_index: 1470,
            entries: alloc::vec![(1470, false), (1475, true), (1959, false)],
        }));
        roundtrip(Message::BasisReveal(BasisRevealMsg {
            train_index: 3,
            bases: alloc::vec![true, false, true],
        }));
        roundtrip(Message::SiftResult(SiftResultMsg {
            train_index: 3,
            base_pulse_index: 1470,
            kept: alloc::vec![1470, 1959],
        }));
        roundtrip(Message::SampleRequest(SampleRequestMsg {
            positions: alloc::vec![0, 5, 6, 100],
        }));
        roundtrip(Message::SampleBits(SampleBitsMsg {
            bits: alloc::vec![true, true, false, true, false, false, true, false, true],
        }));
        roundtrip(Message::QberReport(QberReportMsg {
            qber: 0.021,
            ci_2sigma: 0.004,
            sampled: 541,
            errors: 11,
            proceed: true,
        }));
        roundtrip(Message::SecurityAlert(SecurityAlert::ExcessCoincidences {
            observed: 40,
            expected: 4.0,
            threshold: 14.0,
        }));
        roundtrip(Message::SecurityAlert(SecurityAlert::PowerOutOfBounds {
            actual: 1.31,
            lo: 0.9,
            hi: 1.1,
        }));
        roundtrip(Message::Abort(AbortWire::QberTooHigh));
        roundtrip(Message::Bye {
            transcript_sha256: [7u8; 32],
        });
        roundtrip(Message::SimQ(SimQMsg {
            train_index: 0,
            base_pulse_index: 0,
            phase_indices: alloc::vec![0, 1, 2, 3, 3, 2, 1],
        }));
    }

    #[test]
    fn wire_params_reproduce_the_config() {
        let p = sample_wire_params();
        let config = p.to_config();
        assert_eq!(config.train_size_override, Some(490));
        assert_eq!(config.params.fiber.length_km, 22.0);
        assert!(config.power_actual.is_none() && config.mu_actual.is_none());
        assert!(config.validate().is_ok());
    }

    #[test]
    fn incomplete_frames_ask_for_more_bytes() {
        let bytes = Message::TrainDone { train_index: 1 }
            .to_frame_bytes(1)
            .unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(Frame::decode(&bytes[..cut]).unwrap(), None, "cut {cut}");
        }
        // Two frames back to back decode one at a time.
        let mut stream = bytes.clone();
        stream.extend_from_slice(&bytes);
        let (_, consumed) = Frame::decode(&stream).unwrap().unwrap();
        assert_eq!(consumed, bytes.len());
        let (_, consumed2) = Frame::decode(&stream[consumed..]).unwrap().unwrap();
        assert_eq!(consumed2, bytes.len());
    }

    #[test]
    fn corrupted_frames_are_rejected() {
        let good = Message::TrainDone { train_index: 1 }
            .to_frame_bytes(1)
            .unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = 0x00;
        assert_eq!(Frame::decode(&bad_magic), Err(DecodeError::BadMagic));
        let mut bad_version = good.clone();
        bad_version[2] = 9;
        assert_eq!(Frame::decode(&bad_version), Err(DecodeError::UnsupportedVersion(9)));
        let mut bad_type = good.clone();
        bad_type[3] = 200;
        assert_eq!(Frame::decode(&bad_type), Err(DecodeError::UnknownType(200)));
    }

    #[test]
    fn payload_decoders_reject_malformed_bodies() {
        // Trailing garbage.
        let mut payload = Message::TrainDone { train_index: 1 }.encode_payload();
        payload.push(0);
        assert_eq!(
            Message::decode(MessageType::TrainDone, &payload),
            Err(DecodeError::TrailingBytes)
        );
        // Truncated body.
        assert_eq!(
            Message::decode(MessageType::QberReport, &[0u8; 3]),
            Err(DecodeError::Truncated)
        );
        // Bad role.
        assert_eq!(
            Message::decode(MessageType::Hello, &[7]),
            Err(DecodeError::Malformed("hello role"))
        );
        // Nonzero phase-index padding.
        let msg = Message::SimQ(SimQMsg {
            train_index: 0,
            base_pulse_index: 0,
            phase_indices: alloc::vec![0],
        });
        let mut payload = msg.encode_payload();
        let last = payload.len() - 1;
        payload[last] |= 0x01;
        assert_eq!(
            Message::decode(MessageType::SimQ, &payload),
            Err(DecodeError::Malformed("phase index padding"))
        );
        // Varint overflow.
        let mut payload = Vec::new();
        payload.extend_from_slice(&0u32.to_be_bytes());
        payload.extend_from_slice(&0u64.to_be_bytes());
        payload.extend_from_slice(&1u32.to_be_bytes());
        payload.extend_from_slice(&[0xFF; 10]);
        assert_eq!(
            Message::decode(MessageType::ClickReport, &payload),
            Err(DecodeError::VarintOverflow)
        );
    }

    #[test]
    fn delta_encoding_is_compact() {
        // 490 consecutive clicks cost ~1 byte each.
        let entries: Vec<(u64, bool)> = (0..490).map(|i| (i as u64, false)).collect();
        let msg = Message::ClickReport(ClickReportMsg {
            train_index: 0,
            base_pulse_index: 0,
            entries,
        });
        assert!(msg.encode_payload().len() < 510);
    }
}
