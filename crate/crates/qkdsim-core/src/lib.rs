//! Core models for a plug&play BB84 quantum key distribution link over
//! optical fiber.
//!
//! The crate is organized in layers, each usable on its own:
//!
//! - [`rate_model`]: closed-form link budget. Raw/net key rates, the QBER
//!   decomposition (optical, dark-count, afterpulse, stray), duty-cycle and
//!   dead-time efficiencies, mutual-information estimates and the
//!   eavesdropper bound used for the net-rate figure.
//! - [`photonics`]: stochastic building blocks. Weak coherent pulses with
//!   Poissonian photon number, lossy propagation, interferometric routing,
//!   and gated single-photon detectors with dark counts, afterpulsing and
//!   dead time.
//! - [`protocol`]: the classical post-processing steps both parties run:
//!   basis/bit assignment, sifting, sampled QBER estimation and the
//!   coincidence/power security monitors.
//! - [`simengine`]: discrete-event orchestration. Pulse-train scheduling for
//!   the go-and-return fiber layout, line-length calibration, fringe
//!   visibility measurement and the full Monte Carlo key exchange.
//! - [`netlink`]: framed wire codec and sans-IO session state machines that
//!   let the exchange run as two separate processes over any byte stream.
//!
//! The crate is `no_std` (with `alloc`); all float math goes through
//! `libm` so results do not depend on a platform `libm`. Everything
//! stochastic draws from per-entity substreams of one seeded ChaCha stream
//! ([`rng`]), which makes every simulation bit-reproducible from
//! `(seed, config)`.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod math;
pub mod netlink;
pub mod photonics;
pub mod protocol;
pub mod rate_model;
pub mod rng;
pub mod simengine;
