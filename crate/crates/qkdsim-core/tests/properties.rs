//! Randomized invariant checks across the analytic model, the pulse
//! tracer, the sifting primitives and the wire codec.

use proptest::collection::vec;
use proptest::prelude::*;

use qkdsim_core::netlink::codec::{
    AbortWire, BasisRevealMsg, ClickReportMsg, QberReportMsg, Role, SampleBitsMsg,
    SampleRequestMsg, SiftResultMsg, SimQMsg, WireParams,
};
use qkdsim_core::netlink::{Frame, Message, MessageType};
use qkdsim_core::photonics::{
    frame_from_phase_index, DetectorId, GatedDetector, PulseOptics,
};
use qkdsim_core::protocol::{pack_bits, sample_positions, unpack_bits, SecurityAlert};
use qkdsim_core::rate_model::{
    eta_duty, eta_tau, eve_info, info_ab, net_rate, qber_after, qber_total, raw_rate,
    transmission_from_loss, AfterpulseProfile, DetectorModel, EveModel, FiberSpec, SystemParams,
};
use qkdsim_core::rng::{substream, Stream};
use qkdsim_core::simengine::{run_exchange, RunConfig, TrainSchedule};

fn valid_params() -> impl Strategy<Value = SystemParams> {
    (
        0.0f64..150.0,        // length_km
        0.1f64..0.5,          // loss per km
        0.0f64..8.0,          // extra loss
        0.01f64..2.0,         // mu
        0.1f64..1.0,          // t_bob
        0.01f64..0.9,         // eta_bob
        1.0f64..30.0,         // storage_len_km
        0.0f64..12.0e-6,      // dead time
        0.0f64..0.05,         // qber_opt
    )
        .prop_map(
            |(len, coeff, extra, mu, t_bob, eta_bob, storage, dead, qber_opt)| SystemParams {
                mu,
                t_bob,
                eta_bob,
                storage_len_km: storage,
                dead_time_s: dead,
                qber_opt,
                fiber: FiberSpec::new(len, coeff, extra),
                ..SystemParams::default()
            },
        )
}

proptest! {
    #[test]
    fn decibels_round_trip(db in 0.0f64..100.0) {
        let t = transmission_from_loss(db).unwrap();
        prop_assert!(t > 0.0 && t <= 1.0);
        let back = -10.0 * t.log10();
        prop_assert!((back - db).abs() < 1e-9);
    }

    #[test]
    fn duty_and_dead_time_factors_stay_in_range(
        storage in 0.1f64..50.0,
        link in 0.0f64..200.0,
        p_det in 0.0f64..1.0,
        dead in 0.0f64..1e-4,
    ) {
        let duty = eta_duty(storage, link).unwrap();
        prop_assert!(duty > 0.0 && duty <= 1.0);
        let tau = eta_tau(5.0e6, p_det, dead);
        prop_assert!(tau > 0.0 && tau <= 1.0);
    }

    #[test]
    fn raw_rate_grows_with_intensity_and_shrinks_with_length(
        params in valid_params(),
    ) {
        let base = raw_rate(&params).unwrap();
        prop_assert!(base.r_raw_hz.is_finite() && base.r_raw_hz >= 0.0);

        let mut brighter = params.clone();
        brighter.mu *= 1.5;
        prop_assert!(raw_rate(&brighter).unwrap().r_raw_hz >= base.r_raw_hz);

        let mut longer = params.clone();
        longer.fiber.length_km += 10.0;
        prop_assert!(raw_rate(&longer).unwrap().r_raw_hz <= base.r_raw_hz);
    }

    #[test]
    fn qber_budget_is_a_probability(
        opt in 0.0f64..0.5,
        dark in 0.0f64..0.5,
        after in 0.0f64..0.5,
        stray in 0.0f64..0.5,
    ) {
        let (q, clamped) = qber_total(opt, dark, after, stray);
        prop_assert!((0.0..=0.5).contains(&q));
        prop_assert_eq!(clamped, opt + dark + after + stray > 0.5);
    }

    #[test]
    fn error_correction_penalty_never_helps(d in 0.0f64..=0.5) {
        let info = info_ab(d).unwrap();
        prop_assert!(info.i_ab_corrected <= info.i_ab + 1e-12);
        prop_assert!(info.i_ab <= 1.0 && info.i_ab >= 0.0);
    }

    #[test]
    fn net_rate_is_bounded_by_the_raw_rate(
        r_raw in 0.0f64..1e6,
        d in 0.0f64..=0.5,
        i_ae in 0.0f64..=1.0,
    ) {
        let net = net_rate(r_raw, d, i_ae).unwrap();
        prop_assert!(net.r_net_hz >= 0.0);
        prop_assert!(net.r_net_hz <= r_raw + 1e-9);
        prop_assert!(net.eta_dist >= 0.0 && net.eta_dist <= 1.0 + 1e-12);
    }

    #[test]
    fn eavesdropper_bound_grows_with_loss(
        db in 0.0f64..40.0,
        step in 0.1f64..10.0,
    ) {
        let eve = EveModel::default();
        let lo = eve_info(db, eve.anchor_mu, &eve).unwrap();
        let hi = eve_info(db + step, eve.anchor_mu, &eve).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn afterpulse_noise_falls_as_dead_time_grows(
        q0 in 0.02f64..0.08,
        ratio in 0.1f64..0.7,
    ) {
        let tau = 4.0e-6;
        let profile =
            AfterpulseProfile::calibrated(q0, q0 * ratio, tau, 0.0015, 5.0e6).unwrap();
        prop_assert!(profile.amplitude > 0.0);
        prop_assert!(profile.time_const_s > 0.0);
        let short = qber_after(&profile, 0.0015, 5.0e6, 1.0e-6).unwrap();
        let long = qber_after(&profile, 0.0015, 5.0e6, 8.0e-6).unwrap();
        prop_assert!(long <= short);
        // The calibration anchors are reproduced.
        prop_assert!((qber_after(&profile, 0.0015, 5.0e6, 0.0).unwrap() - q0).abs() < 1e-9);
        prop_assert!(
            (qber_after(&profile, 0.0015, 5.0e6, tau).unwrap() - q0 * ratio).abs() < 1e-9
        );
    }

    #[test]
    fn phase_routing_is_a_partition(
        v in 0.0f64..=1.0,
        delta in 0u8..4,
        n in 0u32..200,
        seed in any::<u64>(),
    ) {
        let optics = PulseOptics::new(0.1, 1.0, v).unwrap();
        let p1 = optics.d1_probability(delta);
        prop_assert!((0.0..=1.0).contains(&p1));
        let mut rng = substream(seed, Stream::Channel);
        let (n1, n2) = optics.route(delta, n, &mut rng);
        prop_assert_eq!(n1 + n2, n);
    }

    #[test]
    fn phase_indices_round_trip(idx in 0u8..4, bob in any::<bool>(), pulse in any::<u64>()) {
        let frame = frame_from_phase_index(pulse, idx, bob).unwrap();
        prop_assert_eq!(frame.alice_phase_index(), idx);
        prop_assert_eq!(frame.bob_phase_index(), bob as u8);
        prop_assert_eq!(frame.compatible(), frame.delta_quarter_turns() % 2 == 0);
    }

    #[test]
    fn clicks_respect_the_dead_time(
        seed in any::<u64>(),
        dead_us in 1.0f64..10.0,
        gaps in vec(0.05f64..3.0, 10..400),
    ) {
        let dead_time_s = dead_us * 1e-6;
        let mut det = GatedDetector::new(
            DetectorId::D1,
            1.0,
            0.5,
            AfterpulseProfile { amplitude: 0.0, time_const_s: 1e-6 },
            dead_time_s,
        )
        .unwrap();
        let mut rng = substream(seed, Stream::DetectorD1);
        let mut t = 0.0;
        let mut clicks = Vec::new();
        for gap in gaps {
            t += gap * 1e-6;
            if det.gate(t, 1, &mut rng).unwrap() {
                clicks.push(t);
            }
        }
        for pair in clicks.windows(2) {
            prop_assert!(pair[1] - pair[0] >= dead_time_s - 1e-15);
        }
    }

    #[test]
    fn bit_packing_round_trips(bits in vec(any::<bool>(), 0..200)) {
        let bytes = pack_bits(&bits);
        prop_assert_eq!(bytes.len(), bits.len().div_ceil(8));
        let back = unpack_bits(&bytes, bits.len()).unwrap();
        prop_assert_eq!(back, bits);
    }

    #[test]
    fn sampled_positions_are_sorted_unique_and_sized(
        len in 1usize..5000,
        fraction in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = substream(seed, Stream::Sampling);
        let positions = sample_positions(len, fraction, &mut rng);
        let expected = ((fraction * len as f64).round() as usize).clamp(1, len);
        prop_assert_eq!(positions.len(), expected);
        for pair in positions.windows(2) {
            prop_assert!(pair[0] < pair[1]);
        }
        prop_assert!(*positions.last().unwrap() < len);
    }

    #[test]
    fn train_schedule_fits_the_storage_window(
        params in valid_params(),
    ) {
        prop_assume!(params.fiber.length_km > 0.0);
        let schedule = TrainSchedule::from_params(&params, None).unwrap();
        let duty = schedule.realized_duty();
        prop_assert!(duty > 0.0 && duty <= 1.0);
        let span = schedule.train_size as f64 * schedule.pulse_spacing_s;
        prop_assert!(span <= schedule.train_period_s + 1e-15);
        // Detection of the first pulse happens after its emission.
        prop_assert!(schedule.detection_time_s(0, 0) > schedule.emission_time_s(0, 0));
    }
}

// -------- wire codec --------

fn ascending(base: usize) -> impl Strategy<Value = Vec<u64>> {
    vec(1u64..500, 0..base).prop_map(|deltas| {
        let mut acc = 0u64;
        deltas
            .into_iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect()
    })
}

fn any_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        any::<bool>().prop_map(|a| Message::Hello(if a { Role::Alice } else { Role::Bob })),
        any::<u32>().prop_map(|train_index| Message::TrainDone { train_index }),
        (any::<u32>(), 0u64..1 << 40, ascending(100), any::<bool>()).prop_map(
            |(train_index, base, indices, flag)| {
                Message::ClickReport(ClickReportMsg {
                    train_index,
                    base_pulse_index: base,
                    entries: indices.into_iter().map(|i| (base + i, flag)).collect(),
                })
            }
        ),
        (any::<u32>(), vec(any::<bool>(), 0..300)).prop_map(|(train_index, bases)| {
            Message::BasisReveal(BasisRevealMsg { train_index, bases })
        }),
        (any::<u32>(), 0u64..1 << 40, ascending(100)).prop_map(|(train_index, base, kept)| {
            Message::SiftResult(SiftResultMsg {
                train_index,
                base_pulse_index: base,
                kept: kept.into_iter().map(|i| base + i).collect(),
            })
        }),
        ascending(100).prop_map(|positions| {
            Message::SampleRequest(SampleRequestMsg { positions })
        }),
        vec(any::<bool>(), 0..300)
            .prop_map(|bits| Message::SampleBits(SampleBitsMsg { bits })),
        (0.0f64..=1.0, 0.0f64..=1.0, 0u64..10000, 0u64..10000, any::<bool>()).prop_map(
            |(qber, ci_2sigma, sampled, errors, proceed)| {
                Message::QberReport(QberReportMsg {
                    qber,
                    ci_2sigma,
                    sampled,
                    errors,
                    proceed,
                })
            }
        ),
        (any::<u64>(), 0.0f64..1e6, 0.0f64..1e6).prop_map(|(observed, expected, threshold)| {
            Message::SecurityAlert(SecurityAlert::ExcessCoincidences {
                observed,
                expected,
                threshold,
            })
        }),
        (0.0f64..10.0, 0.0f64..1.0, 1.0f64..10.0).prop_map(|(actual, lo, hi)| {
            Message::SecurityAlert(SecurityAlert::PowerOutOfBounds { actual, lo, hi })
        }),
        prop_oneof![
            Just(AbortWire::Security),
            Just(AbortWire::QberTooHigh),
            Just(AbortWire::ProtocolError)
        ]
        .prop_map(Message::Abort),
        any::<[u8; 32]>().prop_map(|transcript_sha256| Message::Bye { transcript_sha256 }),
        (any::<u32>(), 0u64..1 << 40, vec(0u8..4, 0..500)).prop_map(
            |(train_index, base_pulse_index, phase_indices)| {
                Message::SimQ(SimQMsg {
                    train_index,
                    base_pulse_index,
                    phase_indices,
                })
            }
        ),
    ]
}

proptest! {
    #[test]
    fn every_message_survives_the_wire(msg in any_message(), session in any::<u64>()) {
        let bytes = msg.to_frame_bytes(session).unwrap();
        let (frame, consumed) = Frame::decode(&bytes).unwrap().expect("complete frame");
        prop_assert_eq!(consumed, bytes.len());
        prop_assert_eq!(frame.session_id, session);
        let back = Message::decode(frame.msg_type, &frame.payload).unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn frame_decoding_never_panics(bytes in vec(any::<u8>(), 0..600)) {
        if let Ok(Some((frame, consumed))) = Frame::decode(&bytes) {
            // A decoded frame re-encodes to exactly the bytes it came from.
            prop_assert_eq!(frame.encode().unwrap(), &bytes[..consumed]);
        }
    }

    #[test]
    fn payload_decoding_never_panics(type_byte in 1u8..14, payload in vec(any::<u8>(), 0..400)) {
        let msg_type = MessageType::from_u8(type_byte).unwrap();
        if let Ok(msg) = Message::decode(msg_type, &payload) {
            // Whatever decodes must re-encode decodably to the same message.
            let bytes = msg.encode_payload();
            prop_assert_eq!(Message::decode(msg_type, &bytes).unwrap(), msg);
        }
    }
}

// -------- end-to-end determinism --------

fn small_config() -> impl Strategy<Value = RunConfig> {
    (
        5.0f64..40.0,    // length_km
        0.0f64..0.01,    // qber_opt
        500u64..4000,    // pulses
        any::<u64>(),    // seed
        0.05f64..0.5,    // sample fraction
    )
        .prop_map(|(len, qber_opt, n_pulses, seed, sample_fraction)| {
            let mut config = RunConfig::new(
                SystemParams {
                    qber_opt,
                    fiber: FiberSpec::new(len, 0.2, 0.0),
                    ..SystemParams::default()
                },
                DetectorModel::default(),
                EveModel::default(),
            );
            config.n_pulses = n_pulses;
            config.seed = seed;
            config.sample_fraction = sample_fraction;
            config
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn exchanges_are_deterministic_and_internally_consistent(config in small_config()) {
        // Tiny runs can legitimately sift zero bits; that outcome must be
        // reported as an error, and deterministically so.
        let first = run_exchange(&config);
        if let Err(e) = &first {
            let again = run_exchange(&config);
            prop_assert_eq!(format!("{e:?}"), format!("{:?}", again.unwrap_err()));
            return Ok(());
        }
        let a = first.unwrap();
        let b = run_exchange(&config).unwrap();
        prop_assert_eq!(&a.alice_key, &b.alice_key);
        prop_assert_eq!(&a.bob_key, &b.bob_key);
        prop_assert_eq!(a.estimate, b.estimate);

        if a.aborted.is_none() {
            // Keys line up pulse for pulse, and the sample came out of the key.
            prop_assert_eq!(&a.alice_key.pulse_indices, &b.bob_key.pulse_indices);
            prop_assert_eq!(a.alice_key.len() + a.estimate.sampled, a.stats.sifted_bits);
        } else {
            prop_assert!(a.alice_key.is_empty() && a.bob_key.is_empty());
        }
        prop_assert!(a.stats.clicks >= a.stats.coincidences);
        prop_assert!(a.stats.live_gates <= a.stats.n_pulses);
    }

    #[test]
    fn wire_params_round_trip_any_valid_config(config in small_config()) {
        let wire = WireParams::from_config(&config).unwrap();
        let back = wire.to_config();
        let wire2 = WireParams::from_config(&back).unwrap();
        prop_assert_eq!(wire, wire2);
    }
}
