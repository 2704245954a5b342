//! Flat `key = value` scenario files.
//!
//! One key per line, `#` starts a full-line comment, blank lines are
//! ignored. Unknown and duplicate keys are rejected so a typo cannot
//! silently fall back to a default. The `ref.*` block is all-or-none:
//! comparison anchors only make sense as a complete row.

use std::collections::BTreeMap;
use std::fmt;

use qkdsim_core::rate_model::{DetectorModel, EveModel, FiberSpec, SystemParams};
use qkdsim_core::simengine::RunConfig;

/// Every accepted key, in documentation order.
pub const KNOWN_KEYS: &[&str] = &[
    "scenario.name",
    "link.length_km",
    "link.loss_db_per_km",
    "link.extra_loss_db",
    "link.visibility",
    "link.group_velocity_m_per_s",
    "link.thermal_alpha_per_k",
    "source.mu",
    "source.mu_vis",
    "clock.nu_hz",
    "detector.p_dark",
    "detector.efficiency",
    "detector.dead_time_us",
    "detector.afterpulse_amplitude",
    "detector.afterpulse_time_const_us",
    "bob.transmission",
    "protocol.q",
    "storage.length_km",
    "eve.anchors",
    "eve.base_info",
    "eve.anchor_mu",
    "run.pulses",
    "run.seed",
    "run.mode",
    "run.sample_fraction",
    "run.train_size",
    "run.qber_stray",
    "ref.r_raw_khz",
    "ref.qber_pct",
    "ref.qber_2sigma_pct",
    "ref.r_net_khz",
];

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax { line: usize, text: String },
    UnknownKey { line: usize, key: String },
    DuplicateKey { line: usize, key: String },
    BadValue { key: String, detail: String },
    /// Some but not all `ref.*` anchors were given.
    IncompleteReference,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => {
                write!(f, "line {line}: expected `key = value`, got `{text}`")
            }
            ConfigError::UnknownKey { line, key } => {
                write!(f, "line {line}: unknown key `{key}`")
            }
            ConfigError::DuplicateKey { line, key } => {
                write!(f, "line {line}: duplicate key `{key}`")
            }
            ConfigError::BadValue { key, detail } => {
                write!(f, "key `{key}`: {detail}")
            }
            ConfigError::IncompleteReference => {
                write!(f, "ref.* anchors are all-or-none; set all four or none")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// How a scenario is meant to be executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    SingleProcess,
    Networked,
}

/// Previously recorded link results used as comparison anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub r_raw_khz: f64,
    pub qber_pct: f64,
    pub qber_2sigma_pct: f64,
    pub r_net_khz: f64,
}

/// A parsed scenario: a runnable configuration plus report metadata.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub config: RunConfig,
    /// Configured fringe visibility (1 - 2·qber_opt).
    pub visibility: f64,
    /// Mean photon number for visibility measurement runs.
    pub mu_vis: f64,
    pub mode: RunMode,
    pub reference: Option<ReferenceRow>,
}

struct Keys {
    values: BTreeMap<String, String>,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<f64>().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                detail: format!("`{raw}` is not a number ({e})"),
            }),
        }
    }

    fn take_opt_f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<f64>().map(Some).map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                detail: format!("`{raw}` is not a number ({e})"),
            }),
        }
    }

    fn take_u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<u64>().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                detail: format!("`{raw}` is not a non-negative integer ({e})"),
            }),
        }
    }
}

fn parse_anchors(raw: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
    let bad = |detail: String| ConfigError::BadValue {
        key: "eve.anchors".to_string(),
        detail,
    };
    raw.split(',')
        .map(|pair| {
            let (db, info) = pair
                .split_once(':')
                .ok_or_else(|| bad(format!("`{pair}` is not `loss_db:info`")))?;
            let db = db
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("loss `{db}`: {e}")))?;
            let info = info
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("info `{info}`: {e}")))?;
            Ok((db, info))
        })
        .collect()
}

/// Parses one scenario document.
pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
    let mut values: BTreeMap<String, String> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
            line: line_no,
            text: line.to_string(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { line: line_no, key });
        }
        if values.insert(key.clone(), value).is_some() {
            return Err(ConfigError::DuplicateKey { line: line_no, key });
        }
    }
    let mut keys = Keys { values };

    let name = keys.take("scenario.name").unwrap_or_else(|| "unnamed".to_string());

    let defaults = SystemParams::default();
    let fiber = FiberSpec {
        length_km: keys.take_f64("link.length_km", 0.0)?,
        loss_coeff_db_per_km: keys.take_f64("link.loss_db_per_km", 0.0)?,
        extra_loss_db: keys.take_f64("link.extra_loss_db", 0.0)?,
        thermal_alpha_per_k: keys.take_f64(
            "link.thermal_alpha_per_k",
            defaults.fiber.thermal_alpha_per_k,
        )?,
        group_velocity_m_per_s: keys.take_f64(
            "link.group_velocity_m_per_s",
            defaults.fiber.group_velocity_m_per_s,
        )?,
    };

    let visibility = keys.take_f64("link.visibility", 1.0)?;
    if !(0.0..=1.0).contains(&visibility) {
        return Err(ConfigError::BadValue {
            key: "link.visibility".to_string(),
            detail: format!("{visibility} is outside [0, 1]"),
        });
    }

    let params = SystemParams {
        q: keys.take_f64("protocol.q", defaults.q)?,
        nu_hz: keys.take_f64("clock.nu_hz", defaults.nu_hz)?,
        mu: keys.take_f64("source.mu", defaults.mu)?,
        t_bob: keys.take_f64("bob.transmission", defaults.t_bob)?,
        eta_bob: keys.take_f64("detector.efficiency", defaults.eta_bob)?,
        storage_len_km: keys.take_f64("storage.length_km", defaults.storage_len_km)?,
        dead_time_s: keys.take_f64("detector.dead_time_us", defaults.dead_time_s * 1e6)? * 1e-6,
        qber_opt: (1.0 - visibility) / 2.0,
        qber_stray: keys.take_f64("run.qber_stray", 0.0)?,
        fiber,
    };

    let mut detector = DetectorModel {
        p_dark: keys.take_f64("detector.p_dark", DetectorModel::default().p_dark)?,
        ..DetectorModel::default()
    };
    let amplitude = keys.take_opt_f64("detector.afterpulse_amplitude")?;
    let time_const = keys.take_opt_f64("detector.afterpulse_time_const_us")?;
    match (amplitude, time_const) {
        (None, None) => {}
        (Some(a), Some(t_us)) => {
            detector.afterpulse.amplitude = a;
            detector.afterpulse.time_const_s = t_us * 1e-6;
        }
        _ => {
            return Err(ConfigError::BadValue {
                key: "detector.afterpulse_amplitude".to_string(),
                detail: "amplitude and time constant must be set together".to_string(),
            })
        }
    }

    let eve_defaults = EveModel::default();
    let eve = EveModel {
        base_info: keys.take_f64("eve.base_info", eve_defaults.base_info)?,
        anchor_mu: keys.take_f64("eve.anchor_mu", eve_defaults.anchor_mu)?,
        anchors: match keys.take("eve.anchors") {
            None => eve_defaults.anchors,
            Some(raw) => parse_anchors(&raw)?,
        },
    };

    let mut config = RunConfig::new(params, detector, eve);
    config.n_pulses = keys.take_u64("run.pulses", config.n_pulses)?;
    config.seed = keys.take_u64("run.seed", config.seed)?;
    config.sample_fraction = keys.take_f64("run.sample_fraction", config.sample_fraction)?;
    if let Some(raw) = keys.take("run.train_size") {
        let n = raw.parse::<u32>().map_err(|e| ConfigError::BadValue {
            key: "run.train_size".to_string(),
            detail: format!("`{raw}` is not a positive integer ({e})"),
        })?;
        config.train_size_override = Some(n);
    }

    let mode = match keys.take("run.mode").as_deref() {
        None | Some("single-process") => RunMode::SingleProcess,
        Some("networked") => RunMode::Networked,
        Some(other) => {
            return Err(ConfigError::BadValue {
                key: "run.mode".to_string(),
                detail: format!("`{other}` is not `single-process` or `networked`"),
            })
        }
    };

    let mu_vis = keys.take_f64("source.mu_vis", 2.0)?;

    let anchors = [
        keys.take_opt_f64("ref.r_raw_khz")?,
        keys.take_opt_f64("ref.qber_pct")?,
        keys.take_opt_f64("ref.qber_2sigma_pct")?,
        keys.take_opt_f64("ref.r_net_khz")?,
    ];
    let reference = match anchors {
        [Some(r_raw_khz), Some(qber_pct), Some(qber_2sigma_pct), Some(r_net_khz)] => {
            Some(ReferenceRow {
                r_raw_khz,
                qber_pct,
                qber_2sigma_pct,
                r_net_khz,
            })
        }
        [None, None, None, None] => None,
        _ => return Err(ConfigError::IncompleteReference),
    };

    debug_assert!(keys.values.is_empty(), "every known key consumed");

    Ok(Scenario {
        name,
        config,
        visibility,
        mu_vis,
        mode,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
# comment
scenario.name = demo
link.length_km = 22.0
link.loss_db_per_km = 0.2
link.extra_loss_db = 0.4
link.visibility = 0.9970
run.pulses = 50000
run.seed = 3
";

    #[test]
    fn minimal_document_parses_with_defaults() {
        let s = parse(MINIMAL).unwrap();
        assert_eq!(s.name, "demo");
        assert_eq!(s.config.n_pulses, 50_000);
        assert_eq!(s.config.seed, 3);
        assert!((s.config.params.fiber.total_loss_db() - 4.8).abs() < 1e-9);
        assert!((s.config.params.qber_opt - 0.0015).abs() < 1e-12);
        assert_eq!(s.mode, RunMode::SingleProcess);
        assert!(s.reference.is_none());
        assert_eq!(s.mu_vis, 2.0);
        s.config.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse("link.lenght_km = 22\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse("source.mu = 0.2\nsource.mu = 0.3\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 2, .. }));
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let err = parse("source.mu 0.2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
    }

    #[test]
    fn reference_block_is_all_or_none() {
        let err = parse("ref.r_raw_khz = 2.06\n").unwrap_err();
        assert_eq!(err, ConfigError::IncompleteReference);
    }

    #[test]
    fn anchors_and_mode_parse() {
        let s = parse(
            "eve.anchors = 5:0.06, 10:0.14, 20:0.40\nrun.mode = networked\nrun.train_size = 480\n",
        )
        .unwrap();
        assert_eq!(s.config.eve.anchors, vec![(5.0, 0.06), (10.0, 0.14), (20.0, 0.40)]);
        assert_eq!(s.mode, RunMode::Networked);
        assert_eq!(s.config.train_size_override, Some(480));
        assert!(parse("run.mode = both\n").is_err());
        assert!(parse("eve.anchors = 5-0.06\n").is_err());
    }

    #[test]
    fn afterpulse_overrides_come_in_pairs() {
        assert!(parse("detector.afterpulse_amplitude = 0.004\n").is_err());
        let s = parse(
            "detector.afterpulse_amplitude = 0.004\ndetector.afterpulse_time_const_us = 4.1\n",
        )
        .unwrap();
        assert!((s.config.detector.afterpulse.amplitude - 0.004).abs() < 1e-15);
        assert!((s.config.detector.afterpulse.time_const_s - 4.1e-6).abs() < 1e-15);
    }
}
