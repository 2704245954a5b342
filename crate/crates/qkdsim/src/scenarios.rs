//! Bundled field-trial scenarios.
//!
//! Each scenario captures one installed link (fiber geometry, receiver
//! settings, recorded reference results) as a config document compiled
//! into the binary, so reports are reproducible without external files.

use std::fmt;
use std::path::Path;

use crate::config::{self, ConfigError, Scenario};

/// Bundled scenario names, in report order.
pub const SCENARIO_NAMES: &[&str] = &[
    "geneva_nyon_lake",
    "geneva_nyon_terrestrial",
    "nyon_lausanne",
    "geneva_lausanne_a",
    "geneva_lausanne_b",
    "ste_croix_a",
    "ste_croix_b",
];

/// Returns the bundled config document for `name`, if it exists.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "geneva_nyon_lake" => Some(include_str!("../scenarios/geneva_nyon_lake.cfg")),
        "geneva_nyon_terrestrial" => {
            Some(include_str!("../scenarios/geneva_nyon_terrestrial.cfg"))
        }
        "nyon_lausanne" => Some(include_str!("../scenarios/nyon_lausanne.cfg")),
        "geneva_lausanne_a" => Some(include_str!("../scenarios/geneva_lausanne_a.cfg")),
        "geneva_lausanne_b" => Some(include_str!("../scenarios/geneva_lausanne_b.cfg")),
        "ste_croix_a" => Some(include_str!("../scenarios/ste_croix_a.cfg")),
        "ste_croix_b" => Some(include_str!("../scenarios/ste_croix_b.cfg")),
        _ => None,
    }
}

#[derive(Debug)]
pub enum LoadError {
    /// Neither a readable file nor a bundled name.
    NotFound(String),
    Io(String, std::io::Error),
    Parse(String, ConfigError),
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadError::NotFound(arg) => {
                write!(
                    f,
                    "`{arg}` is not a config file or a bundled scenario; bundled names: {}",
                    SCENARIO_NAMES.join(", ")
                )
            }
            LoadError::Io(path, e) => write!(f, "reading `{path}`: {e}"),
            LoadError::Parse(origin, e) => write!(f, "parsing `{origin}`: {e}"),
        }
    }
}

impl std::error::Error for LoadError {}

/// Resolves a `--config` argument: an existing file path wins, otherwise
/// the argument is looked up as a bundled scenario name.
pub fn load(arg: &str) -> Result<Scenario, LoadError> {
    if Path::new(arg).is_file() {
        let text = std::fs::read_to_string(arg)
            .map_err(|e| LoadError::Io(arg.to_string(), e))?;
        return config::parse(&text).map_err(|e| LoadError::Parse(arg.to_string(), e));
    }
    match bundled(arg) {
        Some(text) => config::parse(text).map_err(|e| LoadError::Parse(arg.to_string(), e)),
        None => Err(LoadError::NotFound(arg.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunMode;

    #[test]
    fn every_bundled_scenario_parses_and_validates() {
        for &name in SCENARIO_NAMES {
            let s = load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(s.name, name);
            assert_eq!(s.mode, RunMode::SingleProcess);
            let r = s.reference.unwrap_or_else(|| panic!("{name}: missing reference row"));
            assert!(r.r_raw_khz > 0.0 && r.r_net_khz > 0.0);
            assert_eq!(s.config.train_size_override, Some(480));
            s.config.validate().unwrap_or_else(|e| panic!("{name}: {e:?}"));
        }
    }

    #[test]
    fn lake_scenario_matches_the_recorded_link_budget() {
        let s = load("geneva_nyon_lake").unwrap();
        assert!((s.config.params.fiber.total_loss_db() - 4.8).abs() < 1e-9);
        assert!((s.config.params.fiber.length_km - 22.0).abs() < 1e-9);
        assert!((s.visibility - 0.9970).abs() < 1e-12);
        assert!((s.config.params.qber_opt - 0.0015).abs() < 1e-12);
    }

    #[test]
    fn unknown_names_report_the_available_set() {
        let err = load("no_such_link").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("geneva_nyon_lake"));
        assert!(text.contains("ste_croix_b"));
    }
}
