//! Deterministic CSV emission for link reports.
//!
//! Column order is part of the output contract: downstream tooling
//! consumes these files positionally. Key size per session depends on
//! acquisition time rather than link physics, so it is not a column;
//! rates are reported per second instead.

use std::fmt::Write as _;

/// Fixed header row, first line of every report.
pub const CSV_HEADER: &str =
    "scenario,length_km,loss_db,r_raw_khz,qber_pct,qber_2sigma,r_net_khz,source";

/// Where a row's numbers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Simulated detection record under the scenario seed.
    Measured,
    /// Analytic model evaluated on the scenario parameters.
    Predicted,
    /// Previously recorded field results bundled with the scenario.
    Published,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Measured => "measured",
            Source::Predicted => "predicted",
            Source::Published => "published",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scenario: String,
    pub length_km: f64,
    pub loss_db: f64,
    pub r_raw_khz: f64,
    pub qber_pct: f64,
    /// Two-standard-error half width on the QBER, in percentage points.
    pub qber_2sigma_pct: f64,
    pub r_net_khz: f64,
    pub source: Source,
}

/// Renders rows as CSV. Period decimal separator, `\n` line endings,
/// fixed precision so identical inputs yield identical bytes.
pub fn emit_csv(rows: &[ReportRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(
            out,
            "{},{:.1},{:.1},{:.3},{:.2},{:.2},{:.3},{}",
            row.scenario,
            row.length_km,
            row.loss_db,
            row.r_raw_khz,
            row.qber_pct,
            row.qber_2sigma_pct,
            row.r_net_khz,
            row.source.as_str(),
        );
    }
    out
}
