//! Parameter-count report against the reference model size.

use std::fmt::Write as _;

use anyhow::Result;
use seanet_core::network::ParameterReport;
use seanet_core::{build_network, NetworkConfig};

/// Published size of the full model.
pub const REFERENCE_TOTAL: usize = 8_700_000;
/// Accepted relative deviation from [`REFERENCE_TOTAL`].
pub const TOLERANCE: f64 = 0.2;

/// Modules whose widths are free choices rather than published sizes.
const UNSTATED: [(&str, &str); 4] = [
    ("pre_extractor", "LSTM hidden size per direction is unpublished; `recurrent_hidden` sets it"),
    ("blocks.extractor", "same LSTM hidden size as the pre-units"),
    ("visual_encoder", "temporal conv stack over precomputed lip features; the lip front-end itself is not counted"),
    ("blocks.intra", "attention projections are sized to the feature dimension"),
];

#[derive(Debug, Clone)]
pub struct ParamsSummary {
    pub report: ParameterReport,
    pub reference: usize,
    /// `(total − reference) / reference`.
    pub relative_deviation: f64,
    pub within_tolerance: bool,
    /// Totals at other recurrent widths, `(hidden, total)`.
    pub sensitivity: Vec<(usize, usize)>,
}

pub fn params_summary(cfg: &NetworkConfig, hidden_grid: &[usize]) -> Result<ParamsSummary> {
    let report = build_network(cfg, 0)?.parameter_report();
    let relative_deviation = (report.total as f64 - REFERENCE_TOTAL as f64) / REFERENCE_TOTAL as f64;
    let sensitivity = hidden_grid
        .iter()
        .map(|&h| Ok((h, build_network(&NetworkConfig { recurrent_hidden: h, ..cfg.clone() }, 0)?.trainable_parameters())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamsSummary { report, reference: REFERENCE_TOTAL, relative_deviation, within_tolerance: relative_deviation.abs() <= TOLERANCE, sensitivity })
}

impl ParamsSummary {
    pub fn to_text(&self) -> String {
        let mut out = self.report.to_table();
        let _ = writeln!(
            out,
            "\nreference {:.2}M, deviation {:+.1}% (tolerance ±{:.0}%): {}",
            self.reference as f64 / 1e6,
            100.0 * self.relative_deviation,
            100.0 * TOLERANCE,
            if self.within_tolerance { "within" } else { "outside" }
        );
        out.push_str("\nattribution:\n");
        for (module, why) in UNSTATED {
            if let Some(n) = self.report.modules.get(module) {
                let _ = writeln!(out, "  {module:<20} {n:>10}  {why}");
            }
        }
        if !self.sensitivity.is_empty() {
            out.push_str("\ntotal by recurrent_hidden:\n");
            for (h, n) in &self.sensitivity {
                let _ = writeln!(out, "  {h:>5} {n:>10} ({:+.1}%)", 100.0 * (*n as f64 / self.reference as f64 - 1.0));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_report_attributes_unstated_modules() {
        let s = params_summary(&NetworkConfig::tiny(), &[8, 16]).unwrap();
        assert_eq!(s.sensitivity[1].1, s.report.total);
        assert!(s.sensitivity[0].1 < s.sensitivity[1].1);
        assert!(!s.within_tolerance);
        let text = s.to_text();
        assert!(text.contains("attribution:") && text.contains("pre_extractor"));
    }
}
