//! Fixed-width text and CSV rendering of summaries, analysis results, and
//! Monte-Carlo validation reports. Output is deterministic: no timestamps,
//! stable field order.

use std::fmt::Write as _;

use crate::estimand::EstimandResult;
use crate::ice::{Category, IceSummaryTable};
use crate::validate::McValidationReport;

fn pad(s: &str, width: usize) -> String {
    format!("{s:<width$}")
}

fn pad_r(s: &str, width: usize) -> String {
    format!("{s:>width$}")
}

/// ICE summary in the usual per-arm count (percent) layout.
pub fn ice_summary_text(table: &IceSummaryTable) -> String {
    let mut out = String::new();
    let label_w = 18;
    let col_w = 16;
    let mut header = pad("ICE category", label_w);
    for row in &table.rows {
        header += &pad_r(&format!("arm {} (N={})", row.arm, row.n), col_w);
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(label_w + col_w * table.rows.len()));
    let mut any = pad("patients with ICEs", label_w);
    for row in &table.rows {
        any += &pad_r(&format!("{} ({:.1}%)", row.n_any_ice, row.pct_any()), col_w);
    }
    let _ = writeln!(out, "{any}");
    for category in Category::ALL {
        let mut line = pad(category.label(), label_w);
        for row in &table.rows {
            line += &pad_r(
                &format!(
                    "{} ({:.1}%)",
                    row.n_by_category[category.slot()],
                    row.pct(category)
                ),
                col_w,
            );
        }
        let _ = writeln!(out, "{line}");
    }
    out
}

/// ICE summary as CSV (one row per arm x category plus an `any` row).
pub fn ice_summary_csv(table: &IceSummaryTable) -> String {
    let mut out = String::from("arm,n,category,count,percent\n");
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{},{},any,{},{:.4}",
            row.arm,
            row.n,
            row.n_any_ice,
            row.pct_any()
        );
        for category in Category::ALL {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4}",
                row.arm,
                row.n,
                category.label().replace(' ', "_").to_lowercase(),
                row.n_by_category[category.slot()],
                row.pct(category)
            );
        }
    }
    out
}

/// Analysis result in the per-arm mean (SE) / difference (CI) table layout.
pub fn estimand_result_text(result: &EstimandResult) -> String {
    let mut out = String::new();
    let ci_pct = 100.0 * (1.0 - result.alpha);
    let _ = writeln!(
        out,
        "estimand: {}   endpoint: {}   visit: {}   delta: {}   direction: {}",
        result.kind.label(),
        result.endpoint_name,
        result.analysis_visit,
        result.delta,
        if result.smaller_is_better {
            "smaller-is-better"
        } else {
            "larger-is-better"
        }
    );
    let _ = writeln!(
        out,
        "provenance: seed={} m={} version={} spec={}",
        result.provenance.master_seed,
        result.provenance.m,
        result.provenance.tool_version,
        &result.provenance.spec_sha256[..16]
    );
    let _ = writeln!(out);
    let label_w = 26;
    let col_w = 22;
    let mut header = pad("", label_w);
    for arm in &result.arms {
        header += &pad_r(&format!("arm {} (N={})", arm.arm, arm.n), col_w);
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(label_w + col_w * result.arms.len()));
    let mut means = pad("mean change (SE)", label_w);
    for arm in &result.arms {
        means += &pad_r(&format!("{:.2} ({:.2})", arm.mean, arm.se), col_w);
    }
    let _ = writeln!(out, "{means}");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{}{}{}",
        pad("difference vs arm 0", label_w),
        pad_r(&format!("mean ({ci_pct:.0}% CI)"), col_w + 6),
        pad_r("one-sided p", 14)
    );
    let _ = writeln!(out, "{}", "-".repeat(label_w + col_w + 20));
    for c in &result.contrasts {
        let _ = writeln!(
            out,
            "{}{}{}",
            pad(&format!("arm {} vs arm 0", c.arm), label_w),
            pad_r(
                &format!("{:.2} ({:.2}, {:.2})", c.value, c.ci_low, c.ci_high),
                col_w + 6
            ),
            pad_r(&format!("{:.4}", c.p_value), 14)
        );
    }
    out
}

/// Validation report as aligned text.
pub fn mc_report_text(report: &McValidationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario: {}   replications: {}   M: {}   seed: {}   alpha: {}",
        report.scenario, report.replications, report.m, report.master_seed, report.alpha
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{}{}{}{}{}{}{}",
        pad("pipeline", 12),
        pad("arm", 5),
        pad_r("mean est", 11),
        pad_r("oracle", 11),
        pad_r("bias (mc se)", 20),
        pad_r("coverage", 10),
        pad_r("reject", 9)
    );
    let _ = writeln!(out, "{}", "-".repeat(78));
    for s in &report.stats {
        let _ = writeln!(
            out,
            "{}{}{}{}{}{}{}",
            pad(s.pipeline.label(), 12),
            pad(&s.arm.to_string(), 5),
            pad_r(&format!("{:.4}", s.mean_estimate), 11),
            pad_r(&format!("{:.4}", s.mean_oracle), 11),
            pad_r(&format!("{:+.4} ({:.4})", s.bias, s.bias_mc_se), 20),
            pad_r(&format!("{:.3}", s.coverage), 10),
            pad_r(&format!("{:.3}", s.rejection_rate), 9)
        );
    }
    if let Some(ordering) = &report.ordering {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "ordering: |defacto| < |hybrid| with sign preserved in {:.1}% of replications",
            100.0 * ordering.attenuation_fraction
        );
        let _ = writeln!(
            out,
            "          theoretic <= hybrid <= defacto (signed) in {:.1}% of replications",
            100.0 * ordering.signed_order_fraction
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Arm;
    use crate::ice::IceSummaryRow;

    #[test]
    fn ice_table_formats_percentages() {
        let table = IceSummaryTable {
            rows: vec![IceSummaryRow {
                arm: Arm(0),
                n: 141,
                n_any_ice: 36,
                n_by_category: [9, 23, 4],
            }],
        };
        let text = ice_summary_text(&table);
        assert!(text.contains("9 (6.4%)"), "{text}");
        assert!(text.contains("23 (16.3%)"), "{text}");
        assert!(text.contains("36 (25.5%)"), "{text}");
        let csv = ice_summary_csv(&table);
        assert!(csv.lines().count() == 5);
        assert!(csv.contains("0,141,category_1,9,"));
    }
}
