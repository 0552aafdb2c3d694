//! Text rendering of analysis reports.

use std::fmt::Write;

use ecgpps_core::fhe::AnalysisValues;

use crate::api::AnalysisReport;

/// Below this magnitude a ratio compares noise, not values.
const NEAR_ZERO: f64 = 1e-6;

fn values_block(out: &mut String, title: &str, v: &AnalysisValues) {
    let _ = writeln!(out, "{title}");
    if let Some(s) = &v.stats {
        let _ = writeln!(
            out,
            "  mean {:.6}  std {:.6}  median {:.6}  min {:.6}  max {:.6}",
            s.mean, s.std, s.median, s.min, s.max
        );
    }
    if let Some(p) = &v.peaks {
        let _ = writeln!(out, "  peaks {}", p.len());
    }
    if let Some(h) = &v.hrv {
        let _ = writeln!(out, "  mean_rr {:.4} s  std_rr {:.4} s", h.mean_rr, h.std_rr);
    }
    if let Some(f) = &v.dominant_frequencies {
        let f: Vec<String> = f.iter().map(|x| format!("{x:.3}")).collect();
        let _ = writeln!(out, "  dominant Hz {}", f.join(", "));
    }
}

/// Render `report` as a table. In compare mode each metric gets its
/// plaintext value, encrypted value and ratio.
pub fn render(report: &AnalysisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "patient {}  [{}, {}]  {} samples at {} Hz from {} records",
        report.patient_id, report.t0, report.t1, report.samples, report.fs, report.records
    );
    if let Some(c) = &report.comparison {
        let _ = writeln!(out, "{:<10} {:>16} {:>16} {:>10}", "metric", "plaintext", "encrypted", "ratio %");
        let mut near_zero = false;
        for m in &c.metrics {
            let mark = if m.plaintext.abs().max(m.encrypted.abs()) < NEAR_ZERO && m.ratio < 100.0 {
                near_zero = true;
                "*"
            } else {
                " "
            };
            let _ = writeln!(out, "{:<10} {:>16.6} {:>16.6} {:>10.2}{mark}", m.metric, m.plaintext, m.encrypted, m.ratio);
        }
        if let Some(p) = c.peak_match_pct {
            let _ = writeln!(out, "{:<44} {:>10.2}", "R-peak match", p);
        }
        if let Some(p) = c.frequency_match_pct {
            let _ = writeln!(out, "{:<44} {:>10.2}", "dominant frequency match", p);
        }
        if near_zero {
            let _ = writeln!(out, "* both values within {NEAR_ZERO:e} of zero; the ratio only reflects scheme noise");
        }
        return out;
    }
    if let Some(v) = &report.plaintext {
        values_block(&mut out, "plaintext", v);
    }
    if let Some(v) = &report.encrypted {
        values_block(&mut out, "encrypted", v);
    }
    if let Some(s) = &report.sealed {
        let _ = writeln!(out, "encrypted results sealed for key holder (context {})", s.context);
    }
    out
}
