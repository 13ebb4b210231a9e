//! Structured-text and CSV rendering of scenario reports. Output is fully
//! deterministic: same report, same bytes.

use std::fmt::Write as _;

use crate::detect::DetectionReport;
use crate::harness::{ScenarioReport, SubRunOutcome, VirtualServerId};

fn fmt_f(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.6e}")
    }
}

/// Human-readable verdict table for one detection run. `servers` supplies
/// display labels; pass `None` for plain row indices.
pub fn verdict_table(report: &DetectionReport, servers: Option<&[VirtualServerId]>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:<10} {:<14} {}", "server", "verdict", "best-p", "evidence");
    for (row, v) in report.verdicts.iter().enumerate() {
        let label = servers
            .map(|s| s[row].label())
            .unwrap_or_else(|| (row + 1).to_string());
        let verdict = if v.is_benign { "benign" } else { "MALICIOUS" };
        let (p, evidence) = match (&v.best_p_value, &v.anomaly) {
            (Some(p), _) => (fmt_f(*p), String::new()),
            (None, Some(a)) => (
                "-".to_string(),
                format!(
                    "q{:.0}-index {} vs cluster max {}",
                    75.0,
                    fmt_f(a.third_quartile_index),
                    fmt_f(a.in_cluster_max_index)
                ),
            ),
            (None, None) => ("-".to_string(), String::new()),
        };
        let truth = report
            .ground_truth
            .as_ref()
            .map(|t| if t[row] { " (truth: benign)" } else { " (truth: malicious)" })
            .unwrap_or("");
        let _ = writeln!(out, "{label:<10} {verdict:<10} {p:<14} {evidence}{truth}");
    }
    if let Some(acc) = report.accuracy {
        let _ = writeln!(out, "accuracy {}", fmt_f(acc));
    }
    out
}

/// The distance matrix as an aligned text block.
pub fn matrix_table(report: &DetectionReport) -> String {
    let m = &report.matrix;
    let mut out = String::new();
    let _ = writeln!(out, "distance matrix ({} metric, n = {})", m.metric().name(), m.n());
    for i in 0..m.n() {
        let row: Vec<String> = (0..m.n()).map(|j| format!("{:.6e}", m.get(i, j))).collect();
        let _ = writeln!(out, "  {}", row.join(" "));
    }
    out
}

fn subrun_section(out: &mut String, s: &SubRunOutcome) {
    let _ = writeln!(
        out,
        "== sub-run {} (start step {}) probe-seed {}",
        s.subrun_index, s.start_step, s.probe_seed
    );
    out.push_str(&matrix_table(&s.detection));
    let mut sorted = s.detection.matrix.upper_triangle();
    sorted.sort_by(f64::total_cmp);
    let rendered: Vec<String> = sorted.iter().map(|d| format!("{d:.6e}")).collect();
    let _ = writeln!(out, "sorted distances: {}", rendered.join(" "));
    let c = &s.detection.cluster;
    let _ = writeln!(
        out,
        "benign cluster: start {} length {} variance {:.6e}",
        c.start_index, c.length, c.variance
    );
    out.push_str(&verdict_table(&s.detection, Some(&s.servers)));
    for (row, metrics) in s.attack_metrics.iter().enumerate() {
        if let Some(m) = metrics {
            let _ = writeln!(
                out,
                "attack {}: asr {} clean-accuracy {}",
                s.servers[row].label(),
                fmt_f(m.asr),
                fmt_f(m.clean_accuracy)
            );
        }
    }
}

/// The full scenario report as structured text.
pub fn scenario_text(report: &ScenarioReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario seed {} metric {} servers {}",
        report.scenario_seed,
        report.metric.name(),
        report.n_effective
    );
    let _ = writeln!(out, "aggregate accuracy {}", fmt_f(report.aggregate_accuracy));
    for s in &report.subruns {
        subrun_section(&mut out, s);
    }
    out
}

/// Histogram tables as CSV: `metric,group,bin_lo,bin_hi,count`.
pub fn histograms_csv(report: &ScenarioReport) -> String {
    let mut out = String::from("metric,group,bin_lo,bin_hi,count\n");
    for s in &report.subruns {
        for row in &s.histogram {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                row.metric,
                row.group.name(),
                row.bin_lo,
                row.bin_hi,
                row.count
            );
        }
    }
    out
}
