use std::fmt::Write;

use super::run::{RunReport, Source};
use crate::hex::format_hex;

/// Three-column trace: reference-program nodes on the left, the executed
/// command and its outcome in the middle, every other source on the right.
pub fn render_table(report: &RunReport) -> String {
    let rows: Vec<(String, String, String)> = report
        .records
        .iter()
        .map(|r| {
            let own = r.source.program() == Some(report.program_id.as_str());
            let label = match &r.source {
                Source::Node { node, .. } if own => node.clone(),
                Source::Node { program, node } => format!("{program} {node}"),
                other => other.to_string(),
            };
            let cmd = format_hex(&r.command.to_bytes());
            let cmd = if cmd.len() > 44 { format!("{}..", &cmd[..42]) } else { cmd };
            let mid = format!("{cmd} -> {} {}", r.response.sw, r.classification);
            if own {
                (label, mid, String::new())
            } else {
                (String::new(), mid, label)
            }
        })
        .collect();
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(report.program_id.len());
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w0$} | {:<w1$} | other", report.program_id, "executed");
    let _ = writeln!(out, "{}-+-{}-+------", "-".repeat(w0), "-".repeat(w1));
    for (a, b, c) in rows {
        let _ = writeln!(out, "{a:<w0$} | {b:<w1$} | {c}").map(|_| ());
    }
    let _ = writeln!(
        out,
        "verdict: {}, anomalies: {}, errors: {}",
        report.verdict,
        report.anomalies(),
        report.errors()
    );
    out.lines().map(|l| l.trim_end().to_string() + "\n").collect()
}
