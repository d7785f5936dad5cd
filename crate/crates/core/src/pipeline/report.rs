// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed-width text tables for evaluation, ablation and layer reports.

use crate::eval::EvalReport;
use crate::signature::LayerValidation;

/// Left-aligned first column, right-aligned numeric columns, a rule under
/// the header.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let n = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate().take(n) {
            let pad = width[i] - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let head: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let mut out = line(&head);
    let total = width.iter().sum::<usize>() + 2 * (n - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn signed_pct(x: f64) -> String {
    format!("{x:+.2}%")
}

fn ratio(x: f64) -> String {
    if x.abs() >= 10.0 {
        format!("{x:.2}")
    } else {
        format!("{x:.4}")
    }
}

/// One row per run: drift, leakage, latent mass and mechanism state.
pub fn render_eval(reports: &[EvalReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.subject.clone(),
                signed_pct(r.utility_drift),
                format!("{:.2}%", r.smr),
                ratio(r.el10),
                format!("{:.2}%", r.retained_fact_accuracy),
                format!("{}: {}", r.mechanism_state.label(), r.mechanism_state.meaning()),
            ]
        })
        .collect();
    table(
        &["Run", "Subject", "Util. Drift", "Leakage (↓)", "EL10 (↓)", "Retained Acc.", "Mechanism State"],
        &rows,
    )
}

/// Ablation layout: one row per experiment, leakage columns first.
pub fn render_ablation(reports: &[EvalReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.2}%", r.smr),
                ratio(r.el10),
                signed_pct(r.utility_drift),
                r.mechanism_state.label().to_string(),
            ]
        })
        .collect();
    table(&["Exp", "SMR (↓)", "EL10 (↓)", "Util. Drift", "State"], &rows)
}

/// Per-layer separability of leak and control activations.
pub fn render_layers(rows: &[LayerValidation]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|v| {
            let m = &v.metrics;
            vec![
                format!("{}.{}", v.layer, v.submodule.name()),
                format!("{:.3} [{:.3}, {:.3}]", m.auc_roc, v.auc_ci.0, v.auc_ci.1),
                format!("{:.3}", m.pr_auc),
                format!("{:.3}", m.eer),
                format!("{:.4}", m.tau_at_1pct_fpr),
                format!("{:.3}", m.tpr_at_1pct_fpr),
                v.cohens_d.map_or("n/a".into(), |d| format!("{d:.3}")),
                m.snr.map_or("n/a".into(), |s| format!("{s:.3}")),
                format!("{}/{}", v.n_leak, v.n_control),
            ]
        })
        .collect();
    table(
        &["Layer", "AUC-ROC [CI]", "PR-AUC", "EER", "τ@1%FPR", "TPR@1%FPR", "Cohen's d", "SNR", "Samples"],
        &body,
    )
}
