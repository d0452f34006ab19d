//! Text renderings of manipulation reports and projections.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::data::{format_f64, LabeledDataset};

use super::ManipulationReport;

/// One Markdown table per manipulated factor, one row per model, in the
/// column layout `p(target|x) p(target|x') delta(target)` followed by the
/// same three columns for each other factor.
pub fn markdown_table(rows: &[(String, Vec<ManipulationReport>)]) -> String {
    let mut out = String::new();
    let factors: Vec<&str> = rows
        .first()
        .map(|(_, reps)| reps.iter().map(|r| r.factor.as_str()).collect())
        .unwrap_or_default();
    for (k, factor) in factors.iter().enumerate() {
        let first = &rows[0].1[k];
        let _ = writeln!(out, "### Manipulating `{factor}`\n");
        let mut header = format!("| Model | p({factor}₂|x) | p({factor}₂|x') | δ({factor}₂) |");
        let mut rule = "|---|---:|---:|---:|".to_string();
        for o in &first.others {
            let _ = write!(header, " p({0}|x) | p({0}|x') | δ({0}) |", o.factor);
            rule.push_str("---:|---:|---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for (model, reps) in rows {
            let r = &reps[k];
            let mut line = format!(
                "| {model} | {:.3} | {:.3} | {:.3} |",
                r.target_before, r.target_after, r.delta_target
            );
            for o in &r.others {
                let _ = write!(line, " {:.3} | {:.3} | {:.3} |", o.before, o.after, o.delta);
            }
            let _ = writeln!(out, "{line}");
        }
        out.push('\n');
    }
    out
}

/// Machine-readable form: one line per (model, manipulated factor, other
/// factor), values with 17 significant digits.
pub fn csv_table(rows: &[(String, Vec<ManipulationReport>)]) -> String {
    let mut out = String::from(
        "model,factor,instances,target_before,target_after,delta_target,other_factor,other_before,other_after,delta_other\n",
    );
    for (model, reps) in rows {
        for r in reps {
            for o in &r.others {
                let _ = writeln!(
                    out,
                    "{model},{},{},{},{},{},{},{},{},{}",
                    r.factor,
                    r.instances,
                    format_f64(r.target_before),
                    format_f64(r.target_after),
                    format_f64(r.delta_target),
                    o.factor,
                    format_f64(o.before),
                    format_f64(o.after),
                    format_f64(o.delta)
                );
            }
        }
    }
    out
}

/// `id,<labels>,u,v`.
pub fn projection_csv(dataset: &LabeledDataset, coords: ArrayView2<f64>) -> String {
    let mut out = String::from("id");
    for f in dataset.factors() {
        out.push(',');
        out.push_str(&f.name);
    }
    out.push_str(",u,v\n");
    for i in 0..dataset.len() {
        let _ = write!(out, "{}", dataset.ids()[i]);
        for l in dataset.sample_labels(i) {
            let _ = write!(out, ",{l}");
        }
        let _ = writeln!(out, ",{},{}", format_f64(coords[[i, 0]]), format_f64(coords[[i, 1]]));
    }
    out
}
