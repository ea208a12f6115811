//! Renders run records as aligned text tables, one row per stage.

use std::fmt::Write as _;

use crate::runner::{MatrixEntry, RunRecord};

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// One aligned table over the record's stages.
pub fn render_record(rec: &RunRecord) -> String {
    let header = ["model", "split", "AP50", "AP75", "mAP", "SegIoU", "epochs"];
    let mut rows: Vec<[String; 7]> = Vec::with_capacity(rec.stages.len());
    for s in &rec.stages {
        let ap75 = s.report.as_ref().map(|r| r.ap75);
        let det = s.report.is_some();
        rows.push([
            s.label.clone(),
            s.train_split.clone(),
            fmt_opt(det.then_some(s.val_ap50)),
            fmt_opt(ap75),
            fmt_opt(det.then_some(s.val_map)),
            fmt_opt(s.val_seg_iou),
            s.epochs_run.to_string(),
        ]);
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{} (seed {})", rec.name, rec.seed);
    let line = |cells: &[String], out: &mut String| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<w$}");
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&header, &mut out);
    line(&rule, &mut out);
    for row in &rows {
        line(row.as_slice(), &mut out);
    }
    out
}

pub fn render_matrix(title: &str, entries: &[MatrixEntry]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out);
    for e in entries {
        match &e.outcome {
            Ok(rec) => {
                out.push_str(&render_record(rec));
                let _ = writeln!(out);
            }
            Err(msg) => {
                let _ = writeln!(out, "{}: FAILED: {msg}", e.name);
                let _ = writeln!(out);
            }
        }
    }
    let failed = entries.iter().filter(|e| e.outcome.is_err()).count();
    let _ = writeln!(
        out,
        "{} run(s), {} failed",
        entries.len(),
        failed
    );
    out
}
