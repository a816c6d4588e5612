//! CSV outputs. Floats use Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use batformer_core::blt::ScoredWindow;
use batformer_core::train::{EpochStats, Evaluation};

use crate::error::{format_err, Result};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| format_err("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| format_err("csv", e.to_string()))
}

fn opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// `sample_id,class,dice,iou,acc,se,sp,hd`; `hd` is empty when undefined.
pub fn metrics_csv(eval: &Evaluation, ids: &[u64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "class", "dice", "iou", "acc", "se", "sp", "hd"])?;
    for (i, m) in &eval.rows {
        let id = ids.get(*i).copied().unwrap_or(*i as u64);
        w.write_record([
            id.to_string(),
            m.class.to_string(),
            m.dice.to_string(),
            m.iou.to_string(),
            m.acc.to_string(),
            m.se.to_string(),
            m.sp.to_string(),
            m.hd.map_or(String::new(), |h| h.to_string()),
        ])?;
    }
    finish(w)
}

/// Per-class means over samples, plus an `all` row.
pub fn summary_csv(eval: &Evaluation, classes: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "dice", "iou", "acc", "se", "sp", "hd"])?;
    let mut rows: Vec<(String, Vec<&batformer_core::metrics::ClassMetrics>)> = (1..classes as u8)
        .map(|c| (c.to_string(), eval.rows.iter().filter(|r| r.1.class == c).map(|r| &r.1).collect()))
        .collect();
    rows.push(("all".into(), eval.rows.iter().map(|r| &r.1).collect()));
    for (name, ms) in rows {
        let mean = |f: &dyn Fn(&batformer_core::metrics::ClassMetrics) -> f64| {
            if ms.is_empty() {
                f64::NAN
            } else {
                ms.iter().map(|m| f(m)).sum::<f64>() / ms.len() as f64
            }
        };
        let hd: Vec<f64> = ms.iter().filter_map(|m| m.hd).collect();
        let hd = if hd.is_empty() { f64::NAN } else { hd.iter().sum::<f64>() / hd.len() as f64 };
        w.write_record([
            name,
            opt(mean(&|m| m.dice)),
            opt(mean(&|m| m.iou)),
            opt(mean(&|m| m.acc)),
            opt(mean(&|m| m.se)),
            opt(mean(&|m| m.sp)),
            opt(hd),
        ])?;
    }
    finish(w)
}

/// `x,y,h,w,score` on the F2 grid.
pub fn windows_csv(windows: &[ScoredWindow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "h", "w", "score"])?;
    for s in windows {
        let win = s.window;
        w.write_record([
            win.x.to_string(),
            win.y.to_string(),
            win.h.to_string(),
            win.w.to_string(),
            s.score.to_string(),
        ])?;
    }
    finish(w)
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,backbone_frozen,loss,loss_cnn,loss_blt,loss_cgt,loss_final,test_dice\n";

/// One line of the training log; absent terms and metrics are empty.
pub fn train_log_row(s: &EpochStats, test_dice: Option<f64>) -> String {
    let t = s.mean_terms;
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        s.epoch,
        s.lr,
        s.backbone_frozen,
        s.mean_loss,
        opt(t[0]),
        opt(t[1]),
        opt(t[2]),
        opt(t[3]),
        test_dice.map_or(String::new(), |d| d.to_string())
    )
}
