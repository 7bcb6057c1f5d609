//! CSV emission. Column orders are part of the tool's contract:
//!
//! - history:  `epoch,split,metric,value`
//! - metrics:  `split,class,metric,value`
//! - curves:   `class,threshold,x,y,kind` (operating-point rows leave the
//!   threshold column empty)
//!
//! Undefined metrics render as `n/a`. Floats use Rust's shortest
//! round-trip formatting, so identical runs produce identical bytes.

use cgseg_core::data::CLASS_NAMES;
use cgseg_core::metrics::{pixel_accuracy, ConfusionMatrix, CurveKind, CurveSeries, MetricsReport};
use cgseg_core::train::TrainHistory;

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "n/a".to_string(),
    }
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,split,metric,value\n");
    for rec in &history.epochs {
        out.push_str(&format!("{},train,loss,{}\n", rec.epoch, rec.train_loss));
        out.push_str(&format!("{},train,lr,{}\n", rec.epoch, rec.lr));
        if let Some(v) = rec.val_loss {
            out.push_str(&format!("{},val,loss,{v}\n", rec.epoch));
        }
        if let Some(report) = &rec.val_metrics {
            push_report_rows(&mut out, report, |metric, class, value| {
                format!("{},val,{metric}_{class},{value}\n", rec.epoch)
            });
        }
    }
    out
}

fn push_report_rows(
    out: &mut String,
    report: &MetricsReport,
    row: impl Fn(&str, &str, String) -> String,
) {
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let m = report.class(c);
        out.push_str(&row("iou", name, opt(m.iou)));
        out.push_str(&row("dice", name, opt(m.dice)));
        out.push_str(&row("precision", name, opt(m.precision)));
        out.push_str(&row("recall", name, opt(m.recall)));
        out.push_str(&row("specificity", name, opt(m.specificity)));
    }
}

pub fn metrics_csv(split: &str, report: &MetricsReport, cm: &ConfusionMatrix) -> String {
    let mut out = String::from("split,class,metric,value\n");
    push_report_rows(&mut out, report, |metric, class, value| {
        format!("{split},{class},{metric},{value}\n")
    });
    out.push_str(&format!(
        "{split},all,pixel_accuracy,{}\n",
        opt(pixel_accuracy(cm))
    ));
    out
}

pub fn curves_csv(series: &[CurveSeries]) -> String {
    let mut out = String::from("class,threshold,x,y,kind\n");
    for s in series {
        let kind = match s.kind {
            CurveKind::PrecisionRecall => "pr",
            CurveKind::Roc => "roc",
        };
        for p in &s.points {
            out.push_str(&format!(
                "{},{},{},{},{kind}\n",
                s.class, p.threshold, p.x, p.y
            ));
        }
        if let Some((x, y)) = s.operating_point {
            out.push_str(&format!("{},,{x},{y},{kind}_operating_point\n", s.class));
        }
    }
    out
}

/// Human-readable per-class metric lines for stdout.
pub fn format_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let m = report.class(c);
        out.push_str(&format!(
            "  {name}: iou={} dice={} precision={} recall={} specificity={}\n",
            opt(m.iou),
            opt(m.dice),
            opt(m.precision),
            opt(m.recall),
            opt(m.specificity),
        ));
    }
    out
}
