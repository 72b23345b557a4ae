use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::*;
use crate::datagen::DatasetMeta;
use crate::error::{AfnError, Result};

/// Every metric of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<PredictionRecord>,
    pub anticipation: f64,
    pub forecasting: f64,
    pub forecasting_all: f64,
    pub activity: Option<f64>,
    pub delta_minus: f64,
    pub jump_in: JumpInReport,
    pub confusion_current: ConfusionMatrix,
    pub confusion_next: ConfusionMatrix,
    pub confusion_activity: Option<ConfusionMatrix>,
    pub curve: Vec<CurvePoint>,
    pub lambda: f64,
    pub high_variance: HighVariance,
}

pub fn build_report(records: Vec<PredictionRecord>, meta: &DatasetMeta, mean_length: f64, lambda: f64, bin_width: f64) -> Result<EvalReport> {
    let mut action_labels = meta.action_names.clone();
    action_labels.push("END".into());
    let has_activity = records.iter().any(|r| r.pred_activity.is_some());
    Ok(EvalReport {
        anticipation: anticipation_accuracy(&records)?,
        forecasting: forecasting_accuracy(&records)?,
        forecasting_all: forecasting_accuracy_all(&records)?,
        activity: if has_activity { Some(activity_accuracy(&records)?) } else { None },
        delta_minus: delta_minus(mean_length)?,
        jump_in: jump_in_bins(&records)?,
        confusion_current: confusion(&records, Level::Current, &action_labels)?,
        confusion_next: confusion(&records, Level::Next, &action_labels)?,
        confusion_activity: if has_activity {
            Some(confusion(&records, Level::Activity, &meta.activity_names)?)
        } else {
            None
        },
        curve: time_to_next_curve(&records, bin_width)?,
        lambda,
        high_variance: high_variance_actions(&records, lambda, meta.end_label())?,
        records,
    })
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: csv::Error| AfnError::Invalid(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| AfnError::io(path, e))
}

fn confusion_csv(path: &Path, m: &ConfusionMatrix) -> Result<()> {
    let mut header = vec!["truth"];
    header.extend(m.labels.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = m
        .labels
        .iter()
        .zip(&m.counts)
        .map(|(l, row)| std::iter::once(l.clone()).chain(row.iter().map(u64::to_string)).collect())
        .collect();
    write_csv(path, &header, &rows)
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the CSV and SVG files of a report into `dir`; returns the paths.
pub fn write_report(report: &EvalReport, meta: &DatasetMeta, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| AfnError::io(dir, e))?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.video.to_string(),
                r.t.to_string(),
                r.activity.to_string(),
                opt(r.pred_activity),
                r.y_current.to_string(),
                opt(r.pred_current),
                r.y_next.to_string(),
                opt(r.pred_next),
                u8::from(r.straddle).to_string(),
                num(r.horizon_fraction),
                num(r.time_to_next_start),
            ]
        })
        .collect();
    write_csv(
        &out("records.csv"),
        &[
            "video",
            "t",
            "activity",
            "pred_activity",
            "y_current",
            "pred_current",
            "y_next",
            "pred_next",
            "straddle",
            "horizon_fraction",
            "time_to_next_start",
        ],
        &rows,
    )?;

    let mut summary = vec![
        vec!["anticipation_accuracy".into(), num(report.anticipation)],
        vec!["forecasting_accuracy".into(), num(report.forecasting)],
        vec!["forecasting_accuracy_straddle_as_error".into(), num(report.forecasting_all)],
    ];
    if let Some(a) = report.activity {
        summary.push(vec!["activity_accuracy".into(), num(a)]);
    }
    summary.push(vec!["delta_minus".into(), num(report.delta_minus)]);
    summary.push(vec!["records".into(), report.records.len().to_string()]);
    summary.push(vec!["straddle".into(), report.jump_in.discarded.to_string()]);
    write_csv(&out("summary.csv"), &["metric", "value"], &summary)?;

    let mut bins: Vec<Vec<String>> = report
        .jump_in
        .bins
        .iter()
        .map(|b| vec![b.bin.to_string(), b.count.to_string(), b.correct.to_string(), opt(b.accuracy.map(num))])
        .collect();
    bins.push(vec!["discarded".into(), report.jump_in.discarded.to_string(), "0".into(), String::new()]);
    write_csv(&out("jump_in.csv"), &["bin", "count", "correct", "accuracy"], &bins)?;

    confusion_csv(&out("confusion_current.csv"), &report.confusion_current)?;
    confusion_csv(&out("confusion_next.csv"), &report.confusion_next)?;
    if let Some(m) = &report.confusion_activity {
        confusion_csv(&out("confusion_activity.csv"), m)?;
    }

    let curve: Vec<Vec<String>> = report
        .curve
        .iter()
        .map(|p| vec![num(p.from), num(p.to), p.count.to_string(), p.correct.to_string(), num(p.accuracy)])
        .collect();
    write_csv(&out("time_to_next.csv"), &["from_s", "to_s", "count", "correct", "accuracy"], &curve)?;

    let hv = &report.high_variance;
    let mut hv_rows: Vec<Vec<String>> = hv
        .means
        .iter()
        .map(|(&a, &mu)| {
            vec![
                a.to_string(),
                meta.action_names.get(a).cloned().unwrap_or_default(),
                num(mu),
                u8::from(hv.selected.contains(&a)).to_string(),
            ]
        })
        .collect();
    hv_rows.extend(
        hv.excluded
            .iter()
            .map(|&a| vec![a.to_string(), meta.action_names.get(a).cloned().unwrap_or_default(), String::new(), "0".into()]),
    );
    write_csv(&out("high_variance.csv"), &["action", "name", "mu", "selected"], &hv_rows)?;

    let svg = |path: PathBuf, text: String| std::fs::write(&path, text).map_err(|e| AfnError::io(&path, e));
    svg(out("time_to_next.svg"), curve_svg(&report.curve, "next-action accuracy vs seconds to next start"))?;
    svg(out("confusion_next.svg"), heatmap_svg(&report.confusion_next))?;
    Ok(written)
}

/// Accuracy-vs-time line plot.
pub fn curve_svg(points: &[CurvePoint], title: &str) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let max_x = points.iter().map(|p| p.to).fold(1.0, f64::max);
    let sx = |x: f64| pad + x / max_x * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20">{title}</text>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad},{top} V{bot} H{right}" fill="none" stroke="black"/>"#,
        top = pad,
        bot = h - pad,
        right = w - pad
    );
    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx((p.from + p.to) / 2.0), sy(p.accuracy)))
        .collect();
    if !path.is_empty() {
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
    }
    for p in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"><title>{:.1}-{:.1}s: {:.3} (n={})</title></circle>"#,
            sx((p.from + p.to) / 2.0),
            sy(p.accuracy),
            p.from,
            p.to,
            p.accuracy,
            p.count
        );
    }
    let _ = writeln!(s, r#"<text x="{:.0}" y="{:.0}">{max_x:.1} s</text>"#, w - pad - 20.0, h - pad + 15.0);
    let _ = writeln!(s, r#"<text x="5" y="{:.0}">1.0</text>"#, sy(1.0) + 4.0);
    s.push_str("</svg>\n");
    s
}

/// Row-normalised confusion heatmap.
pub fn heatmap_svg(m: &ConfusionMatrix) -> String {
    let k = m.size().max(1);
    let cell = (360.0 / k as f64).clamp(8.0, 40.0);
    let pad = 90.0;
    let side = pad + cell * k as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side:.0}" height="{side:.0}" font-family="sans-serif" font-size="9">"#);
    for (i, label) in m.labels.iter().enumerate() {
        let y = pad + cell * i as f64;
        let _ = writeln!(s, r#"<text x="2" y="{:.1}">{label}</text>"#, y + cell * 0.7);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" transform="rotate(-60 {:.1} {:.1})">{label}</text>"#,
            y + cell * 0.3,
            pad - 4.0,
            y + cell * 0.3,
            pad - 4.0
        );
        for j in 0..m.size() {
            let shade = 255 - (m.rate(i, j) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb({shade},{shade},255)"><title>{}</title></rect>"#,
                pad + cell * j as f64,
                m.counts[i][j]
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
