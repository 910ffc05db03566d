//! Metric reports and radar charts.
//!
//! Chart values map every metric to `[0, 1]` with 1 meaning no error.
//! Error metrics are inverted against a fixed cap; LMSE and MRE are then
//! raised to the fourth power.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const LMSE_CAP: f64 = 0.1;
pub const MRE_CAP: f64 = 25.5;
pub const MACE_CAP: f64 = 51.0;

/// Chart axes in drawing order.
pub const AXES: [&str; 5] = ["LMSE", "WHDR", "SAW", "MRE", "MACE"];

/// Raw scores; metrics not computed are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub lmse: Option<f64>,
    pub whdr: Option<f64>,
    /// Precision at recall 0.5, 0.7 and 0.8.
    pub saw: Option<[f64; 3]>,
    pub mre: Option<f64>,
    pub mace: Option<f64>,
}

fn inverted(v: f64, cap: f64) -> f64 {
    1.0 - v.clamp(0.0, cap) / cap
}

pub fn chart_lmse(v: f64) -> f64 {
    inverted(v, LMSE_CAP).powi(4)
}

pub fn chart_whdr(v: f64) -> f64 {
    1.0 - v.clamp(0.0, 1.0)
}

pub fn chart_saw(p: [f64; 3]) -> f64 {
    (p.iter().sum::<f64>() / 3.0).clamp(0.0, 1.0)
}

pub fn chart_mre(v: f64) -> f64 {
    inverted(v, MRE_CAP).powi(4)
}

pub fn chart_mace(v: f64) -> f64 {
    inverted(v, MACE_CAP)
}

/// One line of a report: raw value and its chart value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub chart: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scores: Scores,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    /// Chart values on the five axes, if all are present.
    pub fn chart_values(&self) -> Option<[f64; 5]> {
        let get = |name: &str| {
            self.rows
                .iter()
                .find(|r| r.metric.eq_ignore_ascii_case(name))
                .and_then(|r| r.chart)
        };
        let v = AXES.map(get);
        v.iter().all(Option::is_some).then(|| v.map(Option::unwrap))
    }
}

pub fn assemble_report(scores: Scores) -> MetricsReport {
    let mut rows = Vec::new();
    let mut push = |metric: &str, value: f64, chart: Option<f64>| {
        rows.push(ReportRow {
            metric: metric.to_string(),
            value,
            chart,
        })
    };
    if let Some(v) = scores.lmse {
        push("lmse", v, Some(chart_lmse(v)));
    }
    if let Some(v) = scores.whdr {
        push("whdr", v, Some(chart_whdr(v)));
    }
    if let Some(p) = scores.saw {
        push("saw", p.iter().sum::<f64>() / 3.0, Some(chart_saw(p)));
        push("saw_p50", p[0], None);
        push("saw_p70", p[1], None);
        push("saw_p80", p[2], None);
    }
    if let Some(v) = scores.mre {
        push("mre", v, Some(chart_mre(v)));
    }
    if let Some(v) = scores.mace {
        push("mace", v, Some(chart_mace(v)));
    }
    MetricsReport { scores, rows }
}

pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(r).expect("in-memory csv");
    }
    if report.rows.is_empty() {
        w.write_record(["metric", "value", "chart"]).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Parses a report CSV; errors name the offending line.
pub fn parse_report(text: &str) -> Result<MetricsReport, MetricError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| MetricError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["metric", "value", "chart"] {
        return Err(MetricError::Parse {
            line: 1,
            msg: format!(
                "expected header metric,value,chart, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| MetricError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: ReportRow = rec.deserialize(Some(&headers)).map_err(|e| MetricError::Parse {
            line,
            msg: e.to_string(),
        })?;
        if !row.value.is_finite() || row.chart.is_some_and(|c| !(0.0..=1.0).contains(&c)) {
            return Err(MetricError::Parse {
                line,
                msg: format!("value out of range for {}", row.metric),
            });
        }
        rows.push(row);
    }
    let find = |name: &str| rows.iter().find(|r| r.metric == name).map(|r| r.value);
    let saw = match (find("saw_p50"), find("saw_p70"), find("saw_p80")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let scores = Scores {
        lmse: find("lmse"),
        whdr: find("whdr"),
        saw,
        mre: find("mre"),
        mace: find("mace"),
    };
    Ok(MetricsReport { scores, rows })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#17becf"];

/// Radar chart with one closed polygon per `(name, values)` series.
pub fn radar_svg(series: &[(String, [f64; 5])]) -> String {
    let (cx, cy, r) = (200.0, 200.0, 150.0);
    let point = |axis: usize, v: f64| {
        let angle = -std::f64::consts::FRAC_PI_2 + axis as f64 * std::f64::consts::TAU / 5.0;
        (cx + r * v * angle.cos(), cy + r * v * angle.sin())
    };
    let poly = |vals: [f64; 5]| {
        (0..5)
            .map(|k| {
                let (x, y) = point(k, vals[k]);
                format!("{x:.3},{y:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let height = 420 + 20 * series.len();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="400" height="{height}" viewBox="0 0 400 {height}">"#
    );
    for level in [0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r##"  <polygon class="grid" points="{}" fill="none" stroke="#cccccc"/>"##,
            poly([level; 5])
        );
    }
    for (k, name) in AXES.iter().enumerate() {
        let (x, y) = point(k, 1.0);
        let (lx, ly) = point(k, 1.12);
        let _ = writeln!(
            s,
            r##"  <line x1="{cx}" y1="{cy}" x2="{x:.3}" y2="{y:.3}" stroke="#999999"/>"##
        );
        let _ = writeln!(
            s,
            r#"  <text x="{lx:.3}" y="{ly:.3}" text-anchor="middle" font-size="12">{name}</text>"#
        );
    }
    for (i, (name, vals)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"  <polygon class="series" data-name="{}" points="{}" fill="{color}" fill-opacity="0.2" stroke="{color}" stroke-width="2"/>"#,
            xml_escape(name),
            poly(*vals)
        );
        let y = 400 + 20 * i;
        let _ = writeln!(
            s,
            r#"  <rect x="20" y="{}" width="12" height="12" fill="{color}"/>"#,
            y - 10
        );
        let _ = writeln!(
            s,
            r#"  <text class="legend" x="40" y="{y}" font-size="12">{}</text>"#,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
