//! Sparse-annotation metrics: WHDR on pairwise reflectance judgements and
//! precision at fixed recall on shading-smoothness labels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{planar, MetricError};
use crate::color::{srgb_to_linear, LUMA};
use crate::tensor::Tensor;

pub const DEFAULT_DELTA: f64 = 0.10;
const INTENSITY_FLOOR: f64 = 1e-10;

/// Albedo intensity of the first point relative to the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Darker,
    Same,
    Lighter,
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "darker" => Ok(Relation::Darker),
            "same" => Ok(Relation::Same),
            "lighter" => Ok(Relation::Lighter),
            other => Err(format!("unknown relation {other:?} (expected darker, same or lighter)")),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Darker => "darker",
            Relation::Same => "same",
            Relation::Lighter => "lighter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judgement {
    pub p1: (usize, usize),
    pub p2: (usize, usize),
    pub relation: Relation,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JudgementSet {
    pub judgements: Vec<Judgement>,
}

impl JudgementSet {
    /// Parses `x1 y1 x2 y2 relation weight` lines; blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut judgements = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| MetricError::Parse { line: n + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let coord = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| err(format!("bad coordinate {s:?}: {e}")))
            };
            let relation = fields[4].parse().map_err(err)?;
            let weight: f64 = fields[5]
                .parse()
                .map_err(|e| err(format!("bad weight {:?}: {e}", fields[5])))?;
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(err(format!("weight must be positive, got {weight}")));
            }
            judgements.push(Judgement {
                p1: (coord(fields[0])?, coord(fields[1])?),
                p2: (coord(fields[2])?, coord(fields[3])?),
                relation,
                weight,
            });
        }
        Ok(Self { judgements })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# x1 y1 x2 y2 relation weight\n");
        for j in &self.judgements {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                j.p1.0, j.p1.1, j.p2.0, j.p2.1, j.relation, j.weight
            ));
        }
        out
    }

    fn check_bounds(&self, h: usize, w: usize) -> Result<(), MetricError> {
        for (k, j) in self.judgements.iter().enumerate() {
            for (x, y) in [j.p1, j.p2] {
                if x >= w || y >= h {
                    return Err(MetricError::Invalid(format!(
                        "judgement {k}: point ({x}, {y}) outside the {w}x{h} image"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean intensity of the 3×3 patch around `(x, y)`, clipped at the border.
fn patch_intensity(img: &Tensor, (x, y): (usize, usize)) -> f64 {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let (mut sum, mut n) = (0.0, 0.0);
    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            let p = yy * w + xx;
            sum += (0..c).map(|k| d[k * h * w + p] as f64).sum::<f64>() / c as f64;
            n += 1.0;
        }
    }
    (sum / n).max(INTENSITY_FLOOR)
}

/// Relation predicted from an intensity ratio with tolerance `delta`.
pub fn classify(i1: f64, i2: f64, delta: f64) -> Relation {
    let r = i1.max(INTENSITY_FLOOR) / i2.max(INTENSITY_FLOOR);
    if r > 1.0 + delta {
        Relation::Lighter
    } else if r < 1.0 / (1.0 + delta) {
        Relation::Darker
    } else {
        Relation::Same
    }
}

/// Relations predicted by an albedo for every judgement.
pub fn predicted_relations(albedo: &Tensor, set: &JudgementSet, delta: f64) -> Result<Vec<Relation>, MetricError> {
    let (_, h, w) = planar("whdr", albedo)?;
    set.check_bounds(h, w)?;
    Ok(set
        .judgements
        .iter()
        .map(|j| classify(patch_intensity(albedo, j.p1), patch_intensity(albedo, j.p2), delta))
        .collect())
}

/// Weighted disagreement of one albedo as given.
pub fn whdr_single(albedo: &Tensor, set: &JudgementSet, delta: f64) -> Result<f64, MetricError> {
    if set.judgements.is_empty() {
        return Err(MetricError::Invalid("whdr: empty judgement set".into()));
    }
    let pred = predicted_relations(albedo, set, delta)?;
    let (mut wrong, mut total) = (0.0, 0.0);
    for (j, p) in set.judgements.iter().zip(pred) {
        total += j.weight;
        if p != j.relation {
            wrong += j.weight;
        }
    }
    Ok(wrong / total)
}

/// Best of the albedo evaluated as-is and after sRGB-to-linear conversion.
pub fn whdr(albedo: &Tensor, set: &JudgementSet, delta: f64) -> Result<f64, MetricError> {
    let raw = whdr_single(albedo, set, delta)?;
    let linear = whdr_single(&srgb_to_linear(albedo), set, delta)?;
    Ok(raw.min(linear))
}

/// Random point pairs inside the mask, labeled by the ground-truth albedo
/// with the same rule [`whdr`] applies.
pub fn judgements_from_albedo(
    albedo: &Tensor,
    mask: Option<&Tensor>,
    count: usize,
    delta: f64,
    seed: u64,
) -> Result<JudgementSet, MetricError> {
    let (_, h, w) = planar("judgements", albedo)?;
    let valid: Vec<usize> = (0..h * w).filter(|&p| mask.is_none_or(|m| m.data()[p] > 0.5)).collect();
    if valid.len() < 2 {
        return Err(MetricError::Degenerate(
            "fewer than two valid pixels for judgements".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let judgements = (0..count)
        .map(|_| {
            let a = valid[rng.random_range(0..valid.len())];
            let b = valid[rng.random_range(0..valid.len())];
            let (p1, p2) = ((a % w, a / w), (b % w, b / w));
            Judgement {
                p1,
                p2,
                relation: classify(patch_intensity(albedo, p1), patch_intensity(albedo, p2), delta),
                weight: 1.0,
            }
        })
        .collect();
    Ok(JudgementSet { judgements })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadingLabel {
    Smooth,
    Boundary,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadingLabels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<ShadingLabel>,
}

/// `|∇ log Y|` of a `[3, H, W]` shading with forward differences; the last
/// row and column reuse the difference before them.
pub fn log_luminance_gradient(shading: &Tensor) -> Result<Vec<f64>, MetricError> {
    let (c, h, w) = planar("saw", shading)?;
    if c != 3 || h < 2 || w < 2 {
        return Err(MetricError::Invalid(format!(
            "saw needs an RGB image of at least 2x2, got {:?}",
            shading.shape()
        )));
    }
    let d = shading.data();
    let hw = h * w;
    let log_y: Vec<f64> = (0..hw)
        .map(|p| {
            let y: f64 = (0..3).map(|k| LUMA[k] * d[k * hw + p] as f64).sum();
            y.max(1e-4).ln()
        })
        .collect();
    Ok((0..hw)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let xa = if x + 1 < w { x } else { x - 1 };
            let ya = if y + 1 < h { y } else { y - 1 };
            let gx = log_y[y * w + xa + 1] - log_y[y * w + xa];
            let gy = log_y[(ya + 1) * w + x] - log_y[ya * w + x];
            (gx * gx + gy * gy).sqrt()
        })
        .collect())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Labels from ground-truth shading: gradients above the 95th percentile
/// are boundaries, those at or below the median are smooth.
pub fn labels_from_shading(shading: &Tensor, mask: Option<&Tensor>) -> Result<ShadingLabels, MetricError> {
    let (_, h, w) = planar("saw", shading)?;
    let g = log_luminance_gradient(shading)?;
    let valid = |p: usize| mask.is_none_or(|m| m.data()[p] > 0.5);
    let mut sorted: Vec<f64> = (0..h * w).filter(|&p| valid(p)).map(|p| g[p]).collect();
    if sorted.is_empty() {
        return Err(MetricError::Degenerate("saw: no valid pixels".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let (median, high) = (percentile(&sorted, 0.5), percentile(&sorted, 0.95));
    let labels = (0..h * w)
        .map(|p| match g[p] {
            _ if !valid(p) => ShadingLabel::Unlabeled,
            v if v > high => ShadingLabel::Boundary,
            v if v <= median => ShadingLabel::Smooth,
            _ => ShadingLabel::Unlabeled,
        })
        .collect();
    Ok(ShadingLabels {
        width: w,
        height: h,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SawResult {
    /// `(recall, precision)` after each distinct score threshold.
    pub curve: Vec<(f64, f64)>,
    /// Precision at recall 0.5, 0.7 and 0.8.
    pub precision: [f64; 3],
}

pub const SAW_RECALLS: [f64; 3] = [0.5, 0.7, 0.8];

/// Precision/recall of "smooth" under the score `−|∇ log Y(S)|`.
pub fn saw_pr(shading: &Tensor, labels: &ShadingLabels) -> Result<SawResult, MetricError> {
    let (_, h, w) = planar("saw", shading)?;
    if (labels.height, labels.width) != (h, w) || labels.labels.len() != h * w {
        return Err(MetricError::Shape {
            what: "saw labels",
            expected: vec![h, w],
            got: vec![labels.height, labels.width],
        });
    }
    let g = log_luminance_gradient(shading)?;
    let mut scored: Vec<(f64, bool)> = labels
        .labels
        .iter()
        .enumerate()
        .filter_map(|(p, l)| match l {
            ShadingLabel::Smooth => Some((-g[p], true)),
            ShadingLabel::Boundary => Some((-g[p], false)),
            ShadingLabel::Unlabeled => None,
        })
        .collect();
    let positives = scored.iter().filter(|s| s.1).count();
    if positives == 0 || positives == scored.len() {
        return Err(MetricError::Degenerate(
            "saw labels need both smooth and boundary pixels".into(),
        ));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < scored.len() {
        // equal scores move through the threshold together
        let s = scored[k].0;
        while k < scored.len() && scored[k].0 == s {
            if scored[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    let precision = SAW_RECALLS.map(|r| precision_at(&curve, r));
    Ok(SawResult { curve, precision })
}

/// Linear interpolation of precision at `recall` along a recall-sorted curve.
fn precision_at(curve: &[(f64, f64)], recall: f64) -> f64 {
    if recall <= curve[0].0 {
        return curve[0].1;
    }
    for pair in curve.windows(2) {
        let ((r0, p0), (r1, p1)) = (pair[0], pair[1]);
        if recall <= r1 {
            if r1 == r0 {
                return p1;
            }
            return p0 + (p1 - p0) * (recall - r0) / (r1 - r0);
        }
    }
    curve[curve.len() - 1].1
}
