//! Dense-ground-truth metrics: LMSE, MRE and MACE.

use super::{planar, MetricError};
use crate::tensor::Tensor;

/// Window side used when none is given: 10% of the larger dimension, at
/// least 8 pixels.
pub fn default_window(height: usize, width: usize) -> usize {
    ((height.max(width) as f64 * 0.1).round() as usize).max(8)
}

/// Local scale-invariant error over half-overlapping `window × window`
/// tiles, normalized by the ground-truth energy of the same tiles. One
/// scale is fitted per tile jointly over all channels.
pub fn lmse(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>, window: usize) -> Result<f64, MetricError> {
    let (c, h, w) = planar("lmse", gt)?;
    if pred.shape() != gt.shape() {
        return Err(MetricError::Shape {
            what: "lmse prediction",
            expected: gt.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.shape() != [1, h, w] {
            return Err(MetricError::Shape {
                what: "lmse mask",
                expected: vec![1, h, w],
                got: m.shape().to_vec(),
            });
        }
    }
    if window < 2 || window > h || window > w {
        return Err(MetricError::Invalid(format!(
            "window {window} does not fit a {w}x{h} image"
        )));
    }
    let (p, g) = (pred.data(), gt.data());
    let m = |i: usize| mask.map_or(1.0, |m| m.data()[i] as f64);
    let step = window / 2;
    let (mut ssq, mut total) = (0.0, 0.0);
    for y0 in (0..=h - window).step_by(step) {
        for x0 in (0..=w - window).step_by(step) {
            let (mut gp, mut pp, mut gg, mut count) = (0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let wgt = m(y * w + x);
                    count += wgt;
                    for k in 0..c {
                        let i = (k * h + y) * w + x;
                        let (pv, gv) = (p[i] as f64, g[i] as f64);
                        gp += wgt * gv * pv;
                        pp += wgt * pv * pv;
                        gg += wgt * gv * gv;
                    }
                }
            }
            if count == 0.0 {
                continue;
            }
            let a = if pp > 0.0 { gp / pp } else { 0.0 };
            // ‖g − a·p‖² = gg − 2a·gp + a²·pp, clamped against cancellation
            ssq += (gg - 2.0 * a * gp + a * a * pp).max(0.0);
            total += gg;
        }
    }
    if total <= 0.0 {
        return Err(MetricError::Degenerate("lmse: ground truth has no energy".into()));
    }
    Ok(ssq / total)
}

/// Mean of the albedo and shading LMSE.
pub fn lmse_decomposition(
    albedo: &Tensor,
    shading: &Tensor,
    gt_albedo: &Tensor,
    gt_shading: &Tensor,
    mask: Option<&Tensor>,
) -> Result<f64, MetricError> {
    let (_, h, w) = planar("lmse", gt_albedo)?;
    let win = default_window(h, w);
    Ok(0.5 * (lmse(albedo, gt_albedo, mask, win)? + lmse(shading, gt_shading, mask, win)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MreResult {
    /// Least-squares global scale of `A·S` against `I`.
    pub alpha: f64,
    /// Mean absolute deviation `|I − α·A·S|` on the 0–255 scale.
    pub error: f64,
}

/// Mean reconstruction error after fitting one global scale.
pub fn mre(image: &Tensor, albedo: &Tensor, shading: &Tensor, mask: Option<&Tensor>) -> Result<MreResult, MetricError> {
    let (c, h, w) = planar("mre", image)?;
    for (what, t) in [("mre albedo", albedo), ("mre shading", shading)] {
        if t.shape() != image.shape() {
            return Err(MetricError::Shape {
                what,
                expected: image.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
    }
    if let Some(m) = mask {
        if m.shape() != [1, h, w] {
            return Err(MetricError::Shape {
                what: "mre mask",
                expected: vec![1, h, w],
                got: m.shape().to_vec(),
            });
        }
    }
    let hw = h * w;
    let weight = |i: usize| mask.map_or(1.0, |m| m.data()[i % hw] as f64);
    let (id, ad, sd) = (image.data(), albedo.data(), shading.data());
    let (mut ir, mut rr, mut count) = (0.0, 0.0, 0.0);
    for i in 0..c * hw {
        let wgt = weight(i);
        let r = ad[i] as f64 * sd[i] as f64;
        ir += wgt * id[i] as f64 * r;
        rr += wgt * r * r;
        count += wgt;
    }
    if rr <= 0.0 {
        return Err(MetricError::Degenerate("mre: A·S is zero everywhere".into()));
    }
    let alpha = ir / rr;
    let dev: f64 = (0..c * hw)
        .map(|i| weight(i) * (id[i] as f64 - alpha * ad[i] as f64 * sd[i] as f64).abs())
        .sum();
    Ok(MreResult {
        alpha,
        error: 255.0 * dev / count,
    })
}

/// Mean absolute albedo change over all ordered pairs of a sequence, on the
/// 0–255 scale.
///
/// A pixel counts for a pair when its intensity (channel mean, 0–255) is at
/// least `threshold` in both source images. With a positive threshold, pairs
/// whose counted pixels cover less than `min_overlap` of the image are left
/// out; self-pairs are always part of the average.
pub fn mace(albedos: &[Tensor], sources: &[Tensor], threshold: f64, min_overlap: f64) -> Result<f64, MetricError> {
    if albedos.len() < 2 {
        return Err(MetricError::Invalid(format!(
            "mace needs at least 2 albedos, got {}",
            albedos.len()
        )));
    }
    if sources.len() != albedos.len() {
        return Err(MetricError::Invalid(format!(
            "mace: {} albedos but {} source images",
            albedos.len(),
            sources.len()
        )));
    }
    let (c, h, w) = planar("mace", &albedos[0])?;
    for t in albedos.iter().chain(sources) {
        if t.shape() != albedos[0].shape() {
            return Err(MetricError::Shape {
                what: "mace input",
                expected: albedos[0].shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
    }
    let hw = h * w;
    let bright: Vec<Vec<bool>> = sources
        .iter()
        .map(|s| {
            let d = s.data();
            (0..hw)
                .map(|p| {
                    let mean = (0..c).map(|k| d[k * hw + p] as f64).sum::<f64>() / c as f64;
                    mean * 255.0 >= threshold
                })
                .collect()
        })
        .collect();
    let n = albedos.len();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            let counted: Vec<usize> = (0..hw).filter(|&p| bright[i][p] && bright[j][p]).collect();
            if threshold > 0.0 && (counted.len() as f64) < min_overlap * hw as f64 {
                continue;
            }
            pairs += 1;
            if i == j || counted.is_empty() {
                continue;
            }
            let (a, b) = (albedos[i].data(), albedos[j].data());
            let diff: f64 = counted
                .iter()
                .map(|&p| {
                    (0..c)
                        .map(|k| (a[k * hw + p] as f64 - b[k * hw + p] as f64).abs())
                        .sum::<f64>()
                })
                .sum();
            sum += 255.0 * diff / (c * counted.len()) as f64;
        }
    }
    if pairs == 0 {
        return Err(MetricError::Degenerate(
            "mace: every pair overlaps less than the minimum bright area".into(),
        ));
    }
    Ok(sum / pairs as f64)
}
