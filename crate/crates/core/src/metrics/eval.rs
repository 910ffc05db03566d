//! Dataset-level evaluation against synthetic ground truth.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dense::{lmse_decomposition, mace, mre};
use super::report::Scores;
use super::sparse::{judgements_from_albedo, labels_from_shading, saw_pr, whdr, DEFAULT_DELTA};
use super::MetricError;
use crate::synth::dataset::{Dataset, LoadedSequence};
use crate::synth::mix_seed;
use crate::tensor::{Tensor, DIV_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Lmse,
    Whdr,
    Saw,
    Mre,
    Mace,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Lmse,
        MetricKind::Whdr,
        MetricKind::Saw,
        MetricKind::Mre,
        MetricKind::Mace,
    ];
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lmse" => Ok(MetricKind::Lmse),
            "whdr" => Ok(MetricKind::Whdr),
            "saw" => Ok(MetricKind::Saw),
            "mre" => Ok(MetricKind::Mre),
            "mace" => Ok(MetricKind::Mace),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: Vec<MetricKind>,
    pub whdr_delta: f64,
    pub judgements_per_image: usize,
    pub judgement_seed: u64,
    pub mace_threshold: f64,
    pub mace_min_overlap: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: MetricKind::ALL.to_vec(),
            whdr_delta: DEFAULT_DELTA,
            judgements_per_image: 500,
            judgement_seed: 0,
            mace_threshold: 10.0,
            mace_min_overlap: 0.2,
        }
    }
}

/// Decomposition of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub albedo: Tensor,
    pub shading: Tensor,
}

/// `A = I`, `S = 1`.
pub fn identity_baseline(image: &Tensor) -> Prediction {
    Prediction {
        albedo: image.clone(),
        shading: Tensor::ones(image.shape()),
    }
}

/// `A` = the mean color of the valid pixels everywhere, `S = I / A`.
pub fn constant_albedo_baseline(image: &Tensor, mask: Option<&Tensor>) -> Prediction {
    let (c, hw) = (image.shape()[0], image.len() / image.shape()[0]);
    let d = image.data();
    let weight = |p: usize| mask.map_or(1.0, |m| m.data()[p] as f64);
    let count: f64 = (0..hw).map(weight).sum::<f64>().max(1.0);
    let mean: Vec<f32> = (0..c)
        .map(|k| ((0..hw).map(|p| weight(p) * d[k * hw + p] as f64).sum::<f64>() / count).max(DIV_FLOOR) as f32)
        .collect();
    Prediction {
        albedo: Tensor::from_fn(image.shape(), |i| mean[i / hw]),
        shading: Tensor::from_fn(image.shape(), |i| d[i] / mean[i / hw]),
    }
}

fn mean_of(v: &[f64], what: &str) -> Result<f64, MetricError> {
    if v.is_empty() {
        return Err(MetricError::Degenerate(format!("{what}: no image could be scored")));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores predictions against every variant of a dataset.
///
/// `predict(sequence, variant)` returns `None` for images without a
/// prediction; those are skipped with a warning. MACE is averaged over
/// sequences with at least two predicted images.
pub fn evaluate_dataset(
    ds: &Dataset,
    opts: &EvalOptions,
    mut predict: impl FnMut(&LoadedSequence, usize) -> Option<Prediction>,
) -> Result<Scores, MetricError> {
    let wants = |k: MetricKind| opts.metrics.contains(&k);
    let (mut lmse_v, mut whdr_v, mut saw_v, mut mre_v, mut mace_v) = (vec![], vec![], vec![], vec![], vec![]);
    let mut matched = 0usize;
    for (si, seq) in ds.sequences.iter().enumerate() {
        let judgements = if wants(MetricKind::Whdr) {
            Some(judgements_from_albedo(
                &seq.albedo,
                Some(&seq.mask),
                opts.judgements_per_image,
                opts.whdr_delta,
                mix_seed(opts.judgement_seed, si as u64),
            )?)
        } else {
            None
        };
        let mut albedos = Vec::new();
        let mut sources = Vec::new();
        for (vi, image) in seq.images.iter().enumerate() {
            let Some(pred) = predict(seq, vi) else {
                log::warn!("{}: no prediction for variant {vi}; skipped", seq.entry.id);
                continue;
            };
            if pred.albedo.shape() != image.shape() || pred.shading.shape() != image.shape() {
                return Err(MetricError::Shape {
                    what: "prediction",
                    expected: image.shape().to_vec(),
                    got: pred.albedo.shape().to_vec(),
                });
            }
            matched += 1;
            let mask = Some(&seq.mask);
            if wants(MetricKind::Lmse) {
                lmse_v.push(lmse_decomposition(
                    &pred.albedo,
                    &pred.shading,
                    &seq.albedo,
                    &seq.shadings[vi],
                    mask,
                )?);
            }
            if let Some(j) = &judgements {
                whdr_v.push(whdr(&pred.albedo, j, opts.whdr_delta)?);
            }
            if wants(MetricKind::Saw) {
                let labels = labels_from_shading(&seq.shadings[vi], mask)?;
                saw_v.push(saw_pr(&pred.shading, &labels)?.precision);
            }
            if wants(MetricKind::Mre) {
                mre_v.push(mre(image, &pred.albedo, &pred.shading, mask)?.error);
            }
            albedos.push(pred.albedo);
            sources.push(image.clone());
        }
        if wants(MetricKind::Mace) && albedos.len() >= 2 {
            match mace(&albedos, &sources, opts.mace_threshold, opts.mace_min_overlap) {
                Ok(v) => mace_v.push(v),
                Err(e) => log::warn!("{}: {e}", seq.entry.id),
            }
        }
    }
    if matched == 0 {
        return Err(MetricError::Invalid("no prediction matched any dataset image".into()));
    }
    let saw = if wants(MetricKind::Saw) {
        let n = saw_v.len() as f64;
        if saw_v.is_empty() {
            return Err(MetricError::Degenerate("saw: no image could be scored".into()));
        }
        Some([0, 1, 2].map(|k| saw_v.iter().map(|p| p[k]).sum::<f64>() / n))
    } else {
        None
    };
    Ok(Scores {
        lmse: wants(MetricKind::Lmse).then(|| mean_of(&lmse_v, "lmse")).transpose()?,
        whdr: wants(MetricKind::Whdr).then(|| mean_of(&whdr_v, "whdr")).transpose()?,
        saw,
        mre: wants(MetricKind::Mre).then(|| mean_of(&mre_v, "mre")).transpose()?,
        mace: wants(MetricKind::Mace).then(|| mean_of(&mace_v, "mace")).transpose()?,
    })
}
