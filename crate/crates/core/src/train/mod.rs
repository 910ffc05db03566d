//! Siamese training over illumination-varying image sequences.

pub mod losses;

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    loss_albedo, loss_chroma_smooth, loss_init, loss_reconstruction, loss_shading_smooth, total_loss, AlbedoLossForm,
    LossTerms, LossWeights, Pairing, Side,
};

use crate::net::{build, forward, Mode, NetConfig, NetError, NetworkWeights};
use crate::tensor::ops;
use crate::tensor::{AdamConfig, AdamState, BatchNormMode, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_pairs: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            lr_start: 1e-3,
            lr_end: 1e-5,
            batch_pairs: 3,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return Err("learning rates must be positive".into());
        }
        if self.lr_end > self.lr_start {
            return Err(format!("lr_end ({}) exceeds lr_start ({})", self.lr_end, self.lr_start));
        }
        if self.batch_pairs == 0 {
            return Err("batch_pairs must be at least 1".into());
        }
        Ok(())
    }

    /// Exponential decay from `lr_start` at 0 to `lr_end` at `total_iters`.
    pub fn lr(&self, iter: usize) -> f64 {
        if self.total_iters == 0 {
            return self.lr_start;
        }
        let t = iter as f64 / self.total_iters as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

/// Weight of the init term: linear from `mu_start` to `mu_end` over the
/// anneal fraction of training, constant afterwards.
pub fn mu_schedule(iter: usize, schedule: &TrainSchedule, weights: &LossWeights) -> f64 {
    let span = weights.mu_anneal_fraction * schedule.total_iters as f64;
    let t = iter as f64 / span;
    if span <= 0.0 || t >= 1.0 {
        return weights.mu_end;
    }
    weights.mu_start + (weights.mu_end - weights.mu_start) * t
}

/// Images of one static scene under varying illumination.
#[derive(Debug, Clone)]
pub struct Sequence {
    /// `[3, H, W]` images in `[0, 1]`.
    pub images: Vec<Tensor>,
    /// `[1, H, W]` validity masks, one per image.
    pub masks: Vec<Tensor>,
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub mu: f64,
    #[serde(rename = "L_a")]
    pub l_a: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_smooth")]
    pub l_smooth: f64,
    #[serde(rename = "L_i")]
    pub l_i: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    pub total: f64,
}

impl LogRow {
    fn new(iter: usize, lr: f64, mu: f64, terms: &LossTerms, total: f64) -> Self {
        Self {
            iter,
            lr,
            mu,
            l_a: terms.albedo,
            l_c: terms.chroma,
            l_smooth: terms.smooth,
            l_i: terms.init,
            l_r: terms.recon,
            total,
        }
    }
}

pub const LOG_HEADER: [&str; 9] = ["iter", "lr", "mu", "L_a", "L_c", "L_smooth", "L_i", "L_r", "total"];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no sequence has at least two images")]
    NoPairs,
    #[error("sequence {sequence}: {msg}")]
    Data { sequence: usize, msg: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iter}: {terms}")]
    NonFinite { iter: usize, terms: LossTerms },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub struct TrainOutput {
    pub weights: NetworkWeights,
    pub log: Vec<LogRow>,
}

struct Batch {
    first: Tensor,
    second: Tensor,
    mask: Tensor,
    pairing: Pairing,
}

fn check_data(data: &[Sequence]) -> Result<Vec<usize>, TrainError> {
    let mut shape: Option<Vec<usize>> = None;
    for (k, seq) in data.iter().enumerate() {
        let err = |msg: String| TrainError::Data { sequence: k, msg };
        if seq.images.len() != seq.masks.len() {
            return Err(err(format!(
                "{} images but {} masks",
                seq.images.len(),
                seq.masks.len()
            )));
        }
        for (img, m) in seq.images.iter().zip(&seq.masks) {
            let s = img.shape();
            if s.len() != 3 || s[0] != 3 {
                return Err(err(format!("image shape {s:?} is not [3, H, W]")));
            }
            if m.shape() != [1, s[1], s[2]] {
                return Err(err(format!("mask shape {:?} does not match image {s:?}", m.shape())));
            }
            match &shape {
                None => shape = Some(s.to_vec()),
                Some(first) if first != s => {
                    return Err(err(format!("image shape {s:?} differs from {first:?}")));
                }
                _ => {}
            }
        }
    }
    let usable: Vec<usize> = (0..data.len()).filter(|&k| data[k].images.len() >= 2).collect();
    if usable.is_empty() {
        return Err(TrainError::NoPairs);
    }
    Ok(usable)
}

fn sample_batch(data: &[Sequence], usable: &[usize], pairs: usize, rng: &mut ChaCha8Rng) -> Result<Batch, TrainError> {
    let mut first = Vec::with_capacity(pairs);
    let mut second = Vec::with_capacity(pairs);
    let mut masks = Vec::with_capacity(pairs);
    let mut pairing = Pairing::default();
    for _ in 0..pairs {
        let s = usable[rng.random_range(0..usable.len())];
        let seq = &data[s];
        let idx = sample(rng, seq.images.len(), 2);
        let (i, j) = (idx.index(0), idx.index(1));
        first.push(&seq.images[i]);
        second.push(&seq.images[j]);
        masks.push(seq.masks[i].zip_map(&seq.masks[j], |a, b| a * b)?);
        pairing.first.push((s, i));
        pairing.second.push((s, j));
    }
    let add_batch_axis = |t: Tensor| -> Result<Tensor, TensorError> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshape(&shape)
    };
    let stack = |parts: Vec<&Tensor>| -> Result<Tensor, TensorError> {
        let owned = parts
            .into_iter()
            .map(|t| add_batch_axis(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Tensor::stack_batch(&owned.iter().collect::<Vec<_>>())
    };
    Ok(Batch {
        first: stack(first)?,
        second: stack(second)?,
        mask: stack(masks.iter().collect())?,
        pairing,
    })
}

/// Forward pass and loss for one batch; both sides run through the network
/// as a single stacked batch so they share parameters and batch statistics.
fn batch_loss(
    weights: &mut NetworkWeights,
    batch: &Batch,
    loss_weights: &LossWeights,
    mu: f64,
) -> Result<(Var, LossTerms, Vec<Var>), TrainError> {
    let p = batch.first.shape()[0];
    let input = Var::constant(Tensor::stack_batch(&[&batch.first, &batch.second])?);
    let out = forward(weights, &input, Mode::Train)?;
    let image_i = ops::slice_batch(&input, 0, p)?;
    let image_j = ops::slice_batch(&input, p, p)?;
    let albedo_i = ops::slice_batch(&out.albedo, 0, p)?;
    let albedo_j = ops::slice_batch(&out.albedo, p, p)?;
    let shading_i = ops::slice_batch(&out.shading, 0, p)?;
    let shading_j = ops::slice_batch(&out.shading, p, p)?;
    let side_i = Side {
        image: &image_i,
        albedo: &albedo_i,
        shading: &shading_i,
    };
    let side_j = Side {
        image: &image_j,
        albedo: &albedo_j,
        shading: &shading_j,
    };
    let (loss, terms) = total_loss(&side_i, &side_j, Some(&batch.mask), &batch.pairing, loss_weights, mu)?;
    Ok((loss, terms, out.params))
}

/// Trains a freshly initialized network. `progress` is called after every
/// iteration with the logged row.
pub fn train(
    data: &[Sequence],
    config: NetConfig,
    loss_weights: &LossWeights,
    schedule: &TrainSchedule,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    loss_weights.validate().map_err(TrainError::Config)?;
    schedule.validate().map_err(TrainError::Config)?;
    let usable = check_data(data)?;

    let mut weights: NetworkWeights = build(config, schedule.seed)?;
    let mut adam = AdamState::new(weights.params(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x05ee_d0fb_a7c4);
    let mut log = Vec::with_capacity(schedule.total_iters);

    for iter in 0..schedule.total_iters {
        let batch = sample_batch(data, &usable, schedule.batch_pairs, &mut rng)?;
        let mu = mu_schedule(iter, schedule, loss_weights);
        let lr = schedule.lr(iter);
        let (loss, terms, params) = batch_loss(&mut weights, &batch, loss_weights, mu)?;
        let total = loss.value().item() as f64;
        if !total.is_finite() || !terms.all_finite() {
            return Err(TrainError::NonFinite { iter, terms });
        }
        loss.backward()?;
        let grads = params.iter().map(|p| p.grad()).collect();
        adam.step(&mut weights.params_mut(), grads, lr)?;
        if !weights.all_finite() {
            return Err(TrainError::NonFinite { iter, terms });
        }
        let row = LogRow::new(iter, lr, mu, &terms, total);
        progress(&row);
        log.push(row);
    }
    for s in weights.norm_states_mut() {
        s.mode = BatchNormMode::Inference;
    }
    Ok(TrainOutput { weights, log })
}

pub fn write_loss_log(rows: &[LogRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(LOG_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_log(rows: &[LogRow], path: impl AsRef<Path>) -> csv::Result<()> {
    let f = std::fs::File::create(path)?;
    write_loss_log(rows, std::io::BufWriter::new(f))
}

pub fn read_loss_log(path: impl AsRef<Path>) -> csv::Result<Vec<LogRow>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> NetConfig {
        NetConfig {
            levels: 1,
            proj_channels: 2,
            conv_channels: 3,
            kernel_size: 3,
        }
    }

    fn toy_data() -> Vec<Sequence> {
        let albedo = Tensor::from_fn(&[3, 4, 4], |i| 0.2 + 0.05 * (i % 7) as f32);
        (0..2)
            .map(|s| Sequence {
                images: (0..3)
                    .map(|k| albedo.map(|a| a * (0.5 + 0.2 * k as f32 + 0.1 * s as f32)))
                    .collect(),
                masks: vec![Tensor::ones(&[1, 4, 4]); 3],
            })
            .collect()
    }

    #[test]
    fn mu_schedule_points() {
        let s = TrainSchedule {
            total_iters: 1000,
            ..TrainSchedule::default()
        };
        let w = LossWeights::default();
        assert_eq!(mu_schedule(0, &s, &w), 1.0);
        assert!((mu_schedule(250, &s, &w) - 0.505).abs() < 1e-12);
        assert!((mu_schedule(500, &s, &w) - 0.01).abs() < 1e-12);
        assert_eq!(mu_schedule(750, &s, &w), 0.01);
    }

    #[test]
    fn lr_schedule_decreases() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(s.total_iters) - 1e-5).abs() < 1e-18);
        assert!((s.lr(1000) - 1e-4).abs() < 1e-15);
        for t in 0..s.total_iters {
            assert!(s.lr(t + 1) < s.lr(t));
        }
    }

    #[test]
    fn zero_iterations_returns_initial_weights() {
        let sched = TrainSchedule {
            total_iters: 0,
            seed: 4,
            ..TrainSchedule::default()
        };
        let out = train(&toy_data(), tiny_net(), &LossWeights::default(), &sched, |_| {}).unwrap();
        assert!(out.log.is_empty());
        let mut init: NetworkWeights = build(tiny_net(), 4).unwrap();
        for s in init.norm_states_mut() {
            s.mode = BatchNormMode::Inference;
        }
        assert_eq!(out.weights, init);
    }

    #[test]
    fn same_seed_same_log() {
        let sched = TrainSchedule {
            total_iters: 5,
            seed: 9,
            batch_pairs: 2,
            ..TrainSchedule::default()
        };
        let a = train(&toy_data(), tiny_net(), &LossWeights::default(), &sched, |_| {}).unwrap();
        let b = train(&toy_data(), tiny_net(), &LossWeights::default(), &sched, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.weights, b.weights);
        for r in &a.log {
            assert!((r.total - (r.l_a + r.l_c + r.l_smooth + r.l_i + r.l_r)).abs() < 1e-4 * r.total.max(1.0));
        }
    }

    #[test]
    fn needs_pairs() {
        let data = vec![Sequence {
            images: vec![Tensor::ones(&[3, 4, 4])],
            masks: vec![Tensor::ones(&[1, 4, 4])],
        }];
        let r = train(
            &data,
            tiny_net(),
            &LossWeights::default(),
            &TrainSchedule::default(),
            |_| {},
        );
        assert!(matches!(r, Err(TrainError::NoPairs)));
    }

    #[test]
    fn nan_input_aborts_with_iteration() {
        let mut data = toy_data();
        data[0].images[0].data_mut()[0] = f32::NAN;
        data[1].images[0].data_mut()[0] = f32::NAN;
        let sched = TrainSchedule {
            total_iters: 20,
            ..TrainSchedule::default()
        };
        let r = train(&data, tiny_net(), &LossWeights::default(), &sched, |_| {});
        match r {
            Err(TrainError::NonFinite { iter, .. }) => assert!(iter < 20),
            other => panic!("expected abort, got {:?}", other.map(|o| o.log.len())),
        }
    }

    #[test]
    fn log_csv_round_trip() {
        let rows = vec![LogRow::new(
            0,
            1e-3,
            1.0,
            &LossTerms {
                albedo: 0.1,
                chroma: 0.2,
                smooth: 0.3,
                init: 0.4,
                recon: 0.5,
            },
            1.5,
        )];
        let mut buf = Vec::new();
        write_loss_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,lr,mu,L_a,L_c,L_smooth,L_i,L_r,total\n"));
        let mut empty = Vec::new();
        write_loss_log(&[], &mut empty).unwrap();
        assert_eq!(
            String::from_utf8(empty).unwrap(),
            "iter,lr,mu,L_a,L_c,L_smooth,L_i,L_r,total\n"
        );
        let back: Vec<LogRow> = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(back, rows);
    }
}
