//! Network layers: batch normalization, 2×2 max pooling and 2× bilinear
//! upsampling.

use serde::{Deserialize, Serialize};

use super::autograd::Var;
use super::{Real, Result, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and update the running estimates.
    Training,
    /// Normalize by the running estimates.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub running_mean: Vec<T>,
    /// Always strictly positive.
    pub running_var: Vec<T>,
    pub momentum: T,
    pub mode: BatchNormMode,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            momentum: T::from_f64(BN_MOMENTUM),
            mode: BatchNormMode::Training,
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            running_mean: self.running_mean.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            momentum: U::from_f64(self.momentum.to_f64()),
            mode: self.mode,
        }
    }
}

/// Per-channel batch normalization of an NCHW tensor with learnable
/// `scale` and `shift` (both `[C]`).
pub fn batchnorm<T: Real>(
    input: &Var<T>,
    scale: &Var<T>,
    shift: &Var<T>,
    state: &mut BatchNormState<T>,
) -> Result<Var<T>> {
    let (n, c, h, w) = input.value().dims4("batchnorm")?;
    for (t, name) in [(scale, "scale"), (shift, "shift")] {
        if t.shape() != [c] {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: format!("{name} has shape {:?}, expected [{c}]", t.shape()),
            });
        }
    }
    if state.running_mean.len() != c || state.running_var.len() != c {
        return Err(TensorError::Invalid {
            op: "batchnorm",
            msg: format!(
                "running statistics sized for {} channels, input has {c}",
                state.running_mean.len()
            ),
        });
    }
    let hw = h * w;
    let count = n * hw;
    let eps = T::from_f64(BN_EPSILON);
    let x = input.data();
    let at = move |s: usize, ch: usize| (s * c + ch) * hw;

    let training = state.mode == BatchNormMode::Training;
    let (mean, var) = if training {
        if count < 2 {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: "training mode needs more than one value per channel".into(),
            });
        }
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        let inv = T::ONE / T::from_f64(count as f64);
        for ch in 0..c {
            let mut acc = T::ZERO;
            for s in 0..n {
                acc += x[at(s, ch)..at(s, ch) + hw].iter().copied().sum::<T>();
            }
            let m = acc * inv;
            let mut sq = T::ZERO;
            for s in 0..n {
                for &v in &x[at(s, ch)..at(s, ch) + hw] {
                    let d = v - m;
                    sq += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq * inv;
        }
        let mom = state.momentum;
        let unbias = T::from_f64(count as f64 / (count - 1) as f64);
        for ch in 0..c {
            state.running_mean[ch] = (T::ONE - mom) * state.running_mean[ch] + mom * mean[ch];
            let rv = (T::ONE - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            state.running_var[ch] = rv.max(eps);
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    let (gamma, beta) = (scale.data(), shift.data());
    for s in 0..n {
        for ch in 0..c {
            let base = at(s, ch);
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let out = Tensor::new(input.shape(), out)?;
    Ok(Var::from_op(
        out,
        vec![input.clone(), scale.clone(), shift.clone()],
        Box::new(move |g, p| {
            let gamma = p[1].data();
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = at(s, ch);
                    for i in base..base + hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::ZERO; g.len()];
                let m = T::from_f64(count as f64);
                for ch in 0..c {
                    let k = gamma[ch] * inv_std[ch];
                    for s in 0..n {
                        let base = at(s, ch);
                        for i in base..base + hw {
                            dx[i] = if training {
                                k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        }),
    ))
}

/// 2×2 max pooling with stride 2. Gradient goes to the first maximal
/// element of each window in row-major order.
pub fn maxpool2<T: Real>(input: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = input.value().dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "maxpool2",
            msg: format!("spatial size {h}x{w} must be even"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let top = base + 2 * y * w + 2 * xx;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let total = x.len();
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(Var::from_op(
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![T::ZERO; total];
            for (&gi, &src) in g.iter().zip(&argmax) {
                dx[src] += gi;
            }
            vec![Some(dx)]
        }),
    ))
}

/// Source taps of one output coordinate of 2× linear interpolation
/// (half-pixel centers): `v = src[lo] + t·(src[hi] − src[lo])`.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(len: usize) -> Vec<Tap> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            Tap {
                lo,
                hi,
                t: src - lo as f64,
            }
        })
        .collect()
}

/// 2× bilinear upsampling with the align-corners-false convention.
pub fn upsample_bilinear2<T: Real>(input: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = input.value().dims4("upsample_bilinear2")?;
    if h == 0 || w == 0 {
        return Err(TensorError::Invalid {
            op: "upsample_bilinear2",
            msg: "empty spatial extent".into(),
        });
    }
    let (ty, tx) = (taps(h), taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for vy in &ty {
            let t_y = T::from_f64(vy.t);
            for vx in &tx {
                let t_x = T::from_f64(vx.t);
                let top = src[vy.lo * w + vx.lo] + t_x * (src[vy.lo * w + vx.hi] - src[vy.lo * w + vx.lo]);
                let bot = src[vy.hi * w + vx.lo] + t_x * (src[vy.hi * w + vx.hi] - src[vy.hi * w + vx.lo]);
                out.push(top + t_y * (bot - top));
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(Var::from_op(
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![T::ZERO; n * c * h * w];
            for plane in 0..n * c {
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                for (oy, vy) in ty.iter().enumerate() {
                    let wy = [T::from_f64(1.0 - vy.t), T::from_f64(vy.t)];
                    for (ox, vx) in tx.iter().enumerate() {
                        let wx = [T::from_f64(1.0 - vx.t), T::from_f64(vx.t)];
                        let gi = gp[oy * ow + ox];
                        dst[vy.lo * w + vx.lo] += gi * wy[0] * wx[0];
                        dst[vy.lo * w + vx.hi] += gi * wy[0] * wx[1];
                        dst[vy.hi * w + vx.lo] += gi * wy[1] * wx[0];
                        dst[vy.hi * w + vx.hi] += gi * wy[1] * wx[1];
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn var(shape: &[usize], v: Vec<f64>) -> Var<f64> {
        Var::constant(Tensor::new(shape, v).unwrap())
    }

    #[test]
    fn maxpool_picks_window_max() {
        let y = maxpool2(&var(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let x = Var::leaf(Tensor::<f64>::full(&[1, 1, 4, 4], 0.5));
        let y = maxpool2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        ops::sum(&y).backward().unwrap();
        let g = x.grad().unwrap();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.data(), &expect);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = maxpool2(&var(&[1, 1, 4, 4], x.clone())).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| x[(2 * oy + dy) * 4 + 2 * ox + dx])
                    .fold(f64::MIN, f64::max);
                assert_eq!(y.data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd_size() {
        assert!(maxpool2(&var(&[1, 1, 3, 2], vec![0.0; 6])).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let y = upsample_bilinear2(&var(&[1, 2, 3, 5], vec![0.37; 30])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn upsample_single_pixel() {
        let y = upsample_bilinear2(&var(&[1, 1, 1, 1], vec![1.25])).unwrap();
        assert_eq!(y.data(), &[1.25; 4]);
    }

    #[test]
    fn upsample_matches_explicit_weights() {
        // 1-D weights for 2 -> 4 under half-pixel centers
        let m = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        let x = [1.0, 2.0, 3.0, 5.0];
        let y = upsample_bilinear2(&var(&[1, 1, 2, 2], x.to_vec())).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut e = 0.0;
                for iy in 0..2 {
                    for ix in 0..2 {
                        e += m[oy][iy] * m[ox][ix] * x[iy * 2 + ix];
                    }
                }
                assert!((y.data()[oy * 4 + ox] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_standardized_input_is_unchanged() {
        // per channel: values ±1 -> mean 0, biased variance 1
        let x = var(&[2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]);
        let one = var(&[1], vec![1.0]);
        let zero = var(&[1], vec![0.0]);
        let mut st = BatchNormState::new(1);
        let y = batchnorm(&x, &one, &zero, &mut st).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_zero_scale_gives_shift() {
        let x = var(&[2, 1, 2, 1], vec![3.0, 4.0, 9.0, -2.0]);
        let mut st = BatchNormState::new(1);
        let y = batchnorm(&x, &var(&[1], vec![0.0]), &var(&[1], vec![0.25]), &mut st).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, c, hw) = (4, 3, 16);
        let x: Vec<f64> = (0..n * c * hw).map(|_| rng.random_range(-3.0..5.0)).collect();
        let mut st = BatchNormState::new(c);
        let y = batchnorm(
            &var(&[n, c, 4, 4], x),
            &var(&[c], vec![1.0; c]),
            &var(&[c], vec![0.0; c]),
            &mut st,
        )
        .unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| y.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_finite() {
        let x = var(&[2, 1, 2, 2], vec![0.5; 8]);
        let mut st = BatchNormState::new(1);
        let y = batchnorm(&x, &var(&[1], vec![1.0]), &var(&[1], vec![0.0]), &mut st).unwrap();
        assert!(y.value().all_finite());
        assert!(st.running_var[0] > 0.0);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let x = var(&[1, 1, 1, 2], vec![2.0, 4.0]);
        let mut st = BatchNormState {
            running_mean: vec![1.0],
            running_var: vec![4.0],
            momentum: 0.1,
            mode: BatchNormMode::Inference,
        };
        let y = batchnorm(&x, &var(&[1], vec![1.0]), &var(&[1], vec![0.0]), &mut st).unwrap();
        let s = (4.0 + BN_EPSILON).sqrt();
        assert!((y.data()[0] - 1.0 / s).abs() < 1e-12);
        assert!((y.data()[1] - 3.0 / s).abs() < 1e-12);
        assert_eq!(st.running_mean, vec![1.0]);
    }

    #[test]
    fn batchnorm_training_needs_two_values() {
        let x = var(&[1, 1, 1, 1], vec![2.0]);
        let mut st = BatchNormState::new(1);
        assert!(batchnorm(&x, &var(&[1], vec![1.0]), &var(&[1], vec![0.0]), &mut st).is_err());
    }
}
