//! sRGB transfer curves, CIE-Lab conversion and the global Reinhard
//! photographic tone-mapping operator.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Result, Tensor, TensorError, Var};

/// Linear-RGB (sRGB primaries) to XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Luminance weights of linear sRGB (the Y row above).
pub const LUMA: [f64; 3] = [0.212_672_9, 0.715_152_2, 0.072_175_0];

const LAB_DELTA: f64 = 6.0 / 29.0;

/// D65 white in XYZ, taken as the image of RGB (1, 1, 1) so that the gray
/// axis maps to a = b = 0.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

#[inline]
pub fn srgb_to_linear_scalar(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
pub fn linear_to_srgb_scalar(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn clamp_unit<T: Real>(img: &Tensor<T>, op: &str) -> Tensor<T> {
    let outside = img.data().iter().filter(|&&v| !(T::ZERO..=T::ONE).contains(&v)).count();
    if outside > 0 {
        log::warn!("{op}: {outside} values outside [0, 1] clamped");
    }
    img.map(|v| v.max(T::ZERO).min(T::ONE))
}

/// sRGB-encoded values in `[0, 1]` to linear light.
pub fn srgb_to_linear<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    clamp_unit(img, "srgb_to_linear").map(|v| T::from_f64(srgb_to_linear_scalar(v.to_f64())))
}

/// Linear light in `[0, 1]` to sRGB encoding.
pub fn linear_to_srgb<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    clamp_unit(img, "linear_to_srgb").map(|v| T::from_f64(linear_to_srgb_scalar(v.to_f64())))
}

#[inline]
fn lab_f(t: f64) -> (f64, f64) {
    let d3 = LAB_DELTA * LAB_DELTA * LAB_DELTA;
    if t > d3 {
        let c = t.cbrt();
        (c, 1.0 / (3.0 * c * c))
    } else {
        let k = 1.0 / (3.0 * LAB_DELTA * LAB_DELTA);
        (t * k + 4.0 / 29.0, k)
    }
}

/// Lab value of one linear-RGB pixel, plus the 3×3 Jacobian
/// `d(L,a,b)/d(r,g,b)`.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let wp = white();
    let mut f = [0.0; 3];
    let mut df = [0.0; 3];
    let mut rows = [[0.0; 3]; 3];
    for i in 0..3 {
        let xyz: f64 = (0..3).map(|j| RGB_TO_XYZ[i][j] * rgb[j]).sum::<f64>() / wp[i];
        (f[i], df[i]) = lab_f(xyz);
        rows[i] = RGB_TO_XYZ[i].map(|m| m / wp[i]);
    }
    let lab = [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])];
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let dfx = df[0] * rows[0][j];
        let dfy = df[1] * rows[1][j];
        let dfz = df[2] * rows[2][j];
        jac[0][j] = 116.0 * dfy;
        jac[1][j] = 500.0 * (dfx - dfy);
        jac[2][j] = 200.0 * (dfy - dfz);
    }
    (lab, jac)
}

/// CIE-Lab (D65) of a linear-RGB NCHW tensor with three channels.
/// Luminance above the white point is admitted (L > 100).
pub fn rgb_to_lab<T: Real>(img: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = img.value().dims4("rgb_to_lab")?;
    if c != 3 {
        return Err(TensorError::Invalid {
            op: "rgb_to_lab",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let hw = h * w;
    let x = img.data();
    let mut out = vec![T::ZERO; x.len()];
    let mut jacs = Vec::with_capacity(n * hw);
    for s in 0..n {
        let base = s * 3 * hw;
        for p in 0..hw {
            let rgb = [0, 1, 2].map(|ch| x[base + ch * hw + p].to_f64());
            let (lab, jac) = rgb_to_lab_pixel(rgb);
            for ch in 0..3 {
                out[base + ch * hw + p] = T::from_f64(lab[ch]);
            }
            jacs.push(jac);
        }
    }
    let out = Tensor::new(img.shape(), out)?;
    Ok(Var::from_op(
        out,
        vec![img.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![T::ZERO; g.len()];
            for s in 0..n {
                let base = s * 3 * hw;
                for p in 0..hw {
                    let jac = &jacs[s * hw + p];
                    let go = [0, 1, 2].map(|ch| g[base + ch * hw + p].to_f64());
                    for j in 0..3 {
                        let v: f64 = (0..3).map(|i| jac[i][j] * go[i]).sum();
                        dx[base + j * hw + p] = T::from_f64(v);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Parameters of the global photographic operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneMapParams {
    /// Target middle-gray key, in `(0, 1]`.
    pub key: f64,
    /// Fraction in `[0, 1)` by which the white level is lowered below the
    /// brightest scaled luminance.
    pub burn: f64,
}

impl ToneMapParams {
    pub const KEY_RANGE: (f64, f64) = (0.1, 0.6);
    pub const BURN_RANGE: (f64, f64) = (0.0, 0.2);

    pub fn validate(&self) -> Result<()> {
        if !(self.key > 0.0 && self.key <= 1.0) || !(0.0..1.0).contains(&self.burn) {
            return Err(TensorError::Invalid {
                op: "reinhard_tonemap",
                msg: format!("key {} must lie in (0,1] and burn {} in [0,1)", self.key, self.burn),
            });
        }
        Ok(())
    }
}

fn luminances<T: Real>(hdr: &Tensor<T>) -> Result<(Vec<f64>, usize)> {
    let (c, h, w) = match hdr.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(TensorError::Rank {
                op: "reinhard_tonemap",
                expected: 3,
                got: s.to_vec(),
            })
        }
    };
    if c != 3 {
        return Err(TensorError::Invalid {
            op: "reinhard_tonemap",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let hw = h * w;
    let d = hdr.data();
    if d.iter().any(|&v| v < T::ZERO) {
        return Err(TensorError::Invalid {
            op: "reinhard_tonemap",
            msg: "HDR radiance must be non-negative".into(),
        });
    }
    let lum = (0..hw)
        .map(|p| (0..3).map(|ch| LUMA[ch] * d[ch * hw + p].to_f64()).sum())
        .collect();
    Ok((lum, hw))
}

/// Scaled luminance `L_m = key / L̄_log · L_w` of a `[3, H, W]` image, where
/// `L̄_log` is the log-average luminance over non-black pixels. `None` for an
/// all-black image.
pub fn scaled_luminance<T: Real>(hdr: &Tensor<T>, key: f64) -> Result<Option<Vec<f64>>> {
    let (lum, _) = luminances(hdr)?;
    let lit: Vec<f64> = lum.iter().copied().filter(|&l| l > 0.0).collect();
    if lit.is_empty() {
        return Ok(None);
    }
    let log_avg = (lit.iter().map(|l| l.ln()).sum::<f64>() / lit.len() as f64).exp();
    Ok(Some(lum.iter().map(|&l| key / log_avg * l).collect()))
}

/// Global Reinhard operator on a linear `[3, H, W]` image. Colors are scaled
/// by the per-pixel luminance ratio and clamped to `[0, 1]`.
pub fn reinhard_tonemap<T: Real>(hdr: &Tensor<T>, params: ToneMapParams) -> Result<Tensor<T>> {
    params.validate()?;
    let Some(scaled) = scaled_luminance(hdr, params.key)? else {
        return Ok(hdr.clone());
    };
    let (lum, hw) = luminances(hdr)?;
    let l_max = scaled.iter().copied().fold(0.0, f64::max);
    let white = (1.0 - params.burn) * l_max;
    let white2 = white * white;
    let ratio: Vec<f64> = scaled
        .iter()
        .zip(&lum)
        .map(|(&lm, &lw)| {
            if lw > 0.0 {
                let ld = lm * (1.0 + lm / white2) / (1.0 + lm);
                ld / lw
            } else {
                0.0
            }
        })
        .collect();
    let d = hdr.data();
    let out = Tensor::from_fn(hdr.shape(), |i| {
        let v = d[i].to_f64() * ratio[i % hw];
        T::from_f64(v.clamp(0.0, 1.0))
    });
    Ok(out)
}
