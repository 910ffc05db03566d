//! Same-padded 2-D convolution via im2col and GEMM.

use super::autograd::Var;
use super::{Real, Result, Tensor, TensorError};

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl ConvGeom {
    fn check<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = input.dims4("conv2d")?;
        let (o, kc, kh, kw) = kernels.dims4("conv2d")?;
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![o, c, kh, kw],
                got: kernels.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel must be square with odd side, got {kh}x{kw}"),
            });
        }
        if bias.shape() != [o] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![o],
                got: bias.shape().to_vec(),
            });
        }
        Ok(Self { n, c, h, w, o, k: kh })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds one CHW image into a `[C·K·K, H·W]` column matrix with zero fill.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c as isize * k + ky) * k + kx) as usize;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx - pad;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                for y in 0..h {
                    let iy = y + ky - pad;
                    let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if iy < 0 || iy >= h || x_lo >= x_hi {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    out_row[..x_lo].fill(T::ZERO);
                    out_row[x_hi..].fill(T::ZERO);
                    let src = (iy * w) as usize;
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&plane[src + s0..src + s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c as isize * k + ky) * k + kx) as usize;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx - pad;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y + ky - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let s = &src[(y * w) as usize + x_lo..(y * w) as usize + x_hi];
                    let base = (iy * w) as usize + (x_lo as isize + dx) as usize;
                    for (d, &v) in plane[base..base + (x_hi - x_lo)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Shared GEMM path: `out_n = W · X_n + b`, where `X_n` is `[rows, H·W]`
/// for each sample (the im2col matrix, or the raw image for 1×1 kernels).
fn linear_forward<T: Real>(weights: &[T], bias: &[T], xs: &[T], n: usize, o: usize, rows: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * o * hw];
    for s in 0..n {
        let dst = &mut out[s * o * hw..(s + 1) * o * hw];
        for (oc, &b) in bias.iter().enumerate() {
            dst[oc * hw..(oc + 1) * hw].fill(b);
        }
        let x = &xs[s * rows * hw..(s + 1) * rows * hw];
        T::gemm(
            o,
            rows,
            hw,
            T::ONE,
            weights,
            rows as isize,
            1,
            x,
            hw as isize,
            1,
            T::ONE,
            dst,
            hw as isize,
            1,
        );
    }
    out
}

/// Returns `(dW, db, dX)` for [`linear_forward`]; `dX` only when requested.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    grad: &[T],
    weights: &[T],
    xs: &[T],
    n: usize,
    o: usize,
    rows: usize,
    hw: usize,
    want_dx: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dw = vec![T::ZERO; o * rows];
    let mut db = vec![T::ZERO; o];
    let mut dx = want_dx.then(|| vec![T::ZERO; n * rows * hw]);
    for s in 0..n {
        let g = &grad[s * o * hw..(s + 1) * o * hw];
        for (oc, acc) in db.iter_mut().enumerate() {
            *acc += g[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
        }
        let x = &xs[s * rows * hw..(s + 1) * rows * hw];
        // dW += G · Xᵀ
        T::gemm(
            o,
            hw,
            rows,
            T::ONE,
            g,
            hw as isize,
            1,
            x,
            1,
            hw as isize,
            T::ONE,
            &mut dw,
            rows as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dX = Wᵀ · G
            let dst = &mut dx[s * rows * hw..(s + 1) * rows * hw];
            T::gemm(
                rows,
                o,
                hw,
                T::ONE,
                weights,
                1,
                rows as isize,
                g,
                hw as isize,
                1,
                T::ZERO,
                dst,
                hw as isize,
                1,
            );
        }
    }
    (dw, db, dx)
}

/// Same-padded (zero fill) 2-D convolution. `input` is NCHW, `kernels` is
/// `[O, C, K, K]` with odd `K`, `bias` is `[O]`.
pub fn conv2d<T: Real>(input: &Var<T>, kernels: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let g = ConvGeom::check(input.value(), kernels.value(), bias.value())?;
    if g.k == 1 {
        return conv1x1(input, kernels, bias);
    }
    let (hw, ckk) = (g.hw(), g.ckk());
    let img_len = g.c * hw;
    let mut cols = vec![T::ZERO; g.n * ckk * hw];
    for s in 0..g.n {
        im2col(
            &input.data()[s * img_len..(s + 1) * img_len],
            &g,
            &mut cols[s * ckk * hw..(s + 1) * ckk * hw],
        );
    }
    let out = linear_forward(kernels.data(), bias.data(), &cols, g.n, g.o, ckk, hw);
    let out = Tensor::new(&[g.n, g.o, g.h, g.w], out)?;
    Ok(Var::from_op(
        out,
        vec![input.clone(), kernels.clone(), bias.clone()],
        Box::new(move |grad, p| {
            let want_dx = p[0].requires_grad();
            let (dw, db, dcols) = linear_backward(grad, p[1].data(), &cols, g.n, g.o, ckk, hw, want_dx);
            let dx = dcols.map(|dcols| {
                let mut dx = vec![T::ZERO; g.n * img_len];
                for s in 0..g.n {
                    col2im(
                        &dcols[s * ckk * hw..(s + 1) * ckk * hw],
                        &g,
                        &mut dx[s * img_len..(s + 1) * img_len],
                    );
                }
                dx
            });
            vec![dx, Some(dw), Some(db)]
        }),
    ))
}

/// Per-pixel linear map over channels: `kernels` is `[O, C, 1, 1]`.
pub fn conv1x1<T: Real>(input: &Var<T>, kernels: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let g = ConvGeom::check(input.value(), kernels.value(), bias.value())?;
    if g.k != 1 {
        return Err(TensorError::Invalid {
            op: "conv1x1",
            msg: format!("kernel must be 1x1, got {0}x{0}", g.k),
        });
    }
    let hw = g.hw();
    let out = linear_forward(kernels.data(), bias.data(), input.data(), g.n, g.o, g.c, hw);
    let out = Tensor::new(&[g.n, g.o, g.h, g.w], out)?;
    Ok(Var::from_op(
        out,
        vec![input.clone(), kernels.clone(), bias.clone()],
        Box::new(move |grad, p| {
            let want_dx = p[0].requires_grad();
            let (dw, db, dx) = linear_backward(grad, p[1].data(), p[0].data(), g.n, g.o, g.c, hw, want_dx);
            vec![dx, Some(dw), Some(db)]
        }),
    ))
}
