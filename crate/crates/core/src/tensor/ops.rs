//! Element-wise arithmetic, reductions, reshaping and loss primitives.

use super::autograd::Var;
use super::{Real, Result, Tensor, TensorError, DIV_FLOOR};

/// Right-hand operand layout accepted by the binary operations.
#[derive(Clone, Copy)]
enum Rhs {
    Same,
    Scalar,
}

fn rhs_layout<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Rhs> {
    if a.shape() == b.shape() {
        Ok(Rhs::Same)
    } else if b.len() == 1 {
        Ok(Rhs::Scalar)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        })
    }
}

#[inline]
fn pick<T: Real>(b: &[T], layout: Rhs, i: usize) -> T {
    match layout {
        Rhs::Same => b[i],
        Rhs::Scalar => b[0],
    }
}

fn reduce_to<T: Real>(g: Vec<T>, layout: Rhs) -> Vec<T> {
    match layout {
        Rhs::Same => g,
        Rhs::Scalar => vec![g.into_iter().sum()],
    }
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let layout = rhs_layout("add", a.value(), b.value())?;
    let bd = b.data();
    let out = Tensor::from_fn(a.shape(), |i| a.data()[i] + pick(bd, layout, i));
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| vec![Some(g.to_vec()), Some(reduce_to(g.to_vec(), layout))]),
    ))
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let layout = rhs_layout("sub", a.value(), b.value())?;
    let bd = b.data();
    let out = Tensor::from_fn(a.shape(), |i| a.data()[i] - pick(bd, layout, i));
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let neg = g.iter().map(|&v| -v).collect();
            vec![Some(g.to_vec()), Some(reduce_to(neg, layout))]
        }),
    ))
}

pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let layout = rhs_layout("mul", a.value(), b.value())?;
    let bd = b.data();
    let out = Tensor::from_fn(a.shape(), |i| a.data()[i] * pick(bd, layout, i));
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let (ad, bd) = (p[0].data(), p[1].data());
            let ga = p[0]
                .requires_grad()
                .then(|| g.iter().enumerate().map(|(i, &gi)| gi * pick(bd, layout, i)).collect());
            let gb = p[1]
                .requires_grad()
                .then(|| reduce_to(g.iter().zip(ad).map(|(&gi, &ai)| gi * ai).collect(), layout));
            vec![ga, gb]
        }),
    ))
}

/// Denominator after the magnitude floor; the second value is `false` where
/// the floor was applied.
#[inline]
fn floored<T: Real>(d: T) -> (T, bool) {
    let floor = T::from_f64(DIV_FLOOR);
    if d.abs() >= floor {
        (d, true)
    } else if d < T::ZERO {
        (-floor, false)
    } else {
        (floor, false)
    }
}

/// Element-wise `a / b` with `|b|` clamped to at least [`DIV_FLOOR`].
/// Clamped denominators pass no gradient.
pub fn div<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let layout = rhs_layout("div", a.value(), b.value())?;
    let bd = b.data();
    let mut clamped = 0usize;
    let out = Tensor::from_fn(a.shape(), |i| {
        let (d, ok) = floored(pick(bd, layout, i));
        clamped += usize::from(!ok);
        a.data()[i] / d
    });
    if clamped > 0 {
        log::debug!("div: {clamped} denominators clamped to {DIV_FLOOR}");
    }
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let (ad, bd) = (p[0].data(), p[1].data());
            let ga = p[0].requires_grad().then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| gi / floored(pick(bd, layout, i)).0)
                    .collect()
            });
            let gb = p[1].requires_grad().then(|| {
                let raw = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let (d, ok) = floored(pick(bd, layout, i));
                        if ok {
                            -gi * ad[i] / (d * d)
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                reduce_to(raw, layout)
            });
            vec![ga, gb]
        }),
    ))
}

pub fn scale<T: Real>(a: &Var<T>, s: f64) -> Var<T> {
    let s = T::from_f64(s);
    Var::from_op(
        a.value().map(|v| v * s),
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
    )
}

pub fn add_scalar<T: Real>(a: &Var<T>, s: f64) -> Var<T> {
    let s = T::from_f64(s);
    Var::from_op(
        a.value().map(|v| v + s),
        vec![a.clone()],
        Box::new(|g, _| vec![Some(g.to_vec())]),
    )
}

/// Clamps to `[0, 1]`; gradient is zero outside the open interval.
pub fn clip01<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(|v| v.max(T::ZERO).min(T::ONE)),
        vec![a.clone()],
        Box::new(|g, p| {
            let x = p[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::ZERO && xi < T::ONE { gi } else { T::ZERO })
                    .collect(),
            )]
        }),
    )
}

/// `max(x, 0)`, with subgradient 0 at the origin.
pub fn relu<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(|v| v.max(T::ZERO)),
        vec![a.clone()],
        Box::new(|g, p| {
            let x = p[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::ZERO { gi } else { T::ZERO })
                    .collect(),
            )]
        }),
    )
}

#[inline]
fn softplus_scalar<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn softplus<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(softplus_scalar),
        vec![a.clone()],
        Box::new(|g, p| {
            let x = p[0].data();
            vec![Some(g.iter().zip(x).map(|(&gi, &xi)| gi * sigmoid(xi)).collect())]
        }),
    )
}

pub fn sum<T: Real>(a: &Var<T>) -> Var<T> {
    let n = a.value().len();
    Var::from_op(
        Tensor::scalar(a.value().sum()),
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean<T: Real>(a: &Var<T>) -> Var<T> {
    let n = a.value().len();
    scale(&sum(a), 1.0 / n as f64)
}

/// Mask weight of flat element `i` of an NCHW tensor `shape`, with `mask`
/// shaped either like the tensor or `[N, 1, H, W]`.
fn mask_lookup<'m, T: Real>(shape: &[usize], mask: &'m Tensor<T>) -> Result<impl Fn(usize) -> T + 'm> {
    let per_channel = if mask.shape() == shape {
        false
    } else if shape.len() == 4 && mask.shape() == [shape[0], 1, shape[2], shape[3]] {
        true
    } else {
        return Err(TensorError::ShapeMismatch {
            op: "mask",
            expected: shape.to_vec(),
            got: mask.shape().to_vec(),
        });
    };
    let (c, hw) = if shape.len() == 4 {
        (shape[1], shape[2] * shape[3])
    } else {
        (1, 1)
    };
    let md = mask.data();
    Ok(move |i: usize| {
        if per_channel {
            let n = i / (c * hw);
            md[n * hw + i % hw]
        } else {
            md[i]
        }
    })
}

/// Masked mean of squared differences: `Σ m·(a−b)² / Σ m`, where the mask
/// may be per-element or shared across channels (`[N, 1, H, W]`).
pub fn l2_loss<T: Real>(a: &Var<T>, b: &Var<T>, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
    a.value().expect_shape("l2_loss", b.shape())?;
    let n = a.value().len();
    let weights: Vec<T> = match mask {
        Some(m) => {
            let look = mask_lookup(a.shape(), m)?;
            (0..n).map(look).collect()
        }
        None => vec![T::ONE; n],
    };
    let count: T = weights.iter().copied().sum();
    if count <= T::ZERO {
        return Err(TensorError::Invalid {
            op: "l2_loss",
            msg: "mask selects no elements".into(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let total: T = (0..n)
        .map(|i| {
            let d = ad[i] - bd[i];
            weights[i] * d * d
        })
        .sum();
    Ok(Var::from_op(
        Tensor::scalar(total / count),
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let (ad, bd) = (p[0].data(), p[1].data());
            let k = T::from_f64(2.0) * g[0] / count;
            let ga: Vec<T> = (0..ad.len()).map(|i| k * weights[i] * (ad[i] - bd[i])).collect();
            let gb = p[1].requires_grad().then(|| ga.iter().map(|&v| -v).collect());
            vec![Some(ga), gb]
        }),
    ))
}

/// Masked mean square of `a`, i.e. [`l2_loss`] against zero.
pub fn mean_square<T: Real>(a: &Var<T>, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
    let zeros = Var::constant(Tensor::zeros(a.shape()));
    l2_loss(a, &zeros, mask)
}

/// Samples `[start, start+len)` of the leading axis.
pub fn slice_batch<T: Real>(a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
    let out = a.value().slice_batch(start, len)?;
    let total = a.value().len();
    let per: usize = a.shape()[1..].iter().product();
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut full = vec![T::ZERO; total];
            full[start * per..(start + len) * per].copy_from_slice(g);
            vec![Some(full)]
        }),
    ))
}

/// Stacks NCHW tensors along the batch axis.
pub fn stack_batch<T: Real>(parts: &[Var<T>]) -> Result<Var<T>> {
    let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
    let out = Tensor::stack_batch(&values)?;
    let sizes: Vec<usize> = parts.iter().map(|p| p.value().len()).collect();
    Ok(Var::from_op(
        out,
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g[offset..offset + s].to_vec();
                    offset += s;
                    Some(part)
                })
                .collect()
        }),
    ))
}

/// Concatenates two NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (n, ca, h, w) = a.value().dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.value().dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            expected: vec![n, cb, h, w],
            got: b.shape().to_vec(),
        });
    }
    let hw = h * w;
    let (sa, sb) = (ca * hw, cb * hw);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    let out = Tensor::new(&[n, ca + cb, h, w], out)?;
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let mut ga = Vec::with_capacity(n * sa);
            let mut gb = Vec::with_capacity(n * sb);
            for i in 0..n {
                let base = i * (sa + sb);
                ga.extend_from_slice(&g[base..base + sa]);
                gb.extend_from_slice(&g[base + sa..base + sa + sb]);
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Channels `[start, start+len)` of an NCHW tensor.
pub fn slice_channels<T: Real>(a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
    let (n, c, h, w) = a.value().dims4("slice_channels")?;
    if start + len > c {
        return Err(TensorError::Invalid {
            op: "slice_channels",
            msg: format!("channels {start}..{} out of {c}", start + len),
        });
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for i in 0..n {
        let base = (i * c + start) * hw;
        out.extend_from_slice(&a.data()[base..base + len * hw]);
    }
    let out = Tensor::new(&[n, len, h, w], out)?;
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut full = vec![T::ZERO; n * c * hw];
            for i in 0..n {
                let dst = (i * c + start) * hw;
                let src = i * len * hw;
                full[dst..dst + len * hw].copy_from_slice(&g[src..src + len * hw]);
            }
            vec![Some(full)]
        }),
    ))
}

/// Spatial axis of an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along width: `x[.., y, x+1] − x[.., y, x]`, output width `W − 1`.
    Horizontal,
    /// Along height: `x[.., y+1, x] − x[.., y, x]`, output height `H − 1`.
    Vertical,
}

/// Forward differences without wraparound.
pub fn forward_diff<T: Real>(a: &Var<T>, axis: Axis) -> Result<Var<T>> {
    let out = diff_tensor(a.value(), axis)?;
    let (n, c, h, w) = a.value().dims4("forward_diff")?;
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut full = vec![T::ZERO; n * c * h * w];
            let (oh, ow) = match axis {
                Axis::Horizontal => (h, w - 1),
                Axis::Vertical => (h - 1, w),
            };
            for plane in 0..n * c {
                for y in 0..oh {
                    for x in 0..ow {
                        let gi = g[(plane * oh + y) * ow + x];
                        let lo = (plane * h + y) * w + x;
                        let hi = match axis {
                            Axis::Horizontal => lo + 1,
                            Axis::Vertical => lo + w,
                        };
                        full[hi] += gi;
                        full[lo] -= gi;
                    }
                }
            }
            vec![Some(full)]
        }),
    ))
}

/// Forward differences of a plain tensor (see [`forward_diff`]).
pub fn diff_tensor<T: Real>(t: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4("forward_diff")?;
    let (oh, ow) = match axis {
        Axis::Horizontal => (h, w.saturating_sub(1)),
        Axis::Vertical => (h.saturating_sub(1), w),
    };
    if oh == 0 || ow == 0 {
        return Err(TensorError::Invalid {
            op: "forward_diff",
            msg: format!("spatial size {h}x{w} too small for differences"),
        });
    }
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let lo = (plane * h + y) * w + x;
                let hi = match axis {
                    Axis::Horizontal => lo + 1,
                    Axis::Vertical => lo + w,
                };
                out.push(d[hi] - d[lo]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Validity of each forward difference: both endpoints valid.
pub fn diff_mask<T: Real>(mask: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4("diff_mask")?;
    let d = mask.data();
    let (oh, ow) = match axis {
        Axis::Horizontal => (h, w - 1),
        Axis::Vertical => (h - 1, w),
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let lo = (plane * h + y) * w + x;
                let hi = match axis {
                    Axis::Horizontal => lo + 1,
                    Axis::Vertical => lo + w,
                };
                out.push(d[lo] * d[hi]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}
