//! Central finite-difference checks of analytic gradients at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ops, Result, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this in norm are compared absolutely; true zeros
/// (a bias feeding a batchnorm) otherwise measure finite-difference noise.
pub const NORM_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(NORM_FLOOR)
}

/// Worst relative error over `inputs` between backpropagated gradients of
/// `Σ f(inputs) · r` (fixed random `r`) and central differences with step `h`.
pub fn check_gradients(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>) -> Result<f64> {
    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = f(&leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c4d);
    let proj = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
    let project = |v: &Var<f64>| -> Result<Var<f64>> { Ok(ops::sum(&ops::mul(v, &Var::constant(proj.clone()))?)) };
    project(&out)?.backward()?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = xs.iter().cloned().map(Var::constant).collect();
        Ok(project(&f(&vars)?)?.value().item())
    };
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..analytic.len() {
            let x0 = xs[k].data()[e];
            xs[k].data_mut()[e] = x0 + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[e] = x0 - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[e] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_fn(&[4], |i| i as f64 + 0.5);
        let good = check_gradients(std::slice::from_ref(&x), DEFAULT_STEP, |v| ops::mul(&v[0], &v[0])).unwrap();
        assert!(good < 1e-8);
        // Constant inputs get no gradient, so a detached square reads as all-zero.
        let bad = check_gradients(&[x], DEFAULT_STEP, |v| {
            let detached = Var::constant(v[0].value().clone());
            ops::mul(&detached, &v[0])
        })
        .unwrap();
        assert!(bad > 0.1);
    }
}
