//! Unsupervised siamese loss terms.
//!
//! Every term is a masked mean square; the mask is `[N, 1, H, W]` and is
//! shared by all channels. Spatial gradients are forward differences whose
//! two endpoints must both be valid.

use serde::{Deserialize, Serialize};

use crate::color::rgb_to_lab;
use crate::tensor::ops::{self, Axis};
use crate::tensor::{Real, Result, Tensor, TensorError, Var};

/// Form of the albedo consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlbedoLossForm {
    /// `‖A_i − A_j‖²`
    #[default]
    Direct,
    /// `‖I_i − A_j S_i‖² + ‖I_j − A_i S_j‖²`
    CrossProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kappa: f64,
    pub lambda: f64,
    pub mu_start: f64,
    pub mu_end: f64,
    pub mu_anneal_fraction: f64,
    pub nu: f64,
    pub albedo_loss_form: AlbedoLossForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kappa: 75.0,
            lambda: 0.5,
            mu_start: 1.0,
            mu_end: 0.01,
            mu_anneal_fraction: 0.5,
            nu: 100.0,
            albedo_loss_form: AlbedoLossForm::Direct,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let named = [
            ("kappa", self.kappa),
            ("lambda", self.lambda),
            ("mu_start", self.mu_start),
            ("mu_end", self.mu_end),
            ("nu", self.nu),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.mu_start < self.mu_end {
            return Err(format!(
                "mu_start ({}) must not be below mu_end ({})",
                self.mu_start, self.mu_end
            ));
        }
        if !(self.mu_anneal_fraction > 0.0 && self.mu_anneal_fraction <= 1.0) {
            return Err(format!(
                "mu_anneal_fraction must lie in (0, 1], got {}",
                self.mu_anneal_fraction
            ));
        }
        Ok(())
    }
}

/// Sequence and frame index of both members of each pair in a batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pairing {
    /// `(sequence, frame)` of the first image of each pair.
    pub first: Vec<(usize, usize)>,
    /// `(sequence, frame)` of the second image of each pair.
    pub second: Vec<(usize, usize)>,
}

impl Pairing {
    fn check_sequences(&self) -> Result<()> {
        if self.first.len() != self.second.len() {
            return Err(TensorError::Invalid {
                op: "pairing",
                msg: format!("{} first vs {} second images", self.first.len(), self.second.len()),
            });
        }
        for (k, (a, b)) in self.first.iter().zip(&self.second).enumerate() {
            if a.0 != b.0 {
                return Err(TensorError::Invalid {
                    op: "pairing",
                    msg: format!("pair {k} mixes sequences {} and {}", a.0, b.0),
                });
            }
        }
        Ok(())
    }

    fn check_distinct(&self) -> Result<()> {
        self.check_sequences()?;
        for (k, (a, b)) in self.first.iter().zip(&self.second).enumerate() {
            if a.1 == b.1 {
                return Err(TensorError::Invalid {
                    op: "loss_init",
                    msg: format!("pair {k} uses frame {} twice", a.1),
                });
            }
        }
        Ok(())
    }
}

/// Masked mean square of `x`; zero when the mask selects nothing.
fn masked_ms<T: Real>(x: &Var<T>, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
    if let Some(m) = mask {
        if m.sum() <= T::ZERO {
            return Ok(Var::constant(Tensor::scalar(T::ZERO)));
        }
    }
    ops::mean_square(x, mask)
}

/// Sum of the masked mean squares of both forward differences.
fn gradient_energy<T: Real>(x: &Var<T>, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
    let mut terms = Vec::with_capacity(2);
    for axis in [Axis::Horizontal, Axis::Vertical] {
        let d = ops::forward_diff(x, axis)?;
        let m = mask.map(|m| ops::diff_mask(m, axis)).transpose()?;
        terms.push(masked_ms(&d, m.as_ref())?);
    }
    ops::add(&terms[0], &terms[1])
}

/// One image set of a siamese batch: inputs and the network outputs for them.
pub struct Side<'a, T: Real> {
    pub image: &'a Var<T>,
    pub albedo: &'a Var<T>,
    pub shading: &'a Var<T>,
}

pub fn loss_albedo<T: Real>(
    i: &Side<T>,
    j: &Side<T>,
    form: AlbedoLossForm,
    mask: Option<&Tensor<T>>,
    pairing: &Pairing,
) -> Result<Var<T>> {
    pairing.check_sequences()?;
    match form {
        AlbedoLossForm::Direct => masked_ms(&ops::sub(i.albedo, j.albedo)?, mask),
        AlbedoLossForm::CrossProduct => {
            let ij = ops::sub(i.image, &ops::mul(j.albedo, i.shading)?)?;
            let ji = ops::sub(j.image, &ops::mul(i.albedo, j.shading)?)?;
            ops::add(&masked_ms(&ij, mask)?, &masked_ms(&ji, mask)?)
        }
    }
}

/// `κ · ms(∇ab(Lab(S)))`
pub fn loss_chroma_smooth<T: Real>(shading: &Var<T>, kappa: f64, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
    let lab = rgb_to_lab(shading)?;
    let ab = ops::slice_channels(&lab, 1, 2)?;
    Ok(ops::scale(&gradient_energy(&ab, mask)?, kappa))
}

/// `λ · ms(∇S)` over all three channels.
pub fn loss_shading_smooth<T: Real>(shading: &Var<T>, lambda: f64, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
    Ok(ops::scale(&gradient_energy(shading, mask)?, lambda))
}

/// `μ · ms(I_j − A_i)`; both images of every pair must be distinct frames.
pub fn loss_init<T: Real>(
    albedo_i: &Var<T>,
    image_j: &Var<T>,
    mu: f64,
    mask: Option<&Tensor<T>>,
    pairing: &Pairing,
) -> Result<Var<T>> {
    pairing.check_distinct()?;
    Ok(ops::scale(&masked_ms(&ops::sub(image_j, albedo_i)?, mask)?, mu))
}

/// `ν · ms(I − A·S)`
pub fn loss_reconstruction<T: Real>(side: &Side<T>, nu: f64, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
    let recon = ops::mul(side.albedo, side.shading)?;
    Ok(ops::scale(&masked_ms(&ops::sub(side.image, &recon)?, mask)?, nu))
}

/// Per-term values of one evaluation of [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub albedo: f64,
    pub chroma: f64,
    pub smooth: f64,
    pub init: f64,
    pub recon: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.albedo + self.chroma + self.smooth + self.init + self.recon
    }

    pub fn all_finite(&self) -> bool {
        [self.albedo, self.chroma, self.smooth, self.init, self.recon]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_a={} L_c={} L_smooth={} L_i={} L_r={}",
            self.albedo, self.chroma, self.smooth, self.init, self.recon
        )
    }
}

/// Joint siamese loss over a batch of pairs.
///
/// The smoothness, init and reconstruction terms are averaged over both
/// sides; the init term pairs each albedo with the other image of its pair.
pub fn total_loss<T: Real>(
    i: &Side<T>,
    j: &Side<T>,
    mask: Option<&Tensor<T>>,
    pairing: &Pairing,
    weights: &LossWeights,
    mu: f64,
) -> Result<(Var<T>, LossTerms)> {
    let both =
        |f: &dyn Fn(&Side<T>) -> Result<Var<T>>| -> Result<Var<T>> { Ok(ops::scale(&ops::add(&f(i)?, &f(j)?)?, 0.5)) };
    let la = loss_albedo(i, j, weights.albedo_loss_form, mask, pairing)?;
    let lc = both(&|s| loss_chroma_smooth(s.shading, weights.kappa, mask))?;
    let ls = both(&|s| loss_shading_smooth(s.shading, weights.lambda, mask))?;
    let li = ops::scale(
        &ops::add(
            &loss_init(i.albedo, j.image, mu, mask, pairing)?,
            &loss_init(j.albedo, i.image, mu, mask, pairing)?,
        )?,
        0.5,
    );
    let lr = both(&|s| loss_reconstruction(s, weights.nu, mask))?;
    let terms = LossTerms {
        albedo: la.value().item().to_f64(),
        chroma: lc.value().item().to_f64(),
        smooth: ls.value().item().to_f64(),
        init: li.value().item().to_f64(),
        recon: lr.value().item().to_f64(),
    };
    let mut total = la;
    for t in [lc, ls, li, lr] {
        total = ops::add(&total, &t)?;
    }
    Ok((total, terms))
}
