//! Training objectives: reconstruction fidelity, the adversarial pair, the
//! swap-distortion term, and their weighted combination. All losses are
//! scalar tensors wired into the autodiff graph; probabilities are clamped
//! away from {0, 1} before any logarithm.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Reduce, Tensor};
use serde::{Deserialize, Serialize};

const PROB_FLOOR: f64 = 1e-7;

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_swap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 5.0,
            lambda_adv: 0.05,
            lambda_swap: 1.0,
        }
    }
}

/// Scalar values of one optimization step's loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub adv: f64,
    pub swap: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the parts with `w` and compares against the optimized
    /// total; the two must agree to within `tol`.
    pub fn consistent(&self, w: &LossWeights, tol: f64) -> bool {
        let recombined = w.lambda_rec * self.rec + w.lambda_adv * self.adv + w.lambda_swap * self.swap;
        (recombined - self.total).abs() <= tol
    }
}

/// Root-mean-square difference between the protected image and its original.
pub fn rec_loss<S: Scalar>(x_tilde: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(x_tilde.sub(x)?.reduce(Reduce::L2Norm))
}

fn clamped_ln<S: Scalar>(p: &Tensor<S>) -> Tensor<S> {
    p.clamp(S::lit(PROB_FLOOR), S::lit(1.0 - PROB_FLOOR)).ln()
}

/// Non-saturating generator objective: −mean log D(x̃). Low when the
/// discriminator believes the protected images are unperturbed.
pub fn adv_loss_generator<S: Scalar>(prob_fake: &Tensor<S>) -> Tensor<S> {
    clamped_ln(prob_fake).reduce(Reduce::Mean).neg()
}

/// Discriminator objective: −mean log D(x) − mean log(1 − D(x̃)). The caller
/// detaches the protected images before scoring them so this term reaches
/// only discriminator parameters.
pub fn adv_loss_discriminator<S: Scalar>(
    prob_real: &Tensor<S>,
    prob_fake: &Tensor<S>,
) -> Tensor<S> {
    let real_term = clamped_ln(prob_real).reduce(Reduce::Mean).neg();
    let fake_term = clamped_ln(&prob_fake.affine(-S::one(), S::one()))
        .reduce(Reduce::Mean)
        .neg();
    real_term.add(&fake_term).expect("scalar add")
}

/// Negated mean absolute difference between the swap of a protected image
/// and the clean swap: minimizing drives the two apart.
pub fn swap_loss<S: Scalar>(y_tilde: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(y_tilde.sub(y)?.reduce(Reduce::L1Norm).neg())
}

/// λ_rec·rec + λ_adv·adv + λ_swap·swap as one scalar graph node.
pub fn total_loss<S: Scalar>(
    rec: &Tensor<S>,
    adv: &Tensor<S>,
    swap: &Tensor<S>,
    w: &LossWeights,
) -> Result<Tensor<S>> {
    let zero = S::zero();
    rec.affine(S::lit(w.lambda_rec), zero)
        .add(&adv.affine(S::lit(w.lambda_adv), zero))?
        .add(&swap.affine(S::lit(w.lambda_swap), zero))
}

/// Scalar snapshot of all four loss values.
pub fn breakdown<S: Scalar>(
    rec: &Tensor<S>,
    adv: &Tensor<S>,
    swap: &Tensor<S>,
    total: &Tensor<S>,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        rec: rec.item()?.to_f64x(),
        adv: adv.item()?.to_f64x(),
        swap: swap.item()?.to_f64x(),
        total: total.item()?.to_f64x(),
    })
}
