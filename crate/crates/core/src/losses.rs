//! Training objectives for joint perturbation generation and removal.
//!
//! Each loss is a pure scalar function; the `*_grad` companions return the
//! analytic gradients used by the trainer. Norms are plain Euclidean norms
//! over the whole segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the combined objective plus the attack intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct LossWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
    theta: f64,
    epsilon: f64,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
    theta: f64,
    epsilon: f64,
}

impl Default for RawWeights {
    fn default() -> Self {
        LossWeights::default().into()
    }
}

impl TryFrom<RawWeights> for LossWeights {
    type Error = Error;
    fn try_from(r: RawWeights) -> Result<Self> {
        LossWeights::new(r.alpha, r.beta, r.gamma, r.theta, r.epsilon)
    }
}

impl From<LossWeights> for RawWeights {
    fn from(w: LossWeights) -> Self {
        RawWeights {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            theta: w.theta,
            epsilon: w.epsilon,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.007,
            gamma: 0.8,
            theta: 0.06,
            epsilon: 0.05,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, theta: f64, epsilon: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma), ("theta", theta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in the open interval (0, 1), got {v}"
                )));
            }
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            theta,
            epsilon,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of `‖v‖₂`; the zero subgradient at the origin.
fn l2_norm_grad(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity between the clean and adversarial embeddings.
pub fn angular_loss(z: &[f64], z_adv: &[f64]) -> Result<f64> {
    same_len(z, z_adv)?;
    let (sz, sa) = (dot(z, z), dot(z_adv, z_adv));
    if sz == 0.0 || sa == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(z, z_adv) / (sz * sa).sqrt()).clamp(-1.0, 1.0))
}

/// Gradient of [`angular_loss`] with respect to `z_adv`.
pub fn angular_loss_grad(z: &[f64], z_adv: &[f64]) -> Result<Vec<f64>> {
    same_len(z, z_adv)?;
    let (nz, na) = (l2_norm(z), l2_norm(z_adv));
    if nz == 0.0 || na == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = dot(z, z_adv) / (nz * na);
    Ok(z
        .iter()
        .zip(z_adv)
        .map(|(a, b)| a / (nz * na) - cos * b / (na * na))
        .collect())
}

/// `(1 - alpha) * ‖x' - x‖₂ + alpha * ‖m‖₂`.
pub fn quality_loss(x: &[f64], x_adv: &[f64], mask: &[f64], alpha: f64) -> Result<f64> {
    same_len(x, x_adv)?;
    same_len(x, mask)?;
    let diff: Vec<f64> = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok((1.0 - alpha) * l2_norm(&diff) + alpha * l2_norm(mask))
}

/// Gradients of [`quality_loss`] with respect to `x_adv` and `mask`.
pub fn quality_loss_grad(
    x: &[f64],
    x_adv: &[f64],
    mask: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    same_len(x, x_adv)?;
    same_len(x, mask)?;
    let diff: Vec<f64> = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
    let gx = l2_norm_grad(&diff)
        .into_iter()
        .map(|g| (1.0 - alpha) * g)
        .collect();
    let gm = l2_norm_grad(mask).into_iter().map(|g| alpha * g).collect();
    Ok((gx, gm))
}

/// `(1 - beta) * angular + beta * quality`.
pub fn ssed_loss(angular: f64, quality: f64, beta: f64) -> f64 {
    (1.0 - beta) * angular + beta * quality
}

/// `‖n + n'‖₂`: zero exactly when the reverse noise negates the noise.
pub fn noise_loss(noise: &[f64], reverse_noise: &[f64]) -> Result<f64> {
    same_len(noise, reverse_noise)?;
    let sum: Vec<f64> = noise.iter().zip(reverse_noise).map(|(a, b)| a + b).collect();
    Ok(l2_norm(&sum))
}

/// Gradient of [`noise_loss`]; identical for both arguments.
pub fn noise_loss_grad(noise: &[f64], reverse_noise: &[f64]) -> Result<Vec<f64>> {
    same_len(noise, reverse_noise)?;
    let sum: Vec<f64> = noise.iter().zip(reverse_noise).map(|(a, b)| a + b).collect();
    Ok(l2_norm_grad(&sum))
}

/// `‖m - m'‖₂`.
pub fn mask_loss(mask: &[f64], predicted_mask: &[f64]) -> Result<f64> {
    same_len(mask, predicted_mask)?;
    let diff: Vec<f64> = mask.iter().zip(predicted_mask).map(|(a, b)| a - b).collect();
    Ok(l2_norm(&diff))
}

/// Gradient of [`mask_loss`] with respect to `mask`; negate it for `predicted_mask`.
pub fn mask_loss_grad(mask: &[f64], predicted_mask: &[f64]) -> Result<Vec<f64>> {
    same_len(mask, predicted_mask)?;
    let diff: Vec<f64> = mask.iter().zip(predicted_mask).map(|(a, b)| a - b).collect();
    Ok(l2_norm_grad(&diff))
}

/// Reverse-perturbation loss: `(1 - gamma) * mask + gamma * noise`.
pub fn rpt_loss(mask: f64, noise: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * mask + gamma * noise
}

/// Joint objective: `(1 - theta) * ssed + theta * rpt`.
pub fn total_loss(ssed: f64, rpt: f64, theta: f64) -> f64 {
    (1.0 - theta) * ssed + theta * rpt
}

/// Every term of the joint objective for one segment (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub angular: f64,
    pub quality: f64,
    pub ssed: f64,
    pub noise: f64,
    pub mask: f64,
    pub rpt: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.angular,
            self.quality,
            self.ssed,
            self.noise,
            self.mask,
            self.rpt,
            self.total,
        ]
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for it in items {
            for (a, v) in acc.iter_mut().zip(it.as_array()) {
                *a += v;
            }
        }
        LossBreakdown {
            angular: acc[0] / n,
            quality: acc[1] / n,
            ssed: acc[2] / n,
            noise: acc[3] / n,
            mask: acc[4] / n,
            rpt: acc[5] / n,
            total: acc[6] / n,
        }
    }
}
