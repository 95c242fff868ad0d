//! Perturbation removal: predicts the reverse noise and the mask from the
//! adversarial segment alone and restores `x_hat = x' + eps * (n' * m')`.

use crate::audio::{reassemble, segment, Waveform};
use crate::error::{Error, Result};
use crate::generator::{add_clamped, check_epsilon};
use crate::network::{NetConfig, NoiseMaskNet};

/// Relative tolerance when comparing a caller's intensity to the trained one.
const EPSILON_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ReversePerturbationParts {
    pub reverse_noise: Vec<f64>,
    pub predicted_mask: Vec<f64>,
    /// `epsilon * reverse_noise * predicted_mask`.
    pub reverse_perturbation: Vec<f64>,
}

impl ReversePerturbationParts {
    pub fn compose(reverse_noise: Vec<f64>, predicted_mask: Vec<f64>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if reverse_noise.len() != predicted_mask.len() {
            return Err(Error::LengthMismatch {
                expected: reverse_noise.len(),
                actual: predicted_mask.len(),
            });
        }
        let reverse_perturbation = reverse_noise
            .iter()
            .zip(&predicted_mask)
            .map(|(n, m)| epsilon * (n * m))
            .collect();
        Ok(Self {
            reverse_noise,
            predicted_mask,
            reverse_perturbation,
        })
    }
}

/// Applies a reverse perturbation and clamps to [-1, 1].
pub fn apply_reverse(x_adv: &[f64], parts: &ReversePerturbationParts) -> (Vec<f64>, usize) {
    add_clamped(x_adv, &parts.reverse_perturbation)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationRemover {
    net: NoiseMaskNet,
    epsilon: f64,
}

impl PerturbationRemover {
    pub fn new(config: NetConfig, epsilon: f64, seed: u64) -> Result<Self> {
        Self::from_net(NoiseMaskNet::new(config, seed)?, epsilon)
    }

    pub fn from_net(net: NoiseMaskNet, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { net, epsilon })
    }

    pub fn net(&self) -> &NoiseMaskNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut NoiseMaskNet {
        &mut self.net
    }

    /// Intensity the remover was trained with.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seg_len(&self) -> usize {
        self.net.config().seg_len
    }

    pub fn check_epsilon(&self, requested: f64) -> Result<()> {
        if (requested - self.epsilon).abs() > EPSILON_TOLERANCE * self.epsilon.abs() {
            return Err(Error::EpsilonMismatch {
                checkpoint: self.epsilon,
                requested,
            });
        }
        Ok(())
    }

    pub fn predict_reverse(&self, x_adv: &[f64]) -> Result<ReversePerturbationParts> {
        let trace = self.net.forward(x_adv)?;
        ReversePerturbationParts::compose(trace.noise().to_vec(), trace.mask().to_vec(), self.epsilon)
    }

    pub fn restore(&self, x_adv: &[f64], epsilon: f64) -> Result<Vec<f64>> {
        self.check_epsilon(epsilon)?;
        let parts = self.predict_reverse(x_adv)?;
        Ok(apply_reverse(x_adv, &parts).0)
    }

    /// Restores a whole utterance with the same segmentation used for protection.
    pub fn restore_waveform(&self, w: &Waveform, epsilon: f64) -> Result<Waveform> {
        self.check_epsilon(epsilon)?;
        let mut out = Vec::new();
        for mut seg in segment(&w.samples, self.seg_len())? {
            seg.samples = self.restore(&seg.samples, epsilon)?;
            out.push(seg);
        }
        Ok(w.with_samples(reassemble(&out)))
    }
}
