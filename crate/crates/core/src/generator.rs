//! Speaker-adversarial perturbation generator.
//!
//! A segment `x` is encoded to a latent code, decoded into a bounded noise
//! vector `n` and a saliency mask `m`, and the adversarial segment is
//! `x' = x + eps * (n * m)`.

use crate::audio::{reassemble, segment, Waveform};
use crate::error::{Error, Result};
use crate::network::{LatentCode, NetConfig, NoiseMaskNet};

/// Attack intensity used throughout training and inference by default.
pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationParts {
    pub noise: Vec<f64>,
    pub mask: Vec<f64>,
    /// `epsilon * noise * mask`, elementwise.
    pub perturbation: Vec<f64>,
    pub epsilon: f64,
}

impl PerturbationParts {
    pub fn compose(noise: Vec<f64>, mask: Vec<f64>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if noise.len() != mask.len() {
            return Err(Error::LengthMismatch {
                expected: noise.len(),
                actual: mask.len(),
            });
        }
        let perturbation = noise
            .iter()
            .zip(&mask)
            .map(|(n, m)| epsilon * (n * m))
            .collect();
        Ok(Self {
            noise,
            mask,
            perturbation,
            epsilon,
        })
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "attack intensity must be positive and finite, got {epsilon}"
        )));
    }
    Ok(())
}

/// Adds a perturbation and clamps to [-1, 1]. Returns the clamp count.
pub fn add_clamped(x: &[f64], delta: &[f64]) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let out = x
        .iter()
        .zip(delta)
        .map(|(a, d)| {
            let v = a + d;
            if v.abs() > 1.0 {
                clamped += 1;
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    (out, clamped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub parts: PerturbationParts,
    pub adversarial: Vec<f64>,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationGenerator {
    net: NoiseMaskNet,
}

impl PerturbationGenerator {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            net: NoiseMaskNet::new(config, seed)?,
        })
    }

    pub fn from_net(net: NoiseMaskNet) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &NoiseMaskNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut NoiseMaskNet {
        &mut self.net
    }

    pub fn seg_len(&self) -> usize {
        self.net.config().seg_len
    }

    pub fn encode(&self, x: &[f64]) -> Result<LatentCode> {
        self.net.encode(x)
    }

    pub fn decode_noise(&self, y: &LatentCode) -> Result<Vec<f64>> {
        self.net.decode_noise(y)
    }

    pub fn decode_mask(&self, y: &LatentCode) -> Result<Vec<f64>> {
        self.net.decode_mask(y)
    }

    pub fn generate(&self, x: &[f64], epsilon: f64) -> Result<Generated> {
        check_epsilon(epsilon)?;
        let trace = self.net.forward(x)?;
        let parts = PerturbationParts::compose(trace.noise().to_vec(), trace.mask().to_vec(), epsilon)?;
        let (adversarial, clamped) = add_clamped(x, &parts.perturbation);
        Ok(Generated {
            parts,
            adversarial,
            clamped,
        })
    }

    /// Protects a whole utterance segment by segment. Returns the clamp count.
    pub fn protect(&self, w: &Waveform, epsilon: f64) -> Result<(Waveform, usize)> {
        let mut clamped = 0;
        let mut out = Vec::new();
        for mut seg in segment(&w.samples, self.seg_len())? {
            let g = self.generate(&seg.samples, epsilon)?;
            clamped += g.clamped;
            seg.samples = g.adversarial;
            out.push(seg);
        }
        Ok((w.with_samples(reassemble(&out)), clamped))
    }
}
