//! Perturbation-unaware purification baselines: additive white noise,
//! amplitude quantization and median smoothing.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_SNR_DB: f64 = 25.0;
pub const DEFAULT_QUANT_FACTOR: u32 = 256;
pub const DEFAULT_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurifyMethod {
    AddNoise,
    Quantize,
    MedianSmooth,
}

impl FromStr for PurifyMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add_noise" | "an" => Ok(Self::AddNoise),
            "quantize" | "qt" => Ok(Self::Quantize),
            "median_smooth" | "median" | "ms" => Ok(Self::MedianSmooth),
            other => Err(Error::InvalidParameter(format!(
                "unknown purification method {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifyConfig {
    pub method: PurifyMethod,
    pub snr_db: f64,
    pub quant_factor: u32,
    pub kernel: usize,
    pub seed: u64,
}

impl PurifyConfig {
    pub fn new(method: PurifyMethod) -> Self {
        Self {
            method,
            snr_db: DEFAULT_SNR_DB,
            quant_factor: DEFAULT_QUANT_FACTOR,
            kernel: DEFAULT_KERNEL,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidParameter("target SNR must be finite".into()));
        }
        if self.quant_factor < 2 {
            return Err(Error::InvalidParameter(format!(
                "quantization factor must be at least 2, got {}",
                self.quant_factor
            )));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "median kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Waveform) -> Result<Waveform> {
        self.validate()?;
        match self.method {
            PurifyMethod::AddNoise => purify_add_noise(x, self.snr_db, self.seed),
            PurifyMethod::Quantize => purify_quantize(x, self.quant_factor),
            PurifyMethod::MedianSmooth => purify_median(x, self.kernel),
        }
    }
}

/// White Gaussian noise scaled so the pre-clamp SNR equals `snr_db` exactly.
pub fn add_noise_unclamped(x: &[f64], snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter("target SNR must be finite".into()));
    }
    let signal: f64 = x.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..x.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let energy: f64 = noise.iter().map(|v| v * v).sum();
    let gain = (signal / (energy * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(x.iter().zip(&noise).map(|(s, n)| s + gain * n).collect())
}

pub fn purify_add_noise(x: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    let noisy = add_noise_unclamped(&x.samples, snr_db, seed)?;
    Ok(x.with_samples(noisy.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect()))
}

/// Rounds every sample to the nearest multiple of `1 / factor`.
pub fn purify_quantize(x: &Waveform, factor: u32) -> Result<Waveform> {
    if factor < 2 {
        return Err(Error::InvalidParameter(format!(
            "quantization factor must be at least 2, got {factor}"
        )));
    }
    let f = factor as f64;
    Ok(x.with_samples(
        x.samples
            .iter()
            .map(|v| ((v * f).round() / f).clamp(-1.0, 1.0))
            .collect(),
    ))
}

/// Sliding median over `kernel` samples with edge-replication padding.
pub fn median_filter(x: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "median kernel must be odd and positive, got {kernel}"
        )));
    }
    if kernel > x.len() {
        return Err(Error::InvalidParameter(format!(
            "median kernel {kernel} is longer than the signal ({} samples)",
            x.len()
        )));
    }
    let half = kernel / 2;
    let last = x.len() - 1;
    let mut window = vec![0.0; kernel];
    Ok((0..x.len())
        .map(|i| {
            for (k, slot) in window.iter_mut().enumerate() {
                let j = (i + k).saturating_sub(half).min(last);
                *slot = x[j];
            }
            let (_, median, _) = window.select_nth_unstable_by(half, f64::total_cmp);
            *median
        })
        .collect())
}

pub fn purify_median(x: &Waveform, kernel: usize) -> Result<Waveform> {
    Ok(x.with_samples(median_filter(&x.samples, kernel)?))
}
