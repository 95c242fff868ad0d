//! Encoder with twin decoders (noise head and mask head).
//!
//! The perturbation generator and the removal network are both instances of
//! [`NoiseMaskNet`] with independent weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv1d, ConvTranspose1d, Grads, ParamSet, Signal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Samples per input segment.
    pub seg_len: usize,
    /// Encoder output channels per layer; decoders mirror them.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            seg_len: 32_000,
            channels: vec![16, 32, 64, 64],
            kernel: 8,
            stride: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channel list must be non-empty and positive".into());
        }
        if self.stride == 0 || self.kernel < self.stride || !(self.kernel - self.stride).is_multiple_of(2) {
            return bad(format!(
                "kernel {} / stride {} must satisfy kernel >= stride with even difference",
                self.kernel, self.stride
            ));
        }
        let product = self.stride_product();
        if self.seg_len == 0 || !self.seg_len.is_multiple_of(product) {
            return bad(format!(
                "segment length {} must be a positive multiple of the stride product {product}",
                self.seg_len
            ));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    pub fn stride_product(&self) -> usize {
        self.stride.pow(self.channels.len() as u32)
    }

    /// Shape `(channels, frames)` of the latent code.
    pub fn latent_shape(&self) -> (usize, usize) {
        (
            *self.channels.last().expect("validated"),
            self.seg_len / self.stride_product(),
        )
    }
}

/// Output of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Signal);

impl LatentCode {
    pub fn shape(&self) -> (usize, usize) {
        (self.0.channels, self.0.len)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NetTrace {
    /// Input of every encoder layer followed by the latent code.
    encoder: Vec<Signal>,
    noise: Vec<Signal>,
    mask: Vec<Signal>,
}

impl NetTrace {
    pub fn noise(&self) -> &[f64] {
        &self.noise.last().expect("non-empty").data
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask.last().expect("non-empty").data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMaskNet {
    config: NetConfig,
    encoder: Vec<Conv1d>,
    noise_decoder: Vec<ConvTranspose1d>,
    mask_decoder: Vec<ConvTranspose1d>,
    params: ParamSet,
}

impl NoiseMaskNet {
    /// Fresh network with fan-in scaled uniform weights and zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (k, s, p) = (config.kernel, config.stride, config.padding());

        let mut encoder = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            encoder.push(Conv1d::register(
                &mut params,
                &format!("encoder.{i}"),
                in_ch,
                out_ch,
                k,
                s,
                p,
                &mut rng,
            ));
            in_ch = out_ch;
        }

        let mut chain: Vec<usize> = config.channels.iter().rev().copied().collect();
        chain.push(1);
        let mut decoder = |name: &str, params: &mut ParamSet| {
            chain
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    ConvTranspose1d::register(
                        params,
                        &format!("{name}.{i}"),
                        w[0],
                        w[1],
                        k,
                        s,
                        p,
                        &mut rng,
                    )
                })
                .collect::<Vec<_>>()
        };
        let noise_decoder = decoder("noise_decoder", &mut params);
        let mask_decoder = decoder("mask_decoder", &mut params);

        Ok(Self {
            config,
            encoder,
            noise_decoder,
            mask_decoder,
            params,
        })
    }

    /// Rebuilds a network from stored tensors, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if net.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for (want, got) in net.params.iter().zip(params.iter()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.config.seg_len {
            return Err(Error::LengthMismatch {
                expected: self.config.seg_len,
                actual: len,
            });
        }
        Ok(())
    }

    fn run_encoder(&self, x: &[f64], keep: bool) -> (Signal, Vec<Signal>) {
        let mut acts = Vec::new();
        let mut h = Signal::mono(x);
        for layer in &self.encoder {
            let mut next = layer.forward(&self.params, &h);
            Activation::LeakyRelu.apply(&mut next.data);
            if keep {
                acts.push(std::mem::replace(&mut h, next));
            } else {
                h = next;
            }
        }
        (h, acts)
    }

    fn run_decoder(
        &self,
        layers: &[ConvTranspose1d],
        head: Activation,
        latent: &Signal,
        keep: bool,
    ) -> (Signal, Vec<Signal>) {
        let mut acts = Vec::new();
        let mut h = latent.clone();
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let mut next = layer.forward(&self.params, &h);
            let act = if i == last { head } else { Activation::LeakyRelu };
            act.apply(&mut next.data);
            if keep {
                acts.push(std::mem::replace(&mut h, next));
            } else {
                h = next;
            }
        }
        (h, acts)
    }

    pub fn encode(&self, x: &[f64]) -> Result<LatentCode> {
        self.check_len(x.len())?;
        Ok(LatentCode(self.run_encoder(x, false).0))
    }

    fn check_latent(&self, y: &LatentCode) -> Result<()> {
        let (c, f) = self.config.latent_shape();
        if y.shape() != (c, f) || y.0.data.len() != c * f {
            return Err(Error::InvalidParameter(format!(
                "latent shape {:?} does not match expected {:?}",
                y.shape(),
                (c, f)
            )));
        }
        Ok(())
    }

    /// Noise head: values strictly inside (-1, 1).
    pub fn decode_noise(&self, y: &LatentCode) -> Result<Vec<f64>> {
        self.check_latent(y)?;
        Ok(self
            .run_decoder(&self.noise_decoder, Activation::Tanh, &y.0, false)
            .0
            .data)
    }

    /// Mask head: values strictly inside (0, 1).
    pub fn decode_mask(&self, y: &LatentCode) -> Result<Vec<f64>> {
        self.check_latent(y)?;
        Ok(self
            .run_decoder(&self.mask_decoder, Activation::Sigmoid, &y.0, false)
            .0
            .data)
    }

    /// Full forward pass, keeping activations for [`NoiseMaskNet::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<NetTrace> {
        self.check_len(x.len())?;
        let (latent, mut encoder) = self.run_encoder(x, true);
        let (noise_out, mut noise) =
            self.run_decoder(&self.noise_decoder, Activation::Tanh, &latent, true);
        let (mask_out, mut mask) =
            self.run_decoder(&self.mask_decoder, Activation::Sigmoid, &latent, true);
        encoder.push(latent);
        noise.push(noise_out);
        mask.push(mask_out);
        Ok(NetTrace {
            encoder,
            noise,
            mask,
        })
    }

    fn backprop_decoder(
        &self,
        layers: &[ConvTranspose1d],
        head: Activation,
        acts: &[Signal],
        grad_out: &[f64],
        grads: &mut Grads,
    ) -> Signal {
        let out = acts.last().expect("trace");
        let mut g = Signal {
            channels: out.channels,
            len: out.len,
            data: grad_out.to_vec(),
        };
        let last = layers.len() - 1;
        for i in (0..layers.len()).rev() {
            let act = if i == last { head } else { Activation::LeakyRelu };
            act.backprop(&acts[i + 1].data, &mut g.data);
            g = layers[i]
                .backward(&self.params, &acts[i], &g, grads, true)
                .expect("input grad requested");
        }
        g
    }

    /// Accumulates parameter gradients for upstream gradients on the two
    /// heads. Returns the gradient with respect to the input segment when
    /// `input_grad` is set.
    pub fn backward(
        &self,
        trace: &NetTrace,
        grad_noise: &[f64],
        grad_mask: &[f64],
        grads: &mut Grads,
        input_grad: bool,
    ) -> Option<Vec<f64>> {
        let g_noise = self.backprop_decoder(
            &self.noise_decoder,
            Activation::Tanh,
            &trace.noise,
            grad_noise,
            grads,
        );
        let mut g = self.backprop_decoder(
            &self.mask_decoder,
            Activation::Sigmoid,
            &trace.mask,
            grad_mask,
            grads,
        );
        g.data
            .iter_mut()
            .zip(&g_noise.data)
            .for_each(|(a, b)| *a += b);

        for i in (0..self.encoder.len()).rev() {
            Activation::LeakyRelu.backprop(&trace.encoder[i + 1].data, &mut g.data);
            let need = i > 0 || input_grad;
            g = self.encoder[i].backward(&self.params, &trace.encoder[i], &g, grads, need)?;
        }
        Some(g.data)
    }
}
