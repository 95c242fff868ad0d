//! Joint training of the perturbation generator and the removal network.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Manifest;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::{add_clamped, PerturbationGenerator};
use crate::losses::{
    angular_loss, angular_loss_grad, mask_loss, mask_loss_grad, noise_loss, noise_loss_grad,
    quality_loss, quality_loss_grad, rpt_loss, ssed_loss, total_loss, LossBreakdown, LossWeights,
};
use crate::network::{NetConfig, NoiseMaskNet};
use crate::nn::{Adam, Grads, ParamSet};
use crate::removal::PerturbationRemover;
use crate::speaker::{DifferentiableBackend, ExtractorConfig, ToyExtractor};

pub const CHECKPOINT_KIND: &str = "veil_checkpoint";
pub const LOSS_CSV_HEADER: &str = "step,L_angular,L_quality,L_SSED,L_noise,L_mask,L_rpt,L";

/// Hyperparameters of a joint training run; also the TOML config format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub loss_weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Segments per optimization step.
    pub batch_size: usize,
    /// Samples per training segment; must be a multiple of `stride^layers`.
    pub seg_len: usize,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Speaker extractor guiding the attack. Relative paths resolve against
    /// the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            loss_weights: LossWeights::default(),
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 16,
            seg_len: net.seg_len,
            seed: 0,
            channels: net.channels,
            kernel: net.kernel,
            stride: net.stride,
            extractor: None,
        }
    }
}

impl TrainingConfig {
    /// Smallest configuration accepted by [`gradcheck`].
    pub fn tiny() -> Self {
        Self {
            batch_size: 1,
            seg_len: 256,
            channels: vec![4, 4],
            ..Self::default()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            seg_len: self.seg_len,
            channels: self.channels.clone(),
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.net_config().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a TOML config; a relative `extractor` path is made relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let (Some(ext), Some(dir)) = (&config.extractor, path.parent()) {
            if ext.is_relative() {
                config.extractor = Some(dir.join(ext));
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything needed to use or resume a run: both networks, ε, loss
/// weights, optimizer state, progress counters and the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: PerturbationGenerator,
    pub remover: PerturbationRemover,
    pub config: TrainingConfig,
    pub epoch: usize,
    pub step: usize,
    /// Position of the run's random stream, so resumed runs continue it exactly.
    pub rng_word_pos: u128,
    pub optimizers: Option<(Adam, Adam)>,
    pub history: Vec<LossBreakdown>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainingConfig,
    epsilon: f64,
    loss_weights: LossWeights,
    epoch: usize,
    step: usize,
    seed: u64,
    rng_word_pos: String,
    adam_steps: Option<[u64; 2]>,
    history: Vec<[f64; 7]>,
}

fn push_adam(c: &mut Container, prefix: &str, adam: &Adam, params: &ParamSet) {
    for (i, p) in params.iter().enumerate() {
        c.push_tensor(
            format!("{prefix}.m.{}", p.name),
            p.shape.clone(),
            adam.first_moment[i].clone(),
        );
        c.push_tensor(
            format!("{prefix}.v.{}", p.name),
            p.shape.clone(),
            adam.second_moment[i].clone(),
        );
    }
}

fn read_adam(c: &Container, prefix: &str, params: &ParamSet, step: u64) -> Result<Adam> {
    let mut adam = Adam::new(params);
    adam.step = step;
    for (i, p) in params.iter().enumerate() {
        for (which, slot) in [("m", &mut adam.first_moment[i]), ("v", &mut adam.second_moment[i])] {
            let name = format!("{prefix}.{which}.{}", p.name);
            let t = c
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
            if t.data.len() != slot.len() {
                return Err(Error::Checkpoint(format!("optimizer tensor {name} has wrong size")));
            }
            slot.copy_from_slice(&t.data);
        }
    }
    Ok(adam)
}

fn breakdown_from(a: [f64; 7]) -> LossBreakdown {
    LossBreakdown {
        angular: a[0],
        quality: a[1],
        ssed: a[2],
        noise: a[3],
        mask: a[4],
        rpt: a[5],
        total: a[6],
    }
}

impl Checkpoint {
    pub fn epsilon(&self) -> f64 {
        self.remover.epsilon()
    }

    pub fn weights(&self) -> &LossWeights {
        &self.config.loss_weights
    }

    /// Refuses a caller-supplied ε that differs from the trained one.
    pub fn check_epsilon(&self, requested: Option<f64>) -> Result<f64> {
        if let Some(eps) = requested {
            self.remover.check_epsilon(eps)?;
        }
        Ok(self.epsilon())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            epsilon: self.epsilon(),
            loss_weights: self.config.loss_weights,
            epoch: self.epoch,
            step: self.step,
            seed: self.config.seed,
            rng_word_pos: self.rng_word_pos.to_string(),
            adam_steps: self.optimizers.as_ref().map(|(g, r)| [g.step, r.step]),
            history: self.history.iter().map(LossBreakdown::as_array).collect(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta)?);
        c.push_params("generator.", self.generator.net().params());
        c.push_params("removal.", self.remover.net().params());
        if let Some((g, r)) = &self.optimizers {
            push_adam(&mut c, "adam.generator", g, self.generator.net().params());
            push_adam(&mut c, "adam.removal", r, self.remover.net().params());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} container, found {:?}",
                c.kind
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        if meta.epsilon != meta.loss_weights.epsilon() || meta.loss_weights != meta.config.loss_weights {
            return Err(Error::Checkpoint("inconsistent ε / loss weights in metadata".into()));
        }
        let net = meta.config.net_config();
        let generator = PerturbationGenerator::from_net(NoiseMaskNet::from_params(
            net.clone(),
            c.params_with_prefix("generator."),
        )?);
        let remover = PerturbationRemover::from_net(
            NoiseMaskNet::from_params(net, c.params_with_prefix("removal."))?,
            meta.epsilon,
        )?;
        let optimizers = match meta.adam_steps {
            Some([gs, rs]) => Some((
                read_adam(c, "adam.generator", generator.net().params(), gs)?,
                read_adam(c, "adam.removal", remover.net().params(), rs)?,
            )),
            None => None,
        };
        Ok(Self {
            generator,
            remover,
            config: meta.config,
            epoch: meta.epoch,
            step: meta.step,
            rng_word_pos: meta
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Checkpoint("bad rng position".into()))?,
            optimizers,
            history: meta.history.into_iter().map(breakdown_from).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }
}

/// Loss history as CSV, one row per optimization step.
pub fn loss_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for (i, h) in history.iter().enumerate() {
        write!(out, "{}", i + 1).expect("string write");
        for v in h.as_array() {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Loss of one segment and the gradients of its total w.r.t. both networks.
#[derive(Clone, Debug)]
pub struct SegmentGrads {
    pub loss: LossBreakdown,
    pub generator: Grads,
    pub removal: Grads,
}

/// Forward and backward pass of the joint objective on one segment.
///
/// The extractor is treated as a fixed function; only its input gradient is
/// used.
pub fn segment_grads(
    generator: &NoiseMaskNet,
    remover: &NoiseMaskNet,
    extractor: &dyn DifferentiableBackend,
    weights: &LossWeights,
    x: &[f64],
) -> Result<SegmentGrads> {
    let eps = weights.epsilon();
    let (alpha, beta, gamma, theta) = (weights.alpha(), weights.beta(), weights.gamma(), weights.theta());
    let w_ang = (1.0 - theta) * (1.0 - beta);
    let w_q = (1.0 - theta) * beta;
    let w_n = theta * gamma;
    let w_m = theta * (1.0 - gamma);

    let tp = generator.forward(x)?;
    let (n, m) = (tp.noise(), tp.mask());
    let delta: Vec<f64> = n.iter().zip(m).map(|(a, b)| eps * (a * b)).collect();
    let (x_adv, _) = add_clamped(x, &delta);

    let z = extractor.embed(x)?;
    let mut angular = 0.0;
    let (_, mut dx_adv) = extractor.embed_vjp(&x_adv, &mut |za| {
        angular = angular_loss(&z, za)?;
        Ok(angular_loss_grad(&z, za)?.into_iter().map(|g| w_ang * g).collect())
    })?;
    let quality = quality_loss(x, &x_adv, m, alpha)?;
    let (gq_x, gq_m) = quality_loss_grad(x, &x_adv, m, alpha)?;

    let tr = remover.forward(&x_adv)?;
    let (nr, mr) = (tr.noise(), tr.mask());
    let noise = noise_loss(n, nr)?;
    let g_noise = noise_loss_grad(n, nr)?;
    let mask = mask_loss(m, mr)?;
    let g_mask = mask_loss_grad(m, mr)?;

    let ssed = ssed_loss(angular, quality, beta);
    let rpt = rpt_loss(mask, noise, gamma);
    let loss = LossBreakdown {
        angular,
        quality,
        ssed,
        noise,
        mask,
        rpt,
        total: total_loss(ssed, rpt, theta),
    };

    let mut removal = remover.params().zeros_like();
    let d_nr: Vec<f64> = g_noise.iter().map(|g| w_n * g).collect();
    let d_mr: Vec<f64> = g_mask.iter().map(|g| -w_m * g).collect();
    let dx_from_removal = remover
        .backward(&tr, &d_nr, &d_mr, &mut removal, true)
        .expect("input gradient requested");

    for i in 0..x.len() {
        dx_adv[i] += w_q * gq_x[i] + dx_from_removal[i];
        if (x[i] + delta[i]).abs() > 1.0 {
            dx_adv[i] = 0.0;
        }
    }
    let d_n: Vec<f64> = (0..x.len())
        .map(|i| w_n * g_noise[i] + eps * m[i] * dx_adv[i])
        .collect();
    let d_m: Vec<f64> = (0..x.len())
        .map(|i| w_q * gq_m[i] + w_m * g_mask[i] + eps * n[i] * dx_adv[i])
        .collect();
    let mut gen_grads = generator.params().zeros_like();
    generator.backward(&tp, &d_n, &d_m, &mut gen_grads, false);

    Ok(SegmentGrads {
        loss,
        generator: gen_grads,
        removal,
    })
}

/// Total joint loss of one segment without gradients.
pub fn segment_loss(
    generator: &NoiseMaskNet,
    remover: &NoiseMaskNet,
    extractor: &dyn DifferentiableBackend,
    weights: &LossWeights,
    x: &[f64],
) -> Result<LossBreakdown> {
    let eps = weights.epsilon();
    let tp = generator.forward(x)?;
    let (n, m) = (tp.noise(), tp.mask());
    let delta: Vec<f64> = n.iter().zip(m).map(|(a, b)| eps * (a * b)).collect();
    let (x_adv, _) = add_clamped(x, &delta);
    let angular = angular_loss(&extractor.embed(x)?, &extractor.embed(&x_adv)?)?;
    let quality = quality_loss(x, &x_adv, m, weights.alpha())?;
    let tr = remover.forward(&x_adv)?;
    let noise = noise_loss(n, tr.noise())?;
    let mask = mask_loss(m, tr.mask())?;
    let ssed = ssed_loss(angular, quality, weights.beta());
    let rpt = rpt_loss(mask, noise, weights.gamma());
    Ok(LossBreakdown {
        angular,
        quality,
        ssed,
        noise,
        mask,
        rpt,
        total: total_loss(ssed, rpt, weights.theta()),
    })
}

/// Stateful joint trainer. The extractor stays frozen throughout.
pub struct Trainer<'a> {
    config: TrainingConfig,
    extractor: &'a dyn DifferentiableBackend,
    generator: PerturbationGenerator,
    remover: PerturbationRemover,
    adam_g: Adam,
    adam_r: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    history: Vec<LossBreakdown>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainingConfig, extractor: &'a dyn DifferentiableBackend) -> Result<Self> {
        config.validate()?;
        let net = config.net_config();
        let generator = PerturbationGenerator::new(net.clone(), config.seed)?;
        let remover =
            PerturbationRemover::new(net, config.loss_weights.epsilon(), config.seed.wrapping_add(1))?;
        let adam_g = Adam::new(generator.net().params());
        let adam_r = Adam::new(remover.net().params());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            extractor,
            generator,
            remover,
            adam_g,
            adam_r,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Continues a saved run. `epochs` may be raised to train further.
    pub fn resume(
        checkpoint: Checkpoint,
        epochs: usize,
        extractor: &'a dyn DifferentiableBackend,
    ) -> Result<Self> {
        let (adam_g, adam_r) = checkpoint
            .optimizers
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume".into()))?;
        let mut config = checkpoint.config;
        config.epochs = epochs;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_word_pos(checkpoint.rng_word_pos);
        Ok(Self {
            config,
            extractor,
            generator: checkpoint.generator,
            remover: checkpoint.remover,
            adam_g,
            adam_r,
            rng,
            epoch: checkpoint.epoch,
            step: checkpoint.step,
            history: checkpoint.history,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    /// One optimization step on the mean loss over `batch` segments.
    pub fn step(&mut self, batch: &[Vec<f64>]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty training batch".into()));
        }
        let (gen, rem, ext, w) = (
            self.generator.net(),
            self.remover.net(),
            self.extractor,
            &self.config.loss_weights,
        );
        let results = batch
            .par_iter()
            .map(|x| segment_grads(gen, rem, ext, w, x))
            .collect::<Result<Vec<_>>>()?;
        let mut g_gen = gen.params().zeros_like();
        let mut g_rem = rem.params().zeros_like();
        let mut losses = Vec::with_capacity(results.len());
        for r in &results {
            g_gen.add_assign(&r.generator);
            g_rem.add_assign(&r.removal);
            losses.push(r.loss);
        }
        let loss = LossBreakdown::mean(&losses);
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.step });
        }
        let scale = 1.0 / batch.len() as f64;
        g_gen.scale(scale);
        g_rem.scale(scale);
        let lr = self.config.learning_rate;
        self.adam_g.update(self.generator.net_mut().params_mut(), &g_gen, lr);
        self.adam_r.update(self.remover.net_mut().params_mut(), &g_rem, lr);
        self.history.push(loss);
        Ok(loss)
    }

    /// One pass over the audio: every utterance contributes
    /// `max(1, len / seg_len)` random crops (zero-padded when shorter than a
    /// segment); crops are shuffled and grouped into batches.
    pub fn run_epoch(&mut self, data: &[Vec<f64>]) -> Result<Vec<LossBreakdown>> {
        let seg_len = self.config.seg_len;
        let mut crops: Vec<(usize, usize)> = Vec::new();
        for (i, utt) in data.iter().enumerate() {
            for _ in 0..(utt.len() / seg_len).max(1) {
                let start = if utt.len() > seg_len {
                    self.rng.random_range(0..=utt.len() - seg_len)
                } else {
                    0
                };
                crops.push((i, start));
            }
        }
        crops.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in crops.chunks(self.config.batch_size) {
            let batch: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&(i, start)| {
                    let utt = &data[i];
                    let mut seg = utt[start..(start + seg_len).min(utt.len())].to_vec();
                    seg.resize(seg_len, 0.0);
                    seg
                })
                .collect();
            out.push(self.step(&batch)?);
        }
        self.epoch += 1;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.generator.clone(),
            remover: self.remover.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_word_pos: self.rng.get_word_pos(),
            optimizers: Some((self.adam_g.clone(), self.adam_r.clone())),
            history: self.history.clone(),
        }
    }

    /// Trains until `config.epochs`, calling `on_epoch` after every epoch.
    pub fn train(
        mut self,
        data: &[Vec<f64>],
        on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Checkpoint> {
        if data.is_empty() {
            return Err(Error::Manifest("no training utterances".into()));
        }
        while self.epoch < self.config.epochs {
            let losses = self.run_epoch(data)?;
            let mean = LossBreakdown::mean(&losses);
            log::info!(
                "epoch {}/{}: L={:.5} angular={:.5} rpt={:.5}",
                self.epoch,
                self.config.epochs,
                mean.total,
                mean.angular,
                mean.rpt
            );
            on_epoch(&self.checkpoint())?;
        }
        Ok(self.checkpoint())
    }
}

/// Optimization steps per epoch for utterances of the given lengths.
pub fn steps_per_epoch(lengths: impl IntoIterator<Item = usize>, config: &TrainingConfig) -> usize {
    let crops: usize = lengths
        .into_iter()
        .map(|n| (n / config.seg_len).max(1))
        .sum();
    crops.div_ceil(config.batch_size)
}

/// Loads every manifest utterance and runs [`Trainer::train`].
pub fn train_joint(
    manifest: &Manifest,
    config: &TrainingConfig,
    extractor: &dyn DifferentiableBackend,
) -> Result<Checkpoint> {
    let data = manifest
        .entries
        .iter()
        .map(|e| manifest.load_entry(e).map(|w| w.samples))
        .collect::<Result<Vec<_>>>()?;
    Trainer::new(config.clone(), extractor)?.train(&data, &mut |_| Ok(()))
}

/// Per-epoch means of a step history.
pub fn epoch_means(history: &[LossBreakdown], steps_per_epoch: usize) -> Vec<LossBreakdown> {
    history
        .chunks(steps_per_epoch.max(1))
        .map(LossBreakdown::mean)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub loss: f64,
}

const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_FLOOR: f64 = 1e-6;

/// Small random extractor sized for [`TrainingConfig::tiny`] segments.
pub fn gradcheck_extractor(seed: u64) -> Result<ToyExtractor> {
    ToyExtractor::new(
        ExtractorConfig {
            channels: vec![4, 4],
            kernels: vec![16, 3],
            strides: vec![4, 1],
            embed_dim: 8,
            ..ExtractorConfig::default()
        },
        seed,
    )
}

/// Compares the analytic gradient of the joint loss against central finite
/// differences on a random 1 % subset (at least 10) of each network's
/// parameters.
pub fn gradcheck(config: &TrainingConfig, seed: u64) -> Result<GradcheckReport> {
    config.validate()?;
    if config.seg_len > 512 || config.channels.iter().any(|&c| c > 4) {
        return Err(Error::InvalidParameter(
            "gradcheck needs a tiny configuration (seg_len <= 512, channels <= 4)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = config.net_config();
    let mut gen = NoiseMaskNet::new(net.clone(), rng.random())?;
    let mut rem = NoiseMaskNet::new(net, rng.random())?;
    let ext = gradcheck_extractor(rng.random())?;
    let x: Vec<f64> = (0..config.seg_len)
        .map(|i| 0.4 * (i as f64 * 0.07).sin() + rng.random_range(-0.1..0.1))
        .collect();
    let w = &config.loss_weights;
    let analytic = segment_grads(&gen, &rem, &ext, w, &x)?;

    let n_gen = gen.params().num_values();
    let n_rem = rem.params().num_values();
    let subset = |n: usize| (n / 100).max(10).min(n);
    let mut picks = rand::seq::index::sample(&mut rng, n_gen, subset(n_gen)).into_vec();
    picks.extend(
        rand::seq::index::sample(&mut rng, n_rem, subset(n_rem))
            .into_iter()
            .map(|i| n_gen + i),
    );
    let count = picks.len();

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for flat in picks {
        let (in_gen, local) = if flat < n_gen { (true, flat) } else { (false, flat - n_gen) };
        let owner = if in_gen { &gen } else { &rem };
        let (t, off) = owner.params().locate(local).expect("index in range");
        let name = format!(
            "{}.{}[{off}]",
            if in_gen { "generator" } else { "removal" },
            owner.params().iter().nth(t).expect("tensor").name
        );
        let a = if in_gen { &analytic.generator } else { &analytic.removal }.flat(t, off);
        let orig = owner.params().get(t)[off];
        let mut total_at = |v: f64| -> Result<f64> {
            let owner = if in_gen { &mut gen } else { &mut rem };
            owner.params_mut().get_mut(t)[off] = v;
            Ok(segment_loss(&gen, &rem, &ext, w, &x)?.total)
        };
        let plus = total_at(orig + GRADCHECK_STEP)?;
        let minus = total_at(orig - GRADCHECK_STEP)?;
        total_at(orig)?;
        let f = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let rel = (a - f).abs() / a.abs().max(f.abs()).max(GRADCHECK_FLOOR);
        if worst.is_empty() || rel > max_rel {
            max_rel = rel;
            worst = name;
        }
    }
    Ok(GradcheckReport {
        checked: count,
        max_rel_error: max_rel,
        worst_param: worst,
        loss: analytic.loss.total,
    })
}
