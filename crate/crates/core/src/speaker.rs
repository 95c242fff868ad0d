//! Speaker verification surface: embedding backends, a trainable toy
//! extractor, cosine scoring, trial construction and equal error rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Manifest, Waveform, MODEL_SAMPLE_RATE};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{stats_pool, stats_pool_backward, Activation, Adam, Conv1d, Linear, ParamSet, Signal};

/// Speaker embedding of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
    pub source_utterance: String,
}

/// Anything that maps a waveform to a fixed-dimension vector.
pub trait EmbeddingBackend: Send + Sync {
    fn sample_rate(&self) -> u32;
    fn dim(&self) -> usize;
    fn embed(&self, samples: &[f64]) -> Result<Vec<f64>>;
}

/// A backend that can also pull a gradient on the embedding back to the input.
pub trait DifferentiableBackend: EmbeddingBackend {
    /// Computes the embedding, asks `upstream` for the loss gradient at that
    /// embedding, and returns `(embedding, gradient w.r.t. samples)`.
    fn embed_vjp(
        &self,
        samples: &[f64],
        upstream: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)>;
}

pub fn extract_embedding(w: &Waveform, backend: &dyn EmbeddingBackend) -> Result<SpeakerEmbedding> {
    if w.sample_rate != backend.sample_rate() {
        return Err(Error::RateMismatch {
            expected: backend.sample_rate(),
            actual: w.sample_rate,
        });
    }
    let vector = backend.embed(&w.samples)?;
    if vector.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(SpeakerEmbedding {
        vector,
        source_utterance: w.utterance_id.clone().unwrap_or_default(),
    })
}

/// Cosine similarity in [-1, 1]; symmetric and invariant to positive scaling.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let (sa, sb) = (dot(a, a), dot(b, b));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub sample_rate: u32,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub embed_dim: usize,
    pub num_speakers: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            sample_rate: MODEL_SAMPLE_RATE,
            channels: vec![16, 32, 32],
            kernels: vec![64, 5, 3],
            strides: vec![16, 2, 1],
            embed_dim: 64,
            num_speakers: 2,
        }
    }
}

impl ExtractorConfig {
    fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::InvalidParameter(
                "extractor channels, kernels and strides must have equal non-zero length".into(),
            ));
        }
        if self.embed_dim == 0 || self.num_speakers == 0 {
            return Err(Error::InvalidParameter(
                "embedding dimension and speaker count must be positive".into(),
            ));
        }
        if self.strides.contains(&0) || self.kernels.contains(&0) || self.channels.contains(&0) {
            return Err(Error::InvalidParameter("zero-sized extractor layer".into()));
        }
        Ok(())
    }
}

/// Power floor of the log-compressed first layer.
pub const LOG_FLOOR: f64 = 1e-6;

/// Log-compressed conv filterbank, further conv layers, mean+std statistics
/// pooling and a linear embedding layer. The softmax speaker classifier on
/// top is used only during training.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExtractor {
    config: ExtractorConfig,
    convs: Vec<Conv1d>,
    embed: Linear,
    classifier: Linear,
    params: ParamSet,
}

struct ExtractorTrace {
    /// First-layer filter outputs before log compression.
    filterbank: Signal,
    acts: Vec<Signal>,
    pooled: Vec<f64>,
    embedding: Vec<f64>,
}

impl ToyExtractor {
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut in_ch = 1;
        let mut convs = Vec::new();
        for i in 0..config.channels.len() {
            convs.push(Conv1d::register(
                &mut params,
                &format!("conv.{i}"),
                in_ch,
                config.channels[i],
                config.kernels[i],
                config.strides[i],
                0,
                &mut rng,
            ));
            in_ch = config.channels[i];
        }
        let embed = Linear::register(&mut params, "embed", 2 * in_ch, config.embed_dim, &mut rng);
        let classifier = Linear::register(
            &mut params,
            "classifier",
            config.embed_dim,
            config.num_speakers,
            &mut rng,
        );
        Ok(Self {
            config,
            convs,
            embed,
            classifier,
            params,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Shortest input that yields at least one pooled frame.
    pub fn min_samples(&self) -> usize {
        let mut need = 1;
        for c in self.convs.iter().rev() {
            need = (need - 1) * c.stride + c.kernel;
        }
        need
    }

    fn forward(&self, samples: &[f64]) -> Result<ExtractorTrace> {
        if samples.len() < self.min_samples() {
            return Err(Error::TooShort {
                needed: self.min_samples(),
                actual: samples.len(),
            });
        }
        let mut acts = vec![Signal::mono(samples)];
        let filterbank = self.convs[0].forward(&self.params, &acts[0]);
        let mut h = filterbank.clone();
        h.data.iter_mut().for_each(|v| *v = (LOG_FLOOR + *v * *v).ln());
        acts.push(h);
        for conv in &self.convs[1..] {
            let mut h = conv.forward(&self.params, acts.last().expect("input"));
            Activation::LeakyRelu.apply(&mut h.data);
            acts.push(h);
        }
        let pooled = stats_pool(acts.last().expect("conv output"));
        let embedding = self.embed.forward(&self.params, &pooled);
        Ok(ExtractorTrace {
            filterbank,
            acts,
            pooled,
            embedding,
        })
    }

    fn backward(
        &self,
        trace: &ExtractorTrace,
        grad_embedding: &[f64],
        grads: Option<&mut crate::nn::Grads>,
        input_grad: bool,
    ) -> Option<Vec<f64>> {
        let mut scratch;
        let grads = match grads {
            Some(g) => g,
            None => {
                scratch = self.params.zeros_like();
                &mut scratch
            }
        };
        let g_pooled = self
            .embed
            .backward(&self.params, &trace.pooled, grad_embedding, grads);
        let last = trace.acts.last().expect("conv output");
        let mut g = stats_pool_backward(last, &trace.pooled, &g_pooled);
        for i in (0..self.convs.len()).rev() {
            if i == 0 {
                g.data
                    .iter_mut()
                    .zip(&trace.filterbank.data)
                    .for_each(|(g, v)| *g *= 2.0 * v / (LOG_FLOOR + v * v));
            } else {
                Activation::LeakyRelu.backprop(&trace.acts[i + 1].data, &mut g.data);
            }
            let need = i > 0 || input_grad;
            g = self.convs[i].backward(&self.params, &trace.acts[i], &g, grads, need)?;
        }
        Some(g.data)
    }

    /// Speaker posterior logits for an utterance.
    pub fn logits(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let t = self.forward(samples)?;
        Ok(self.classifier.forward(&self.params, &t.embedding))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new("toy_extractor", serde_json::to_value(&self.config)?);
        c.push_params("", &self.params);
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != "toy_extractor" {
            return Err(Error::Checkpoint(format!(
                "expected a toy_extractor container, found {:?}",
                c.kind
            )));
        }
        let config: ExtractorConfig = serde_json::from_value(c.meta.clone())?;
        let mut ext = Self::new(config, 0)?;
        let params = c.params_with_prefix("");
        for (want, got) in ext.params.iter().zip(params.iter()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Checkpoint(format!("unexpected tensor {}", got.name)));
            }
        }
        if params.len() != ext.params.len() {
            return Err(Error::Checkpoint("extractor tensor count mismatch".into()));
        }
        ext.params = params;
        Ok(ext)
    }
}

impl EmbeddingBackend for ToyExtractor {
    fn sample_rate(&self) -> u32 {
        self.config.sample_rate
    }

    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, samples: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(samples)?.embedding)
    }
}

impl DifferentiableBackend for ToyExtractor {
    fn embed_vjp(
        &self,
        samples: &[f64],
        upstream: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward(samples)?;
        let g = upstream(&trace.embedding)?;
        let dx = self.backward(&trace, &g, None, true).expect("input grad");
        Ok((trace.embedding, dx))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTrainingConfig {
    pub arch: ExtractorConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Random crop length in samples; shorter utterances are used whole.
    pub crop_len: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainingConfig {
    fn default() -> Self {
        Self {
            arch: ExtractorConfig::default(),
            steps: 200,
            batch_size: 8,
            crop_len: 8000,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedExtractor {
    pub extractor: ToyExtractor,
    pub train_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub speakers: Vec<String>,
}

/// Trains the toy extractor as a speaker classifier on every manifest entry.
pub fn train_toy_extractor(
    manifest: &Manifest,
    config: &ExtractorTrainingConfig,
) -> Result<TrainedExtractor> {
    let speakers = manifest.speakers();
    let mut data = Vec::new();
    for e in &manifest.entries {
        let w = manifest.load_entry(e)?;
        let label = speakers
            .iter()
            .position(|s| *s == e.speaker_id)
            .expect("speaker listed");
        data.push((w.samples, label));
    }
    let mut trained = train_toy_extractor_on(&data, speakers.len(), config)?;
    trained.speakers = speakers;
    Ok(trained)
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = -(probs[label].max(1e-300)).ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    (loss, grad)
}

/// Same as [`train_toy_extractor`] on in-memory `(samples, label)` pairs.
pub fn train_toy_extractor_on(
    data: &[(Vec<f64>, usize)],
    num_speakers: usize,
    config: &ExtractorTrainingConfig,
) -> Result<TrainedExtractor> {
    let mut per_speaker = vec![0usize; num_speakers];
    for (_, l) in data {
        per_speaker[*l] += 1;
    }
    if num_speakers < 2 || per_speaker.iter().any(|&c| c < 2) {
        return Err(Error::Manifest(format!(
            "extractor training needs at least 2 speakers with 2 utterances each (got {per_speaker:?})"
        )));
    }
    let mut arch = config.arch.clone();
    arch.num_speakers = num_speakers;
    let mut ext = ToyExtractor::new(arch, config.seed)?;
    for (samples, _) in data {
        if samples.len() < ext.min_samples() {
            return Err(Error::TooShort {
                needed: ext.min_samples(),
                actual: samples.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(&ext.params);
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<(usize, usize)> = (0..config.batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                let len = data[i].0.len();
                let start = if len > config.crop_len {
                    rng.random_range(0..=len - config.crop_len)
                } else {
                    0
                };
                (i, start)
            })
            .collect();
        let mut grads = ext.params.zeros_like();
        let mut loss = 0.0;
        for &(i, start) in &batch {
            let (samples, label) = &data[i];
            let end = (start + config.crop_len).min(samples.len());
            let trace = ext.forward(&samples[start..end])?;
            let logits = ext.classifier.forward(&ext.params, &trace.embedding);
            let (l, g_logits) = softmax_xent(&logits, *label);
            loss += l;
            let g_embed = ext
                .classifier
                .backward(&ext.params, &trace.embedding, &g_logits, &mut grads);
            ext.backward(&trace, &g_embed, Some(&mut grads), false);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        adam.update(&mut ext.params, &grads, config.learning_rate);
        history.push(loss / n);
    }
    let mut correct = 0;
    for (samples, label) in data {
        let logits = ext.logits(samples)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty");
        correct += usize::from(pred == *label);
    }
    Ok(TrainedExtractor {
        extractor: ext,
        train_accuracy: correct as f64 / data.len() as f64,
        loss_history: history,
        speakers: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_utt: String,
    pub test_utt: String,
    pub is_target: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Parses `<enroll_utt> <test_utt> target|nontarget` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [enroll, test, kind] = fields[..] else {
                return Err(Error::Trials(format!(
                    "line {}: expected 3 fields, found {}",
                    n + 1,
                    fields.len()
                )));
            };
            let is_target = match kind {
                "target" => true,
                "nontarget" => false,
                other => {
                    return Err(Error::Trials(format!(
                        "line {}: unknown trial kind {other:?}",
                        n + 1
                    )))
                }
            };
            trials.push(Trial {
                enroll_utt: enroll.to_string(),
                test_utt: test.to_string(),
                is_target,
            });
        }
        Ok(Self { trials })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let kind = if t.is_target { "target" } else { "nontarget" };
            writeln!(s, "{} {} {kind}", t.enroll_utt, t.test_utt).expect("string write");
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn targets(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn nontargets(&self) -> usize {
        self.trials.len() - self.targets()
    }
}

/// One enrollment utterance per speaker, `targets_per_speaker` same-speaker
/// tests and `nontargets_per_speaker` other-speaker tests, all drawn without
/// replacement from a generator seeded with `seed`.
pub fn build_trials(
    manifest: &Manifest,
    targets_per_speaker: usize,
    nontargets_per_speaker: usize,
    seed: u64,
) -> Result<TrialList> {
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        by_speaker
            .entry(e.speaker_id.as_str())
            .or_default()
            .push(e.utterance_id.as_str());
    }
    if by_speaker.len() < 2 {
        return Err(Error::Trials(format!(
            "need at least 2 speakers, found {}",
            by_speaker.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::new();
    for (speaker, utts) in &by_speaker {
        if utts.len() < targets_per_speaker + 1 || utts.len() < 2 {
            return Err(Error::Trials(format!(
                "speaker {speaker} has {} utterances; {} target trials need {}",
                utts.len(),
                targets_per_speaker,
                (targets_per_speaker + 1).max(2)
            )));
        }
        let enroll = *utts.choose(&mut rng).expect("non-empty");
        let others: Vec<&str> = utts.iter().copied().filter(|u| *u != enroll).collect();
        for test in others.choose_multiple(&mut rng, targets_per_speaker) {
            trials.push(Trial {
                enroll_utt: enroll.to_string(),
                test_utt: test.to_string(),
                is_target: true,
            });
        }
        let pool: Vec<&str> = by_speaker
            .iter()
            .filter(|(s, _)| *s != speaker)
            .flat_map(|(_, u)| u.iter().copied())
            .collect();
        if pool.len() < nontargets_per_speaker {
            return Err(Error::Trials(format!(
                "speaker {speaker}: only {} other-speaker utterances for {} nontarget trials",
                pool.len(),
                nontargets_per_speaker
            )));
        }
        let mut picked: Vec<&str> = pool
            .choose_multiple(&mut rng, nontargets_per_speaker)
            .copied()
            .collect();
        picked.shuffle(&mut rng);
        for test in picked {
            trials.push(Trial {
                enroll_utt: enroll.to_string(),
                test_utt: test.to_string(),
                is_target: false,
            });
        }
    }
    Ok(TrialList { trials })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub score: f64,
    pub is_target: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
}

impl ScoreSet {
    pub fn from_parts(targets: &[f64], nontargets: &[f64]) -> Self {
        let scores = targets
            .iter()
            .map(|&score| Score {
                score,
                is_target: true,
            })
            .chain(nontargets.iter().map(|&score| Score {
                score,
                is_target: false,
            }))
            .collect();
        Self { scores }
    }
}

/// Equal error rate as a fraction (above 0.5 only for worse-than-chance scores).
///
/// Thresholds sweep the sorted unique scores plus one threshold above all of
/// them. A score `s` is accepted at threshold `t` when `s >= t`. The result is
/// the linearly interpolated crossing of the false-acceptance and
/// false-rejection curves between the two thresholds that bracket it.
pub fn compute_eer(set: &ScoreSet) -> Result<f64> {
    let mut targets: Vec<f64> = Vec::new();
    let mut nontargets: Vec<f64> = Vec::new();
    for s in &set.scores {
        if s.score.is_nan() {
            return Err(Error::InvalidParameter("NaN score".into()));
        }
        if s.is_target {
            targets.push(s.score);
        } else {
            nontargets.push(s.score);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::DegenerateScores);
    }
    targets.sort_by(f64::total_cmp);
    nontargets.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = targets.iter().chain(&nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let rates = |t: f64| {
        let below_t = targets.partition_point(|&s| s < t) as f64;
        let below_n = nontargets.partition_point(|&s| s < t) as f64;
        ((nn - below_n) / nn, below_t / nt)
    };

    let mut prev = rates(thresholds[0]);
    let mut points = thresholds[1..]
        .iter()
        .map(|&t| rates(t))
        .chain(std::iter::once((0.0, 1.0)));
    loop {
        let cur = points.next().expect("sentinel closes the sweep");
        let (far0, frr0) = prev;
        let (far1, frr1) = cur;
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d1 <= 0.0 {
            if d0 == d1 {
                return Ok(far1);
            }
            let w = d0 / (d0 - d1);
            return Ok(far0 + w * (far1 - far0));
        }
        prev = cur;
    }
}

/// Writes `<enroll_utt> <test_utt> <score>` lines.
pub fn write_scores(path: impl AsRef<Path>, trials: &TrialList, scores: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for (t, v) in trials.trials.iter().zip(scores) {
        writeln!(s, "{} {} {v}", t.enroll_utt, t.test_utt).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<(String, String, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f[..] {
                [a, b, s] => s
                    .parse::<f64>()
                    .map(|v| (a.to_string(), b.to_string(), v))
                    .map_err(|e| Error::Trials(format!("score line {}: {e}", n + 1))),
                _ => Err(Error::Trials(format!("score line {}: expected 3 fields", n + 1))),
            }
        })
        .collect()
}
