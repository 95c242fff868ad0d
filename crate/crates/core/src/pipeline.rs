//! Manifest-level plumbing: batch processing of utterances, per-condition
//! evaluation, and the end-to-end desk experiment on the toy corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{save_wav, snr_db, Manifest, ManifestEntry, Waveform};
use crate::error::{Error, Result};
use crate::metrics::{
    align_words, assemble_report, extract_pitch, pitch_correlation, quality_score, tokenize,
    AsrClient, EvaluationReport, QualityBackend, UtteranceMetrics,
};
use crate::purify::{PurifyConfig, PurifyMethod};
use crate::speaker::{
    build_trials, compute_eer, cosine_score, train_toy_extractor, write_scores, EmbeddingBackend,
    ExtractorTrainingConfig, ScoreSet, TrialList,
};
use crate::synth::{write_corpus, ToyCorpusConfig};
use crate::trainer::{Checkpoint, Trainer, TrainingConfig};

/// Utterances of a manifest loaded at the model rate, keyed by id.
#[derive(Clone, Debug, Default)]
pub struct AudioSet {
    pub waveforms: BTreeMap<String, Waveform>,
    pub texts: BTreeMap<String, String>,
}

impl AudioSet {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let loaded: Vec<Waveform> = manifest
            .entries
            .par_iter()
            .map(|e| manifest.load_entry(e))
            .collect::<Result<_>>()?;
        let mut set = Self::default();
        for (e, w) in manifest.entries.iter().zip(loaded) {
            if let Some(t) = &e.text {
                set.texts.insert(e.utterance_id.clone(), t.clone());
            }
            set.waveforms.insert(e.utterance_id.clone(), w);
        }
        Ok(set)
    }

    fn get(&self, id: &str, role: &str) -> Result<&Waveform> {
        self.waveforms
            .get(id)
            .ok_or_else(|| Error::Manifest(format!("{role} utterance {id:?} is missing")))
    }
}

/// Applies `f` to every manifest utterance (in parallel on the current rayon
/// pool), writes `<out_dir>/wav/<id>.wav` and returns the new manifest, which
/// is also saved as `<out_dir>/manifest.jsonl`. `f` receives the entry index.
pub fn process_manifest<F>(manifest: &Manifest, out_dir: &Path, f: F) -> Result<Manifest>
where
    F: Fn(usize, &Waveform) -> Result<Waveform> + Sync,
{
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let entries: Vec<ManifestEntry> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let input = manifest.load_entry(e)?;
            let output = f(i, &input)?;
            let rel = format!("wav/{}.wav", e.utterance_id);
            save_wav(&output, out_dir.join(&rel))?;
            Ok(ManifestEntry {
                path: rel,
                ..e.clone()
            })
        })
        .collect::<Result<_>>()?;
    let out = Manifest::new(entries, out_dir)?;
    out.save(out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

/// Purification of a whole manifest. Add-noise draws from `seed + index`
/// so every utterance gets its own noise.
pub fn purify_manifest(manifest: &Manifest, config: &PurifyConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    process_manifest(manifest, out_dir, |i, w| {
        PurifyConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..*config
        }
        .apply(w)
    })
}

#[derive(Clone, Copy, Default)]
pub struct Plugins<'a> {
    pub quality: Option<&'a dyn QualityBackend>,
    pub asr: Option<&'a dyn AsrClient>,
}

#[derive(Clone, Debug)]
pub struct ConditionEvaluation {
    pub report: EvaluationReport,
    /// One cosine score per trial, in trial order.
    pub scores: Vec<f64>,
    pub utterances: Vec<UtteranceMetrics>,
}

/// Scores one condition: enrollment audio comes from `reference`, test audio
/// from `test`. Every test utterance is also compared with the reference
/// recording of the same id (SNR, pitch, quality) and, with an ASR plugin, its
/// transcript is scored against the reference text.
pub fn evaluate_condition(
    condition: &str,
    trials: Option<&TrialList>,
    reference: &AudioSet,
    test: &AudioSet,
    backend: &dyn EmbeddingBackend,
    plugins: Plugins<'_>,
) -> Result<ConditionEvaluation> {
    if test.waveforms.is_empty() {
        return Err(Error::Manifest(format!("condition {condition}: no test utterances")));
    }
    let (eer, scores) = match trials {
        Some(trials) => {
            let (eer, scores) = score_trials(trials, reference, test, backend)?;
            (Some(eer), scores)
        }
        None => (None, Vec::new()),
    };
    let ids: Vec<&String> = test.waveforms.keys().collect();
    let utterances: Vec<UtteranceMetrics> = ids
        .par_iter()
        .map(|id| {
            let t = &test.waveforms[*id];
            let r = reference.get(id, "reference")?;
            utterance_metrics(id, r, t, reference.texts.get(*id), plugins)
        })
        .collect::<Result<_>>()?;
    let report = assemble_report(condition, eer, &utterances)?;
    Ok(ConditionEvaluation {
        report,
        scores,
        utterances,
    })
}

fn score_trials(
    trials: &TrialList,
    reference: &AudioSet,
    test: &AudioSet,
    backend: &dyn EmbeddingBackend,
) -> Result<(f64, Vec<f64>)> {
    let mut enroll_ids: Vec<&str> = trials.trials.iter().map(|t| t.enroll_utt.as_str()).collect();
    let mut test_ids: Vec<&str> = trials.trials.iter().map(|t| t.test_utt.as_str()).collect();
    enroll_ids.sort_unstable();
    enroll_ids.dedup();
    test_ids.sort_unstable();
    test_ids.dedup();
    let embed_all = |ids: &[&str], set: &AudioSet, role: &str| -> Result<BTreeMap<String, Vec<f64>>> {
        ids.par_iter()
            .map(|id| {
                let w = set.get(id, role)?;
                Ok((id.to_string(), backend.embed(&w.samples)?))
            })
            .collect()
    };
    let enroll = embed_all(&enroll_ids, reference, "enrollment")?;
    let tests = embed_all(&test_ids, test, "test")?;
    let scores: Vec<f64> = trials
        .trials
        .iter()
        .map(|t| cosine_score(&enroll[&t.enroll_utt], &tests[&t.test_utt]))
        .collect::<Result<_>>()?;
    let (tg, nt): (Vec<_>, Vec<_>) = trials
        .trials
        .iter()
        .zip(&scores)
        .partition(|(t, _)| t.is_target);
    let pick = |v: Vec<(&_, &f64)>| v.into_iter().map(|(_, s)| *s).collect::<Vec<f64>>();
    let eer = compute_eer(&ScoreSet::from_parts(&pick(tg), &pick(nt)))?;
    Ok((eer, scores))
}

fn utterance_metrics(
    id: &str,
    reference: &Waveform,
    test: &Waveform,
    text: Option<&String>,
    plugins: Plugins<'_>,
) -> Result<UtteranceMetrics> {
    if reference.len() != test.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: test.len(),
        });
    }
    let snr = snr_db(&reference.samples, &test.samples)?;
    let pitch_corr = pitch_correlation(&extract_pitch(reference)?, &extract_pitch(test)?);
    let quality = quality_score(reference, test, plugins.quality)?;
    let wer = match (plugins.asr, text) {
        (Some(asr), Some(text)) => {
            let hyp = asr.transcribe(test)?;
            Some(align_words(&tokenize(text), &tokenize(&hyp))?)
        }
        _ => None,
    };
    Ok(UtteranceMetrics {
        utterance_id: id.to_string(),
        snr_db: snr,
        pitch_corr,
        quality,
        wer,
    })
}

/// The complete toy experiment: synthesize, train the extractor, train the
/// generator/removal pair, then protect, restore and purify the held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub corpus: ToyCorpusConfig,
    pub extractor: ExtractorTrainingConfig,
    pub training: TrainingConfig,
    pub targets_per_speaker: usize,
    pub nontargets_per_speaker: usize,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            corpus: ToyCorpusConfig::default(),
            extractor: ExtractorTrainingConfig::default(),
            training: TrainingConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                seg_len: 2048,
                ..TrainingConfig::default()
            },
            targets_per_speaker: 9,
            nontargets_per_speaker: 30,
            seed: 0,
        }
    }
}

impl DeskConfig {
    /// Copies `seed` into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.extractor.seed = seed;
        self.training.seed = seed;
        self
    }
}

pub const DESK_CONDITIONS: [&str; 6] = ["rec-rec", "rec-adv", "rec-rst", "rec-an", "rec-qt", "rec-ms"];

#[derive(Clone, Debug)]
pub struct DeskOutcome {
    pub dir: PathBuf,
    pub extractor_accuracy: f64,
    pub checkpoint: Checkpoint,
    /// Keyed by condition label, see [`DESK_CONDITIONS`].
    pub conditions: BTreeMap<String, ConditionEvaluation>,
}

impl DeskOutcome {
    pub fn report(&self, condition: &str) -> &EvaluationReport {
        &self.conditions[condition].report
    }

    /// Per-utterance SNR against the original for one condition, by id.
    pub fn snrs(&self, condition: &str) -> BTreeMap<&str, f64> {
        self.conditions[condition]
            .utterances
            .iter()
            .map(|u| (u.utterance_id.as_str(), u.snr_db))
            .collect()
    }
}

/// Runs the desk experiment with every artifact written under `dir`:
/// `corpus/`, `extractor.bin`, `checkpoint.bin`, `loss.csv`, `trials.txt`,
/// `adv/`, `rst/`, `an/`, `qt/`, `ms/` and `reports/<condition>.{json,scores}`.
pub fn run_desk(config: &DeskConfig, dir: &Path) -> Result<DeskOutcome> {
    let corpus = write_corpus(&config.corpus, dir.join("corpus"))?;
    let trained = train_toy_extractor(&corpus.train, &config.extractor)?;
    let extractor = trained.extractor;
    extractor.save(dir.join("extractor.bin"))?;
    log::info!("extractor train accuracy {:.3}", trained.train_accuracy);

    let train = AudioSet::load(&corpus.train)?;
    let data: Vec<Vec<f64>> = train.waveforms.into_values().map(|w| w.samples).collect();
    let trainer = Trainer::new(config.training.clone(), &extractor)?;
    let checkpoint = trainer.train(&data, &mut |c| {
        log::info!("epoch {} done at step {}", c.epoch, c.step);
        Ok(())
    })?;
    checkpoint.save(dir.join("checkpoint.bin"))?;
    let loss_path = dir.join("loss.csv");
    fs::write(&loss_path, checkpoint.loss_csv()).map_err(|e| Error::io(&loss_path, e))?;

    let eps = checkpoint.epsilon();
    let held = &corpus.held_out;
    let adv = process_manifest(held, &dir.join("adv"), |_, w| {
        Ok(checkpoint.generator.protect(w, eps)?.0)
    })?;
    let rst = process_manifest(&adv, &dir.join("rst"), |_, w| {
        checkpoint.remover.restore_waveform(w, eps)
    })?;
    let mut manifests = vec![("rec-rec", held.clone()), ("rec-adv", adv.clone()), ("rec-rst", rst)];
    for (label, sub, method) in [
        ("rec-an", "an", PurifyMethod::AddNoise),
        ("rec-qt", "qt", PurifyMethod::Quantize),
        ("rec-ms", "ms", PurifyMethod::MedianSmooth),
    ] {
        let mut pc = PurifyConfig::new(method);
        pc.seed = config.seed;
        manifests.push((label, purify_manifest(&adv, &pc, &dir.join(sub))?));
    }

    let trials = build_trials(
        held,
        config.targets_per_speaker,
        config.nontargets_per_speaker,
        config.seed,
    )?;
    trials.save(dir.join("trials.txt"))?;
    let reference = AudioSet::load(held)?;
    let reports_dir = dir.join("reports");
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let mut conditions = BTreeMap::new();
    for (label, manifest) in manifests {
        let test = AudioSet::load(&manifest)?;
        let eval = evaluate_condition(
            label,
            Some(&trials),
            &reference,
            &test,
            &extractor,
            Plugins::default(),
        )?;
        eval.report.save(reports_dir.join(format!("{label}.json")))?;
        write_scores(reports_dir.join(format!("{label}.scores")), &trials, &eval.scores)?;
        conditions.insert(label.to_string(), eval);
    }
    Ok(DeskOutcome {
        dir: dir.to_path_buf(),
        extractor_accuracy: trained.train_accuracy,
        checkpoint,
        conditions,
    })
}
