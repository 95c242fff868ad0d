//! Synthetic multi-speaker corpus of filtered-harmonic "speech".
//!
//! Speakers differ in fundamental frequency and vocal-tract scale; each
//! utterance is a few vowel-like syllables separated by short pauses.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{save_wav, Manifest, ManifestEntry, Waveform, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Formant frequencies (Hz) of a handful of vowels for an average adult.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.5, 0.25];
const WORDS: [&str; 12] = [
    "ma", "lee", "noo", "ray", "so", "ki", "ta", "vo", "bee", "du", "fa", "zo",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// The last `held_out_per_speaker` utterances of every speaker.
    pub held_out_per_speaker: usize,
    pub min_secs: f64,
    pub max_secs: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 4,
            utterances_per_speaker: 25,
            held_out_per_speaker: 10,
            min_secs: 0.8,
            max_secs: 1.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoiceProfile {
    pub f0_hz: f64,
    /// Multiplies every formant frequency (shorter tract → larger scale).
    pub formant_scale: f64,
    /// Formant bandwidth in Hz.
    pub bandwidth: f64,
}

/// Voices spread geometrically between 105 and 235 Hz.
pub fn voice_profile(index: usize, count: usize) -> VoiceProfile {
    let t = if count > 1 {
        index as f64 / (count - 1) as f64
    } else {
        0.0
    };
    VoiceProfile {
        f0_hz: 105.0 * (235.0f64 / 105.0).powf(t),
        formant_scale: 0.9 + 0.3 * t,
        bandwidth: 80.0 + 40.0 * t,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub text: String,
    pub held_out: bool,
    pub waveform: Waveform,
}

fn syllable(voice: &VoiceProfile, vowel: &[f64; 3], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = MODEL_SAMPLE_RATE as f64;
    let f0_start = voice.f0_hz * rng.random_range(0.9..1.1);
    let f0_end = f0_start * rng.random_range(0.85..1.05);
    let formants: Vec<f64> = vowel.iter().map(|f| f * voice.formant_scale).collect();
    let mut phase = 0.0;
    (0..len)
        .map(|i| {
            let t = i as f64 / len as f64;
            let f0 = f0_start + (f0_end - f0_start) * t;
            phase += 2.0 * PI * f0 / rate;
            let mut v = 0.0;
            let mut h = 1;
            while h as f64 * f0 < 0.45 * rate {
                let fh = h as f64 * f0;
                let amp: f64 = formants
                    .iter()
                    .zip(FORMANT_GAINS)
                    .map(|(&fk, g)| g / (1.0 + ((fh - fk) / voice.bandwidth).powi(2)))
                    .sum();
                v += amp / (h as f64).sqrt() * (h as f64 * phase).sin();
                h += 1;
            }
            let envelope = (PI * t).sin().powf(0.6);
            envelope * v
        })
        .collect()
}

fn utterance(voice: &VoiceProfile, secs: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, String) {
    let rate = MODEL_SAMPLE_RATE as f64;
    let total = (secs * rate).round() as usize;
    let mut out = Vec::with_capacity(total);
    let mut words = Vec::new();
    let lead = (rng.random_range(0.02..0.06) * rate) as usize;
    out.resize(lead, 0.0);
    while out.len() < total {
        let len = ((rng.random_range(0.15..0.3) * rate) as usize).min(total - out.len());
        let vowel = rng.random_range(0..VOWELS.len());
        out.extend(syllable(voice, &VOWELS[vowel], len, rng));
        words.push(WORDS[vowel * 2 + rng.random_range(0..2)]);
        let gap = ((rng.random_range(0.03..0.08) * rate) as usize).min(total - out.len());
        out.extend(std::iter::repeat_n(0.0, gap));
    }
    for v in out.iter_mut() {
        let breath: f64 = StandardNormal.sample(rng);
        *v += 1e-3 * breath;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    (out, words.join(" "))
}

/// Generates the corpus in memory, deterministically from the seed.
pub fn synthesize_corpus(config: &ToyCorpusConfig) -> Result<Vec<ToyUtterance>> {
    if config.speakers < 2 || config.utterances_per_speaker < 2 {
        return Err(Error::InvalidParameter(
            "a toy corpus needs at least 2 speakers with 2 utterances each".into(),
        ));
    }
    if config.held_out_per_speaker >= config.utterances_per_speaker {
        return Err(Error::InvalidParameter(
            "held-out utterances must leave some for training".into(),
        ));
    }
    if !(config.min_secs >= 0.3 && config.max_secs >= config.min_secs) {
        return Err(Error::InvalidParameter(format!(
            "invalid utterance duration range {}..{} s",
            config.min_secs, config.max_secs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for s in 0..config.speakers {
        let voice = voice_profile(s, config.speakers);
        for u in 0..config.utterances_per_speaker {
            let secs = if config.max_secs > config.min_secs {
                rng.random_range(config.min_secs..config.max_secs)
            } else {
                config.min_secs
            };
            let (samples, text) = utterance(&voice, secs, &mut rng);
            let id = format!("spk{s}_u{u:02}");
            out.push(ToyUtterance {
                waveform: Waveform::new(samples, MODEL_SAMPLE_RATE)?.with_id(id.clone()),
                utterance_id: id,
                speaker_id: format!("spk{s}"),
                text,
                held_out: u >= config.utterances_per_speaker - config.held_out_per_speaker,
            });
        }
    }
    Ok(out)
}

/// Paths of the manifests written by [`write_corpus`].
#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub all: Manifest,
    pub train: Manifest,
    pub held_out: Manifest,
}

/// Writes `wav/<id>.wav` plus `all.jsonl`, `train.jsonl` and `test.jsonl` under `dir`.
pub fn write_corpus(config: &ToyCorpusConfig, dir: impl AsRef<Path>) -> Result<CorpusFiles> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut all = Vec::new();
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for u in synthesize_corpus(config)? {
        let rel = format!("wav/{}.wav", u.utterance_id);
        save_wav(&u.waveform, dir.join(&rel))?;
        let entry = ManifestEntry {
            utterance_id: u.utterance_id,
            speaker_id: u.speaker_id,
            path: rel,
            text: Some(u.text),
        };
        if u.held_out {
            held_out.push(entry.clone());
        } else {
            train.push(entry.clone());
        }
        all.push(entry);
    }
    let files = CorpusFiles {
        all: Manifest::new(all, dir)?,
        train: Manifest::new(train, dir)?,
        held_out: Manifest::new(held_out, dir)?,
    };
    files.all.save(dir.join("all.jsonl"))?;
    files.train.save(dir.join("train.jsonl"))?;
    files.held_out.save(dir.join("test.jsonl"))?;
    Ok(files)
}
