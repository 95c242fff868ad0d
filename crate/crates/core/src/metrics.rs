//! Content, prosody and quality metrics plus the evaluation report.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::audio::{save_wav, Waveform};
use crate::error::{Error, Result};

/// JSON schema every [`EvaluationReport`] validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/evaluation_report.schema.json");

pub const PITCH_WINDOW_SECS: f64 = 0.025;
pub const PITCH_HOP_SECS: f64 = 0.010;
pub const PITCH_MIN_HZ: f64 = 60.0;
pub const PITCH_MAX_HZ: f64 = 400.0;
/// Minimum normalized autocorrelation peak for a frame to count as voiced.
pub const VOICING_THRESHOLD: f64 = 0.45;
/// Earliest lag whose correlation is within this fraction of the best one wins.
const OCTAVE_GUARD: f64 = 0.9;

/// Per-frame fundamental frequency; 0 marks unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    pub frame_hz: Vec<f64>,
    pub frame_rate: f64,
}

impl PitchContour {
    pub fn voiced_frames(&self) -> usize {
        self.frame_hz.iter().filter(|f| **f > 0.0).count()
    }
}

/// Normalized-autocorrelation pitch tracker (25 ms window, 10 ms hop, 60-400 Hz).
pub fn extract_pitch(w: &Waveform) -> Result<PitchContour> {
    let rate = w.sample_rate as f64;
    let win = (PITCH_WINDOW_SECS * rate).round() as usize;
    let hop = (PITCH_HOP_SECS * rate).round() as usize;
    if w.samples.len() < win {
        return Err(Error::TooShort {
            needed: win,
            actual: w.samples.len(),
        });
    }
    let min_lag = (rate / PITCH_MAX_HZ).floor() as usize;
    let max_lag = (rate / PITCH_MIN_HZ).ceil() as usize;
    let x = &w.samples;
    let at = |i: usize| x.get(i).copied().unwrap_or(0.0);

    let frames = 1 + (x.len() - win) / hop;
    let mut corr = vec![0.0; max_lag + 2];
    let frame_hz = (0..frames)
        .map(|f| {
            let start = f * hop;
            let a = &x[start..start + win];
            let mean = a.iter().sum::<f64>() / win as f64;
            let ea: f64 = a.iter().map(|v| (v - mean) * (v - mean)).sum();
            if ea < 1e-12 {
                return 0.0;
            }
            // correlation for lags min_lag-1 ..= max_lag+1 (neighbors for interpolation)
            for lag in min_lag.saturating_sub(1)..=max_lag + 1 {
                let mut num = 0.0;
                let mut eb = 0.0;
                for (n, av) in a.iter().enumerate() {
                    let b = at(start + n + lag) - mean;
                    num += (av - mean) * b;
                    eb += b * b;
                }
                corr[lag] = if eb > 0.0 { num / (ea * eb).sqrt() } else { 0.0 };
            }
            let best = (min_lag..=max_lag)
                .map(|l| corr[l])
                .fold(f64::NEG_INFINITY, f64::max);
            if best < VOICING_THRESHOLD {
                return 0.0;
            }
            let lag = (min_lag..=max_lag)
                .find(|&l| {
                    corr[l] >= OCTAVE_GUARD * best
                        && corr[l] >= corr[l - 1]
                        && corr[l] >= corr[l + 1]
                })
                .unwrap_or_else(|| {
                    (min_lag..=max_lag)
                        .max_by(|&p, &q| corr[p].total_cmp(&corr[q]))
                        .expect("non-empty lag range")
                });
            let (r0, r1, r2) = (corr[lag - 1], corr[lag], corr[lag + 1]);
            let denom = r0 - 2.0 * r1 + r2;
            let shift = if denom.abs() > 1e-12 {
                (0.5 * (r0 - r2) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            let f0 = rate / (lag as f64 + shift);
            if (PITCH_MIN_HZ..=PITCH_MAX_HZ).contains(&f0) {
                f0
            } else {
                0.0
            }
        })
        .collect();
    Ok(PitchContour {
        frame_hz,
        frame_rate: rate / hop as f64,
    })
}

/// Pearson correlation over frames voiced in both contours.
///
/// The shorter contour is padded with unvoiced frames. Returns `None` when
/// fewer than two frames are jointly voiced or a contour has no variance
/// there (unless the two contours agree exactly, which scores 1).
pub fn pitch_correlation(reference: &PitchContour, test: &PitchContour) -> Option<f64> {
    let n = reference.frame_hz.len().max(test.frame_hz.len());
    let get = |c: &PitchContour, i: usize| c.frame_hz.get(i).copied().unwrap_or(0.0);
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (get(reference, i), get(test, i)))
        .filter(|(a, b)| *a > 0.0 && *b > 0.0)
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    if pairs.iter().all(|(a, b)| a == b) {
        return Some(1.0);
    }
    let m = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / m;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / m;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchStats {
    pub mean: f64,
    pub std: f64,
    pub excluded: usize,
}

/// Population mean and standard deviation, skipping undefined correlations.
pub fn pitch_stats(corrs: &[Option<f64>]) -> Result<PitchStats> {
    let values: Vec<f64> = corrs.iter().flatten().copied().collect();
    let excluded = corrs.len() - values.len();
    if values.is_empty() {
        return Err(Error::NoValues { excluded });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(PitchStats {
        mean,
        std: var.sqrt(),
        excluded,
    })
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '\'')
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.errors() as f64 / self.reference_len as f64
    }
}

/// Unit-cost Levenshtein alignment. Ties prefer substitutions, then
/// deletions, then insertions.
pub fn align_words<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerCounts> {
    if reference.is_empty() {
        return Err(Error::InvalidParameter("reference transcript is empty".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = WerCounts {
        reference_len: n,
        ..WerCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                counts.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    Ok(counts)
}

/// Word error rate in percent between two transcripts.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<f64> {
    Ok(align_words(&tokenize(reference), &tokenize(hypothesis))?.percent())
}

/// External perceptual-quality scorer (for example a P.862 implementation).
pub trait QualityBackend: Send + Sync {
    fn score(&self, reference: &Waveform, test: &Waveform) -> Result<f64>;
}

/// External speech recognizer.
pub trait AsrClient: Send + Sync {
    fn transcribe(&self, audio: &Waveform) -> Result<String>;
}

/// Returns `None` when no backend is configured; never invents a score.
pub fn quality_score(
    reference: &Waveform,
    test: &Waveform,
    backend: Option<&dyn QualityBackend>,
) -> Result<Option<f64>> {
    if reference.sample_rate != test.sample_rate {
        return Err(Error::RateMismatch {
            expected: reference.sample_rate,
            actual: test.sample_rate,
        });
    }
    backend.map(|b| b.score(reference, test)).transpose()
}

/// Shell command plugin. The command receives WAV paths as trailing
/// arguments and must print its answer on stdout.
#[derive(Clone, Debug)]
pub struct CommandPlugin {
    pub command: String,
    pub scratch_dir: PathBuf,
}

impl CommandPlugin {
    pub fn new(command: impl Into<String>, scratch_dir: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            scratch_dir: scratch_dir.into(),
        }
    }

    fn run(&self, files: &[&Waveform]) -> Result<String> {
        std::fs::create_dir_all(&self.scratch_dir).map_err(|e| Error::io(&self.scratch_dir, e))?;
        let dir = tempdir_in(&self.scratch_dir)?;
        let mut paths = Vec::new();
        for (i, w) in files.iter().enumerate() {
            let p = dir.join(format!("input{i}.wav"));
            save_wav(w, &p)?;
            paths.push(p);
        }
        let out = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$@\"", self.command))
            .arg("veil-plugin")
            .args(&paths)
            .output()
            .map_err(|e| Error::Backend(format!("failed to start {:?}: {e}", self.command)));
        let _ = std::fs::remove_dir_all(&dir);
        let out = out?;
        if !out.status.success() {
            return Err(Error::Backend(format!(
                "{:?} exited with {}: {}",
                self.command,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        String::from_utf8(out.stdout)
            .map_err(|e| Error::Backend(format!("{:?} printed invalid UTF-8: {e}", self.command)))
    }
}

fn tempdir_in(parent: &Path) -> Result<PathBuf> {
    static COUNTER: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
    let n = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let dir = parent.join(format!("plugin-{}-{n}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

impl QualityBackend for CommandPlugin {
    fn score(&self, reference: &Waveform, test: &Waveform) -> Result<f64> {
        let text = self.run(&[reference, test])?;
        text.trim()
            .parse()
            .map_err(|e| Error::Backend(format!("quality command printed {:?}: {e}", text.trim())))
    }
}

impl AsrClient for CommandPlugin {
    fn transcribe(&self, audio: &Waveform) -> Result<String> {
        Ok(self.run(&[audio])?.trim().to_string())
    }
}

/// Metrics of one test utterance against its reference recording.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceMetrics {
    pub utterance_id: String,
    pub snr_db: f64,
    pub pitch_corr: Option<f64>,
    pub quality: Option<f64>,
    pub wer: Option<WerCounts>,
}

/// One evaluated condition (for example `rec-rst`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub condition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eer_percent: Option<f64>,
    #[serde(with = "snr_repr")]
    pub snr_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer_percent: Option<f64>,
    pub pitch_corr_mean: f64,
    pub pitch_corr_std: f64,
    pub n_utterances: usize,
    pub excluded_pitch_count: usize,
}

/// Infinite SNR is written as the string `"inf"`.
mod snr_repr {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid snr value {s:?}"))),
        }
    }
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Aggregates per-utterance metrics. `eer` is a fraction, reported in percent.
pub fn assemble_report(
    condition: &str,
    eer: Option<f64>,
    utterances: &[UtteranceMetrics],
) -> Result<EvaluationReport> {
    if utterances.is_empty() {
        return Err(Error::InvalidParameter("no utterances were evaluated".into()));
    }
    let n = utterances.len();
    let snr_db = utterances.iter().map(|u| u.snr_db).sum::<f64>() / n as f64;
    let pitch = pitch_stats(&utterances.iter().map(|u| u.pitch_corr).collect::<Vec<_>>())?;
    let quality_score = utterances
        .iter()
        .map(|u| u.quality)
        .collect::<Option<Vec<f64>>>()
        .map(|q| q.iter().sum::<f64>() / n as f64);
    let wer_percent = utterances
        .iter()
        .map(|u| u.wer)
        .collect::<Option<Vec<WerCounts>>>()
        .map(|counts| {
            let errors: usize = counts.iter().map(WerCounts::errors).sum();
            let words: usize = counts.iter().map(|c| c.reference_len).sum();
            100.0 * errors as f64 / words as f64
        });
    Ok(EvaluationReport {
        condition: condition.to_string(),
        eer_percent: eer.map(|e| 100.0 * e),
        snr_db,
        quality_score,
        wer_percent,
        pitch_corr_mean: pitch.mean,
        pitch_corr_std: pitch.std,
        n_utterances: n,
        excluded_pitch_count: pitch.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, secs: f64) -> Waveform {
        let n = (secs * 16000.0) as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn silence_is_unvoiced() {
        let w = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        assert_eq!(extract_pitch(&w).unwrap().voiced_frames(), 0);
    }

    #[test]
    fn tone_frame_layout() {
        let c = extract_pitch(&tone(220.0, 1.0)).unwrap();
        assert_eq!(c.frame_hz.len(), 1 + (16000 - 400) / 160);
        assert_eq!(c.frame_rate, 100.0);
        assert!(extract_pitch(&Waveform::new(vec![0.1; 399], 16000).unwrap()).is_err());
    }

    #[test]
    fn correlation_examples() {
        let c = PitchContour {
            frame_hz: vec![0.0, 100.0, 120.0, 0.0, 140.0],
            frame_rate: 100.0,
        };
        assert_eq!(pitch_correlation(&c, &c), Some(1.0));
        let mirrored = PitchContour {
            frame_hz: vec![0.0, 140.0, 120.0, 0.0, 100.0],
            frame_rate: 100.0,
        };
        assert!((pitch_correlation(&c, &mirrored).unwrap() + 1.0).abs() < 1e-12);
        let one_voiced = PitchContour {
            frame_hz: vec![0.0, 100.0],
            frame_rate: 100.0,
        };
        assert_eq!(pitch_correlation(&c, &one_voiced), None);
    }

    #[test]
    fn stats_examples() {
        let s = pitch_stats(&[Some(1.0), Some(1.0)]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        let s = pitch_stats(&[Some(0.0), None, Some(2.0)]).unwrap();
        assert_eq!((s.mean, s.std, s.excluded), (1.0, 1.0, 1));
        let s = pitch_stats(&[Some(0.3)]).unwrap();
        assert_eq!((s.mean, s.std), (0.3, 0.0));
        assert!(matches!(pitch_stats(&[None]), Err(Error::NoValues { excluded: 1 })));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(word_error_rate("a b c", "a b c").unwrap(), 0.0);
        assert!((word_error_rate("a b c", "a x c").unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(word_error_rate("Hello, World!", "hello world").unwrap(), 0.0);
        assert!(word_error_rate("", "a").is_err());
        let c = align_words(&["a", "b"], &["x", "y", "z"]).unwrap();
        assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 1, 0));
        let c = align_words(&["a", "b", "c"], &["b"]).unwrap();
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 0, 2));
    }

    struct Constant(f64);
    impl QualityBackend for Constant {
        fn score(&self, _: &Waveform, _: &Waveform) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn quality_plugin_passthrough() {
        let w = tone(100.0, 0.1);
        assert_eq!(quality_score(&w, &w, Some(&Constant(4.5))).unwrap(), Some(4.5));
        assert_eq!(quality_score(&w, &w, None).unwrap(), None);
    }

    #[test]
    fn command_plugin_runs_shell_command() {
        let dir = tempfile::tempdir().unwrap();
        let q = CommandPlugin::new("echo 3.25 #", dir.path());
        let w = tone(100.0, 0.1);
        assert_eq!(q.score(&w, &w).unwrap(), 3.25);
        let failing = CommandPlugin::new("false", dir.path());
        assert!(matches!(failing.score(&w, &w), Err(Error::Backend(_))));
        let asr = CommandPlugin::new("echo hello world #", dir.path());
        assert_eq!(asr.transcribe(&w).unwrap(), "hello world");
    }

    #[test]
    fn report_serialization() {
        let u = UtteranceMetrics {
            utterance_id: "u".into(),
            snr_db: f64::INFINITY,
            pitch_corr: Some(1.0),
            quality: None,
            wer: None,
        };
        let r = assemble_report("rec-rec", Some(0.0), &[u.clone(), u]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["snr_db"], "inf");
        assert_eq!(v["pitch_corr_mean"], 1.0);
        assert_eq!(v["pitch_corr_std"], 0.0);
        assert!(v.get("quality_score").is_none());
        let back: EvaluationReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        assert!(assemble_report("x", None, &[]).is_err());
    }
}
