//! Waveforms, WAV I/O, resampling, fixed-length segmentation and SNR.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every model in this crate operates at.
pub const MODEL_SAMPLE_RATE: u32 = 16_000;

const PCM16_SCALE: f64 = 32768.0;

/// Mono real-valued audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub utterance_id: Option<String>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySignal);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
            utterance_id: None,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.utterance_id = Some(id.into());
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Same id and rate, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
            utterance_id: self.utterance_id.clone(),
        }
    }
}

/// Reads a 16-bit integer PCM WAV file, averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: format!(
                "{:?} with {} bits per sample (only 16-bit integer PCM is supported)",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedWav {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    let samples: Vec<f64> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / PCM16_SCALE).sum();
            (sum / channels as f64).clamp(-1.0, 1.0)
        })
        .collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let mut w = Waveform::new(samples, spec.sample_rate)?;
    w.utterance_id = id;
    Ok(w)
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: "unsupported WAV feature".into(),
        },
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Writes mono PCM16. Returns the number of samples that had to be clamped.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    if w.samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    let mut clamped = 0;
    for &v in &w.samples {
        if !(-1.0..=1.0).contains(&v) {
            clamped += 1;
        }
        let q = (v.clamp(-1.0, 1.0) * PCM16_SCALE)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} samples to [-1, 1]", path.display());
    }
    Ok(clamped)
}

/// Zero crossings of the interpolation kernel on each side.
const SINC_HALF_ZEROS: usize = 24;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let t = (x + 1.0) * 0.5;
    0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc polyphase resampling to `target_rate`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidParameter("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as u64;
    let dst = target_rate as u64;
    let g = gcd(src, dst);
    let up = (dst / g) as usize;
    let down = (src / g) as usize;
    let out_len = ((w.samples.len() as u64 * dst) as f64 / src as f64).round() as usize;

    // Cutoff relative to the source Nyquist frequency.
    let cutoff = 0.97 * (dst as f64 / src as f64).min(1.0);
    let half_width = (SINC_HALF_ZEROS as f64 / cutoff).ceil() as isize;
    let taps = (2 * half_width) as usize;
    // One filter per output phase; output i sits at source time i*down/up.
    let filters: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (0..taps)
                .map(|k| {
                    let offset = k as isize - half_width + 1;
                    let tau = offset as f64 - frac;
                    let x = tau / half_width as f64;
                    if x.abs() >= 1.0 {
                        0.0
                    } else {
                        cutoff * sinc(cutoff * tau) * blackman(x)
                    }
                })
                .collect()
        })
        .collect();

    let input = &w.samples;
    let n = input.len() as isize;
    let out: Vec<f64> = (0..out_len)
        .map(|i| {
            let pos = i * down;
            let base = (pos / up) as isize;
            let filter = &filters[pos % up];
            filter
                .iter()
                .enumerate()
                .map(|(k, h)| {
                    let idx = base + k as isize - half_width + 1;
                    if idx >= 0 && idx < n {
                        h * input[idx as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();
    let mut res = Waveform::new(out, target_rate)?;
    res.utterance_id = w.utterance_id.clone();
    Ok(res)
}

/// Fixed-length chunk of an utterance. Samples past `valid_len` are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub samples: Vec<f64>,
    pub valid_len: usize,
}

/// Splits into non-overlapping `seg_len` chunks, zero-padding the last one.
pub fn segment(samples: &[f64], seg_len: usize) -> Result<Vec<Segment>> {
    if seg_len == 0 {
        return Err(Error::InvalidParameter("segment length must be positive".into()));
    }
    Ok(samples
        .chunks(seg_len)
        .map(|chunk| {
            let mut padded = chunk.to_vec();
            padded.resize(seg_len, 0.0);
            Segment {
                samples: padded,
                valid_len: chunk.len(),
            }
        })
        .collect())
}

/// Concatenates the valid part of each segment.
pub fn reassemble(segments: &[Segment]) -> Vec<f64> {
    segments
        .iter()
        .flat_map(|s| s.samples[..s.valid_len].iter().copied())
        .collect()
}

/// Signal-to-noise ratio in dB of `test` against `reference`.
///
/// Returns `f64::INFINITY` when the two are identical.
pub fn compute_snr(reference: &Waveform, test: &Waveform) -> Result<f64> {
    if reference.sample_rate != test.sample_rate {
        return Err(Error::RateMismatch {
            expected: reference.sample_rate,
            actual: test.sample_rate,
        });
    }
    snr_db(&reference.samples, &test.samples)
}

pub fn snr_db(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: test.len(),
        });
    }
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    let residual: f64 = reference
        .iter()
        .zip(test)
        .map(|(r, t)| (r - t) * (r - t))
        .sum();
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / residual).log10())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Utterance list, stored as JSON lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Relative paths resolve against this directory.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate utterance id {:?}",
                    e.utterance_id
                )));
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            entries.push(entry);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            let line = serde_json::to_string(e)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, utterance_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == utterance_id)
    }

    /// Loads an entry's audio at the model rate, resampling when needed.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<Waveform> {
        let w = load_wav(self.resolve(entry))?;
        let mut w = if w.sample_rate != MODEL_SAMPLE_RATE {
            log::info!(
                "resampling {} from {} Hz to {} Hz",
                entry.utterance_id,
                w.sample_rate,
                MODEL_SAMPLE_RATE
            );
            resample(&w, MODEL_SAMPLE_RATE)?
        } else {
            w
        };
        w.utterance_id = Some(entry.utterance_id.clone());
        Ok(w)
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pcm(path: &Path, channels: u16, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for s in samples {
            w.write_sample(*s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_pcm(&p, 1, 16000, &[0, 16384, -32768]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.utterance_id.as_deref(), Some("a"));
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_pcm(&p, 2, 16000, &[16384, 0, -16384, 16384]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.25, 0.0]);
    }

    #[test]
    fn low_rate_file_is_passed_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.wav");
        write_pcm(&p, 1, 8000, &[1, 2, 3]);
        assert_eq!(load_wav(&p).unwrap().sample_rate, 8000);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.wav");
        assert!(matches!(load_wav(&missing), Err(Error::MissingFile(_))));

        let junk = dir.path().join("junk.wav");
        fs::write(&junk, b"definitely not a riff file").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::MalformedWav { .. })));

        let float = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_wav(&float),
            Err(Error::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn save_round_trip_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let w = Waveform::new(vec![0.0, 0.5, -1.0, 1.3], 16000).unwrap();
        assert_eq!(save_wav(&w, &p).unwrap(), 1);
        let back = load_wav(&p).unwrap();
        for (a, b) in back.samples.iter().zip([0.0, 0.5, -1.0, 1.0]) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn empty_waveform_is_rejected() {
        assert!(matches!(Waveform::new(vec![], 16000), Err(Error::EmptySignal)));
        let w = Waveform {
            samples: vec![],
            sample_rate: 16000,
            utterance_id: None,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_wav(&w, dir.path().join("e.wav")),
            Err(Error::EmptySignal)
        ));
    }

    #[test]
    fn resample_identity_and_length() {
        let w = Waveform::new((0..100).map(|i| (i as f64 * 0.1).sin()).collect(), 16000).unwrap();
        assert_eq!(resample(&w, 16000).unwrap(), w);
        let one_sec = Waveform::new(vec![0.1; 8000], 8000).unwrap();
        assert_eq!(resample(&one_sec, 16000).unwrap().len(), 16000);
        assert_eq!(resample(&one_sec, 11025).unwrap().len(), 11025);
    }

    #[test]
    fn segment_arithmetic() {
        let segs = segment(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap();
        let lens: Vec<usize> = segs.iter().map(|s| s.valid_len).collect();
        assert_eq!(lens, vec![2, 2, 1]);
        assert_eq!(segs[2].samples, vec![5.0, 0.0]);
        let single = segment(&[1.0, 2.0], 2).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].valid_len, 2);
        assert!(segment(&[1.0], 0).is_err());
    }

    #[test]
    fn snr_examples() {
        let r = Waveform::new(vec![1.0, 0.0, 0.0, 0.0], 16000).unwrap();
        assert_eq!(compute_snr(&r, &r).unwrap(), f64::INFINITY);
        let t = r.with_samples(vec![1.1, 0.0, 0.0, 0.0]);
        assert!((compute_snr(&r, &t).unwrap() - 20.0).abs() < 1e-9);
        let zero = r.with_samples(vec![0.0; 4]);
        assert!(compute_snr(&r, &zero).unwrap().abs() < 1e-12);
        assert!(matches!(compute_snr(&zero, &r), Err(Error::ZeroEnergy)));
        let short = r.with_samples(vec![0.0; 3]);
        assert!(matches!(
            compute_snr(&r, &short),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let e = ManifestEntry {
            utterance_id: "u".into(),
            speaker_id: "s".into(),
            path: "u.wav".into(),
            text: None,
        };
        assert!(Manifest::new(vec![e.clone(), e], ".").is_err());
    }
}
