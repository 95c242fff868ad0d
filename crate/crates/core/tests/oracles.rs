mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use common::{edit_distance, eer_oracle, median_oracle, pearson_voiced, sine};
use veil::audio::{resample, snr_db, Waveform};
use veil::losses::{l2_norm, noise_loss};
use veil::metrics::{align_words, extract_pitch, pitch_correlation, PitchContour};
use veil::purify::{add_noise_unclamped, median_filter, purify_quantize};
use veil::speaker::{compute_eer, ScoreSet};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn median_matches_sort_oracle() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let len = r.random_range(1..64);
        let kernel = 2 * r.random_range(0..=(len - 1) / 2) + 1;
        // Few distinct levels so ties are common.
        let x: Vec<f64> = (0..len).map(|_| r.random_range(-4..=4) as f64 / 4.0).collect();
        assert_eq!(median_filter(&x, kernel).unwrap(), median_oracle(&x, kernel));
    }
}

#[test]
fn quantization_is_idempotent_and_bounded() {
    let mut r = rng(2);
    for _ in 0..200 {
        let x: Vec<f64> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(x.clone(), 16_000).unwrap();
        let q = purify_quantize(&w, 256).unwrap();
        assert_eq!(purify_quantize(&q, 256).unwrap(), q);
        for (a, b) in x.iter().zip(&q.samples) {
            assert!((a - b).abs() <= 1.0 / 512.0);
        }
    }
}

#[test]
fn add_noise_hits_requested_snr() {
    let mut r = rng(3);
    for seed in 0..50 {
        let x: Vec<f64> = (0..4000).map(|_| r.random_range(-0.5..0.5)).collect();
        let target = r.random_range(0.0..40.0);
        let y = add_noise_unclamped(&x, target, seed).unwrap();
        assert!((snr_db(&x, &y).unwrap() - target).abs() < 0.01);
    }
}

#[test]
fn eer_matches_brute_force() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let nt = r.random_range(1..20);
        let nn = r.random_range(1..40);
        // Coarse grid → many ties; shift targets up a random amount.
        let shift = r.random_range(0..4) as f64;
        let t: Vec<f64> = (0..nt).map(|_| r.random_range(0..8) as f64 + shift).collect();
        let n: Vec<f64> = (0..nn).map(|_| r.random_range(0..8) as f64).collect();
        let eer = compute_eer(&ScoreSet::from_parts(&t, &n)).unwrap();
        assert!((eer - eer_oracle(&t, &n)).abs() < 1e-9, "{t:?} {n:?}");
        assert!((0.0..=1.0).contains(&eer));
    }
}

#[test]
fn eer_extremes() {
    let sep = compute_eer(&ScoreSet::from_parts(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3])).unwrap();
    assert_eq!(sep, 0.0);
    let same = [0.1, 0.4, 0.4, 0.9];
    assert_eq!(compute_eer(&ScoreSet::from_parts(&same, &same)).unwrap(), 0.5);
}

fn all_sequences(vocab: &[&'static str], max_len: usize) -> Vec<Vec<&'static str>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for v in vocab {
                let mut t: Vec<&str> = s.clone();
                t.push(v);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn check_alignment(r: &[&str], h: &[&str]) {
    let c = align_words(r, h).unwrap();
    assert_eq!(c.errors(), edit_distance(r, h), "{r:?} vs {h:?}");
    assert_eq!(c.reference_len, r.len());
    // Both sides agree on the number of matched words.
    assert_eq!(
        r.len() - c.substitutions - c.deletions,
        h.len() - c.substitutions - c.insertions
    );
}

#[test]
fn wer_matches_dp_oracle_exhaustively_on_small_cases() {
    let seqs = all_sequences(&["a", "b", "c"], 4);
    for r in seqs.iter().filter(|s| !s.is_empty()) {
        for h in &seqs {
            check_alignment(r, h);
        }
    }
}

#[test]
fn wer_matches_dp_oracle_up_to_length_twelve() {
    let vocab = ["a", "b", "c", "d"];
    let mut g = rng(5);
    for _ in 0..3000 {
        let r: Vec<&str> = (0..g.random_range(1..=12)).map(|_| vocab[g.random_range(0..4)]).collect();
        let h: Vec<&str> = (0..g.random_range(0..=12)).map(|_| vocab[g.random_range(0..4)]).collect();
        check_alignment(&r, &h);
    }
}

#[test]
fn pitch_correlation_matches_independent_pearson() {
    let mut g = rng(6);
    for _ in 0..500 {
        let n = g.random_range(2..80);
        let contour = |g: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| if g.random_bool(0.7) { g.random_range(60.0..400.0) } else { 0.0 })
                .collect()
        };
        let a = contour(&mut g);
        let b = contour(&mut g);
        let ca = PitchContour { frame_hz: a.clone(), frame_rate: 100.0 };
        let cb = PitchContour { frame_hz: b.clone(), frame_rate: 100.0 };
        match (pitch_correlation(&ca, &cb), pearson_voiced(&a, &b)) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn pitch_of_pure_tones() {
    for f in [100.0, 150.0, 220.0, 330.0] {
        let w = Waveform::new(sine(f, 16_000.0, 16_000, 0.5), 16_000).unwrap();
        let c = extract_pitch(&w).unwrap();
        let voiced: Vec<f64> = c.frame_hz.iter().copied().filter(|v| *v > 0.0).collect();
        assert!(voiced.len() > c.frame_hz.len() * 9 / 10);
        assert!((median(voiced.clone()) - f).abs() < 2.0, "{f} Hz");
        assert!(voiced.iter().all(|v| (v - f).abs() < 2.0), "{f} Hz");
    }
}

#[test]
fn white_noise_is_mostly_unvoiced() {
    let mut g = rng(7);
    let x: Vec<f64> = (0..16_000).map(|_| g.random_range(-0.5..0.5)).collect();
    let c = extract_pitch(&Waveform::new(x, 16_000).unwrap()).unwrap();
    let unvoiced = c.frame_hz.iter().filter(|v| **v == 0.0).count();
    assert!(unvoiced * 10 >= c.frame_hz.len() * 9, "{unvoiced}/{}", c.frame_hz.len());
}

#[test]
fn noise_loss_matches_direct_norm() {
    let mut g = rng(8);
    for _ in 0..200 {
        let n: Vec<f64> = (0..64).map(|_| g.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..64).map(|_| g.random_range(-1.0..1.0)).collect();
        let direct = n.iter().zip(&r).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
        assert!((noise_loss(&n, &r).unwrap() - direct).abs() < 1e-12);
        assert!((l2_norm(&n) - n.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-12);
    }
}

fn spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..x.len() / 2].iter().map(|c| c.norm() / x.len() as f64 * 2.0).collect()
}

#[test]
fn downsampling_keeps_the_passband_and_rejects_aliases() {
    // 1 kHz stays, 12 kHz is above the new Nyquist and would alias to 4 kHz.
    let rate = 48_000.0;
    let len = 48_000;
    let x: Vec<f64> = sine(1000.0, rate, len, 0.4)
        .iter()
        .zip(sine(12_000.0, rate, len, 0.4))
        .map(|(a, b)| a + b)
        .collect();
    let y = resample(&Waveform::new(x, 48_000).unwrap(), 16_000).unwrap();
    assert_eq!(y.len(), 16_000);
    // Whole-second signal → 1 Hz bins; skip the filter edges.
    let body = &y.samples[4000..12_000];
    let spec = spectrum(body);
    let bin = |hz: f64| (hz * body.len() as f64 / 16_000.0).round() as usize;
    assert!((spec[bin(1000.0)] - 0.4).abs() < 0.004, "{}", spec[bin(1000.0)]);
    assert!(spec[bin(4000.0)] < 0.4e-3, "{}", spec[bin(4000.0)]);
}

#[test]
fn upsampling_matches_the_analytic_tone() {
    let x = sine(440.0, 8000.0, 8000, 0.5);
    let y = resample(&Waveform::new(x, 8000).unwrap(), 16_000).unwrap();
    let truth = sine(440.0, 16_000.0, 16_000, 0.5);
    let err = y.samples[2000..14_000]
        .iter()
        .zip(&truth[2000..14_000])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 2e-3, "{err}");
}
