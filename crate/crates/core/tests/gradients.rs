use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use veil::losses::{
    angular_loss, angular_loss_grad, mask_loss, mask_loss_grad, noise_loss, noise_loss_grad,
    quality_loss, quality_loss_grad,
};
use veil::speaker::DifferentiableBackend;
use veil::trainer::gradcheck_extractor;
use veil::{gradcheck, Checkpoint, NetConfig, NoiseMaskNet, Trainer, TrainingConfig};

const H: f64 = 1e-6;

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

fn random_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Central difference of `f` along every coordinate of `x`.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + H;
            let up = f(&x);
            x[i] = v - H;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    for (i, (a, f)) in analytic.iter().zip(numeric).enumerate() {
        assert!(rel_err(*a, *f) < tol, "coord {i}: {a} vs {f}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let z = random_vec(&mut r, 16, -1.0, 1.0);
        let za = random_vec(&mut r, 16, -1.0, 1.0);
        let num = numeric_grad(&za, |v| angular_loss(&z, v).unwrap());
        assert_close(&angular_loss_grad(&z, &za).unwrap(), &num, 1e-5);

        let x = random_vec(&mut r, 32, -0.5, 0.5);
        let xa = random_vec(&mut r, 32, -0.5, 0.5);
        let m = random_vec(&mut r, 32, 0.0, 1.0);
        let alpha = r.random_range(0.0..1.0);
        let (gx, gm) = quality_loss_grad(&x, &xa, &m, alpha).unwrap();
        assert_close(&gx, &numeric_grad(&xa, |v| quality_loss(&x, v, &m, alpha).unwrap()), 1e-5);
        assert_close(&gm, &numeric_grad(&m, |v| quality_loss(&x, &xa, v, alpha).unwrap()), 1e-5);

        let n = random_vec(&mut r, 32, -1.0, 1.0);
        let nr = random_vec(&mut r, 32, -1.0, 1.0);
        let g = noise_loss_grad(&n, &nr).unwrap();
        assert_close(&g, &numeric_grad(&n, |v| noise_loss(v, &nr).unwrap()), 1e-5);
        assert_close(&g, &numeric_grad(&nr, |v| noise_loss(&n, v).unwrap()), 1e-5);

        let mp = random_vec(&mut r, 32, 0.0, 1.0);
        let g = mask_loss_grad(&m, &mp).unwrap();
        assert_close(&g, &numeric_grad(&m, |v| mask_loss(v, &mp).unwrap()), 1e-5);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_close(&neg, &numeric_grad(&mp, |v| mask_loss(&m, v).unwrap()), 1e-5);
    }
}

/// `sum_i c_i * eps * n_i * m_i` for a fixed weighting `c`.
fn weighted_perturbation(net: &NoiseMaskNet, x: &[f64], c: &[f64], eps: f64) -> f64 {
    let t = net.forward(x).unwrap();
    t.noise()
        .iter()
        .zip(t.mask())
        .zip(c)
        .map(|((n, m), c)| c * eps * n * m)
        .sum()
}

fn check_network_gradients(seed: u64) {
    let config = NetConfig {
        seg_len: 64,
        channels: vec![3, 4],
        kernel: 8,
        stride: 4,
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NoiseMaskNet::new(config, seed).unwrap();
    let x = random_vec(&mut r, 64, -0.8, 0.8);
    let c = random_vec(&mut r, 64, -1.0, 1.0);
    let eps = 0.05;

    let t = net.forward(&x).unwrap();
    let g_noise: Vec<f64> = t.mask().iter().zip(&c).map(|(m, c)| c * eps * m).collect();
    let g_mask: Vec<f64> = t.noise().iter().zip(&c).map(|(n, c)| c * eps * n).collect();
    let mut grads = net.params().zeros_like();
    let dx = net.backward(&t, &g_noise, &g_mask, &mut grads, true).unwrap();

    let num_x = numeric_grad(&x, |v| weighted_perturbation(&net, v, &c, eps));
    let mut worst = 0.0f64;
    for (a, f) in dx.iter().zip(&num_x) {
        worst = worst.max(rel_err(*a, *f));
    }
    assert!(worst < 1e-4, "input gradient rel err {worst}");

    worst = 0.0;
    for flat in 0..net.params().num_values() {
        let (p, o) = net.params().locate(flat).unwrap();
        let v = net.params().get(p)[o];
        net.params_mut().get_mut(p)[o] = v + H;
        let up = weighted_perturbation(&net, &x, &c, eps);
        net.params_mut().get_mut(p)[o] = v - H;
        let down = weighted_perturbation(&net, &x, &c, eps);
        net.params_mut().get_mut(p)[o] = v;
        worst = worst.max(rel_err(grads.flat(p, o), (up - down) / (2.0 * H)));
    }
    assert!(worst < 1e-4, "parameter gradient rel err {worst}");
}

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_network_gradients(seed);
    }
}

#[test]
fn extractor_input_gradient_matches_finite_differences() {
    let ext = gradcheck_extractor(5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..256)
        .map(|i| 0.4 * (i as f64 * 0.11).sin() + r.random_range(-0.1..0.1))
        .collect();
    let c = random_vec(&mut r, 8, -1.0, 1.0);
    let (_, dx) = ext
        .embed_vjp(&x, &mut |_| Ok(c.clone()))
        .unwrap();
    let f = |v: &[f64]| {
        let (z, _) = ext.embed_vjp(v, &mut |z| Ok(vec![0.0; z.len()])).unwrap();
        z.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
    };
    let num = numeric_grad(&x, f);
    let worst = dx
        .iter()
        .zip(&num)
        .map(|(a, f)| rel_err(*a, *f))
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn gradcheck_passes_on_several_seeds() {
    for seed in [0, 1, 7, 42] {
        let report = gradcheck(&TrainingConfig::tiny(), seed).unwrap();
        assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
        assert!(report.checked >= 20);
    }
}

fn toy_data(seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|k| {
            (0..600)
                .map(|i| 0.3 * (i as f64 * 0.05 * (k + 1) as f64).sin() + r.random_range(-0.05..0.05))
                .collect()
        })
        .collect()
}

#[test]
fn resumed_training_is_bit_identical() {
    let ext = gradcheck_extractor(9).unwrap();
    let config = TrainingConfig {
        epochs: 2,
        batch_size: 2,
        learning_rate: 1e-3,
        ..TrainingConfig::tiny()
    };
    let data = toy_data(3);

    let straight = Trainer::new(config.clone(), &ext)
        .unwrap()
        .train(&data, &mut |_| Ok(()))
        .unwrap();

    let first = Trainer::new(TrainingConfig { epochs: 1, ..config }, &ext)
        .unwrap()
        .train(&data, &mut |_| Ok(()))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.bin");
    first.save(&path).unwrap();
    let resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), 2, &ext)
        .unwrap()
        .train(&data, &mut |_| Ok(()))
        .unwrap();

    assert_eq!(
        straight.to_container().unwrap().to_bytes().unwrap(),
        resumed.to_container().unwrap().to_bytes().unwrap()
    );
}
