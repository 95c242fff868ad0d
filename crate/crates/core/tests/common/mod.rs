//! Independent reference implementations the library is checked against.
#![allow(dead_code)]

/// Sliding median with edge replication: pad, then sort every window.
pub fn median_oracle(x: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let n = x.len() as isize;
    (0..x.len())
        .map(|i| {
            let mut w: Vec<f64> = (i as isize - half as isize..=i as isize + half as isize)
                .map(|j| x[j.clamp(0, n - 1) as usize])
                .collect();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            w[half]
        })
        .collect()
}

/// FAR and FRR at threshold `t` by direct counting (accept when `s >= t`).
fn rates(targets: &[f64], nontargets: &[f64], t: f64) -> (f64, f64) {
    let fa = nontargets.iter().filter(|&&s| s >= t).count() as f64;
    let fr = targets.iter().filter(|&&s| s < t).count() as f64;
    (fa / nontargets.len() as f64, fr / targets.len() as f64)
}

/// Enumerates every candidate threshold (each distinct score and one above
/// the maximum), finds the first pair of neighbours where FAR - FRR changes
/// sign and interpolates linearly between them.
pub fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| rates(targets, nontargets, t))
        .collect();
    curve.push((0.0, 1.0));
    for k in 1..curve.len() {
        let (far0, frr0) = curve[k - 1];
        let (far1, frr1) = curve[k];
        let (d0, d1) = (far0 - frr0, far1 - frr1);
        if d1 <= 0.0 {
            if d0 == d1 {
                return far1;
            }
            let w = d0 / (d0 - d1);
            return far0 + w * (far1 - far0);
        }
    }
    unreachable!("the sentinel has FAR - FRR = -1")
}

/// Plain Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Pearson correlation over frames where both contours are voiced (> 0).
pub fn pearson_voiced(a: &[f64], b: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (*x, *y))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (mx, my) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pairs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = pairs.iter().map(|(_, y)| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn sine(freq: f64, rate: f64, len: usize, amp: f64) -> Vec<f64> {
    (0..len)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin())
        .collect()
}
