//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use mmvq_core::features::{ChannelSeries, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One-pass Pearson from raw sums; 0 when either side has no variance.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 1e-12 * n * sxx.max(1.0) || vy <= 1e-12 * n * syy.max(1.0) {
        return 0.0;
    }
    (n * sxy - sx * sy) / (vx * vy).sqrt()
}

pub fn random_series(r: &mut ChaCha8Rng, m: Modality, channels: usize, frames: usize, rate: f64) -> ChannelSeries {
    let names = (0..channels).map(|c| format!("c{c}")).collect();
    let samples = (0..channels)
        .map(|_| {
            let mut v = 0.0;
            (0..frames)
                .map(|_| {
                    v = 0.7 * v + r.random_range(-1.0..1.0);
                    v
                })
                .collect()
        })
        .collect();
    ChannelSeries::new(m, names, rate, samples, "sess", "subj").unwrap()
}

/// Linear scan over all codebook rows, ties to the first.
pub fn brute_nearest(z: &[f64], rows: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, e) in rows.iter().enumerate() {
        let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Per-class (precision, recall, f1, support) by direct counting.
pub fn oracle_class_counts(pred: &[usize], truth: &[usize], c: usize) -> (f64, f64, f64, usize) {
    let tp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t != c).count() as f64;
    let fnn = pred.iter().zip(truth).filter(|(&p, &t)| p != c && t == c).count() as f64;
    let support = truth.iter().filter(|&&t| t == c).count();
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
    let f1 = if tp > 0.0 {
        2.0 * tp / (2.0 * tp + fp + fnn)
    } else {
        0.0
    };
    (p, r, f1, support)
}

/// AUC by comparing every positive/negative pair, ties worth one half.
pub fn all_pairs_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

pub fn oracle_weighted_auc(probs: &[[f64; 3]], truth: &[usize]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0usize);
    for c in 0..3 {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if let Some(a) = all_pairs_auc(&s, &pos) {
            let n = pos.iter().filter(|&&p| p).count();
            num += a * n as f64;
            den += n;
        }
    }
    (den > 0).then(|| num / den as f64)
}

pub fn random_probs(r: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            // coarse levels make ties common
            let raw: [f64; 3] = std::array::from_fn(|_| (r.random_range(0..levels) + 1) as f64);
            let s: f64 = raw.iter().sum();
            raw.map(|v| v / s)
        })
        .collect()
}
