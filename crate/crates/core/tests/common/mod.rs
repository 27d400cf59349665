#![allow(dead_code)]

use filterprior::GaussianMixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random diagonal mixture with well-conditioned variances.
pub fn random_mixture(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let weights = raw.iter().map(|r| r / s).collect();
    let means = (0..k * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let vars = (0..k * d).map(|_| rng.gen_range(0.1..2.0)).collect();
    GaussianMixture::new(weights, means, vars).unwrap()
}

/// A point near a randomly chosen component.
pub fn probe_near(rng: &mut ChaCha8Rng, m: &GaussianMixture) -> Vec<f64> {
    let c = rng.gen_range(0..m.k());
    let n = Normal::new(0.0, 1.0).unwrap();
    m.mean(c)
        .iter()
        .zip(m.variance(c))
        .map(|(mu, v)| mu + 1.5 * v.sqrt() * n.sample(rng))
        .collect()
}

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = p[j];
            p[j] = orig + h;
            let up = f(&p);
            p[j] = orig - h;
            let down = f(&p);
            p[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, taken as zero when both are exactly zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

pub fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Best matching of fitted to true means over all permutations (small K only).
pub fn best_permutation(fitted: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<usize> {
    fn permute(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            cur.push(v);
            permute(rest, cur, out);
            cur.pop();
            rest.insert(i, v);
        }
    }
    let mut perms = Vec::new();
    permute(&mut (0..truth.len()).collect(), &mut Vec::new(), &mut perms);
    let cost = |p: &Vec<usize>| -> f64 {
        p.iter()
            .enumerate()
            .map(|(t, &f)| truth[t].iter().zip(&fitted[f]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum()
    };
    perms
        .into_iter()
        .min_by(|a, b| cost(a).total_cmp(&cost(b)))
        .unwrap()
}
