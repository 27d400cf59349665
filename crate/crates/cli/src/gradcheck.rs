use filterprior::gmm::{grad_approx, grad_exact, nll, responsibilities};
use filterprior::GaussianMixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Top responsibility above which the single-component gradient must agree
/// with the exact one.
pub const DOMINANCE: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub index: usize,
    pub point: Vec<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub probes: usize,
    /// Largest per-coordinate relative error of the exact gradient against
    /// central differences of the NLL.
    pub worst_fd: ProbeResult,
    /// Probes whose top responsibility exceeded [`DOMINANCE`].
    pub dominant: usize,
    /// Largest absolute approximate-vs-exact difference over dominant probes.
    pub worst_dominant: Option<ProbeResult>,
    /// Whether the two gradients were bitwise equal on every probe (K=1 contract).
    pub identical_everywhere: bool,
}

impl GradcheckReport {
    pub fn passes(&self, fd_tol: f64, approx_tol: f64, k: usize) -> bool {
        self.worst_fd.error <= fd_tol
            && self.worst_dominant.as_ref().is_none_or(|p| p.error <= approx_tol)
            && (k != 1 || self.identical_everywhere)
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

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

/// A point drawn around a random component, within about 1.5 standard deviations.
pub fn probe_point(rng: &mut ChaCha8Rng, m: &GaussianMixture) -> Vec<f64> {
    let c = rng.gen_range(0..m.k());
    m.mean(c)
        .iter()
        .zip(m.variance(c))
        .map(|(mu, v)| {
            let z: f64 = StandardNormal.sample(rng);
            mu + 1.5 * v.sqrt() * z
        })
        .collect()
}

/// Probes `m` at `probes` random points drawn from `seed`.
///
/// Each random point is checked against central differences. The dominance
/// check runs on the random points and additionally on one component mean
/// per probe, so that dominated points occur even for overlapping mixtures.
pub fn gradcheck(m: &GaussianMixture, probes: usize, seed: u64, step: f64) -> filterprior::Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_fd = ProbeResult { index: 0, point: Vec::new(), error: 0.0 };
    let mut worst_dominant: Option<ProbeResult> = None;
    let mut dominant = 0;
    let mut identical = true;
    for index in 0..probes {
        let point = probe_point(&mut rng, m);
        let exact = grad_exact(&point, m)?;
        let fd = central_diff(|x| nll(x, m).expect("dims checked"), &point, step);
        let err = exact.iter().zip(&fd).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
        if index == 0 || err > worst_fd.error {
            worst_fd = ProbeResult { index, point: point.clone(), error: err };
        }
        let at_mean = m.mean(rng.gen_range(0..m.k())).to_vec();
        for p in [point, at_mean] {
            let exact = grad_exact(&p, m)?;
            let approx = grad_approx(&p, m)?;
            identical &= exact.iter().zip(&approx).all(|(a, b)| a.to_bits() == b.to_bits());
            let top = responsibilities(&p, m)?.into_iter().fold(0.0, f64::max);
            if top > DOMINANCE {
                dominant += 1;
                let diff = exact.iter().zip(&approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if worst_dominant.as_ref().is_none_or(|w| diff > w.error) {
                    worst_dominant = Some(ProbeResult { index, point: p, error: diff });
                }
            }
        }
    }
    Ok(GradcheckReport { probes, worst_fd, dominant, worst_dominant, identical_everywhere: identical })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_passes_with_identical_gradients() {
        let m = GaussianMixture::new(vec![1.0], vec![0.2; 9], vec![0.7; 9]).unwrap();
        let r = gradcheck(&m, 20, 1, 1e-5).unwrap();
        assert!(r.identical_everywhere);
        assert_eq!(r.dominant, 40);
        assert!(r.passes(1e-6, 1e-9, 1));
    }
}
