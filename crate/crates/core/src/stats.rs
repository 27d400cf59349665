//! k-means clustering of filters and per-cluster summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::numeric::compensated_sum;
use crate::tensorio::{FilterBank, FILTER_DIM};

/// Relative slack when checking that distortion never increases.
const DISTORTION_SLACK: f64 = 1e-12;
const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    pub seed: u64,
    /// Mean squared distance of each sample to its nearest centroid.
    pub distortion: f64,
    /// Nearest-centroid index of every training sample.
    pub assignments: Vec<usize>,
    /// Distortion after seeding and after every Lloyd iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansModel {
    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and squared distance for every row of `x`.
fn nearest(x: &[f64], d: usize, centroids: &[f64]) -> Vec<(usize, f64)> {
    let n = x.len() / d;
    exec::map_chunks(n, ASSIGN_CHUNK, |range| {
        range
            .map(|i| {
                let w = &x[i * d..(i + 1) * d];
                let mut best = (0, f64::INFINITY);
                for (c, cen) in centroids.chunks(d).enumerate() {
                    let dist = sq_dist(w, cen);
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                best
            })
            .collect::<Vec<_>>()
    })
    .concat()
}

fn kmeans_pp(x: &[f64], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.len() / d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(&x[i * d..(i + 1) * d], &centroids[..d])).collect();
    for _ in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a centroid
            Err(_) => rng.gen_range(0..n),
        };
        let c = x[pick * d..(pick + 1) * d].to_vec();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(&x[i * d..(i + 1) * d], &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// Stops when assignments no longer change or after `max_iters` updates.
/// Clusters that go empty are moved onto the samples farthest from their
/// current centroids.
pub fn kmeans_fit(bank: &FilterBank, k: usize, seed: u64, max_iters: usize) -> Result<KMeansModel> {
    let n = bank.len();
    let d = bank.dim();
    if n == 0 {
        return Err(Error::Input("cannot cluster an empty bank".into()));
    }
    if k == 0 || n < k {
        return Err(Error::Input(format!("cannot form {k} clusters from {n} filters")));
    }
    let x = bank.to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&x, d, k, &mut rng);

    let mut near = nearest(&x, d, &centroids);
    let mut history = vec![mean_of(&near)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in near.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                sums[c * d + j] += x[i * d + j];
            }
        }
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| near[b].1.total_cmp(&near[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for c in 0..k {
            let dst = &mut centroids[c * d..(c + 1) * d];
            if counts[c] == 0 {
                let i = far.next().expect("n ≥ k");
                dst.copy_from_slice(&x[i * d..(i + 1) * d]);
            } else {
                for j in 0..d {
                    dst[j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        let next = nearest(&x, d, &centroids);
        let distortion = mean_of(&next);
        let prev = *history.last().unwrap();
        if distortion > prev + DISTORTION_SLACK * prev.abs() {
            return Err(Error::Invariant(format!(
                "k-means distortion increased from {prev} to {distortion} at iteration {iterations}"
            )));
        }
        history.push(distortion);
        let stable = next.iter().zip(&near).all(|(a, b)| a.0 == b.0);
        near = next;
        if stable {
            break;
        }
    }
    Ok(KMeansModel {
        k,
        dim: d,
        centroids,
        seed,
        distortion: *history.last().unwrap(),
        assignments: near.iter().map(|p| p.0).collect(),
        history,
        iterations,
    })
}

fn mean_of(near: &[(usize, f64)]) -> f64 {
    compensated_sum(near.iter().map(|p| p.1)) / near.len() as f64
}

/// Nearest centroid for each filter; ties go to the lowest index.
pub fn assign(model: &KMeansModel, bank: &FilterBank) -> Result<Vec<usize>> {
    if bank.dim() != model.dim {
        return Err(Error::DimMismatch {
            expected: model.dim,
            got: bank.dim(),
        });
    }
    Ok(nearest(&bank.to_f64(), model.dim, &model.centroids)
        .into_iter()
        .map(|p| p.0)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub k: usize,
    pub dim: usize,
    pub assignments: Vec<usize>,
    pub histogram: Vec<usize>,
    /// Row-major `k × dim`.
    pub means: Vec<f64>,
    /// `k` row-major `dim × dim` population covariance matrices.
    pub covariances: Vec<f64>,
    pub empty: Vec<bool>,
}

impl ClusterReport {
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn covariance(&self, k: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.covariances[k * s..(k + 1) * s]
    }
}

/// Per-cluster mean and population covariance (divides by the cluster size).
pub fn cluster_moments(bank: &FilterBank, assignments: &[usize], k: usize) -> Result<ClusterReport> {
    let d = bank.dim();
    if assignments.len() != bank.len() {
        return Err(Error::DimMismatch {
            expected: bank.len(),
            got: assignments.len(),
        });
    }
    if let Some(&a) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::Input(format!("assignment {a} out of range for {k} clusters")));
    }
    let x = bank.to_f64();
    let mut histogram = vec![0usize; k];
    let mut means = vec![0.0; k * d];
    for (i, &a) in assignments.iter().enumerate() {
        histogram[a] += 1;
        for j in 0..d {
            means[a * d + j] += x[i * d + j];
        }
    }
    for c in 0..k {
        if histogram[c] > 0 {
            for j in 0..d {
                means[c * d + j] /= histogram[c] as f64;
            }
        }
    }
    let mut covariances = vec![0.0; k * d * d];
    let mut centered = vec![0.0; d];
    for (i, &a) in assignments.iter().enumerate() {
        for j in 0..d {
            centered[j] = x[i * d + j] - means[a * d + j];
        }
        let cov = &mut covariances[a * d * d..(a + 1) * d * d];
        for r in 0..d {
            for c in r..d {
                cov[r * d + c] += centered[r] * centered[c];
            }
        }
    }
    for c in 0..k {
        let cov = &mut covariances[c * d * d..(c + 1) * d * d];
        let count = histogram[c].max(1) as f64;
        for r in 0..d {
            for col in r..d {
                let v = cov[r * d + col] / count;
                cov[r * d + col] = v;
                cov[col * d + r] = v;
            }
        }
    }
    Ok(ClusterReport {
        k,
        dim: d,
        assignments: assignments.to_vec(),
        empty: histogram.iter().map(|&h| h == 0).collect(),
        histogram,
        means,
        covariances,
    })
}

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Comma-separated rows of `cols` reals, one per line.
pub fn csv_matrix(values: &[f64], cols: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// 8-bit binary PGM of a `width`-wide grid, min–max normalized.
/// A constant grid renders as mid-gray.
pub fn pgm_grid(values: &[f64], width: usize) -> Vec<u8> {
    let height = values.len() / width;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let px = if max > min {
            (255.0 * (v - min) / (max - min)).round() as u8
        } else {
            128
        };
        out.push(px);
    }
    out
}

/// Writes per-cluster covariance and mean CSVs, mean PGMs and the histogram.
/// Returns the written paths in a fixed order.
pub fn render_report(report: &ClusterReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    if report.dim != FILTER_DIM {
        return Err(Error::Input(format!(
            "mean grids need {FILTER_DIM}-dimensional filters, report has {}",
            report.dim
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let width = (report.k.saturating_sub(1)).to_string().len().max(2);
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    for c in 0..report.k {
        let d = report.dim;
        put(format!("cluster_{c:0width$}_cov.csv"), csv_matrix(report.covariance(c), d).into_bytes())?;
        put(format!("cluster_{c:0width$}_mean.csv"), csv_matrix(report.mean(c), 3).into_bytes())?;
        put(format!("cluster_{c:0width$}_mean.pgm"), pgm_grid(report.mean(c), 3))?;
    }
    let mut hist = String::new();
    for (i, h) in report.histogram.iter().enumerate() {
        if i > 0 {
            hist.push(',');
        }
        write!(hist, "{h}").unwrap();
    }
    hist.push('\n');
    put("histogram.csv".into(), hist.into_bytes())?;
    Ok(written)
}
