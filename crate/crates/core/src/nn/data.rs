use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::network::Batch;

/// One label byte followed by 3×32×32 pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]`, stored `N × C × H × W` as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], classes: usize, split: Split) -> Result<Self> {
        let len: usize = shape.iter().product();
        if images.len() != labels.len() * len {
            return Err(Error::DimMismatch {
                expected: labels.len() * len,
                got: images.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, shape, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.example_len();
        &self.images[i * len..(i + 1) * len]
    }

    /// Keeps the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.images.truncate(n * self.example_len());
            self.labels.truncate(n);
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.example_len());
        for &i in indices {
            inputs.extend(self.image(i).iter().map(|&v| v as f64));
        }
        Batch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Parses one CIFAR-10 binary batch file.
pub fn read_cifar10_batch(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, split).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "size {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(images, labels, [3, 32, 32], 10, split)
}

/// Loads the train (`data_batch_1..5.bin`) or test (`test_batch.bin`) split,
/// keeping the first `limit` examples when given.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut out: Option<Dataset> = None;
    for f in files {
        if limit.is_some_and(|l| out.as_ref().is_some_and(|d| d.len() >= l)) {
            break;
        }
        let part = read_cifar10_batch(dir.join(&f), split)?;
        match out.as_mut() {
            None => out = Some(part),
            Some(d) => {
                d.images.extend_from_slice(&part.images);
                d.labels.extend_from_slice(&part.labels);
            }
        }
    }
    let mut d = out.expect("at least one file per split");
    if let Some(l) = limit {
        d.truncate(l);
    }
    Ok(d)
}

/// Parameters of the synthetic blob-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_channels() -> usize {
    3
}

fn default_noise() -> f64 {
    0.1
}

/// Class-conditional Gaussian-blob images.
///
/// Each class gets a prototype (blob position, width and per-channel
/// intensity) drawn from `seed`; examples add pixel noise drawn from
/// `(seed, split)` and are clamped to `[0, 1]`. Labels cycle through the
/// classes, so every class has exactly `per_class` examples.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, split: Split) -> Result<Dataset> {
    let SynthSpec { classes, per_class, channels, height, width, noise } = *spec;
    if classes < 2 || per_class == 0 || channels == 0 || height == 0 || width == 0 || !(noise >= 0.0) {
        return Err(Error::Config(format!("invalid synthetic dataset spec {spec:?}")));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = height * width;
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let cy = proto_rng.gen_range(0.0..height as f64);
            let cx = proto_rng.gen_range(0.0..width as f64);
            let s = proto_rng.gen_range(0.15..0.35) * height.min(width) as f64;
            let mut img = vec![0.0f32; channels * hw];
            for c in 0..channels {
                let amp = proto_rng.gen_range(0.3..0.9);
                for y in 0..height {
                    for x in 0..width {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[c * hw + y * width + x] = (0.1 + amp * (-d2 / (2.0 * s * s)).exp()) as f32;
                    }
                }
            }
            img
        })
        .collect();
    let split_tag = match split {
        Split::Train => 0x7472_6169_6e00,
        Split::Test => 0x7465_7374_0000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_tag);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let n = classes * per_class;
    let mut images = Vec::with_capacity(n * channels * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        images.extend(prototypes[label].iter().map(|&p| {
            let v = if noise > 0.0 { p as f64 + normal.sample(&mut rng) } else { p as f64 };
            v.clamp(0.0, 1.0) as f32
        }));
    }
    Dataset::new(images, labels, [channels, height, width], classes, split)
}
