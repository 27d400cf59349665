use std::path::{Path, PathBuf};

use filterprior::nn::{load_cifar10, synth_dataset, Dataset, Network, Split, SynthSpec, TrainConfig};
use filterprior::regularizer::{GradientMode, RegConfig, Scope};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const REQUIRED_KEYS: [&str; 5] = ["iterations", "batch_size", "seed", "lambda", "data"];

/// Training run configuration, read from TOML.
///
/// Relative paths (`gmm`, `init`, `data.dir`) resolve against the directory
/// holding the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub gradient_mode: GradientMode,
    /// Glob patterns over parameter names; absent means every 3×3 conv tensor.
    #[serde(default)]
    pub scope: Option<Vec<String>>,
    #[serde(default)]
    pub snapshot_iters: Vec<usize>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub freeze_at: Option<usize>,
    #[serde(default = "default_freeze_pattern")]
    pub freeze_pattern: String,
    /// Mixture file; required when `lambda > 0`.
    #[serde(default)]
    pub gmm: Option<PathBuf>,
    /// Seeds weight initialization; defaults to `seed`.
    #[serde(default)]
    pub init_seed: Option<u64>,
    /// Parameter archive to start from instead of random initialization.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub arch: ArchConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_c1")]
    pub c1: usize,
    #[serde(default = "default_c2")]
    pub c2: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { c1: default_c1(), c2: default_c2() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synth {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        height: usize,
        width: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_lr() -> f64 {
    0.01
}
fn default_eval_every() -> usize {
    100
}
fn default_freeze_pattern() -> String {
    "conv*".into()
}
fn default_c1() -> usize {
    16
}
fn default_c2() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_noise() -> f64 {
    0.1
}

impl RunConfig {
    /// Parses and validates; every missing required key is reported at once.
    pub fn parse(text: &str) -> CliResult<Self> {
        let table: toml::Table = text.parse().map_err(|e| CliError::input(format!("config: {e}")))?;
        let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| !table.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(CliError::input(format!("config is missing required keys: {}", missing.join(", "))));
        }
        let cfg: RunConfig = table.try_into().map_err(|e| CliError::input(format!("config: {e}")))?;
        cfg.train_config().validate()?;
        if cfg.lambda > 0.0 && cfg.gmm.is_none() {
            return Err(CliError::input("lambda > 0 requires a `gmm` model path"));
        }
        Ok(cfg)
    }

    pub fn reg_config(&self) -> RegConfig {
        RegConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            gradient_mode: self.gradient_mode,
            scope: match &self.scope {
                Some(p) => Scope::Patterns(p.clone()),
                None => Scope::AllConv3x3,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: self.seed,
            reg: self.reg_config(),
            eval_every: self.eval_every,
            snapshot_iters: self.snapshot_iters.clone(),
            freeze_at: self.freeze_at,
            freeze_pattern: self.freeze_pattern.clone(),
        }
    }

    /// Paths read by the run, resolved against `base`.
    pub fn input_paths(&self, base: &Path) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = self.gmm.iter().chain(&self.init).map(|p| base.join(p)).collect();
        if let DataConfig::Cifar10 { dir, .. } = &self.data {
            let dir = base.join(dir);
            out.extend(
                ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"]
                    .iter()
                    .map(|f| dir.join(f))
                    .filter(|p| p.exists()),
            );
        }
        out
    }

    pub fn load_data(&self, base: &Path) -> CliResult<(Dataset, Dataset)> {
        match &self.data {
            DataConfig::Cifar10 { dir, train_limit, test_limit } => {
                let dir = base.join(dir);
                Ok((load_cifar10(&dir, Split::Train, *train_limit)?, load_cifar10(&dir, Split::Test, *test_limit)?))
            }
            &DataConfig::Synth { classes, per_class, test_per_class, channels, height, width, noise, seed } => {
                let spec = SynthSpec { classes, per_class, channels, height, width, noise };
                let test_spec = SynthSpec { per_class: test_per_class, ..spec.clone() };
                Ok((synth_dataset(&spec, seed, Split::Train)?, synth_dataset(&test_spec, seed, Split::Test)?))
            }
        }
    }

    pub fn build_network(&self, train: &Dataset, base: &Path) -> CliResult<Network> {
        let mut net = Network::small(train.shape, self.arch.c1, self.arch.c2, train.classes, self.init_seed.unwrap_or(self.seed))?;
        if let Some(p) = &self.init {
            net.load_archive(&filterprior::tensorio::read_tarc(base.join(p))?)?;
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
iterations = 10
batch_size = 4
seed = 3
lambda = 0.0
[data]
kind = "synth"
classes = 2
per_class = 5
test_per_class = 2
height = 8
width = 8
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.gradient_mode, GradientMode::Approximate);
        assert_eq!(c.arch, ArchConfig { c1: 16, c2: 32 });
        assert_eq!(c.reg_config().scope, Scope::AllConv3x3);
    }

    #[test]
    fn all_missing_keys_are_listed() {
        let e = RunConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert_eq!(e.code, 2);
        for k in REQUIRED_KEYS {
            assert!(e.message.contains(k), "{}", e.message);
        }
    }

    #[test]
    fn unknown_keys_and_missing_model_are_rejected() {
        assert!(RunConfig::parse(&format!("lamda = 1.0\n{MINIMAL}")).is_err());
        let e = RunConfig::parse(&MINIMAL.replace("lambda = 0.0", "lambda = 0.1")).unwrap_err();
        assert!(e.message.contains("gmm"));
    }
}
