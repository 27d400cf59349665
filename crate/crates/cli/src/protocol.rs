//! Freeze-and-continue comparison of regularized and unregularized runs.
//!
//! A donor network is trained without the penalty; a mixture fitted to its
//! 3×3 filters becomes the prior. For every seed, one run per λ (including
//! λ = 0) trains for `phase_iters`, freezes the 3×3 conv weights and trains
//! another `phase_iters`. A seed counts as a success when some λ > 0 ends
//! with a test−train loss gap no larger than the λ = 0 run.

use filterprior::gmm::{em_fit, EmConfig};
use filterprior::nn::{train, Dataset, Network, TrainConfig, TrainStatus};
use filterprior::regularizer::RegConfig;
use filterprior::tensorio::extract_filters;
use filterprior::{Error, GaussianMixture, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub phase_iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub donor_iters: usize,
    pub donor_seed: u64,
    pub gmm_k: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            lambdas: vec![1e-4, 1e-3, 1e-2],
            seeds: vec![1, 2, 3, 4, 5],
            phase_iters: 3000,
            batch_size: 32,
            learning_rate: 0.01,
            eval_every: 500,
            donor_iters: 6000,
            donor_seed: 1000,
            gmm_k: 16,
            c1: 16,
            c2: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline_gap: f64,
    /// `(λ, final gap)` for each λ > 0.
    pub gaps: Vec<(f64, f64)>,
}

impl SeedOutcome {
    pub fn success(&self) -> bool {
        self.gaps.iter().any(|&(_, g)| g <= self.baseline_gap)
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub prior: GaussianMixture,
    pub seeds: Vec<SeedOutcome>,
}

impl ProtocolOutcome {
    pub fn successes(&self) -> usize {
        self.seeds.iter().filter(|s| s.success()).count()
    }
}

fn run_config(spec: &ProtocolSpec, iterations: usize, seed: u64, reg: RegConfig, freeze_at: Option<usize>) -> TrainConfig {
    TrainConfig {
        learning_rate: spec.learning_rate,
        batch_size: spec.batch_size,
        iterations,
        seed,
        reg,
        eval_every: spec.eval_every,
        snapshot_iters: Vec::new(),
        freeze_at,
        freeze_pattern: "conv*.weight".into(),
    }
}

fn final_gap(net: Network, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig, prior: Option<&GaussianMixture>) -> Result<f64> {
    let out = train(net, train_set, test_set, cfg, prior)?;
    if let TrainStatus::Diverged { iteration, reason } = out.status {
        return Err(Error::Invariant(format!("run diverged at iteration {iteration}: {reason}")));
    }
    let last = out.log.last().expect("initial evaluation is always logged");
    Ok(last.test_loss - last.train_loss)
}

pub fn run_protocol(train_set: &Dataset, test_set: &Dataset, spec: &ProtocolSpec) -> Result<ProtocolOutcome> {
    let classes = train_set.classes;
    let donor_net = Network::small(train_set.shape, spec.c1, spec.c2, classes, spec.donor_seed)?;
    let donor_cfg = run_config(spec, spec.donor_iters, spec.donor_seed, RegConfig::default(), None);
    let donor = train(donor_net, train_set, test_set, &donor_cfg, None)?;
    let bank = extract_filters(&donor.net.to_archive())?;
    let k = spec.gmm_k.min(bank.len());
    let prior = em_fit(&bank, &EmConfig::with_k(k, spec.donor_seed))?.model;
    log::info!("donor prior: {k} components over {} filters", bank.len());

    let total = 2 * spec.phase_iters;
    let mut seeds = Vec::new();
    for &seed in &spec.seeds {
        let net = || Network::small(train_set.shape, spec.c1, spec.c2, classes, seed);
        let base_cfg = run_config(spec, total, seed, RegConfig::default(), Some(spec.phase_iters));
        let baseline_gap = final_gap(net()?, train_set, test_set, &base_cfg, None)?;
        let mut gaps = Vec::new();
        for &lambda in &spec.lambdas {
            let cfg = run_config(spec, total, seed, RegConfig::new(lambda, 0.0), Some(spec.phase_iters));
            gaps.push((lambda, final_gap(net()?, train_set, test_set, &cfg, Some(&prior))?));
        }
        log::info!("seed {seed}: baseline gap {baseline_gap:.4}, regularized {gaps:?}");
        seeds.push(SeedOutcome { seed, baseline_gap, gaps });
    }
    Ok(ProtocolOutcome { prior, seeds })
}
