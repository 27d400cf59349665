use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::numeric::KahanSum;
use crate::regularizer::{reg_grad, RegConfig};
use crate::tensor::ParamSet;
use crate::tensorio::TensorArchive;

use super::data::Dataset;
use super::network::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Seeds minibatch shuffling.
    pub seed: u64,
    pub reg: RegConfig,
    pub eval_every: usize,
    pub snapshot_iters: Vec<usize>,
    /// Freeze `freeze_pattern` right after this iteration's update.
    pub freeze_at: Option<usize>,
    pub freeze_pattern: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            iterations: 1000,
            seed: 0,
            reg: RegConfig::default(),
            eval_every: 100,
            snapshot_iters: Vec::new(),
            freeze_at: None,
            freeze_pattern: "conv*".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        self.reg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Loss or an update became non-finite at this iteration.
    Diverged { iteration: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub log: Vec<EvalRecord>,
    pub snapshots: Vec<(usize, TensorArchive)>,
    pub status: TrainStatus,
}

/// Mean cross-entropy and top-1 accuracy over a whole dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 256;
    let mut loss = KahanSum::new();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(CHUNK) {
        for (l, ok) in net.score_examples(&data.batch(part))? {
            loss.add(l);
            correct += ok as usize;
        }
    }
    let n = data.len() as f64;
    Ok((loss.value() / n, correct as f64 / n))
}

/// Adds tensors matching `pattern` to the frozen set.
pub fn freeze(net: &mut Network, pattern: &str) -> Result<usize> {
    net.freeze(pattern)
}

/// `w ← w − η (∂L/∂w + α w + ∂(λR)/∂w)` on every unfrozen tensor.
///
/// `grads` is the classification gradient. The penalty term is only evaluated
/// when `λ > 0`, and the decay term only when `α > 0`.
pub fn sgd_step(
    net: &mut Network,
    grads: &ParamSet,
    learning_rate: f64,
    reg: &RegConfig,
    model: Option<&GaussianMixture>,
) -> Result<()> {
    let reg_grads = if reg.lambda > 0.0 {
        let m = model.ok_or_else(|| Error::Config("lambda > 0 requires a mixture model".into()))?;
        Some(reg_grad(net.params(), m, reg)?)
    } else {
        None
    };
    let names: Vec<String> = net.params().keys().cloned().collect();
    for name in names {
        if net.is_frozen(&name) {
            continue;
        }
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Input(format!("no gradient for {name}")))?
            .data();
        let r = reg_grads.as_ref().map(|rg| rg[&name].data());
        let w = net.param_mut(&name).expect("name from params");
        if g.len() != w.len() {
            return Err(Error::DimMismatch { expected: w.len(), got: g.len() });
        }
        for j in 0..w.len() {
            let mut step = g[j];
            if reg.alpha > 0.0 {
                step += reg.alpha * w[j];
            }
            if let Some(r) = r {
                step += r[j];
            }
            let updated = w[j] - learning_rate * step;
            if !updated.is_finite() {
                return Err(Error::Invariant(format!("non-finite update in {name}[{j}]")));
            }
            w[j] = updated;
        }
    }
    Ok(())
}

fn eval_record(net: &Network, train_set: &Dataset, test_set: &Dataset, iteration: usize) -> Result<EvalRecord> {
    let (train_loss, _) = evaluate(net, train_set)?;
    let (test_loss, test_acc) = evaluate(net, test_set)?;
    Ok(EvalRecord { iteration, train_loss, test_loss, test_acc })
}

/// Minibatch SGD with per-epoch shuffling seeded by `cfg.seed`.
///
/// Logs an evaluation at iteration 0, every `eval_every` iterations and at
/// the end; stores parameter snapshots at `snapshot_iters`. Non-finite
/// losses or updates stop training with [`TrainStatus::Diverged`].
pub fn train(
    mut net: Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    model: Option<&GaussianMixture>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Input("training and test sets must be nonempty".into()));
    }
    for d in [train_set, test_set] {
        if d.shape != net.input_shape() {
            return Err(Error::Input(format!(
                "dataset images are {:?}, network expects {:?}",
                d.shape,
                net.input_shape()
            )));
        }
        if d.classes > net.classes() {
            return Err(Error::Input(format!("{} classes exceed the network's {}", d.classes, net.classes())));
        }
    }
    if cfg.reg.lambda > 0.0 && model.is_none() {
        return Err(Error::Config("lambda > 0 requires a mixture model".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train_set.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut log = vec![eval_record(&net, train_set, test_set, 0)?];
    let mut snapshots = Vec::new();
    if cfg.snapshot_iters.contains(&0) {
        snapshots.push((0, net.to_archive()));
    }
    let mut status = TrainStatus::Completed;
    for it in 1..=cfg.iterations {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = train_set.batch(&order[cursor..cursor + bs]);
        cursor += bs;
        let step = net
            .backward(&batch)
            .and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(Error::Invariant(format!("batch loss is {loss}")));
                }
                sgd_step(&mut net, &grads, cfg.learning_rate, &cfg.reg, model)
            });
        match step {
            Ok(()) => {}
            Err(e @ (Error::NonFinite { .. } | Error::Invariant(_))) => {
                log::error!("training diverged at iteration {it}: {e}");
                status = TrainStatus::Diverged { iteration: it, reason: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.freeze_at == Some(it) {
            net.freeze(&cfg.freeze_pattern)?;
        }
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            match eval_record(&net, train_set, test_set, it) {
                Ok(r) => log.push(r),
                Err(e @ Error::NonFinite { .. }) => {
                    status = TrainStatus::Diverged { iteration: it, reason: e.to_string() };
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if cfg.snapshot_iters.contains(&it) {
            snapshots.push((it, net.to_archive()));
        }
    }
    Ok(TrainOutcome { net, log, snapshots, status })
}

/// `iteration,train_loss,test_loss,test_acc` with 17 significant digits.
pub fn log_to_csv(log: &[EvalRecord]) -> String {
    let mut out = String::from("iteration,train_loss,test_loss,test_acc\n");
    for r in log {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            r.iteration, r.train_loss, r.test_loss, r.test_acc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{synth_dataset, Split, SynthSpec};

    fn tiny() -> (Network, Dataset, Dataset) {
        let spec = SynthSpec { classes: 3, per_class: 10, channels: 1, height: 4, width: 4, noise: 0.05 };
        let tr = synth_dataset(&spec, 1, Split::Train).unwrap();
        let te = synth_dataset(&spec, 1, Split::Test).unwrap();
        (Network::small([1, 4, 4], 2, 3, 3, 9).unwrap(), tr, te)
    }

    #[test]
    fn zero_learning_rate_rejected_but_zero_step_is_identity() {
        let (mut net, tr, _) = tiny();
        let before = net.params().clone();
        let (_, g) = net.backward(&tr.batch(&[0, 1, 2])).unwrap();
        sgd_step(&mut net, &g, 0.0, &RegConfig::default(), None).unwrap();
        for (a, b) in before.values().zip(net.params().values()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scalar_step() {
        let mut net = Network::new(
            [1, 1, 1],
            &[crate::nn::LayerSpec::Flatten, crate::nn::LayerSpec::Dense { f_in: 1, f_out: 2 }],
            0,
        )
        .unwrap();
        net.param_mut("fc1.weight").unwrap().copy_from_slice(&[1.0, 1.0]);
        let mut g = net.params().clone();
        g["fc1.weight"].data_mut().copy_from_slice(&[2.0, 2.0]);
        g["fc1.bias"].data_mut().fill(0.0);
        sgd_step(&mut net, &g, 0.1, &RegConfig::default(), None).unwrap();
        assert_eq!(net.params()["fc1.weight"].data(), &[0.8, 0.8]);
    }

    #[test]
    fn zero_iterations_logs_initial_row() {
        let (net, tr, te) = tiny();
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        let out = train(net, &tr, &te, &cfg, None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].iteration, 0);
        assert_eq!(log_to_csv(&out.log).lines().count(), 2);
    }

    #[test]
    fn lambda_requires_model() {
        let (net, tr, te) = tiny();
        let cfg = TrainConfig { reg: RegConfig::new(0.1, 0.0), ..TrainConfig::default() };
        assert!(matches!(train(net, &tr, &te, &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let (net, tr, te) = tiny();
        let cfg = TrainConfig { learning_rate: 1e300, iterations: 20, eval_every: 1, ..TrainConfig::default() };
        let out = train(net, &tr, &te, &cfg, None).unwrap();
        assert!(matches!(out.status, TrainStatus::Diverged { .. }), "{:?}", out.status);
    }
}
