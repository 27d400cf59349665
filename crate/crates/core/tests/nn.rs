mod common;

use common::{central_diff, rel_err, rng};
use filterprior::exec::{with_execution, Execution};
use filterprior::gmm::GaussianMixture;
use filterprior::nn::*;
use filterprior::regularizer::{reg_grad, GradientMode, RegConfig};
use filterprior::tensor::ParamSet;
use rand::Rng;

fn random_batch(seed: u64, net: &Network, n: usize) -> Batch {
    let mut r = rng(seed);
    Batch {
        inputs: (0..n * net.input_len()).map(|_| r.gen_range(0.0..1.0)).collect(),
        labels: (0..n).map(|_| r.gen_range(0..net.classes())).collect(),
    }
}

fn tiny_net(seed: u64) -> Network {
    Network::small([2, 8, 8], 3, 4, 3, seed).unwrap()
}

/// Direct nested-loop evaluation of conv–relu–pool ×2 – dense – softmax CE.
fn naive_loss(net: &Network, batch: &Batch) -> f64 {
    let p = net.params();
    let [c0, h0, w0] = net.input_shape();
    let conv = |x: &Vec<f64>, c_in: usize, h: usize, w: usize, name: &str| -> Vec<f64> {
        let wt = p[&format!("{name}.weight")].data();
        let b = p[&format!("{name}.bias")].data();
        let c_out = b.len();
        let mut y = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b[o];
                    for c in 0..c_in {
                        for u in 0..3 {
                            for v in 0..3 {
                                let (ii, jj) = (i as isize + u as isize - 1, j as isize + v as isize - 1);
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += wt[((o * c_in + c) * 3 + u) * 3 + v] * x[(c * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                    }
                    y[(o * h + i) * w + j] = acc.max(0.0);
                }
            }
        }
        y
    };
    let pool = |x: &Vec<f64>, c: usize, h: usize, w: usize| -> Vec<f64> {
        let mut y = Vec::new();
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        m = m.max(x[(ch * h + 2 * i + a) * w + 2 * j + b]);
                    }
                    y.push(m);
                }
            }
        }
        y
    };
    let c1 = p["conv1.bias"].len();
    let c2 = p["conv2.bias"].len();
    let mut total = 0.0;
    for n in 0..batch.len() {
        let x = batch.inputs[n * net.input_len()..(n + 1) * net.input_len()].to_vec();
        let a = pool(&conv(&x, c0, h0, w0, "conv1"), c1, h0, w0);
        let a = pool(&conv(&a, c1, h0 / 2, w0 / 2, "conv2"), c2, h0 / 2, w0 / 2);
        let (wt, b) = (p["fc1.weight"].data(), p["fc1.bias"].data());
        let z: Vec<f64> = (0..b.len())
            .map(|o| b[o] + (0..a.len()).map(|i| wt[o * a.len() + i] * a[i]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[batch.labels[n]];
    }
    total / batch.len() as f64
}

#[test]
fn forward_matches_naive_convolution() {
    for seed in 0..4 {
        let net = Network::small([3, 8, 8], 8, 8, 10, seed).unwrap();
        let batch = random_batch(seed + 100, &net, 5);
        let (logits, loss) = forward(&net, &batch).unwrap();
        assert_eq!(logits.len(), 50);
        let want = naive_loss(&net, &batch);
        assert!((loss - want).abs() <= 1e-10, "{loss} vs {want}");
    }
}

#[test]
fn zero_head_gives_uniform_loss() {
    let mut net = Network::small([3, 8, 8], 4, 4, 10, 1).unwrap();
    net.param_mut("fc1.weight").unwrap().fill(0.0);
    let (_, loss) = forward(&net, &random_batch(2, &net, 7)).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn saturated_logits_give_zero_loss() {
    let mut net = Network::new([1, 1, 2], &[LayerSpec::Flatten, LayerSpec::Dense { f_in: 2, f_out: 3 }], 0).unwrap();
    net.param_mut("fc1.weight").unwrap().copy_from_slice(&[1000.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let (_, loss) = forward(&net, &Batch { inputs: vec![1.0, 0.0], labels: vec![0] }).unwrap();
    assert!(loss.abs() < 1e-300);
}

#[test]
fn dense_gradient_closed_form() {
    let (f_in, f_out) = (6, 4);
    let net = Network::new([1, 2, 3], &[LayerSpec::Flatten, LayerSpec::Dense { f_in, f_out }], 5).unwrap();
    let batch = random_batch(6, &net, 3);
    let g = backward(&net, &batch).unwrap();
    let (logits, _) = forward(&net, &batch).unwrap();
    let mut gw = vec![0.0; f_out * f_in];
    let mut gb = vec![0.0; f_out];
    for n in 0..3 {
        let z = &logits[n * f_out..(n + 1) * f_out];
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for o in 0..f_out {
            let d = (z[o].exp() / s - if o == batch.labels[n] { 1.0 } else { 0.0 }) / 3.0;
            gb[o] += d;
            for i in 0..f_in {
                gw[o * f_in + i] += d * batch.inputs[n * f_in + i];
            }
        }
    }
    assert!(common::max_abs_err(g["fc1.weight"].data(), &gw) <= 1e-12);
    assert!(common::max_abs_err(g["fc1.bias"].data(), &gb) <= 1e-12);
}

#[test]
fn full_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let net = tiny_net(seed);
        let batch = random_batch(seed + 50, &net, 4);
        let g = backward(&net, &batch).unwrap();
        for (name, t) in net.params() {
            let f = |x: &[f64]| {
                let mut n2 = net.clone();
                n2.param_mut(name).unwrap().copy_from_slice(x);
                forward(&n2, &batch).unwrap().1
            };
            let fd = central_diff(f, t.data(), 1e-4);
            for (a, b) in g[name].data().iter().zip(&fd) {
                worst = worst.max(rel_err(*a, *b));
            }
        }
    }
    assert!(worst <= 1e-4, "worst {worst}");
}

#[test]
fn frozen_tensors_get_zero_gradient() {
    let mut net = tiny_net(1);
    assert_eq!(net.freeze("conv1.*").unwrap(), 2);
    assert_eq!(net.freeze("nothing").unwrap(), 0);
    let g = backward(&net, &random_batch(1, &net, 2)).unwrap();
    assert!(g["conv1.weight"].data().iter().all(|&v| v == 0.0));
    assert!(g["conv2.weight"].data().iter().any(|&v| v != 0.0));
}

#[test]
fn sgd_step_basics() {
    let net = tiny_net(2);
    let g = backward(&net, &random_batch(2, &net, 4)).unwrap();
    let mut same = net.clone();
    sgd_step(&mut same, &g, 0.0, &RegConfig::new(0.0, 0.3), None).unwrap();
    assert_eq!(same.params(), net.params());

    let mut scalar = Network::new([1, 1, 1], &[LayerSpec::Flatten, LayerSpec::Dense { f_in: 1, f_out: 2 }], 0).unwrap();
    scalar.param_mut("fc1.weight").unwrap().copy_from_slice(&[1.0, 1.0]);
    let mut grads = scalar.params().clone();
    grads["fc1.weight"].data_mut().copy_from_slice(&[2.0, 2.0]);
    grads["fc1.bias"].data_mut().fill(0.0);
    sgd_step(&mut scalar, &grads, 0.1, &RegConfig::new(0.0, 0.0), None).unwrap();
    assert_eq!(scalar.params()["fc1.weight"].data(), &[0.8, 0.8]);
}

#[test]
fn regularized_step_differs_by_reg_gradient() {
    let mut r = rng(3);
    let m = common::random_mixture(&mut r, 4, 9);
    let net = tiny_net(3);
    let g = backward(&net, &random_batch(3, &net, 4)).unwrap();
    let eta = 0.05;
    for mode in [GradientMode::Approximate, GradientMode::Exact] {
        let cfg = RegConfig::new(0.4, 0.0).with_mode(mode);
        let rg = reg_grad(net.params(), &m, &cfg).unwrap();
        let mut plain = net.clone();
        sgd_step(&mut plain, &g, eta, &RegConfig::new(0.0, 0.0), None).unwrap();
        let mut reg = net.clone();
        sgd_step(&mut reg, &g, eta, &cfg, Some(&m)).unwrap();
        for (name, t) in net.params() {
            for j in 0..t.len() {
                let w = t.data()[j];
                let gj = g[name].data()[j];
                // both runs computed from the same w; compare against the same formula
                assert_eq!(plain.params()[name].data()[j], w - eta * gj);
                let expect = if rg[name].data()[j] == 0.0 { w - eta * gj } else { w - eta * (gj + rg[name].data()[j]) };
                assert_eq!(reg.params()[name].data()[j], expect);
            }
        }
    }
}

fn synth(classes: usize, per_class: usize, noise: f64, split: Split) -> Dataset {
    let spec = SynthSpec { classes, per_class, channels: 1, height: 8, width: 8, noise };
    synth_dataset(&spec, 42, split).unwrap()
}

#[test]
fn freeze_keeps_tensors_bitwise() {
    let data = synth(3, 20, 0.1, Split::Train);
    let mut net = Network::small([1, 8, 8], 4, 4, 3, 7).unwrap();
    net.freeze("conv*").unwrap();
    let before: ParamSet = net.params().clone();
    let cfg = TrainConfig { iterations: 1000, batch_size: 8, eval_every: 1000, ..TrainConfig::default() };
    let out = train(net, &data, &data, &cfg, None).unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    for (name, t) in out.net.params() {
        if name.starts_with("conv") {
            assert_eq!(t, &before[name]);
        } else {
            assert_ne!(t, &before[name]);
        }
    }
}

#[test]
fn freeze_at_changes_only_dense_afterwards() {
    let data = synth(3, 20, 0.1, Split::Train);
    let net = Network::small([1, 8, 8], 4, 4, 3, 8).unwrap();
    let cfg = TrainConfig {
        iterations: 150,
        batch_size: 8,
        eval_every: 50,
        snapshot_iters: vec![50, 150],
        freeze_at: Some(50),
        ..TrainConfig::default()
    };
    let out = train(net, &data, &data, &cfg, None).unwrap();
    let (a, b) = (&out.snapshots[0], &out.snapshots[1]);
    assert_eq!((a.0, b.0), (50, 150));
    for (ea, eb) in a.1.entries.iter().zip(&b.1.entries) {
        assert_eq!(ea.name.starts_with("fc"), ea.data != eb.data, "{}", ea.name);
    }
}

#[test]
fn freezing_nothing_changes_nothing() {
    let data = synth(2, 10, 0.1, Split::Train);
    let cfg = TrainConfig { iterations: 40, batch_size: 4, eval_every: 10, ..TrainConfig::default() };
    let a = train(tiny_like(), &data, &data, &cfg, None).unwrap();
    let mut frozen = tiny_like();
    frozen.freeze("nothing*").unwrap();
    let b = train(frozen, &data, &data, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.net.params(), b.net.params());
}

fn tiny_like() -> Network {
    Network::small([1, 8, 8], 3, 3, 2, 9).unwrap()
}

#[test]
fn training_is_deterministic_and_mode_independent() {
    let train_set = synth(3, 16, 0.2, Split::Train);
    let test_set = synth(3, 8, 0.2, Split::Test);
    let m = GaussianMixture::isotropic(&[0.0; 9], 0.5).unwrap();
    let cfg = TrainConfig {
        iterations: 60,
        batch_size: 8,
        eval_every: 20,
        snapshot_iters: vec![0, 30, 60],
        reg: RegConfig::new(1e-3, 1e-4),
        ..TrainConfig::default()
    };
    let net = || Network::small([1, 8, 8], 4, 4, 3, 11).unwrap();
    let a = with_execution(Execution::Sequential, || train(net(), &train_set, &test_set, &cfg, Some(&m)).unwrap());
    let b = with_execution(Execution::Parallel, || train(net(), &train_set, &test_set, &cfg, Some(&m)).unwrap());
    let c = train(net(), &train_set, &test_set, &cfg, Some(&m)).unwrap();
    for other in [&b, &c] {
        assert_eq!(log_to_csv(&a.log), log_to_csv(&other.log));
        assert_eq!(a.snapshots, other.snapshots);
    }
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.log[0].iteration, 0);
}

#[test]
fn zero_lambda_equals_no_regularizer() {
    let data = synth(2, 12, 0.2, Split::Train);
    let m = GaussianMixture::isotropic(&[0.0; 9], 1.0).unwrap();
    let cfg = TrainConfig { iterations: 50, batch_size: 6, eval_every: 10, ..TrainConfig::default() };
    let with_model = train(tiny_like(), &data, &data, &cfg, Some(&m)).unwrap();
    let without = train(tiny_like(), &data, &data, &cfg, None).unwrap();
    assert_eq!(with_model.log, without.log);
    assert_eq!(with_model.net.params(), without.net.params());

    // a hand-written loop that never touches the regularizer
    let mut net = tiny_like();
    let batch = data.batch(&(0..6).collect::<Vec<_>>());
    let mut stepped = net.clone();
    sgd_step(&mut stepped, &backward(&net, &batch).unwrap(), 0.01, &RegConfig::new(0.0, 0.0), Some(&m)).unwrap();
    let g = backward(&net, &batch).unwrap();
    let names: Vec<String> = net.params().keys().cloned().collect();
    for name in names {
        let gd = g[&name].data().to_vec();
        net.param_mut(&name).unwrap().iter_mut().zip(gd).for_each(|(w, gv)| *w -= 0.01 * gv);
    }
    assert_eq!(net.params(), stepped.params());
}

#[test]
fn zero_iterations_log_initial_row_only() {
    let data = synth(2, 4, 0.1, Split::Train);
    let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
    let out = train(tiny_like(), &data, &data, &cfg, None).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(log_to_csv(&out.log).lines().count(), 2);
}

/// Plain batch gradient descent on multinomial logistic regression over raw pixels.
fn logistic_regression_accuracy(data: &Dataset) -> f64 {
    let (n, d, k) = (data.len(), data.example_len(), data.classes);
    let mut w = vec![0.0; k * (d + 1)];
    for _ in 0..2000 {
        let mut g = vec![0.0; w.len()];
        for i in 0..n {
            let x = data.image(i);
            let z: Vec<f64> = (0..k)
                .map(|c| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * x[j] as f64).sum::<f64>())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for c in 0..k {
                let dz = (z[c] - m).exp() / s - if c == data.labels[i] { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c * (d + 1) + j] += dz * x[j] as f64;
                }
                g[c * (d + 1) + d] += dz;
            }
        }
        w.iter_mut().zip(&g).for_each(|(a, b)| *a -= 0.5 * b / n as f64);
    }
    let correct = (0..n)
        .filter(|&i| {
            let x = data.image(i);
            let z: Vec<f64> = (0..k)
                .map(|c| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * x[j] as f64).sum::<f64>())
                .collect();
            filterprior::numeric::argmax(&z) == data.labels[i]
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn separable_two_class_problem_is_fit() {
    let data = synth(2, 50, 0.15, Split::Train);
    assert_eq!(logistic_regression_accuracy(&data), 1.0, "oracle says the data is not separable");
    let cfg = TrainConfig { iterations: 2000, batch_size: 16, eval_every: 100, learning_rate: 0.05, ..TrainConfig::default() };
    let out = train(tiny_like(), &data, &data, &cfg, None).unwrap();
    let first_perfect = out.log.iter().find(|r| r.test_acc == 1.0).map(|r| r.iteration);
    assert!(first_perfect.is_some(), "final accuracy {}", out.log.last().unwrap().test_acc);
    assert_eq!(evaluate(&out.net, &data).unwrap().1, 1.0);
}
