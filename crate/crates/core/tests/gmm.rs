mod common;

use common::*;
use filterprior::exec::{with_execution, Execution};
use filterprior::gmm::*;
use filterprior::{FilterBank, GaussianMixture};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

fn fixture() -> Value {
    serde_json::from_str(include_str!("fixtures/gmm_oracle.json")).unwrap()
}

fn vec_of(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn rows_of(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().flat_map(vec_of).collect()
}

#[test]
fn gaussian_logpdf_matches_extended_precision() {
    let fx = fixture();
    for case in fx["gaussian"].as_array().unwrap() {
        let got = gaussian_logpdf(&vec_of(&case["w"]), &vec_of(&case["mu"]), &vec_of(&case["var"])).unwrap();
        let want = case["logpdf"].as_f64().unwrap();
        assert!(rel_err(got, want) <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn mixture_logpdf_and_responsibilities_match_direct_sum() {
    let fx = fixture();
    for case in fx["mixture"].as_array().unwrap() {
        let m = GaussianMixture::new(vec_of(&case["weights"]), rows_of(&case["means"]), rows_of(&case["variances"])).unwrap();
        for p in case["probes"].as_array().unwrap() {
            let w = vec_of(&p["w"]);
            let got = gmm_logpdf(&w, &m).unwrap();
            let want = p["logpdf"].as_f64().unwrap();
            assert!(rel_err(got, want) <= 1e-12, "{got} vs {want}");
            let gamma = responsibilities(&w, &m).unwrap();
            let s: f64 = gamma.iter().sum();
            assert!((s - 1.0).abs() <= 1e-14);
            for (g, r) in gamma.iter().zip(vec_of(&p["responsibilities"])) {
                assert!((g - r).abs() <= 1e-13 * r.abs().max(1e-3), "{g} vs {r}");
            }
        }
    }
}

#[test]
fn logpdf_survives_deep_tails() {
    // exponent near -745 would underflow exp() in the linear domain
    let w = [38.5];
    let v = gaussian_logpdf(&w, &[0.0], &[1.0]).unwrap();
    assert!((v - (-0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 38.5 * 38.5)).abs() < 1e-12);
    let m = GaussianMixture::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
    assert!(gmm_logpdf(&[1e5], &m).unwrap().is_finite());
}

#[test]
fn nll_total_matches_naive_sum() {
    let mut r = rng(11);
    let m = random_mixture(&mut r, 7, 9);
    let rows: Vec<f64> = (0..100).flat_map(|_| probe_near(&mut r, &m)).collect();
    let bank = FilterBank::from_f64_rows(9, &rows).unwrap();
    let mut naive = 0.0;
    for i in 0..bank.len() {
        let w: Vec<f64> = bank.row(i).iter().map(|&v| v as f64).collect();
        naive += nll(&w, &m).unwrap();
    }
    let total = nll_total(&bank, &m).unwrap();
    assert!(rel_err(total, naive) <= 1e-10);
}

#[test]
fn grad_exact_matches_finite_differences() {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for &k in &[1usize, 5, 64] {
        for _ in 0..34 {
            let m = random_mixture(&mut r, k, 9);
            let w = probe_near(&mut r, &m);
            let g = grad_exact(&w, &m).unwrap();
            let fd = central_diff(|x| nll(x, &m).unwrap(), &w, 1e-5);
            worst = worst.max(max_rel_err(&g, &fd));
        }
    }
    assert!(worst <= 1e-6, "worst relative error {worst}");
}

#[test]
fn approx_equals_exact_when_one_component_dominates() {
    let mut r = rng(8);
    let mut checked = 0;
    for _ in 0..200 {
        let m = random_mixture(&mut r, 5, 9);
        // a point sitting on one mean, far from the others, is dominated by it
        let c = r.gen_range(0..5);
        let w: Vec<f64> = m.mean(c).to_vec();
        let gamma = responsibilities(&w, &m).unwrap();
        if gamma.iter().copied().fold(0.0, f64::max) > 1.0 - 1e-12 {
            checked += 1;
            let a = grad_approx(&w, &m).unwrap();
            let e = grad_exact(&w, &m).unwrap();
            assert!(max_abs_err(&a, &e) <= 1e-9);
        }
    }
    // separated synthetic mixture always dominates
    let m = GaussianMixture::new(vec![0.5, 0.5], [vec![-5.0; 9], vec![5.0; 9]].concat(), vec![0.2; 18]).unwrap();
    for _ in 0..50 {
        let w: Vec<f64> = (0..9).map(|_| 5.0 + r.gen_range(-0.3..0.3)).collect();
        assert!(responsibilities(&w, &m).unwrap()[1] > 1.0 - 1e-12);
        assert!(max_abs_err(&grad_approx(&w, &m).unwrap(), &grad_exact(&w, &m).unwrap()) <= 1e-9);
        checked += 1;
    }
    assert!(checked >= 50);
}

#[test]
fn single_gaussian_is_weight_decay() {
    let mut r = rng(2);
    for &sigma2 in &[0.5, 1.0, 3.0] {
        let m = GaussianMixture::isotropic(&[0.0; 9], sigma2).unwrap();
        for _ in 0..10 {
            let w: Vec<f64> = (0..9).map(|_| r.gen_range(-3.0..3.0)).collect();
            let sq: f64 = w.iter().map(|v| v * v).sum();
            let expect = sq / (2.0 * sigma2) + 4.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
            assert!(rel_err(nll(&w, &m).unwrap(), expect) <= 1e-14);
            let g = grad_exact(&w, &m).unwrap();
            for (gj, wj) in g.iter().zip(&w) {
                assert!(rel_err(*gj, wj / sigma2) <= 1e-15);
            }
            assert_eq!(g, grad_approx(&w, &m).unwrap());
        }
    }
}

#[test]
fn selection_invariant_to_weight_scaling() {
    let mut r = rng(3);
    for _ in 0..100 {
        let m = random_mixture(&mut r, 6, 9);
        let w = probe_near(&mut r, &m);
        let c: f64 = r.gen_range(0.1..10.0);
        let scaled: Vec<f64> = m.weights().iter().map(|p| p * c).collect();
        let s: f64 = scaled.iter().sum();
        let renorm = GaussianMixture::new(
            scaled.iter().map(|p| p / s).collect(),
            m.means().to_vec(),
            m.variances().to_vec(),
        )
        .unwrap();
        assert_eq!(select_component(&w, &m).unwrap(), select_component(&w, &renorm).unwrap());
    }
}

#[test]
fn em_separates_two_1d_clusters() {
    let mut r = rng(21);
    let n = Normal::new(0.0, 0.1).unwrap();
    let lo: Vec<f64> = (0..100).map(|_| -5.0 + n.sample(&mut r)).collect();
    let hi: Vec<f64> = (0..100).map(|_| 5.0 + n.sample(&mut r)).collect();
    let rows: Vec<f64> = lo.iter().chain(&hi).copied().collect();
    let bank = FilterBank::from_f64_rows(1, &rows).unwrap();
    // oracle: per-cluster closed-form moments of the f32-rounded samples
    let mean_of = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).sum::<f64>() / v.len() as f64;
    let (m_lo, m_hi) = (mean_of(&lo), mean_of(&hi));
    let fit = em_fit(&bank, &EmConfig::with_k(2, 4)).unwrap();
    let mut comps: Vec<(f64, f64)> = (0..2).map(|k| (fit.model.mean(k)[0], fit.model.weights()[k])).collect();
    comps.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!((comps[0].0 - m_lo).abs() < 0.05 && (comps[1].0 - m_hi).abs() < 0.05, "{comps:?}");
    assert!((comps[0].1 - 0.5).abs() < 0.05 && (comps[1].1 - 0.5).abs() < 0.05);
    assert!(fit.monotonicity_violation().is_none());
}

/// Samples from a known 3-component 9-D diagonal mixture.
pub fn three_component_sample(seed: u64, n: usize) -> (Vec<Vec<f64>>, FilterBank) {
    let mut r = rng(seed);
    let truth: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..9).map(|j| if j % 3 == c { 2.0 } else { -1.0 } + r.gen_range(-0.2..0.2)).collect())
        .collect();
    let sd = [0.3, 0.4, 0.5];
    let norm = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::with_capacity(n * 9);
    for i in 0..n {
        let c = [0, 1, 1, 2, 2][i % 5];
        for j in 0..9 {
            rows.push(truth[c][j] + sd[c] * norm.sample(&mut r));
        }
    }
    (truth, FilterBank::from_f64_rows(9, &rows).unwrap())
}

#[test]
fn em_recovers_synthetic_mixture() {
    let (truth, bank) = three_component_sample(99, 1000);
    let fit = em_fit(&bank, &EmConfig::with_k(3, 1)).unwrap();
    let fitted: Vec<Vec<f64>> = (0..3).map(|k| fit.model.mean(k).to_vec()).collect();
    let perm = best_permutation(&fitted, &truth);
    for (t, &f) in perm.iter().enumerate() {
        assert!(max_abs_err(&fitted[f], &truth[t]) <= 0.15);
    }
    let s: f64 = fit.model.weights().iter().sum();
    assert!((s - 1.0).abs() <= 1e-12);
}

#[test]
fn em_log_likelihood_is_monotone() {
    for seed in 0..10u64 {
        let mut r = rng(seed + 100);
        let k = r.gen_range(2..12);
        let n = r.gen_range(60..300);
        let rows: Vec<f64> = (0..n * 9).map(|_| r.gen_range(-0.4..0.4) * r.gen_range(0.1..1.0)).collect();
        let bank = FilterBank::from_f64_rows(9, &rows).unwrap();
        let fit = em_fit(&bank, &EmConfig { max_iters: 100, ..EmConfig::with_k(k, seed) }).unwrap();
        assert!(fit.monotonicity_violation().is_none(), "seed {seed}: {:?}", fit.trace);
        assert!(fit.trace.len() >= 2);
    }
}

#[test]
fn em_reseeds_collapsed_components() {
    // 40 copies of one point plus two outliers; K=4 leaves a component starved
    let mut rows = vec![0.0f64; 40 * 2];
    rows.extend([10.0, 10.0, -10.0, 10.0]);
    let bank = FilterBank::from_f64_rows(2, &rows).unwrap();
    let fit = em_fit(&bank, &EmConfig { max_iters: 30, ..EmConfig::with_k(4, 0) }).unwrap();
    assert!(fit.model.variances().iter().all(|v| *v >= DEFAULT_VARIANCE_FLOOR));
    assert!(fit.monotonicity_violation().is_none());
    assert!((fit.model.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn em_parallel_matches_sequential() {
    let (_, bank) = three_component_sample(5, 3000);
    let cfg = EmConfig { max_iters: 20, ..EmConfig::with_k(8, 2) };
    let a = with_execution(Execution::Sequential, || em_fit(&bank, &cfg).unwrap());
    let b = with_execution(Execution::Parallel, || em_fit(&bank, &cfg).unwrap());
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_sum_to_one(seed in any::<u64>(), k in 1usize..20) {
        let mut r = rng(seed);
        let m = random_mixture(&mut r, k, 9);
        let w: Vec<f64> = (0..9).map(|_| r.gen_range(-20.0..20.0)).collect();
        let g = responsibilities(&w, &m).unwrap();
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-14);
        prop_assert!(g.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn nll_is_exact_negation(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = random_mixture(&mut r, 4, 9);
        let w: Vec<f64> = (0..9).map(|_| r.gen_range(-5.0..5.0)).collect();
        prop_assert_eq!(nll(&w, &m).unwrap(), -gmm_logpdf(&w, &m).unwrap());
        prop_assert!(gmm_logpdf(&w, &m).unwrap().is_finite());
    }
}
