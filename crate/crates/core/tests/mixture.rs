use approx::assert_relative_eq;
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survmix::classifier::SoftmaxGate;
use survmix::data::SurvivalDataset;
use survmix::mixture::*;
use survmix::nonparam::kaplan_meier;
use survmix::synth::{generate, Censoring, ClusterSpec, SynthSpec, TimeDistribution};
use survmix::SurvivalPredictor;

const H: f64 = 0.3;

fn expert(times: &[f64]) -> ClusterExpert {
    ClusterExpert::fit(times, &vec![true; times.len()], H, 1e-12).unwrap()
}

/// S_A(4) = 0.2 and S_B(4) = 0.1.
fn two_experts() -> (ClusterExpert, ClusterExpert) {
    let a: Vec<f64> = (1..=5).map(f64::from).collect();
    let b: Vec<f64> = (1..=10).map(|i| 0.4 * i as f64 + 0.1).collect();
    (expert(&a), expert(&b))
}

fn model_with_gate(coefs: Array2<f64>) -> SurvMixModel {
    let (a, b) = two_experts();
    let gate = SoftmaxGate::from_coefficients(coefs, 0.0).unwrap();
    SurvMixModel::from_parts(vec![a, b], gate, H, 1e-12).unwrap()
}

fn one_row(t: f64, event: bool) -> SurvivalDataset {
    SurvivalDataset::new(array![[0.0]], vec![t], vec![event], vec!["x".into()]).unwrap()
}

fn two_clusters(n: usize, seed: u64) -> (SurvivalDataset, Vec<usize>) {
    let spec = SynthSpec {
        n,
        seed,
        weights: vec![0.5, 0.5],
        clusters: vec![
            ClusterSpec {
                center: vec![-2.0, 0.0],
                spread: 1.0,
                time: TimeDistribution::Exponential { rate: 0.2 },
            },
            ClusterSpec {
                center: vec![2.0, 0.0],
                spread: 1.0,
                time: TimeDistribution::Exponential { rate: 2.0 },
            },
        ],
        censoring: Censoring::Exponential { rate: 0.15 },
    };
    let d = generate(&spec).unwrap();
    (d.dataset, d.labels)
}

#[test]
fn responsibilities_hand_example() {
    let m = model_with_gate(Array2::zeros((2, 2)));
    let d = one_row(4.0, false);
    assert_relative_eq!(m.experts()[0].point_likelihood(4.0, false), 0.2, epsilon = 1e-15);
    assert_relative_eq!(m.experts()[1].point_likelihood(4.0, false), 0.1, epsilon = 1e-15);
    let r = responsibilities(&m, &d).unwrap();
    assert_relative_eq!(r.matrix()[[0, 0]], 2.0 / 3.0, epsilon = 1e-12);
    assert_relative_eq!(r.matrix()[[0, 1]], 1.0 / 3.0, epsilon = 1e-12);
    assert_relative_eq!(cluster_uncertainty(&m, &d).unwrap()[0], 1.0 / 3.0, epsilon = 1e-12);
    assert_eq!(e_step(&m, &d).unwrap(), vec![0]);
}

#[test]
fn e_step_gate_decides_and_ties_go_low() {
    let (a, _) = two_experts();
    // Gate (0.9, 0.1): intercept logit ln 9.
    let gate = SoftmaxGate::from_coefficients(array![[0.0, 9f64.ln()], [0.0, 0.0]], 0.0).unwrap();
    let m = SurvMixModel::from_parts(vec![a.clone(), a.clone()], gate, H, 1e-12).unwrap();
    assert_eq!(e_step(&m, &one_row(2.5, true)).unwrap(), vec![0]);

    let gate = SoftmaxGate::from_coefficients(Array2::zeros((2, 2)), 0.0).unwrap();
    let m = SurvMixModel::from_parts(vec![a.clone(), a], gate, H, 1e-12).unwrap();
    assert_eq!(e_step(&m, &one_row(2.5, true)).unwrap(), vec![0]);
    assert_eq!(m.predict_cluster(array![0.0].view()).unwrap(), 0);
}

#[test]
fn floored_likelihood_dominated() {
    let (a, b) = two_experts();
    let gate = SoftmaxGate::from_coefficients(Array2::zeros((2, 2)), 0.0).unwrap();
    let m = SurvMixModel::from_parts(vec![a, b], gate, H, 1e-12).unwrap();
    // S_B = 0 past 4.1 and gets floored; S_A(4.5) = 0.2.
    let r = responsibilities(&m, &one_row(4.5, false)).unwrap();
    assert!(r.matrix()[[0, 1]] < 1e-10);
    assert_relative_eq!(r.matrix().row(0).sum(), 1.0, epsilon = 1e-12);
}

/// Density at t computed straight from the KM masses.
fn kernel_density(times: &[f64], t: f64) -> f64 {
    let sf = kaplan_meier(times, &vec![true; times.len()]).unwrap();
    let mut prev = 1.0;
    let mut f = 1e-12;
    for (&u, &v) in sf.jump_times().iter().zip(sf.values()) {
        let z = (t - u) / H;
        f += (prev - v) * (-0.5 * z * z).exp() / (H * (2.0 * std::f64::consts::PI).sqrt());
        prev = v;
    }
    f
}

#[test]
fn observed_log_likelihood_by_hand() {
    let m = model_with_gate(array![[1.0, 0.2], [-0.5, 0.0]]);
    let x = [-1.0, 0.0, 0.5, 2.0];
    let t = [0.7, 4.0, 2.2, 3.3];
    let d = [true, false, true, false];
    let data = SurvivalDataset::new(
        Array2::from_shape_vec((4, 1), x.to_vec()).unwrap(),
        t.to_vec(),
        d.to_vec(),
        vec!["x".into()],
    )
    .unwrap();
    let a: Vec<f64> = (1..=5).map(f64::from).collect();
    let b: Vec<f64> = (1..=10).map(|i| 0.4 * i as f64 + 0.1).collect();
    let surv = |times: &[f64], u: f64| (times.iter().filter(|&&s| s > u).count() as f64 / times.len() as f64).max(1e-12);
    let mut expected = 0.0;
    for i in 0..4 {
        let s1 = x[i] + 0.2;
        let s2 = -0.5 * x[i];
        let tau1 = s1.exp() / (s1.exp() + s2.exp());
        let (la, lb) = if d[i] {
            (kernel_density(&a, t[i]), kernel_density(&b, t[i]))
        } else {
            (surv(&a, t[i]), surv(&b, t[i]))
        };
        expected += (tau1 * la + (1.0 - tau1) * lb).ln();
    }
    assert_relative_eq!(observed_log_likelihood(&m, &data).unwrap(), expected, epsilon = 1e-10);

    let doubled = SurvivalDataset::concat(&[&data, &data]).unwrap();
    assert_relative_eq!(observed_log_likelihood(&m, &doubled).unwrap(), 2.0 * expected, epsilon = 1e-10);

    // Uniform outlier component mixed in with weight 0.1 over V = 10.
    let mo = m.clone().with_outlier(0.1, 10.0).unwrap();
    let mut with_outlier = 0.0;
    for i in 0..4 {
        let s1 = x[i] + 0.2;
        let s2 = -0.5 * x[i];
        let tau1 = s1.exp() / (s1.exp() + s2.exp());
        let (la, lb, l0) = if d[i] {
            (kernel_density(&a, t[i]), kernel_density(&b, t[i]), 0.1)
        } else {
            (surv(&a, t[i]), surv(&b, t[i]), 1.0 - t[i] / 10.0)
        };
        with_outlier += (0.1 * l0 + 0.9 * (tau1 * la + (1.0 - tau1) * lb)).ln();
    }
    assert_relative_eq!(observed_log_likelihood(&mo, &data).unwrap(), with_outlier, epsilon = 1e-10);
}

#[test]
fn predict_survival_hand_combination() {
    // Weights (0.25, 0.75); S_A(4) = 0.2, S_B(4) = 0.1 → 0.125.
    let m = model_with_gate(array![[0.0, (1.0f64 / 3.0).ln()], [0.0, 0.0]]);
    let s = m.predict_survival(array![0.0].view(), &[0.0, 4.0]).unwrap();
    assert_eq!(s[0], 1.0);
    assert_relative_eq!(s[1], 0.25 * 0.2 + 0.75 * 0.1, epsilon = 1e-12);

    // One-hot gate reproduces that expert.
    let m = model_with_gate(array![[0.0, 800.0], [0.0, 0.0]]);
    let s = m.predict_survival(array![0.0].view(), &[1.0, 2.5, 4.0, 6.0]).unwrap();
    for (got, want) in s.iter().zip([0.8, 0.6, 0.2, 0.0]) {
        assert_relative_eq!(*got, want, epsilon = 1e-12);
    }
}

#[test]
fn init_is_uniform() {
    let labels = init_assignments(100_000, 4, 3).unwrap();
    let mut counts = [0usize; 4];
    for l in labels {
        counts[l] += 1;
    }
    for c in counts {
        assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn repair_restores_missing_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..2)).collect();
    let fixed = repair_clusters(&labels, None, 3, 10, 4).unwrap();
    assert!(fixed.iter().filter(|&&l| l == 2).count() >= 10);
}

#[test]
fn m_step_medians_follow_rates() {
    let (data, truth) = two_clusters(2000, 9);
    let m = m_step(&data, &truth, 2, 0.3, 1e-12, &Default::default()).unwrap();
    let slow = m.experts()[0].survival().median().unwrap();
    let fast = m.experts()[1].survival().median().unwrap();
    let ratio = slow / fast;
    assert!((7.0..14.0).contains(&ratio), "median ratio {ratio}");
    // The gate recovers the feature split.
    let hits = (0..data.len())
        .filter(|&i| m.predict_cluster(data.features.row(i)).unwrap() == truth[i])
        .count();
    assert!(hits as f64 / data.len() as f64 > 0.95);
}

#[test]
fn e_step_is_argmax_of_responsibilities() {
    let (data, _) = two_clusters(400, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let labels: Vec<usize> = (0..data.len()).map(|_| rng.random_range(0..3)).collect();
        let m = m_step(&data, &labels, 3, 0.4, 1e-12, &Default::default()).unwrap();
        assert_eq!(e_step(&m, &data).unwrap(), responsibilities(&m, &data).unwrap().hard_labels());
    }
}

#[test]
fn gate_shift_changes_no_assignment() {
    let (data, truth) = two_clusters(300, 3);
    let m = m_step(&data, &truth, 2, 0.4, 1e-12, &Default::default()).unwrap();
    let shifted_coefs = m.gate().coefficients() + &Array1::from(vec![0.7, -1.3, 2.0]);
    let shifted = SurvMixModel::from_parts(
        m.experts().to_vec(),
        SoftmaxGate::from_coefficients(shifted_coefs, 0.0).unwrap(),
        0.4,
        1e-12,
    )
    .unwrap();
    assert_eq!(e_step(&m, &data).unwrap(), e_step(&shifted, &data).unwrap());
    assert_eq!(
        m.predict_clusters(data.features.view()).unwrap(),
        shifted.predict_clusters(data.features.view()).unwrap()
    );
}

#[test]
fn single_cluster_reduces_to_global_km() {
    let (data, _) = two_clusters(300, 4);
    let m = fit(&data, &FitConfig::new(1).with_restarts(2)).unwrap();
    let km = kaplan_meier(&data.times, &data.events).unwrap();
    let grid: Vec<f64> = (0..200).map(|i| i as f64 * 0.1).collect();
    let s = m.predict_survival(data.features.row(0), &grid).unwrap();
    for (t, v) in grid.iter().zip(s) {
        assert_relative_eq!(v, km.survival_at(*t), epsilon = 1e-12);
    }
}

#[test]
fn fit_is_deterministic_and_recovers_clusters() {
    let (data, truth) = two_clusters(600, 5);
    let config = FitConfig::new(2).with_seed(17).with_restarts(3);
    let a = fit(&data, &config).unwrap();
    let b = fit(&data, &config).unwrap();
    assert_eq!(a.diagnostics(), b.diagnostics());
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let labels = responsibilities(&a, &data).unwrap().hard_labels();
    let ari = survmix::metrics::adjusted_rand_index(&labels, &truth).unwrap();
    assert!(ari > 0.8, "ari {ari}");
    let d = a.diagnostics();
    let chosen = &d.restarts[d.selected_restart];
    assert!(chosen.final_log_likelihood.unwrap() >= chosen.initial_log_likelihood.unwrap());
    assert_eq!(SurvMixModel::from_json(&a.to_json().unwrap()).unwrap(), a);
}

#[test]
fn fit_rejects_infeasible_sizes() {
    // min_cluster_size is 5 here, and 3 * 5 > 12.
    let (data, _) = two_clusters(12, 6);
    assert!(matches!(
        fit(&data, &FitConfig::new(3)),
        Err(survmix::Error::Infeasible { .. })
    ));
}

#[test]
fn select_k_singleton_grid() {
    let (data, _) = two_clusters(300, 7);
    let config = FitConfig::new(2).with_restarts(1);
    let (model, sel) = select_k(&data, &[2], &config).unwrap();
    assert_eq!(sel.best_k, 2);
    assert_eq!(model.k(), 2);
    assert_eq!(sel.mean_c_index.len(), 1);
    assert_eq!(sel.rows.len(), CV_FOLDS);
    assert!(select_k(&data, &[], &config).is_err());
}

#[test]
fn select_k_report_shape() {
    let (data, _) = two_clusters(300, 8);
    let config = FitConfig::new(2).with_restarts(1);
    let (_, sel) = select_k(&data, &[2, 3], &config).unwrap();
    assert_eq!(sel.rows.len(), 2 * CV_FOLDS);
    for k in [2, 3] {
        for fold in 0..CV_FOLDS {
            assert_eq!(sel.rows.iter().filter(|r| r.k == k && r.fold == fold).count(), 1);
        }
    }
}
