mod common;

use common::cluster::{brute, check_closed_forms, check_hungarian, compare_with_brute, TWELVE_ASSIGN, TWELVE_LABELS};
use proptest::prelude::*;
use xstream_core::eval::{cluster_eval, knn_retrieval, linear_probe, retrieval_from_similarity, LinearProbe, ProbeConfig};
use xstream_core::numerics::{Matrix, Rng};

#[test]
fn hungarian_matches_enumeration_up_to_seven() {
    check_hungarian(7, 20).unwrap();
}

#[test]
fn twelve_sample_fixture_matches_brute_force() {
    compare_with_brute(&TWELVE_ASSIGN, &TWELVE_LABELS, 4).unwrap();
    let r = cluster_eval(&TWELVE_ASSIGN, &TWELVE_LABELS, 4).unwrap();
    // 0→0, 1→1, 2→2, 3→3 recovers 3 + 2 + 2 + 2 of the 12 samples.
    assert!((r.acc - 9.0 / 12.0).abs() < 1e-15);
    assert!((brute(&TWELVE_ASSIGN, &TWELVE_LABELS, 4).acc - 9.0 / 12.0).abs() < 1e-15);
}

#[test]
fn closed_form_fixtures() {
    check_closed_forms().unwrap();
}

#[test]
fn random_small_fixtures_match_brute_force() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let n = 2 + rng.below(11);
        let k = 1 + rng.below(4);
        let l = 1 + rng.below(4);
        let assign: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(l)).collect();
        compare_with_brute(&assign, &labels, k).unwrap();
    }
}

proptest! {
    #[test]
    fn cluster_metrics_ignore_cluster_names(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let n = 20;
        let assign: Vec<usize> = (0..n).map(|_| rng.below(5)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let perm = rng.permutation(5);
        let renamed: Vec<usize> = assign.iter().map(|&a| perm[a]).collect();
        let a = cluster_eval(&assign, &labels, 5).unwrap();
        let b = cluster_eval(&renamed, &labels, 5).unwrap();
        prop_assert!((a.acc - b.acc).abs() < 1e-12);
        prop_assert!((a.nmi - b.nmi).abs() < 1e-12);
        prop_assert!((a.ari - b.ari).abs() < 1e-12);
        prop_assert!((a.mean_entropy - b.mean_entropy).abs() < 1e-12);
        prop_assert!((a.max_purity - b.max_purity).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let (n_train, n_test) = (30, 10);
        let train = rng.gaussian_matrix(4, n_train, 1.0);
        let test = rng.gaussian_matrix(4, n_test, 1.0);
        let tl: Vec<usize> = (0..n_train).map(|_| rng.below(3)).collect();
        let ql: Vec<usize> = (0..n_test).map(|_| rng.below(3)).collect();
        let ks: Vec<usize> = (1..=n_train).collect();
        let rep = knn_retrieval(&train, &tl, &test, &ql, &ks).unwrap();
        let vals: Vec<f64> = ks.iter().map(|k| rep.recall_at[k]).collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let present = ql.iter().filter(|y| tl.contains(y)).count() as f64 / n_test as f64;
        prop_assert!((vals[n_train - 1] - present).abs() < 1e-15);
    }
}

#[test]
fn recall_matches_full_sort() {
    let mut rng = Rng::new(9);
    let (n_train, n_test) = (25, 12);
    let sim = rng.gaussian_matrix(n_test, n_train, 1.0);
    let tl: Vec<usize> = (0..n_train).map(|_| rng.below(4)).collect();
    let ql: Vec<usize> = (0..n_test).map(|_| rng.below(4)).collect();
    let ks = [1, 3, 7];
    let rep = retrieval_from_similarity(&sim, &tl, &ql, &ks).unwrap();
    for k in ks {
        let hits = (0..n_test)
            .filter(|&q| {
                let mut idx: Vec<usize> = (0..n_train).collect();
                idx.sort_by(|&a, &b| sim.get(q, b).partial_cmp(&sim.get(q, a)).unwrap());
                idx[..k].iter().any(|&i| tl[i] == ql[q])
            })
            .count();
        assert_eq!(rep.recall_at[&k], hits as f64 / n_test as f64);
    }
}

/// Plain full-batch gradient descent on the same regularised softmax
/// regression, with per-sample scalar loops.
fn reference_probe(x: &[[f64; 2]], y: &[usize], classes: usize, reg: f64) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..2).map(|d| x.iter().map(|p| p[d]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..2).map(|d| (x.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    let xs: Vec<[f64; 3]> = x.iter().map(|p| [(p[0] - mean[0]) / sd[0], (p[1] - mean[1]) / sd[1], 1.0]).collect();
    let mut w = vec![[0.0; 3]; classes];
    let probs = |w: &[[f64; 3]], v: &[f64; 3]| {
        let logits: Vec<f64> = w.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    for _ in 0..200_000 {
        let mut g = vec![[0.0; 3]; classes];
        for (v, &label) in xs.iter().zip(y) {
            let p = probs(&w, v);
            for c in 0..classes {
                let r = p[c] - (c == label) as u8 as f64;
                for d in 0..3 {
                    g[c][d] += r * v[d] / n;
                }
            }
        }
        for c in 0..classes {
            for d in 0..2 {
                g[c][d] += reg * w[c][d];
            }
            for d in 0..3 {
                w[c][d] -= 0.5 * g[c][d];
            }
        }
    }
    xs.iter().map(|v| probs(&w, v)).collect()
}

#[test]
fn probe_matches_reference_solver_on_twenty_points() {
    let mut rng = Rng::new(21);
    let centres = [[0.0, 0.0], [1.5, 0.5], [0.3, 1.8]];
    let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let x: Vec<[f64; 2]> = y.iter().map(|&c| [centres[c][0] + rng.normal(), centres[c][1] + rng.normal()]).collect();
    let reg = 0.05;
    let feats = Matrix::from_cols(&x.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
    let probe = LinearProbe::fit(&feats, &y, &ProbeConfig { reg, max_iters: 100_000, tolerance: 1e-12 }).unwrap();
    let got = probe.predict_proba(&feats).unwrap();
    let want = reference_probe(&x, &y, 3, reg);
    for (s, row) in want.iter().enumerate() {
        for (c, p) in row.iter().enumerate() {
            assert!((got.get(c, s) - p).abs() < 1e-6, "sample {s} class {c}: {} vs {p}", got.get(c, s));
        }
    }
}

#[test]
fn probe_is_at_chance_on_shuffled_labels() {
    let mut rng = Rng::new(3);
    let train = rng.gaussian_matrix(8, 400, 1.0);
    let test = rng.gaussian_matrix(8, 400, 1.0);
    let tl: Vec<usize> = (0..400).map(|_| rng.below(4)).collect();
    let ql: Vec<usize> = (0..400).map(|_| rng.below(4)).collect();
    let acc = linear_probe(&train, &tl, &test, &ql, 1e-3).unwrap();
    assert!((acc - 0.25).abs() < 0.08, "accuracy {acc}");
}
