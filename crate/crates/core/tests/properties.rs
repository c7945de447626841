mod common;

use cchmm::dataio::container::{load_arrays, save_arrays};
use cchmm::dataio::ChannelStats;
use cchmm::diffcore::{Tape, Tensor};
use cchmm::graphops::{graph_conv, normalize_adjacency, RegionGraph};
use cchmm::model::{adjacency_from_weights, GaussianParams, ModelConfig, ModelParams, Session};
use cchmm::objective::{acyclicity_value, gaussian_kl};
use common::random_tensor;
use proptest::prelude::*;

fn kl_value(qm: &Tensor, qv: &Tensor, pm: &Tensor, pv: &Tensor) -> f64 {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone()).unwrap();
    let q = GaussianParams { mean: c(qm), logvar: c(qv) };
    let p = GaussianParams { mean: c(pm), logvar: c(pv) };
    tape.item(gaussian_kl(&tape, q, p).unwrap())
}

/// Random strictly upper-triangular 5x5 matrix with entries in (-1, 1).
fn upper(seed: u64) -> Tensor {
    let r = random_tensor(&[5, 5], seed);
    let mut a = Tensor::zeros(&[5, 5]);
    for i in 0..5 {
        for j in i + 1..5 {
            a.set(&[i, j], r.at(&[i, j]).tanh());
        }
    }
    a
}

fn propagate(a: &Tensor, eps: &Tensor) -> Tensor {
    let p = ModelParams::init(ModelConfig::new(2, eps.shape()[3], 3.0), 0).unwrap();
    let g = RegionGraph::isolated(eps.shape()[1]);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let a = Some(tape.constant(a.clone()).unwrap());
    tape.value(s.causal_propagate(a, tape.constant(eps.clone()).unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_arguments(seed in 0u64..10_000) {
        let s = [2, 3, 5, 4];
        let (qm, qv) = (random_tensor(&s, seed), random_tensor(&s, seed + 1));
        let (pm, pv) = (random_tensor(&s, seed + 2), random_tensor(&s, seed + 3));
        prop_assert!(kl_value(&qm, &qv, &pm, &pv) >= 0.0);
        prop_assert!(kl_value(&qm, &qv, &qm, &qv).abs() < 1e-12);
    }

    #[test]
    fn acyclicity_is_zero_exactly_for_dags(seed in 0u64..10_000, i in 0usize..5, j in 0usize..5) {
        let a = upper(seed);
        prop_assert_eq!(acyclicity_value(&a).unwrap(), 0.0);
        prop_assume!(i < j);
        let mut cyclic = a.clone();
        cyclic.set(&[i, j], 0.5);
        cyclic.set(&[j, i], 0.5);
        prop_assert!(acyclicity_value(&cyclic).unwrap() > 0.0);
    }

    #[test]
    fn adjacency_is_bounded_with_empty_diagonal(seed in 0u64..10_000, alpha in 0.1f64..10.0) {
        let w = random_tensor(&[5, 5], seed);
        let a = adjacency_from_weights(&w, alpha);
        for i in 0..5 {
            prop_assert_eq!(a.at(&[i, i]), 0.0);
            for j in 0..5 {
                let v = a.at(&[i, j]);
                prop_assert!((0.0..=1.0).contains(&v));
                // tanh rounds to exactly 1 in f64 beyond about 19.
                if alpha * w.at(&[i, j]) < 18.0 {
                    prop_assert!(v < 1.0);
                }
                if w.at(&[i, j]) < 0.0 {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn propagation_matches_neumann_series(seed in 0u64..10_000) {
        let a = upper(seed);
        let eps = random_tensor(&[1, 3, 5, 2], seed + 7);
        let h = propagate(&a, &eps);
        // h = Σ_{p<5} (Aᵀ)^p ε, finite because A is nilpotent.
        for r in 0..3 {
            for k in 0..2 {
                let mut term: Vec<f64> = (0..5).map(|c| eps.at(&[0, r, c, k])).collect();
                let mut sum = term.clone();
                for _ in 1..5 {
                    term = (0..5).map(|j| (0..5).map(|i| a.at(&[i, j]) * term[i]).sum()).collect();
                    sum.iter_mut().zip(&term).for_each(|(s, t)| *s += t);
                }
                for c in 0..5 {
                    prop_assert!((h.at(&[0, r, c, k]) - sum[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interventions_only_reach_descendants(seed in 0u64..10_000, j in 0usize..5, delta in -3.0f64..3.0) {
        prop_assume!(delta != 0.0);
        let a = upper(seed);
        let eps = random_tensor(&[1, 2, 5, 3], seed + 3);
        let mut hit = eps.clone();
        for r in 0..2 {
            for k in 0..3 {
                let v = hit.at(&[0, r, j, k]);
                hit.set(&[0, r, j, k], v + delta);
            }
        }
        let (h0, h1) = (propagate(&a, &eps), propagate(&a, &hit));
        // Concepts before j cannot descend from it in a strictly upper-triangular graph.
        for c in 0..j {
            for r in 0..2 {
                for k in 0..3 {
                    prop_assert_eq!(h0.at(&[0, r, c, k]).to_bits(), h1.at(&[0, r, c, k]).to_bits());
                }
            }
        }
    }

    #[test]
    fn graph_convolution_is_permutation_equivariant(seed in 0u64..10_000, shift in 1usize..5) {
        let n = 5;
        let r = random_tensor(&[n, n], seed);
        let mut g = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                let v = r.at(&[i, j]).abs();
                g.set(&[i, j], v);
                g.set(&[j, i], v);
            }
        }
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let mut gp = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                gp.set(&[i, j], g.at(&[perm[i], perm[j]]));
            }
        }
        let x = random_tensor(&[n, 3], seed + 1);
        let mut xp = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            for c in 0..3 {
                xp.set(&[i, c], x.at(&[perm[i], c]));
            }
        }
        let w = random_tensor(&[3, 2], seed + 2);
        let b = random_tensor(&[2], seed + 3);
        let run = |g: &Tensor, x: &Tensor| {
            let tape = Tape::new();
            let c = |t: &Tensor| tape.constant(t.clone()).unwrap();
            let op = c(&normalize_adjacency(g).unwrap());
            tape.value(graph_conv(&tape, Some(op), c(x), c(&w), c(&b)).unwrap())
        };
        let (y, yp) = (run(&g, &x), run(&gp, &xp));
        for i in 0..n {
            for c in 0..2 {
                prop_assert!((yp.at(&[i, c]) - y.at(&[perm[i], c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..10_000, scale in 0.01f64..1e4, shift in -1e3f64..1e3) {
        let x = random_tensor(&[20, 3, 2], seed).map(|v| v * scale + shift);
        let stats = ChannelStats::fit(&x, 0..12, "x").unwrap();
        let back = stats.denormalize(&stats.normalize(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12 * (1.0 + shift.abs() + scale));
    }

    #[test]
    fn containers_round_trip_bitwise(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..6) {
        let t = random_tensor(&[rows, cols], seed);
        let tmp = tempfile::tempdir().unwrap();
        save_arrays(tmp.path(), &[("t", &t)]).unwrap();
        let back = &load_arrays(tmp.path()).unwrap()["t"];
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
