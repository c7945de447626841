mod common;

use cchmm::diffcore::{Tape, Tensor};
use cchmm::graphops::RegionGraph;
use cchmm::model::{
    Architecture, ConceptLayout, Modality, Mode, ModelConfig, ModelParams, NoiseStream, Session, Side, StepInputs,
    WindowBatch,
};
use cchmm::optim::{apply_variant, Variant};
use common::{assert_close, fill, identity, random_tensor, set, zero_all};

const COND: usize = 3;

fn params(d: usize, arch: Architecture) -> ModelParams {
    let mut c = ModelConfig::new(COND, d, 3.0);
    c.arch = arch;
    ModelParams::init(c, 11).unwrap()
}

fn path_graph(n: usize) -> RegionGraph {
    let mut g = Tensor::zeros(&[n, n]);
    for i in 1..n {
        g.set(&[i - 1, i], 1.0);
        g.set(&[i, i - 1], 1.0);
    }
    RegionGraph::new(g).unwrap()
}

fn obs(b: usize, n: usize, seed: u64) -> Vec<Tensor> {
    Modality::ALL
        .iter()
        .enumerate()
        .map(|(i, m)| random_tensor(&[b, n, m.channels()], seed + i as u64))
        .collect()
}

fn batch(b: usize, n: usize, history: usize, seed: u64) -> WindowBatch {
    WindowBatch {
        history: (0..history)
            .map(|t| StepInputs {
                cond: random_tensor(&[b, n, COND], seed + 10 * t as u64),
                obs: obs(b, n, seed + 10 * t as u64 + 1),
            })
            .collect(),
        next_cond: random_tensor(&[b, n, COND], seed + 999),
        next_obs: Some(obs(b, n, seed + 1000)),
    }
}

#[test]
fn gru_with_zero_weights_halves_the_state() {
    let mut p = params(4, Architecture::default());
    zero_all(&mut p);
    let g = path_graph(3);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let z_prev = random_tensor(&[1, 3, 4], 1);
    let zp = tape.constant(z_prev.clone()).unwrap();
    let cond = Some(tape.constant(random_tensor(&[1, 3, COND], 2)).unwrap());
    let o = tape.constant(random_tensor(&[1, 3, 2], 3)).unwrap();
    let eps = s.graphgru_step(1, Side::Posterior, cond, Some(o), zp).unwrap();
    assert_close(&tape.value(eps), &z_prev.map(|v| 0.5 * v), 1e-15);
}

#[test]
fn gru_update_gate_saturation() {
    let g = path_graph(3);
    let z_prev = random_tensor(&[1, 3, 4], 4);

    // u ~ 1 carries the state through.
    let mut p = params(4, Architecture::default());
    zero_all(&mut p);
    fill(&mut p, "prior.taxi.update.b", 30.0);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let cond = Some(tape.constant(random_tensor(&[1, 3, COND], 5)).unwrap());
    let eps = s
        .graphgru_step(2, Side::Prior, cond, None, tape.constant(z_prev.clone()).unwrap())
        .unwrap();
    assert_close(&tape.value(eps), &z_prev, 1e-12);

    // u ~ 0 with a zero state adopts the candidate tanh(b_c).
    let mut p = params(4, Architecture::default());
    zero_all(&mut p);
    fill(&mut p, "prior.taxi.update.b", -30.0);
    set(&mut p, "prior.taxi.candidate.b", Tensor::vector(&[0.3, -0.7, 1.2, 0.0]));
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let cond = Some(tape.constant(random_tensor(&[1, 3, COND], 6)).unwrap());
    let zero = tape.constant(Tensor::zeros(&[1, 3, 4])).unwrap();
    let eps = tape.value(s.graphgru_step(2, Side::Prior, cond, None, zero).unwrap());
    for r in 0..3 {
        for (k, b) in [0.3f64, -0.7, 1.2, 0.0].iter().enumerate() {
            assert!((eps.at(&[0, r, k]) - b.tanh()).abs() < 1e-12);
        }
    }
}

#[test]
fn posterior_gru_requires_observations() {
    let p = params(4, Architecture::default());
    let g = path_graph(2);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let cond = Some(tape.constant(Tensor::zeros(&[1, 2, COND])).unwrap());
    let z = tape.constant(Tensor::zeros(&[1, 2, 4])).unwrap();
    let err = s.graphgru_step(1, Side::Posterior, cond, None, z).unwrap_err();
    assert!(err.to_string().contains("bike"), "{err}");
}

#[test]
fn gaussian_head_zero_and_clamp() {
    let mut p = params(4, Architecture::default());
    zero_all(&mut p);
    let g = path_graph(2);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let head = &p.layout().posterior.eps_heads[0];
    let h = tape.constant(random_tensor(&[1, 2, 4], 7)).unwrap();
    let out = s.gaussian_head(head, h).unwrap();
    assert_eq!(tape.value(out.mean), Tensor::zeros(&[1, 2, 4]));
    assert_eq!(tape.value(out.logvar), Tensor::zeros(&[1, 2, 4]));

    fill(&mut p, "posterior.poi.eps_logvar.b", 50.0);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let h = tape.constant(random_tensor(&[1, 2, 4], 7)).unwrap();
    let out = s.gaussian_head(&p.layout().posterior.eps_heads[0], h).unwrap();
    assert_eq!(tape.value(out.logvar), Tensor::full(&[1, 2, 4], 10.0));
}

fn adjacency_of(w_a: Tensor, alpha: f64) -> Tensor {
    let mut c = ModelConfig::new(COND, 2, alpha);
    c.arch = Architecture::default();
    let mut p = ModelParams::init(c, 0).unwrap();
    set(&mut p, "causal.w_a", w_a);
    let g = path_graph(2);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    tape.value(s.causal_adjacency().unwrap().unwrap())
}

#[test]
fn causal_adjacency_examples() {
    assert_eq!(adjacency_of(Tensor::zeros(&[5, 5]), 3.0), Tensor::zeros(&[5, 5]));
    let neg = random_tensor(&[5, 5], 8).map(|v| -v.abs() - 1e-3);
    assert_eq!(adjacency_of(neg, 3.0), Tensor::zeros(&[5, 5]));
    let mut w = Tensor::zeros(&[5, 5]);
    w.set(&[0, 1], 10.0);
    w.set(&[3, 3], 10.0);
    let a = adjacency_of(w, 1.0);
    assert!((a.at(&[0, 1]) - 0.999_999_995_877_692_8).abs() < 1e-15);
    assert_eq!(a.at(&[3, 3]), 0.0);
}

fn propagate(a: Tensor, eps: &Tensor) -> Tensor {
    let p = params(eps.shape()[3], Architecture::default());
    let g = path_graph(eps.shape()[1]);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let a = Some(tape.constant(a).unwrap());
    tape.value(s.causal_propagate(a, tape.constant(eps.clone()).unwrap()).unwrap())
}

#[test]
fn causal_propagate_examples() {
    let eps = random_tensor(&[2, 3, 5, 2], 9);
    assert_close(&propagate(Tensor::zeros(&[5, 5]), &eps), &eps, 1e-15);

    // Chain 0 -> 1 with weight a.
    let a = 0.6;
    let mut m = Tensor::zeros(&[5, 5]);
    m.set(&[0, 1], a);
    let h = propagate(m, &eps);
    for (b, r, k) in [(0, 0, 0), (1, 2, 1), (0, 1, 1)] {
        let e = |c: usize| eps.at(&[b, r, c, k]);
        assert!((h.at(&[b, r, 0, k]) - e(0)).abs() < 1e-12);
        assert!((h.at(&[b, r, 1, k]) - (a * e(0) + e(1))).abs() < 1e-12);
    }

    // Chain 0 -> 1 -> 2 with weights a, b: h_2 = e_2 + b e_1 + a b e_0.
    let (a, bw) = (0.4, -0.9f64.abs());
    let mut m = Tensor::zeros(&[5, 5]);
    m.set(&[0, 1], a);
    m.set(&[1, 2], bw);
    let h = propagate(m, &eps);
    let e = |c: usize| eps.at(&[1, 1, c, 0]);
    assert!((h.at(&[1, 1, 2, 0]) - (e(2) + bw * e(1) + a * bw * e(0))).abs() < 1e-12);
}

#[test]
fn concept_transform_examples() {
    let mut p = params(3, Architecture::default());
    zero_all(&mut p);
    fill(&mut p, "transform.bus.outer.b", 0.25);
    let g = path_graph(2);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let h = tape.constant(random_tensor(&[1, 2, 5, 3], 10)).unwrap();
    let z = s.concept_transform(h).unwrap();
    assert_eq!(tape.value(z[3]), Tensor::full(&[1, 2, 3], 0.25));

    let mut p = params(3, Architecture::default());
    for label in ["poi", "bike", "taxi", "bus", "v"] {
        identity(&mut p, &format!("transform.{label}.inner.w"));
        identity(&mut p, &format!("transform.{label}.outer.w"));
        fill(&mut p, &format!("transform.{label}.inner.b"), 0.0);
        fill(&mut p, &format!("transform.{label}.outer.b"), 0.0);
    }
    let hv = random_tensor(&[1, 2, 5, 3], 11);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let z = s.concept_transform(tape.constant(hv.clone()).unwrap()).unwrap();
    for (i, zi) in z.iter().enumerate() {
        let v = tape.value(*zi);
        for r in 0..2 {
            for k in 0..3 {
                assert!((v.at(&[0, r, k]) - hv.at(&[0, r, i, k]).tanh()).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn posterior_step_shapes_and_determinism() {
    let p = params(4, Architecture::default());
    let g = path_graph(3);
    let b = batch(2, 3, 1, 12);
    let run = |mode: &mut Mode<'_>| {
        let tape = Tape::new();
        let s = Session::new(&tape, &p, &g, false).unwrap();
        let adj = s.causal_adjacency().unwrap();
        let cond = Some(tape.constant(b.history[0].cond.clone()).unwrap());
        let o: Vec<_> = b.history[0].obs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
        let z_prev = tape.constant(Tensor::zeros(&[2, 3, 5, 4])).unwrap();
        let out = s.posterior_step(cond, &o, z_prev, adj, mode).unwrap();
        (tape.value(out.eps.mean), tape.value(out.z.mean), tape.value(out.z_sample))
    };
    let (eps, z, sample) = run(&mut Mode::Eval);
    for t in [&eps, &z, &sample] {
        assert_eq!(t.shape(), &[2, 3, 5, 4]);
    }
    assert_eq!(sample, z, "evaluation uses the mean path");

    let a = run(&mut Mode::Train(&mut NoiseStream::new(5)));
    let b2 = run(&mut Mode::Train(&mut NoiseStream::new(5)));
    assert_eq!(a, b2);
    assert_ne!(a.2, a.1, "training samples around the mean");
}

#[test]
fn shared_modules_make_prior_and_posterior_agree() {
    let mut p = params(3, Architecture::default());
    // Zero the shared transform and give both sides the same z heads.
    for label in ["poi", "bike", "taxi", "bus", "v"] {
        for part in ["inner.w", "inner.b", "outer.w"] {
            fill(&mut p, &format!("transform.{label}.{part}"), 0.0);
        }
        for part in ["z_mean.w", "z_mean.b", "z_logvar.w", "z_logvar.b"] {
            let v = p.by_name(&format!("posterior.{label}.{part}")).unwrap().clone();
            set(&mut p, &format!("prior.{label}.{part}"), v);
        }
    }
    let g = path_graph(2);
    let b = batch(1, 2, 1, 13);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let adj = s.causal_adjacency().unwrap();
    let cond = Some(tape.constant(b.history[0].cond.clone()).unwrap());
    let o: Vec<_> = b.history[0].obs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let z_prev = tape.constant(random_tensor(&[1, 2, 5, 3], 14)).unwrap();
    let post = s.posterior_step(cond, &o, z_prev, adj, &mut Mode::Eval).unwrap();
    let prior = s.prior_step(cond, z_prev, adj, &mut Mode::Eval).unwrap();
    assert_eq!(tape.value(post.z.mean), tape.value(prior.z.mean));
    assert_ne!(tape.value(post.eps.mean), tape.value(prior.eps.mean));
}

#[test]
fn attention_examples() {
    // W_att = 0: every slot is the concept mean of z_prior.
    let mut p = params(2, Architecture::default());
    fill(&mut p, "attention.w_att", 0.0);
    let g = path_graph(2);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let zp = random_tensor(&[1, 2, 5, 2], 15);
    let fused = tape.value(
        s.attention_fuse(tape.constant(random_tensor(&[1, 2, 5, 2], 16)).unwrap(), tape.constant(zp.clone()).unwrap())
            .unwrap(),
    );
    for r in 0..2 {
        for k in 0..2 {
            let mean = (0..5).map(|c| zp.at(&[0, r, c, k])).sum::<f64>() / 5.0;
            for c in 0..5 {
                assert!((fused.at(&[0, r, c, k]) - mean).abs() < 1e-15);
            }
        }
    }

    // d = 1, W_att = [[1]], queries 1, z_prior = [2, 0, 0, 0, 0]:
    // weights softmax([2, 0, 0, 0, 0]), every slot 2 e^2 / (e^2 + 4).
    let mut p = params(1, Architecture::default());
    fill(&mut p, "attention.w_att", 1.0);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let q = tape.constant(Tensor::full(&[1, 1, 5, 1], 1.0)).unwrap();
    let mut prior = Tensor::zeros(&[1, 1, 5, 1]);
    prior.set(&[0, 0, 0, 0], 2.0);
    let fused = tape.value(s.attention_fuse(q, tape.constant(prior).unwrap()).unwrap());
    let e2 = 2f64.exp();
    let expect = 2.0 * e2 / (e2 + 4.0);
    for c in 0..5 {
        assert!((fused.at(&[0, 0, c, 0]) - expect).abs() < 1e-14);
    }
}

#[test]
fn attention_single_slot_is_identity() {
    let arch = apply_variant(&Variant::Entangle.flags()).unwrap();
    let p = params(3, arch);
    let g = path_graph(2);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let zp = random_tensor(&[1, 2, 1, 3], 17);
    let q = tape.constant(random_tensor(&[1, 2, 1, 3], 18)).unwrap();
    let fused = tape.value(s.attention_fuse(q, tape.constant(zp.clone()).unwrap()).unwrap());
    assert_close(&fused, &zp, 1e-15);
}

#[test]
fn generator_reads_only_its_own_slot() {
    let mut p = params(3, Architecture::default());
    let g = path_graph(2);
    let z = random_tensor(&[1, 2, 5, 3], 19);
    let gen = |p: &ModelParams, z: &Tensor| -> Vec<Tensor> {
        let tape = Tape::new();
        let s = Session::new(&tape, p, &g, false).unwrap();
        s.generate(tape.constant(z.clone()).unwrap())
            .unwrap()
            .into_iter()
            .map(|v| tape.value(v))
            .collect()
    };
    let base = gen(&p, &z);
    let mut poi = z.clone();
    for r in 0..2 {
        for k in 0..3 {
            poi.set(&[0, r, 0, k], 100.0);
        }
    }
    assert_eq!(gen(&p, &poi), base);
    let mut bus = z.clone();
    bus.set(&[0, 1, 3, 2], 5.0);
    let moved = gen(&p, &bus);
    for m in Modality::ALL {
        assert_eq!(moved[m.index()] != base[m.index()], m == Modality::Bus, "{}", m.name());
    }

    for m in Modality::ALL {
        fill(&mut p, &format!("generator.{}.out.w", m.name()), 0.0);
        fill(&mut p, &format!("generator.{}.out.b", m.name()), 0.5 + m.index() as f64);
    }
    for (m, x) in Modality::ALL.iter().zip(gen(&p, &z)) {
        assert_eq!(x, Tensor::full(&[1, 2, m.channels()], 0.5 + m.index() as f64));
    }
}

#[test]
fn rollout_contract() {
    let p = params(4, Architecture::default());
    let g = path_graph(3);
    let b = batch(2, 3, 1, 20);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let out = s.rollout(&b, &mut Mode::Eval).unwrap();
    assert_eq!((out.posterior.len(), out.prior.len(), out.recon.len(), out.pred.len()), (1, 1, 1, 1));
    assert_eq!(out.forecast.len(), 4);
    assert_eq!(tape.shape(out.forecast[3]), vec![2, 3, 1]);

    let forecast = |mode: &mut Mode<'_>| -> Vec<Tensor> {
        let b = batch(2, 3, 3, 21);
        let tape = Tape::new();
        let s = Session::new(&tape, &p, &g, false).unwrap();
        let out = s.rollout(&b, mode).unwrap();
        out.forecast.iter().map(|v| tape.value(*v)).collect()
    };
    assert_eq!(forecast(&mut Mode::Eval), forecast(&mut Mode::Eval));
    let t1 = forecast(&mut Mode::Train(&mut NoiseStream::new(3)));
    assert_eq!(t1, forecast(&mut Mode::Train(&mut NoiseStream::new(3))));
    assert_ne!(t1, forecast(&mut Mode::Train(&mut NoiseStream::new(4))));
}

#[test]
fn empty_window_is_rejected() {
    let p = params(2, Architecture::default());
    let g = path_graph(2);
    let mut b = batch(1, 2, 1, 22);
    b.history.clear();
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    assert!(s.rollout(&b, &mut Mode::Eval).is_err());
}

#[test]
fn no_scm_propagation_is_identity() {
    let arch = apply_variant(&Variant::NoScm.flags()).unwrap();
    let p = params(3, arch);
    assert!(p.by_name("causal.w_a").is_none());
    let g = path_graph(2);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let adj = s.causal_adjacency().unwrap();
    assert!(adj.is_none());
    let eps = random_tensor(&[1, 2, 5, 3], 23);
    let h = s.causal_propagate(adj, tape.constant(eps.clone()).unwrap()).unwrap();
    assert_eq!(tape.value(h), eps);
}

#[test]
fn no_gcn_ignores_the_region_graph() {
    let arch = apply_variant(&Variant::NoGcn.flags()).unwrap();
    let p = params(3, arch);
    let b = batch(1, 3, 2, 24);
    let forecast = |g: &RegionGraph| -> Vec<Tensor> {
        let tape = Tape::new();
        let s = Session::new(&tape, &p, g, false).unwrap();
        let out = s.rollout(&b, &mut Mode::Eval).unwrap();
        out.forecast.iter().map(|v| tape.value(*v)).collect()
    };
    let mut dense = Tensor::full(&[3, 3], 2.0);
    for i in 0..3 {
        dense.set(&[i, i], 0.0);
    }
    assert_eq!(forecast(&path_graph(3)), forecast(&RegionGraph::new(dense).unwrap()));

    // The full model does depend on the graph.
    let full = params(3, Architecture::default());
    let run = |g: &RegionGraph| {
        let tape = Tape::new();
        let s = Session::new(&tape, &full, g, false).unwrap();
        let out = s.rollout(&b, &mut Mode::Eval).unwrap();
        tape.value(out.forecast[0])
    };
    assert_ne!(run(&path_graph(3)), run(&RegionGraph::isolated(3)));
}

#[test]
fn entangled_latents_have_one_slot() {
    let arch = apply_variant(&Variant::Entangle.flags()).unwrap();
    assert_eq!(arch.concepts, ConceptLayout::Entangled);
    let p = params(3, arch);
    let g = path_graph(2);
    let b = batch(2, 2, 2, 25);
    let tape = Tape::new();
    let s = Session::new(&tape, &p, &g, false).unwrap();
    let out = s.rollout(&b, &mut Mode::Eval).unwrap();
    for step in out.posterior.iter().chain(&out.prior) {
        assert_eq!(tape.shape(step.z_sample), vec![2, 2, 1, 3]);
        assert_eq!(tape.shape(step.eps.mean), vec![2, 2, 1, 3]);
    }
    assert!(out.adjacency.is_none());
}

#[test]
fn every_variant_runs_a_window() {
    let g = path_graph(3);
    let b = batch(2, 3, 2, 26);
    for v in Variant::ALL {
        let p = params(3, apply_variant(&v.flags()).unwrap());
        let tape = Tape::new();
        let s = Session::new(&tape, &p, &g, true).unwrap();
        let out = s.rollout(&b, &mut Mode::Train(&mut NoiseStream::new(1))).unwrap();
        let (total, report) = cchmm::objective::total_loss(&tape, &out, &b, 1.0).unwrap();
        assert!(report.total.is_finite(), "{v}");
        tape.backward(total).unwrap();
        assert_eq!(out.prior.is_empty(), v == Variant::NoPrior, "{v}");
    }
}

#[test]
fn parameter_ownership() {
    let p = params(3, Architecture::default());
    let names = p.names();
    let unique: std::collections::BTreeSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    assert_eq!(names.iter().filter(|n| n.starts_with("causal.")).count(), 1);
    for label in ["poi", "bike", "taxi", "bus", "v"] {
        assert!(names.iter().any(|n| n.starts_with(&format!("transform.{label}."))));
        assert!(names.iter().any(|n| n.starts_with(&format!("posterior.{label}."))));
        assert!(names.iter().any(|n| n.starts_with(&format!("prior.{label}."))));
    }
    // Same structure on both sides, disjoint storage.
    let post: Vec<_> = names.iter().filter_map(|n| n.strip_prefix("posterior.")).collect();
    let prior: Vec<_> = names.iter().filter_map(|n| n.strip_prefix("prior.")).collect();
    assert_eq!(post.len(), prior.len());
}
