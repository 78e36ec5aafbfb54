//! Session behaviour on whole graphs: closure pruning against an
//! independent reachability oracle, distributed equivalence, causality,
//! statefulness and checkpoint resume.

use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tensorgraph::data::{Dataset, SyntheticSpec};
use tensorgraph::graph::OpKind;
use tensorgraph::runtime::SchedulePolicy;
use tensorgraph::scenarios::{self, random_graph};
use tensorgraph::walkthrough::{ModelConfig, TrainConfig, Trainer, WeightInit};
use tensorgraph::{
    DType, Feeds, Fleet, Graph, NodeId, RuntimeError, Saver, Session, SessionOptions, Shape, TensorId, TensorRef,
    TensorValue,
};

/// Nodes reached backwards from `roots`, not crossing fed tensors.
fn reachable(g: &Graph, roots: &[NodeId], fed: &HashSet<TensorId>) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack = roots.to_vec();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        let node = g.expect_node(id);
        for t in &node.inputs {
            if !fed.contains(&t.id()) {
                stack.push(t.node);
            }
        }
        stack.extend(node.control_inputs.iter().copied());
    }
    seen
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trace_is_exactly_the_pruned_closure(seed in 0u64..10_000, ops in 4usize..30) {
        let r = random_graph(seed, ops, 0.1, &[]).unwrap();
        let g = r.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<NodeId> = g.node_ids().collect();
        let fetch = r.sinks[rng.random_range(0..r.sinks.len())].clone();
        let mut feeds = Feeds::new();
        let mut fed = HashSet::new();
        for id in &ids {
            let t = g.expect_node(*id).output(0);
            if t.node != fetch.node && rng.random_bool(0.2) {
                feeds.insert(&t, TensorValue::filled(DType::F32, &[2, 3], 0.25));
                fed.insert(t.id());
            }
        }
        let mut s = Session::new(g.clone()).unwrap();
        s.run(std::slice::from_ref(&fetch), &feeds).unwrap();
        let traced: BTreeSet<NodeId> = s.last_trace().unwrap().node_ids().into_iter().collect();
        prop_assert_eq!(traced, reachable(&g, &[fetch.node], &fed));
    }

    #[test]
    fn repeated_runs_are_bit_identical(seed in 0u64..10_000) {
        let fleet = Fleet::uniform(3);
        let r = random_graph(seed, 20, 0.1, &fleet.names()).unwrap();
        let options = SessionOptions { fleet: Some(fleet), ..SessionOptions::default() };
        let run = || {
            let mut s = Session::with_options(r.graph.clone(), options.clone()).unwrap();
            let out = s.run(&r.sinks, &Feeds::new()).unwrap();
            let trace = s.last_trace().unwrap().to_jsonl();
            (out, trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        prop_assert_eq!(ta, tb);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.bit_eq(y));
        }
    }
}

#[test]
fn feeding_an_internal_tensor_skips_its_producers() {
    let mut g = Graph::new();
    let x = g.placeholder(DType::F64, Shape::known(&[1, 3]), "x").unwrap();
    let w = g
        .constant_named(
            TensorValue::from_values(DType::F64, &[3, 1], &[1.0, 2.0, 3.0]).unwrap(),
            "w",
        )
        .unwrap();
    let dot = g.matmul(&x, &w).unwrap();
    let y = g.sigmoid(&dot).unwrap();
    let mut s = Session::new(g).unwrap();
    let feeds = Feeds::new().with(&dot, TensorValue::from_values(DType::F64, &[1, 1], &[0.0]).unwrap());
    let out = s.run(std::slice::from_ref(&y), &feeds).unwrap();
    assert_eq!(out[0].to_f64_vec(), vec![0.5]);
    let trace = s.last_trace().unwrap();
    assert!(!trace.contains(x.node));
    assert!(!trace.contains(w.node));
    assert!(!trace.contains(dot.node));
    assert!(trace.contains(y.node));
}

#[test]
fn unfed_placeholder_is_reported() {
    let mut g = Graph::new();
    let x = g.placeholder(DType::F32, Shape::scalar(), "x").unwrap();
    let y = g.exp(&x).unwrap();
    let mut s = Session::new(g).unwrap();
    let err = s.run(&[y], &Feeds::new()).unwrap_err();
    assert_eq!(err, RuntimeError::MissingFeed("x".into()));
}

#[test]
fn counter_increments_once_per_run() {
    let mut g = Graph::new();
    let v = g.variable(TensorValue::scalar(DType::F64, 5.0), "v").unwrap();
    let one = g.scalar(DType::F64, 1.0).unwrap();
    let next = g.add(&v.var, &one).unwrap();
    let bump = g.assign(&v.var, &next).unwrap();
    let init = g.initialize_all_variables().unwrap();
    let mut s = Session::new(g).unwrap();
    s.run_targets(&[init], &Feeds::new()).unwrap();
    for _ in 0..7 {
        s.run(std::slice::from_ref(&bump), &Feeds::new()).unwrap();
    }
    assert_eq!(s.variable(&v.var).unwrap().scalar_value(), Some(12.0));
}

#[test]
fn sessions_do_not_share_variables() {
    let mut g = Graph::new();
    let v = g.variable(TensorValue::scalar(DType::F64, 1.0), "v").unwrap();
    let two = g.scalar(DType::F64, 2.0).unwrap();
    let doubled = g.mul(&v.var, &two).unwrap();
    let bump = g.assign(&v.var, &doubled).unwrap();
    let init = g.initialize_all_variables().unwrap();
    let mut a = Session::new(g.clone()).unwrap();
    let mut b = Session::new(g).unwrap();
    a.run_targets(&[init], &Feeds::new()).unwrap();
    b.run_targets(&[init], &Feeds::new()).unwrap();
    a.run(std::slice::from_ref(&bump), &Feeds::new()).unwrap();
    assert_eq!(a.variable(&v.var).unwrap().scalar_value(), Some(2.0));
    assert_eq!(b.variable(&v.var).unwrap().scalar_value(), Some(1.0));
}

#[test]
fn recv_starts_after_its_send_finishes() {
    let sc = scenarios::cross_device().unwrap();
    let options = SessionOptions {
        fleet: Some(sc.fleet.clone()),
        ..SessionOptions::default()
    };
    let mut s = Session::with_options(sc.graph, options).unwrap();
    s.run(&[sc.alpha, sc.beta], &Feeds::new()).unwrap();
    let trace = s.last_trace().unwrap().clone();
    let channels = s.program().channels.clone();
    assert_eq!(channels.len(), 1);
    for c in channels {
        let send = trace.entry(c.send).expect("send executed");
        let recv = trace.entry(c.recv).expect("recv executed");
        assert_eq!(send.device, "A");
        assert_eq!(recv.device, "B");
        assert!(recv.start >= send.end, "{} < {}", recv.start, send.end);
    }
}

fn small_data() -> Dataset {
    tensorgraph::data::synthetic(&SyntheticSpec {
        classes: 4,
        dim: 24,
        samples: 400,
        separation: 3.0,
        seed: 11,
    })
}

fn config(steps: u64, devices: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            weight_init: WeightInit::Uniform { seed: 3 },
            ..ModelConfig::default()
        },
        steps,
        batch: 20,
        shuffle_seed: 5,
        devices,
        ..TrainConfig::default()
    }
}

#[test]
fn two_devices_match_one_device_exactly() {
    let one = Trainer::new(config(30, 1), small_data())
        .unwrap()
        .run(|_, _| {})
        .unwrap();
    let mut t = Trainer::new(config(30, 2), small_data()).unwrap();
    assert!(!t.session().program().channels.is_empty());
    let two = t.run(|_, _| {}).unwrap();
    assert_eq!(one.losses, two.losses);
    assert_eq!(one.final_loss, two.final_loss);
}

#[test]
fn three_truncating_devices_reach_the_single_device_loss() {
    let walkthrough = |devices, truncate_wire| TrainConfig {
        devices,
        truncate_wire,
        ..TrainConfig::default()
    };
    let data = || tensorgraph::data::synthetic(&SyntheticSpec::default());
    let one = Trainer::new(walkthrough(1, false), data())
        .unwrap()
        .run(|_, _| {})
        .unwrap();
    let mut t = Trainer::new(walkthrough(3, true), data()).unwrap();
    let program = t.session().program();
    assert!(program.count_kind(OpKind::Send) >= 1);
    assert!(program.channels.iter().any(|c| c.truncate));
    let three = t.run(|_, _| {}).unwrap();
    assert!(
        (one.final_loss - three.final_loss).abs() < 1e-2,
        "{} vs {}",
        one.final_loss,
        three.final_loss
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let full = Trainer::new(config(60, 1), small_data())
        .unwrap()
        .run(|_, _| {})
        .unwrap();

    let first = TrainConfig {
        checkpoint: Some(ckpt.clone()),
        ..config(30, 1)
    };
    Trainer::new(first, small_data()).unwrap().run(|_, _| {}).unwrap();
    let second = TrainConfig {
        checkpoint: Some(ckpt),
        ..config(60, 1)
    };
    let mut resumed = Trainer::new(second, small_data()).unwrap();
    assert_eq!(resumed.global_step(), 30);
    let tail = resumed.run(|_, _| {}).unwrap();
    assert_eq!(tail.losses, full.losses[30..]);
    assert_eq!(tail.final_loss.to_bits(), full.final_loss.to_bits());
}

#[test]
fn restore_rejects_transposed_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    let build = |dims: &[usize]| {
        let mut g = Graph::new();
        let w = g.variable(TensorValue::zeros(DType::F32, dims), "W").unwrap();
        let saver = Saver::new(&mut g, "unused").unwrap();
        let init = g.initialize_all_variables().unwrap();
        let mut s = Session::new(g).unwrap();
        s.run_targets(&[init], &Feeds::new()).unwrap();
        (s, saver, w)
    };
    let (mut a, saver_a, _) = build(&[784, 10]);
    a.save(&saver_a, &path).unwrap();
    let (mut b, saver_b, _) = build(&[10, 784]);
    let err = b.restore(&saver_b, &path).unwrap_err();
    assert!(
        matches!(
            err,
            RuntimeError::Checkpoint(tensorgraph::runtime::CheckpointError::ShapeMismatchAtRestore { .. })
        ),
        "{err:?}"
    );
}

#[test]
fn save_perturb_restore_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ckpt");
    let mut g = Graph::new();
    let v = g
        .variable(
            TensorValue::from_values(DType::F32, &[3], &[0.1, -2.5, 1e-30]).unwrap(),
            "v",
        )
        .unwrap();
    let saver = Saver::new(&mut g, "unused").unwrap();
    let noise = g.scalar(DType::F32, 0.37).unwrap();
    let moved = g.add(&v.var, &noise).unwrap();
    let perturb = g.assign(&v.var, &moved).unwrap();
    let init = g.initialize_all_variables().unwrap();
    let mut s = Session::new(g).unwrap();
    s.run_targets(&[init], &Feeds::new()).unwrap();
    let saved = s.variable(&v.var).unwrap().clone();
    s.save(&saver, &path).unwrap();
    s.run(std::slice::from_ref(&perturb), &Feeds::new()).unwrap();
    assert!(!s.variable(&v.var).unwrap().bit_eq(&saved));
    s.restore(&saver, &path).unwrap();
    assert!(s.variable(&v.var).unwrap().bit_eq(&saved));
}

#[test]
fn alap_peak_does_not_exceed_asap_on_diamonds() {
    for (elements, long) in [(64, 6), (1024, 10), (4096, 16)] {
        let (g, join) = scenarios::diamond(elements, long).unwrap();
        let peak = |policy| {
            let options = SessionOptions {
                schedule: policy,
                ..SessionOptions::default()
            };
            let mut s = Session::with_options(g.clone(), options).unwrap();
            s.run(std::slice::from_ref(&join), &Feeds::new()).unwrap();
            s.last_trace().unwrap().peak_live_bytes()
        };
        let (alap, asap) = (peak(SchedulePolicy::Alap), peak(SchedulePolicy::Asap));
        assert!(alap <= asap, "{elements}x{long}: {alap} > {asap}");
    }
}

#[test]
fn fetch_order_does_not_change_values() {
    let sc = scenarios::duplicate_add().unwrap();
    let feeds = Feeds::new()
        .with(&sc.x, TensorValue::from_f32(&[3], vec![1.0, 2.0, 3.0]).unwrap())
        .with(&sc.y, TensorValue::from_f32(&[3], vec![0.5, 0.5, 0.5]).unwrap());
    let mut s = Session::new(sc.graph).unwrap();
    let a: Vec<TensorRef> = vec![sc.z2.clone(), sc.x.clone()];
    let out = s.run(&a, &feeds).unwrap();
    assert_eq!(out[0].to_f64_vec(), vec![2.25, 6.25, 12.25]);
    assert_eq!(out[1].to_f64_vec(), vec![1.0, 2.0, 3.0]);
}
