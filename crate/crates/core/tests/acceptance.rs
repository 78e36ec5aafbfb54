//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

mod support;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tensorgraph::data::{synthetic, SyntheticSpec};
use tensorgraph::passes::{
    compute_node_count, eliminate_common_subgraphs, partition, place, truncate16_f32, CostModel, Device,
};
use tensorgraph::runtime::SchedulePolicy;
use tensorgraph::scenarios::{cross_device, diamond, duplicate_add, random_graph};
use tensorgraph::walkthrough::{block_means, build_model, ModelConfig, TrainConfig, Trainer, WeightInit};
use tensorgraph::{
    gradients, DType, Feeds, Fleet, Graph, OpKind, RuntimeError, Saver, Session, SessionOptions, Shape, TensorId,
    TensorValue,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn walkthrough() -> Outcome {
    let data = synthetic(&SyntheticSpec::default());
    let started = Instant::now();
    let mut t = Trainer::new(
        TrainConfig {
            shuffle_seed: 1,
            ..TrainConfig::default()
        },
        data.clone(),
    )
    .map_err(|e| e.to_string())?;
    let report = t.run(|_, _| {}).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    ensure(report.losses.len() == 1000, || {
        format!("{} steps ran", report.losses.len())
    })?;
    ensure(report.accuracy >= 0.95, || format!("accuracy {}", report.accuracy))?;
    let windows = block_means(&report.losses, 100);
    let decreasing = windows.windows(2).all(|w| w[1] < w[0]);
    ensure(decreasing, || {
        format!("100-step window means not strictly decreasing: {windows:?}")
    })?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;

    let zero = ModelConfig {
        weight_init: WeightInit::Zeros,
        bias_init: 0.0,
        ..ModelConfig::default()
    };
    let mut t = Trainer::new(
        TrainConfig {
            model: zero,
            ..TrainConfig::default()
        },
        data,
    )
    .map_err(|e| e.to_string())?;
    let first = t.step().map_err(|e| e.to_string())?;
    let ln10 = 10f64.ln();
    ensure((first - ln10).abs() < 1e-5, || {
        format!("zero-init loss {first}, want {ln10}")
    })?;
    Ok(format!(
        "accuracy {:.4}, window means {:.4} -> {:.4}, {secs:.1} s, zero-init loss {first:.6}",
        report.accuracy,
        windows[0],
        windows[windows.len() - 1]
    ))
}

fn gradient_checks() -> Outcome {
    let started = Instant::now();
    let mut cases = Vec::new();
    for (i, &kind) in support::KINDS.iter().enumerate() {
        for seed in 0..7 {
            cases.push(support::random_case(kind, (i * 100 + seed) as u64));
        }
    }
    for seed in 0..5 {
        cases.push(support::walkthrough_case(seed));
    }
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for case in &cases {
        let numeric = support::numeric(case);
        let e64 = support::relative_error(&support::analytic(case, DType::F64), &numeric);
        let e32 = support::relative_error(&support::analytic(case, DType::F32), &numeric);
        ensure(e64 < 1e-7, || format!("{}: F64 relative error {e64:e}", case.name))?;
        ensure(e32 < 1e-4, || format!("{}: F32 relative error {e32:e}", case.name))?;
        worst64 = worst64.max(e64);
        worst32 = worst32.max(e32);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} instances over {} kinds plus the walkthrough loss, worst F64 {worst64:.1e}, F32 {worst32:.1e}, {secs:.1} s",
        cases.len(),
        support::KINDS.len()
    ))
}

fn cse() -> Outcome {
    let s = duplicate_add().map_err(|e| e.to_string())?;
    let (optimized, report) = eliminate_common_subgraphs(&s.graph);
    let (before, after) = (compute_node_count(&s.graph), compute_node_count(&optimized));
    ensure(before == 3 && after == 2, || {
        format!("compute nodes {before} -> {after}")
    })?;
    let feeds = Feeds::new()
        .with(&s.x, TensorValue::from_f32(&[3], vec![0.1, -2.5, 3.25]).unwrap())
        .with(&s.y, TensorValue::from_f32(&[3], vec![1.7, 0.3, -1e-3]).unwrap());
    let plain = Session::new(s.graph.clone()).and_then(|mut ses| ses.run(std::slice::from_ref(&s.z2), &feeds));
    let merged = Session::with_options(
        s.graph.clone(),
        SessionOptions {
            cse: true,
            ..SessionOptions::default()
        },
    )
    .and_then(|mut ses| ses.run(std::slice::from_ref(&s.z2), &feeds));
    let (plain, merged) = (plain.map_err(|e| e.to_string())?, merged.map_err(|e| e.to_string())?);
    ensure(plain[0].bit_eq(&merged[0]), || "z2 changed under elimination".into())?;
    ensure(report.merged_count() == 1, || {
        format!("{} merges", report.merged_count())
    })?;

    let mut merges = 0;
    for seed in 0..200 {
        let r = random_graph(seed, 25, 0.3, &[]).map_err(|e| e.to_string())?;
        let (once, rep) = eliminate_common_subgraphs(&r.graph);
        let (twice, rep2) = eliminate_common_subgraphs(&once);
        ensure(rep2.merged.is_empty() && twice == once, || {
            format!("seed {seed}: second pass changed the graph")
        })?;
        merges += rep.merged_count();
    }
    Ok(format!(
        "3 -> 2 compute nodes, z2 bit-identical; 200 random graphs idempotent ({merges} merges)"
    ))
}

fn partitioning() -> Outcome {
    let s = cross_device().map_err(|e| e.to_string())?;
    let placement = place(&s.graph, &CostModel::new(s.fleet.clone())).map_err(|e| e.to_string())?;
    let prog = partition(&s.graph, &placement, false);
    let (sends, recvs) = (prog.count_kind(OpKind::Send), prog.count_kind(OpKind::Recv));
    ensure(sends == 1 && recvs == 1, || format!("{sends} sends, {recvs} recvs"))?;
    let ch = &prog.channels[0];
    ensure(ch.src_device == "A" && ch.dst_device == "B", || {
        "channel runs the wrong way".into()
    })?;
    for t in [&s.alpha, &s.beta] {
        ensure(prog.graph.expect_node(t.node).inputs[0].node == ch.recv, || {
            "consumer not fed by the recv".into()
        })?;
    }

    let mut graphs = 0;
    let mut edges = 0;
    let mut worst = 0.0f64;
    for seed in 0..60u64 {
        let n = 2 + (seed % 3) as usize;
        let fleet = Fleet::uniform(n);
        let pinned = random_graph(1000 + seed, 20, 0.0, &fleet.names()).map_err(|e| e.to_string())?;
        let plain = random_graph(1000 + seed, 20, 0.0, &[]).map_err(|e| e.to_string())?;
        let reference = Session::new(plain.graph.clone())
            .and_then(|mut ses| ses.run(&plain.sinks, &Feeds::new()))
            .map_err(|e| e.to_string())?;
        for truncate in [false, true] {
            let mut ses = Session::with_options(
                pinned.graph.clone(),
                SessionOptions {
                    fleet: Some(fleet.clone()),
                    truncate_wire: truncate,
                    ..SessionOptions::default()
                },
            )
            .map_err(|e| e.to_string())?;
            let mut per_key: BTreeMap<(TensorId, String), usize> = BTreeMap::new();
            for c in &ses.program().channels {
                if let Some(t) = c.tensor {
                    *per_key.entry((t, c.dst_device.clone())).or_default() += 1;
                }
            }
            ensure(per_key.values().all(|&c| c <= 1), || {
                format!("seed {seed}: duplicate recv")
            })?;
            let out = ses.run(&pinned.sinks, &Feeds::new()).map_err(|e| e.to_string())?;
            if !truncate {
                for (a, b) in out.iter().zip(&reference) {
                    ensure(a.bit_eq(b), || format!("seed {seed}: distributed output differs"))?;
                }
                continue;
            }
            let prog = ses.program().clone();
            for c in &prog.channels {
                let Some(sent) = c.tensor.and_then(|t| prog.graph.tensor(t)) else {
                    continue;
                };
                let received = prog.graph.output(c.recv, 0);
                let vals = ses.run(&[sent, received], &Feeds::new()).map_err(|e| e.to_string())?;
                for (x, y) in vals[0].to_f64_vec().iter().zip(vals[1].to_f64_vec()) {
                    let rel = if *x == 0.0 { y.abs() } else { ((x - y) / x).abs() };
                    worst = worst.max(rel);
                    ensure(rel <= 2f64.powi(-7), || format!("seed {seed}: edge error {rel:e}"))?;
                }
                edges += 1;
            }
        }
        graphs += 1;
    }
    Ok(format!(
        "cross-device scenario 1 send/1 recv; {graphs} random graphs on 2-4 devices bit-exact, {edges} truncated edges worst {worst:.2e}"
    ))
}

fn placement() -> Outcome {
    let fleet = Fleet::new(vec![
        Device::new("/worker:0/cpu:0"),
        Device::new("/worker:1/fast:0").without_kernels(&[OpKind::Exp, OpKind::Softmax]),
        Device::new("/worker:2/cpu:0"),
    ])
    .map_err(|e| e.to_string())?;
    let mut fleet = fleet;
    for k in OpKind::ALL {
        fleet.devices[1].per_op_time.insert(*k, 0.25);
    }
    let (walk, _) = build_model(&ModelConfig::default(), 20, 4, &[]).map_err(|e| e.to_string())?;
    let mut graphs = vec![walk];
    for seed in 0..20 {
        let mut r = random_graph(seed, 20, 0.0, &[]).map_err(|e| e.to_string())?;
        let sinks = r.sinks.clone();
        r.graph
            .scoped("extra", |g| sinks.iter().try_for_each(|t| g.exp(t).map(|_| ())))
            .map_err(|e| e.to_string())?;
        graphs.push(r.graph);
    }
    let model = CostModel::new(fleet.clone());
    let mut rows = 0;
    for g in &graphs {
        let p = place(g, &model).map_err(|e| e.to_string())?;
        let again = place(g, &model).map_err(|e| e.to_string())?;
        ensure(p == again && p.to_csv() == again.to_csv(), || {
            "placement not deterministic".into()
        })?;
        for node in g.nodes() {
            let d = p.device_of(node.id).unwrap_or_default();
            let dev = fleet.device(d).ok_or("unknown device")?;
            ensure(dev.supports(node.kind), || {
                format!("{} placed on {d} without a kernel", node.name)
            })?;
        }
        for row in p.log.iter().filter(|r| !r.pinned) {
            let min = row.costs.iter().copied().fold(f64::INFINITY, f64::min);
            let first = row.costs.iter().position(|&c| c == min);
            let chosen = p.devices.iter().position(|d| *d == row.device);
            ensure(first == chosen, || {
                format!("{}: {} is not the argmin of {:?}", row.name, row.device, row.costs)
            })?;
            rows += 1;
        }
    }
    Ok(format!(
        "{} graphs, {rows} logged choices all argmin, kernel exclusion held, deterministic",
        graphs.len()
    ))
}

fn truncation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    for _ in 0..1_000_000 {
        let x: f32 = StandardNormal.sample(&mut rng);
        let t = truncate16_f32(x);
        let (xb, tb) = (x.to_bits(), t.to_bits());
        ensure(tb & 0xFFFF == 0 && tb >> 16 == xb >> 16, || {
            format!("{x}: bits {xb:08x} -> {tb:08x}")
        })?;
        ensure(tb >> 23 == xb >> 23, || format!("{x}: sign or exponent changed"))?;
        let rel = if x == 0.0 {
            0.0
        } else {
            ((t as f64 - x as f64) / x as f64).abs()
        };
        ensure(rel <= 2f64.powi(-7), || format!("{x}: relative error {rel:e}"))?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "10^6 normals, worst relative error {worst:.3e} (bound {:.3e})",
        2f64.powi(-7)
    ))
}

fn scheduling() -> Outcome {
    let (g, join) = diamond(4096, 8).map_err(|e| e.to_string())?;
    let peak = |policy| -> Result<usize, RuntimeError> {
        let mut s = Session::with_options(
            g.clone(),
            SessionOptions {
                schedule: policy,
                ..SessionOptions::default()
            },
        )?;
        s.run(std::slice::from_ref(&join), &Feeds::new())?;
        Ok(s.last_trace().expect("trace").peak_live_bytes())
    };
    let alap = peak(SchedulePolicy::Alap).map_err(|e| e.to_string())?;
    let asap = peak(SchedulePolicy::Asap).map_err(|e| e.to_string())?;
    ensure(alap <= asap, || format!("ALAP peak {alap} > ASAP peak {asap}"))?;
    Ok(format!("peak live bytes ALAP {alap} <= ASAP {asap}"))
}

fn checkpoints() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("vars.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let a: Vec<f32> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
    g.variable(TensorValue::from_f32(&[3, 4], a).unwrap(), "a")
        .map_err(|e| e.to_string())?;
    g.variable(TensorValue::from_f64(&[5], b).unwrap(), "b")
        .map_err(|e| e.to_string())?;
    let init = g.initialize_all_variables().map_err(|e| e.to_string())?;
    let saver = Saver::new(&mut g, "vars.ckpt").map_err(|e| e.to_string())?;
    let mut s = Session::new(g.clone()).map_err(|e| e.to_string())?;
    s.run_targets(&[init], &Feeds::new()).map_err(|e| e.to_string())?;
    s.save(&saver, &path).map_err(|e| e.to_string())?;
    let mut fresh = Session::new(g).map_err(|e| e.to_string())?;
    fresh.restore(&saver, &path).map_err(|e| e.to_string())?;
    let (x, y) = (s.variable_snapshot(), fresh.variable_snapshot());
    ensure(x.len() == 2 && x.len() == y.len(), || "variable sets differ".into())?;
    for (name, v) in &x {
        ensure(y.get(name).is_some_and(|w| w.bit_eq(v)), || {
            format!("{name} changed in the round trip")
        })?;
    }

    let data = synthetic(&SyntheticSpec {
        samples: 600,
        dim: 50,
        ..SyntheticSpec::default()
    });
    let config = |steps, ckpt: Option<std::path::PathBuf>| TrainConfig {
        steps,
        batch: 50,
        shuffle_seed: 3,
        checkpoint: ckpt,
        ..TrainConfig::default()
    };
    let straight = Trainer::new(config(40, None), data.clone())
        .and_then(|mut t| t.run(|_, _| {}))
        .map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("train.ckpt");
    let first = Trainer::new(config(25, Some(ckpt.clone())), data.clone())
        .and_then(|mut t| t.run(|_, _| {}))
        .map_err(|e| e.to_string())?;
    let second = Trainer::new(config(40, Some(ckpt)), data)
        .and_then(|mut t| t.run(|_, _| {}))
        .map_err(|e| e.to_string())?;
    ensure(second.start_step == 25, || {
        format!("resumed at step {}", second.start_step)
    })?;
    let resumed: Vec<f64> = first.losses.iter().chain(&second.losses).copied().collect();
    let same = resumed.len() == straight.losses.len()
        && resumed
            .iter()
            .zip(&straight.losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "resumed loss series differs".into())?;
    ensure(second.final_loss.to_bits() == straight.final_loss.to_bits(), || {
        "final loss differs".into()
    })?;
    Ok("round trip bit-exact; 25+15 resumed steps reproduce the 40-step loss series exactly".into())
}

fn variables() -> Outcome {
    let mut g = Graph::new();
    let before = g.len();
    let v = g
        .variable(TensorValue::scalar(DType::F64, 1.0), "counter")
        .map_err(|e| e.to_string())?;
    ensure(g.len() == before + 3, || format!("{} nodes added", g.len() - before))?;
    let var = g.expect_node(v.id());
    let assign = g.expect_node(v.initializer);
    let initial = g.expect_node(v.initial);
    ensure(var.kind == OpKind::Variable && var.inputs.is_empty(), || {
        "variable node has inputs".into()
    })?;
    ensure(initial.kind == OpKind::Const, || {
        "initial value is not a constant".into()
    })?;
    ensure(
        assign.kind == OpKind::Assign && assign.inputs[0].node == var.id && assign.inputs[1].node == initial.id,
        || "initializer is not Assign(variable, initial)".into(),
    )?;
    let one = g.scalar(DType::F64, 1.0).map_err(|e| e.to_string())?;
    let next = g.add(&v.var, &one).map_err(|e| e.to_string())?;
    let bump = g.assign(&v.var, &next).map_err(|e| e.to_string())?;
    let init = g.initialize_all_variables().map_err(|e| e.to_string())?;
    let mut s = Session::new(g).map_err(|e| e.to_string())?;
    match s.run(std::slice::from_ref(&v.var), &Feeds::new()) {
        Err(RuntimeError::UninitializedVariable(_)) => {}
        other => return Err(format!("read before init gave {other:?}")),
    }
    s.run_targets(&[init], &Feeds::new()).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        s.run(std::slice::from_ref(&bump), &Feeds::new())
            .map_err(|e| e.to_string())?;
    }
    let now = s
        .run(std::slice::from_ref(&v.var), &Feeds::new())
        .map_err(|e| e.to_string())?[0]
        .scalar_value();
    ensure(now == Some(4.0), || format!("counter reads {now:?} after 3 bumps"))?;
    Ok("3 nodes with Variable/Const/Assign topology; uninitialized read errors; state persists (1 -> 4)".into())
}

fn conditional_gradients() -> Outcome {
    let mut g = Graph::new();
    let x = g
        .placeholder(DType::F64, Shape::known(&[3]), "x")
        .map_err(|e| e.to_string())?;
    let p = g
        .placeholder(DType::F64, Shape::scalar(), "p")
        .map_err(|e| e.to_string())?;
    let y = g
        .cond(
            &p,
            std::slice::from_ref(&x),
            |g, t| g.mul(&t[0], &t[0]),
            |g, f| g.exp(&f[0]),
        )
        .map_err(|e| e.to_string())?;
    let loss = g.reduce_sum(&y, &[]).map_err(|e| e.to_string())?;
    let grad = gradients(&mut g, &loss, std::slice::from_ref(&x))
        .map_err(|e| e.to_string())?
        .remove(0);
    let mut s = Session::new(g).map_err(|e| e.to_string())?;
    let xs = [0.5, -1.25, 2.0];
    for taken in [true, false] {
        let feeds = Feeds::new()
            .with(&x, TensorValue::from_f64(&[3], xs.to_vec()).unwrap())
            .with(&p, TensorValue::scalar(DType::F64, if taken { 1.0 } else { 0.0 }));
        let out = s.run(std::slice::from_ref(&grad), &feeds).map_err(|e| e.to_string())?;
        let want: Vec<f64> = xs.iter().map(|&v| if taken { 2.0 * v } else { v.exp() }).collect();
        ensure(out[0].as_f64() == Some(&want[..]), || {
            format!("taken={taken}: gradient {:?}", out[0].as_f64())
        })?;
        let skipped = if taken { "cond/else/" } else { "cond/then/" };
        let trace = s.last_trace().expect("trace");
        let leaked: Vec<&str> = trace
            .entries
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| n.contains(skipped))
            .collect();
        ensure(leaked.is_empty(), || format!("untaken branch ran: {leaked:?}"))?;
    }
    Ok("gradient follows the taken branch; untaken branch absent from both traces".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("walkthrough", walkthrough),
        ("gradients", gradient_checks),
        ("cse", cse),
        ("partitioning", partitioning),
        ("placement", placement),
        ("truncation", truncation),
        ("scheduling", scheduling),
        ("checkpoints", checkpoints),
        ("variables", variables),
        ("conditional-gradients", conditional_gradients),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {reason}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
