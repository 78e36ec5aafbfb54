//! Helpers shared by the integration tests: finite-difference gradient
//! checks and random instances of every differentiable op.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tensorgraph::graph::{GraphError, OpKind};
use tensorgraph::{gradients, DType, Feeds, Graph, Session, Shape, TensorRef, TensorValue};

pub type Builder = Box<dyn Fn(&mut Graph, &[TensorRef]) -> Result<TensorRef, GraphError>>;

/// A differentiable function of some dense inputs.
pub struct Case {
    pub name: String,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub build: Builder,
    /// Fixed weights contracting the output to a scalar loss.
    pub weights: Vec<f64>,
}

/// Builds `sum(weights * f(inputs))` over placeholders of `dtype`.
fn loss_graph(case: &Case, dtype: DType) -> Result<(Graph, Vec<TensorRef>, TensorRef), GraphError> {
    let mut g = Graph::new();
    let mut ins = Vec::new();
    for (i, (dims, _)) in case.inputs.iter().enumerate() {
        ins.push(g.placeholder(dtype, Shape::known(dims), &format!("in{i}"))?);
    }
    let y = (case.build)(&mut g, &ins)?;
    let dims = y.shape.to_concrete().expect("case outputs have static shapes");
    let n: usize = dims.iter().product();
    let w = g.constant(TensorValue::from_values(dtype, &dims, &case.weights[..n]).expect("weights"))?;
    let prod = g.mul(&y, &w)?;
    let loss = g.reduce_sum(&prod, &[])?;
    Ok((g, ins, loss))
}

fn feeds(ins: &[TensorRef], values: &[(Vec<usize>, Vec<f64>)], dtype: DType) -> Feeds {
    let mut f = Feeds::new();
    for (t, (dims, v)) in ins.iter().zip(values) {
        f.insert(t, TensorValue::from_values(dtype, dims, v).expect("input values"));
    }
    f
}

/// Gradients of the case's loss with respect to every input, in `dtype`.
pub fn analytic(case: &Case, dtype: DType) -> Vec<Vec<f64>> {
    let (mut g, ins, loss) = loss_graph(case, dtype).expect("case builds");
    let grads = gradients(&mut g, &loss, &ins).expect("gradients build");
    let init = g.initialize_all_variables().expect("init");
    let mut s = Session::new(g).expect("session");
    s.run_targets(&[init], &Feeds::new()).expect("init runs");
    let out = s.run(&grads, &feeds(&ins, &case.inputs, dtype)).expect("gradients run");
    out.iter().map(TensorValue::to_f64_vec).collect()
}

/// Five-point central differences of the F64 loss.
pub fn numeric(case: &Case) -> Vec<Vec<f64>> {
    let (mut g, ins, loss) = loss_graph(case, DType::F64).expect("case builds");
    let init = g.initialize_all_variables().expect("init");
    let mut s = Session::new(g).expect("session");
    s.run_targets(&[init], &Feeds::new()).expect("init runs");
    let h = 1e-3;
    let mut eval = |values: &[(Vec<usize>, Vec<f64>)]| {
        s.run(std::slice::from_ref(&loss), &feeds(&ins, values, DType::F64))
            .expect("loss runs")[0]
            .scalar_value()
            .expect("scalar loss")
    };
    let mut out = Vec::new();
    for i in 0..case.inputs.len() {
        let mut grad = Vec::with_capacity(case.inputs[i].1.len());
        for j in 0..case.inputs[i].1.len() {
            let mut at = |d: f64| {
                let mut v = case.inputs.clone();
                v[i].1[j] += d;
                eval(&v)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            grad.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
        }
        out.push(grad);
    }
    out
}

/// Largest elementwise `|a - n| / (|a| + 1e-8)`.
pub fn relative_error(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(x, y)| (x - y).abs() / (x.abs() + 1e-8))
        .fold(0.0, f64::max)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn case(name: String, inputs: Vec<(Vec<usize>, Vec<f64>)>, rng: &mut ChaCha8Rng, build: Builder) -> Case {
    Case {
        name,
        inputs,
        weights: normals(rng, 64),
        build,
    }
}

/// The kinds [`random_case`] covers.
pub const KINDS: &[OpKind] = &[
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::MatMul,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Neg,
    OpKind::Sigmoid,
    OpKind::Relu,
    OpKind::Softmax,
    OpKind::ReduceSum,
    OpKind::ReduceMean,
    OpKind::Assign,
    OpKind::Switch,
    OpKind::Merge,
];

/// A random small instance exercising `kind`.
pub fn random_case(kind: OpKind, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = format!("{kind}#{seed}");
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b_dims = match rng.random_range(0..3) {
                0 => vec![2, 3],
                1 => vec![3],
                _ => vec![],
            };
            let nb = b_dims.iter().product();
            let inputs = vec![(vec![2, 3], normals(&mut rng, 6)), (b_dims, normals(&mut rng, nb))];
            case(
                name,
                inputs,
                &mut rng,
                Box::new(move |g, x| g.binary(kind, &x[0], &x[1])),
            )
        }
        OpKind::MatMul => {
            let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let a_dims = if ta { vec![k, m] } else { vec![m, k] };
            let b_dims = if tb { vec![n, k] } else { vec![k, n] };
            let inputs = vec![(a_dims, normals(&mut rng, m * k)), (b_dims, normals(&mut rng, k * n))];
            case(
                name,
                inputs,
                &mut rng,
                Box::new(move |g, x| g.matmul_t(&x[0], &x[1], ta, tb)),
            )
        }
        OpKind::Exp | OpKind::Neg | OpKind::Sigmoid => {
            let inputs = vec![(vec![2, 3], normals(&mut rng, 6))];
            case(name, inputs, &mut rng, Box::new(move |g, x| g.unary(kind, &x[0])))
        }
        OpKind::Log => {
            let v = (0..6).map(|_| rng.random_range(0.5..2.0)).collect();
            case(name, vec![(vec![2, 3], v)], &mut rng, Box::new(|g, x| g.log(&x[0])))
        }
        OpKind::Relu => {
            let v = away_from_zero(&mut rng, 6);
            case(name, vec![(vec![2, 3], v)], &mut rng, Box::new(|g, x| g.relu(&x[0])))
        }
        OpKind::Softmax => {
            let inputs = vec![(vec![2, 4], normals(&mut rng, 8))];
            case(name, inputs, &mut rng, Box::new(|g, x| g.softmax(&x[0])))
        }
        OpKind::ReduceSum | OpKind::ReduceMean => {
            let axes: Vec<i64> = match rng.random_range(0..3) {
                0 => vec![],
                1 => vec![0],
                _ => vec![1],
            };
            let inputs = vec![(vec![2, 3], normals(&mut rng, 6))];
            case(
                name,
                inputs,
                &mut rng,
                Box::new(move |g, x| {
                    if kind == OpKind::ReduceSum {
                        g.reduce_sum(&x[0], &axes)
                    } else {
                        g.reduce_mean(&x[0], &axes)
                    }
                }),
            )
        }
        OpKind::Assign => {
            let inputs = vec![(vec![3], normals(&mut rng, 3))];
            case(
                name,
                inputs,
                &mut rng,
                Box::new(|g, x| {
                    let v = g.variable(TensorValue::zeros(x[0].dtype, &[3]), "v")?;
                    let sq = g.mul(&x[0], &x[0])?;
                    g.assign(&v.var, &sq)
                }),
            )
        }
        OpKind::Switch | OpKind::Merge => {
            let taken = rng.random_bool(0.5);
            let inputs = vec![(vec![3], normals(&mut rng, 3))];
            case(
                name,
                inputs,
                &mut rng,
                Box::new(move |g, x| {
                    let pred = g.scalar(x[0].dtype, if taken { 1.0 } else { 0.0 })?;
                    g.cond(&pred, &x[..1], |g, t| g.exp(&t[0]), |g, f| g.mul(&f[0], &f[0]))
                }),
            )
        }
        other => panic!("no random case for {other}"),
    }
}

/// Mean cross entropy of a softmax regression, differentiated with respect
/// to its weights and bias.
pub fn walkthrough_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (4, 5, 3);
    let x = normals(&mut rng, n * d);
    let mut labels = vec![0.0; n * k];
    for i in 0..n {
        labels[i * k + rng.random_range(0..k)] = 1.0;
    }
    let inputs = vec![(vec![d, k], normals(&mut rng, d * k)), (vec![k], normals(&mut rng, k))];
    let mut c = case(
        format!("walkthrough#{seed}"),
        inputs,
        &mut rng,
        Box::new(move |g, p| {
            let dtype = p[0].dtype;
            let xs = g.constant(TensorValue::from_values(dtype, &[n, d], &x).expect("x"))?;
            let ys = g.constant(TensorValue::from_values(dtype, &[n, k], &labels).expect("labels"))?;
            let xw = g.matmul(&xs, &p[0])?;
            let logits = g.add(&xw, &p[1])?;
            let probs = g.softmax(&logits)?;
            let rows = g.cross_entropy_rows(&ys, &probs)?;
            g.reduce_mean(&rows, &[])
        }),
    );
    c.weights = vec![1.0];
    c
}
