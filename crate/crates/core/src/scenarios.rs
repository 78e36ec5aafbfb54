//! Small canonical graphs shared by tests, the command line and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, GraphError, OpKind, TensorRef};
use crate::passes::{Device, Fleet};
use crate::tensor::{DType, Shape, TensorValue};

/// `nu` on device `A` consumed by `alpha = exp(nu)` and `beta = -nu` on
/// device `B`.
#[derive(Debug, Clone)]
pub struct CrossDevice {
    pub graph: Graph,
    pub fleet: Fleet,
    pub nu: TensorRef,
    pub alpha: TensorRef,
    pub beta: TensorRef,
}

pub fn cross_device() -> Result<CrossDevice, GraphError> {
    let mut g = Graph::new();
    let nu = g.on_device("A", |g| {
        g.constant_named(TensorValue::from_f32(&[2], vec![1.5, -0.25]).expect("2"), "nu")
    })?;
    let (alpha, beta) = g.on_device("B", |g| -> Result<_, GraphError> { Ok((g.exp(&nu)?, g.neg(&nu)?)) })?;
    let fleet = Fleet::new(vec![Device::new("A"), Device::new("B")]).expect("two named devices");
    Ok(CrossDevice {
        graph: g,
        fleet,
        nu,
        alpha,
        beta,
    })
}

/// `z = x + y`, `z' = x + y`, `z2 = z * z'` over fed vectors `x` and `y`.
#[derive(Debug, Clone)]
pub struct DuplicateAdd {
    pub graph: Graph,
    pub x: TensorRef,
    pub y: TensorRef,
    pub z2: TensorRef,
}

pub fn duplicate_add() -> Result<DuplicateAdd, GraphError> {
    let mut g = Graph::new();
    let x = g.placeholder(DType::F32, Shape::known(&[3]), "x")?;
    let y = g.placeholder(DType::F32, Shape::known(&[3]), "y")?;
    let z = g.add(&x, &y)?;
    let z_again = g.add(&x, &y)?;
    let z2 = g.mul(&z, &z_again)?;
    Ok(DuplicateAdd { graph: g, x, y, z2 })
}

/// One producer, two independent chains of `long` and `long / 2` unary
/// ops over `elements`-element vectors, joined by an Add.
pub fn diamond(elements: usize, long: usize) -> Result<(Graph, TensorRef), GraphError> {
    let mut g = Graph::new();
    let source = g.constant_named(TensorValue::filled(DType::F32, &[elements], 0.5), "source")?;
    let chain = |g: &mut Graph, name: &str, len: usize| {
        g.scoped(name, |g| {
            let kinds = [OpKind::Neg, OpKind::Sigmoid, OpKind::Relu];
            let mut t = source.clone();
            for i in 0..len.max(1) {
                t = g.unary(kinds[i % kinds.len()], &t)?;
            }
            Ok::<_, GraphError>(t)
        })
    };
    let left = chain(&mut g, "left", long)?;
    let right = chain(&mut g, "right", long / 2)?;
    let join = g.add(&left, &right)?;
    Ok((g, join))
}

/// A random DAG of elementwise F32 ops over `[2, 3]` tensors.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub graph: Graph,
    /// Every tensor nobody consumes.
    pub sinks: Vec<TensorRef>,
}

/// Builds `ops` operations over three random constants. With probability
/// `duplicate` an op repeats an earlier op on the same inputs. When
/// `devices` is non-empty every node is pinned to one of them at random;
/// the graph is otherwise the same as the unpinned one for that seed.
pub fn random_graph(seed: u64, ops: usize, duplicate: f64, devices: &[String]) -> Result<RandomGraph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let mut tensors: Vec<TensorRef> = Vec::new();
    let mut built: Vec<(OpKind, Vec<TensorRef>)> = Vec::new();
    let pick_device = |rng: &mut ChaCha8Rng| {
        let i = rng.random_range(0..devices.len().max(1));
        devices.get(i).cloned()
    };

    for i in 0..3 {
        let v: Vec<f32> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let value = TensorValue::from_f32(&[2, 3], v).expect("six values");
        let name = format!("c{i}");
        let t = match pick_device(&mut rng) {
            Some(d) => g.on_device(&d, |g| g.constant_named(value, &name))?,
            None => g.constant_named(value, &name)?,
        };
        tensors.push(t);
    }
    let unary = [OpKind::Neg, OpKind::Relu, OpKind::Sigmoid];
    let binary = [OpKind::Add, OpKind::Sub, OpKind::Mul];
    for _ in 0..ops {
        let (kind, inputs) = if !built.is_empty() && rng.random_bool(duplicate.clamp(0.0, 1.0)) {
            built[rng.random_range(0..built.len())].clone()
        } else if rng.random_bool(0.4) {
            let x = tensors[rng.random_range(0..tensors.len())].clone();
            (unary[rng.random_range(0..unary.len())], vec![x])
        } else {
            let a = tensors[rng.random_range(0..tensors.len())].clone();
            let b = tensors[rng.random_range(0..tensors.len())].clone();
            (binary[rng.random_range(0..binary.len())], vec![a, b])
        };
        let t = match pick_device(&mut rng) {
            Some(d) => g.on_device(&d, |g| g.op(kind, &inputs, Default::default(), None))?,
            None => g.op(kind, &inputs, Default::default(), None)?,
        };
        built.push((kind, inputs));
        tensors.push(t);
    }
    let consumers = g.consumers();
    let sinks = tensors
        .into_iter()
        .filter(|t| consumers.get(&t.node).is_none_or(|c| c.is_empty()))
        .collect();
    Ok(RandomGraph { graph: g, sinks })
}
