//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgraph::data::{self, SyntheticSpec};
use tensorgraph::walkthrough::{TrainConfig, Trainer};
use tensorgraph::{DType, TensorValue};

/// Uniform `[-1, 1)` values of the given shape.
pub fn uniform(dtype: DType, dims: &[usize], seed: u64) -> TensorValue {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    TensorValue::from_values(dtype, dims, &v).expect("element count matches dims")
}

/// A ready-to-step walkthrough trainer on the default synthetic dataset.
pub fn trainer(devices: usize, truncate_wire: bool) -> Trainer {
    let config = TrainConfig {
        devices,
        truncate_wire,
        steps: u64::MAX,
        ..TrainConfig::default()
    };
    Trainer::new(config, data::synthetic(&SyntheticSpec::default())).expect("walkthrough builds")
}
