//! Datasets for the walkthrough: IDX files, synthetic class blobs and a
//! seeded mini-batch iterator.

pub mod idx;

use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{DType, TensorValue};

pub use idx::{read_images, read_labels, write_images, write_labels, IdxImages};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, expected: u32, got: u32 },
    #[error("{path}: file ends early ({len} bytes, need {need})")]
    Truncated { path: String, len: usize, need: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad dataset spec {spec:?}: {reason}")]
    BadSpec { spec: String, reason: String },
    #[error("dataset is empty")]
    Empty,
}

/// Noise standard deviation of synthetic features.
pub const SYNTHETIC_NOISE: f64 = 0.1;

/// Parameters of the synthetic blob dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Total number of samples, spread evenly over the classes.
    pub samples: usize,
    /// Mean offset of a class's own feature block, in noise standard deviations.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            dim: 784,
            samples: 5000,
            separation: 3.0,
            seed: 7,
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
    },
    Synthetic(SyntheticSpec),
}

impl FromStr for DatasetSpec {
    type Err = DataError;

    /// `synthetic:k=10,d=784,n=5000,sep=3.0,seed=7` (any subset of keys) or
    /// `idx:images=PATH,labels=PATH[,k=10]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: String| DataError::BadSpec {
            spec: s.to_string(),
            reason,
        };
        let (source, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut pairs = Vec::new();
        for item in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {item:?}")))?;
            pairs.push((k.trim(), v.trim()));
        }
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        match source {
            "synthetic" => {
                let mut spec = SyntheticSpec::default();
                for (k, v) in pairs {
                    match k {
                        "k" => spec.classes = num(k, v).map_err(bad)?,
                        "d" => spec.dim = num(k, v).map_err(bad)?,
                        "n" => spec.samples = num(k, v).map_err(bad)?,
                        "sep" => spec.separation = num(k, v).map_err(bad)?,
                        "seed" => spec.seed = num(k, v).map_err(bad)?,
                        other => return Err(bad(format!("unknown key {other:?}"))),
                    }
                }
                if spec.classes < 2 || spec.dim < spec.classes || spec.samples == 0 {
                    return Err(bad("need k >= 2, d >= k and n >= 1".into()));
                }
                if !spec.separation.is_finite() {
                    return Err(bad("sep must be finite".into()));
                }
                Ok(DatasetSpec::Synthetic(spec))
            }
            "idx" => {
                let (mut images, mut labels, mut classes) = (None, None, 10);
                for (k, v) in pairs {
                    match k {
                        "images" => images = Some(PathBuf::from(v)),
                        "labels" => labels = Some(PathBuf::from(v)),
                        "k" => classes = num(k, v).map_err(bad)?,
                        other => return Err(bad(format!("unknown key {other:?}"))),
                    }
                }
                Ok(DatasetSpec::Idx {
                    images: images.ok_or_else(|| bad("missing images=".into()))?,
                    labels: labels.ok_or_else(|| bad("missing labels=".into()))?,
                    classes,
                })
            }
            other => Err(bad(format!("unknown source {other:?}"))),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset, DataError> {
        match self {
            DatasetSpec::Synthetic(spec) => Ok(synthetic(spec)),
            DatasetSpec::Idx {
                images,
                labels,
                classes,
            } => Dataset::from_idx(images, labels, *classes),
        }
    }
}

/// Samples as rows of features plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Dataset, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::CountMismatch {
                images: features.len() / dim.max(1),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    /// Images flattened to rows and scaled by 1/255.
    pub fn from_idx(images: &std::path::Path, labels: &std::path::Path, classes: usize) -> Result<Dataset, DataError> {
        let img = read_images(images)?;
        let lab = read_labels(labels)?;
        if img.count != lab.len() {
            return Err(DataError::CountMismatch {
                images: img.count,
                labels: lab.len(),
            });
        }
        let features = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let labels = lab.into_iter().map(usize::from).collect();
        Dataset::new(features, labels, img.rows * img.cols, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features and one-hot labels of the given rows.
    pub fn gather(&self, rows: &[usize], dtype: DType) -> (TensorValue, TensorValue) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            x.extend_from_slice(self.row(r));
        }
        let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        let x = TensorValue::from_values(dtype, &[rows.len(), self.dim], &x).expect("rows times dim");
        (x, one_hot(&labels, self.classes, dtype))
    }

    /// The whole dataset as one batch.
    pub fn all(&self, dtype: DType) -> (TensorValue, TensorValue) {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.gather(&rows, dtype)
    }
}

/// Rows with a single 1 at each label's index.
pub fn one_hot(labels: &[usize], classes: usize, dtype: DType) -> TensorValue {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    TensorValue::from_values(dtype, &[labels.len(), classes], &v).expect("rows times classes")
}

/// Gaussian blobs. Features split into one block per class (the last block
/// absorbs any remainder); a sample of class `c` has mean
/// `separation * SYNTHETIC_NOISE` on block `c`, zero elsewhere, and
/// independent noise of standard deviation [`SYNTHETIC_NOISE`] everywhere.
/// Labels cycle through the classes.
pub fn synthetic(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive deviation");
    let block = spec.dim / spec.classes;
    let offset = spec.separation * SYNTHETIC_NOISE;
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        let (lo, hi) = (
            c * block,
            if c + 1 == spec.classes {
                spec.dim
            } else {
                (c + 1) * block
            },
        );
        for j in 0..spec.dim {
            let mean = if (lo..hi).contains(&j) { offset } else { 0.0 };
            features.push(mean + noise.sample(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new(features, labels, spec.dim, spec.classes).expect("generated consistently")
}

/// Mini-batches over epochs, each epoch visiting every sample once in an
/// order shuffled by `(seed, epoch)`. A batch that runs past the end of an
/// epoch continues into the next one.
#[derive(Debug, Clone)]
pub struct Batcher {
    seed: u64,
    samples: usize,
    /// Samples handed out so far.
    position: u64,
    epoch: u64,
    order: Vec<usize>,
}

impl Batcher {
    pub fn new(samples: usize, seed: u64) -> Batcher {
        let mut b = Batcher {
            seed,
            samples,
            position: 0,
            epoch: 0,
            order: Vec::new(),
        };
        b.shuffle(0);
        b
    }

    fn shuffle(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        self.order = (0..self.samples).collect();
        self.order.shuffle(&mut rng);
        self.epoch = epoch;
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Jumps to the state after `samples` samples have been handed out.
    pub fn seek(&mut self, samples: u64) {
        self.position = samples;
        let epoch = samples / self.samples as u64;
        if epoch != self.epoch {
            self.shuffle(epoch);
        }
    }

    /// Indices of the next `size` samples.
    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            let epoch = self.position / self.samples as u64;
            if epoch != self.epoch {
                self.shuffle(epoch);
            }
            out.push(self.order[(self.position % self.samples as u64) as usize]);
            self.position += 1;
        }
        out
    }

    pub fn next_batch(&mut self, data: &Dataset, size: usize, dtype: DType) -> (TensorValue, TensorValue) {
        let rows = self.next_indices(size);
        data.gather(&rows, dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        let s: DatasetSpec = "synthetic:k=10,d=784,n=5000,sep=3.0,seed=7".parse().unwrap();
        assert_eq!(s, DatasetSpec::Synthetic(SyntheticSpec::default()));
        let s: DatasetSpec = "synthetic:k=3,d=6,n=30".parse().unwrap();
        assert!(matches!(
            s,
            DatasetSpec::Synthetic(SyntheticSpec {
                classes: 3,
                dim: 6,
                samples: 30,
                ..
            })
        ));
        let s: DatasetSpec = "idx:images=a.idx,labels=b.idx".parse().unwrap();
        assert!(matches!(s, DatasetSpec::Idx { classes: 10, .. }));
        assert!("synthetic:q=1".parse::<DatasetSpec>().is_err());
        assert!("mnist".parse::<DatasetSpec>().is_err());
        assert!("idx:images=a".parse::<DatasetSpec>().is_err());
    }

    #[test]
    fn one_hot_rows_have_a_single_one() {
        let t = one_hot(&[2, 0, 1], 3, DType::F32);
        assert_eq!(t.dims(), &[3, 3]);
        assert_eq!(t.as_f32().unwrap(), &[0., 0., 1., 1., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let spec = SyntheticSpec {
            samples: 100,
            dim: 20,
            ..SyntheticSpec::default()
        };
        let a = synthetic(&spec);
        let b = synthetic(&spec);
        assert_eq!(a, b);
        let c = synthetic(&SyntheticSpec {
            seed: 8,
            ..spec.clone()
        });
        assert_ne!(a.features, c.features);
        for k in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        // class 3 owns features 6 and 7
        let mean = |j: usize, class: usize| {
            let rows: Vec<usize> = (0..100).filter(|&i| a.labels[i] == class).collect();
            rows.iter().map(|&i| a.row(i)[j]).sum::<f64>() / rows.len() as f64
        };
        assert!(mean(6, 3) > 0.2 && mean(6, 4).abs() < 0.1);
    }

    #[test]
    fn batcher_covers_each_epoch_and_seeks() {
        let mut b = Batcher::new(10, 1);
        let mut first: Vec<usize> = b.next_indices(10);
        let second = b.next_indices(10);
        assert_ne!(first, second);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());

        let mut straight = Batcher::new(10, 1);
        let seq: Vec<Vec<usize>> = (0..7).map(|_| straight.next_indices(3)).collect();
        let mut resumed = Batcher::new(10, 1);
        resumed.seek(12);
        assert_eq!(resumed.next_indices(3), seq[4]);
        assert_eq!(resumed.next_indices(3), seq[5]);
    }
}
