//! Softmax regression end to end: model graph, training loop, event logging
//! and checkpoint/resume.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batcher, DataError, Dataset};
use crate::graph::{Graph, GraphError, NodeId, TensorRef, Variable};
use crate::passes::Fleet;
use crate::runtime::{Feeds, RunOptions, RuntimeError, Saver, Session, SessionOptions};
use crate::summaries::EventWriter;
use crate::tensor::{DType, Shape, TensorValue};
use crate::train::{minimize, OptimizerConfig, TrainError, TrainStep};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WalkthroughError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("event log {path}: {message}")]
    Events { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Independent uniform draws from `[0, 1)`.
    Uniform {
        seed: u64,
    },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dtype: DType,
    pub weight_init: WeightInit,
    pub bias_init: f64,
    pub learning_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dtype: DType::F32,
            weight_init: WeightInit::Uniform { seed: 0 },
            bias_init: 0.1,
            learning_rate: 0.5,
        }
    }
}

/// Handles into the walkthrough graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// Input rows, shape `(None, d)`.
    pub x: TensorRef,
    /// One-hot labels, shape `(None, k)`.
    pub labels: TensorRef,
    pub weights: Variable,
    pub bias: Variable,
    pub probabilities: TensorRef,
    /// Mean cross entropy over the batch.
    pub loss: TensorRef,
    pub accuracy: TensorRef,
    pub train: TrainStep,
    /// Number of completed training steps.
    pub global_step: Variable,
    /// One training step plus the step counter increment.
    pub step_op: NodeId,
    pub init: NodeId,
    pub summaries: TensorRef,
    pub saver: Saver,
}

/// Builds `y = softmax(x W + b)` with mean cross entropy, accuracy,
/// summaries, a gradient descent step and a saver. When `devices` has more
/// than one entry, `W` and `b` are pinned round-robin starting at the second
/// device so the program spans several devices.
pub fn build_model(
    config: &ModelConfig,
    input_dim: usize,
    classes: usize,
    devices: &[String],
) -> Result<(Graph, Model), WalkthroughError> {
    let dtype = config.dtype;
    if !dtype.is_float() {
        return Err(WalkthroughError::Config(format!(
            "model dtype must be float, got {dtype}"
        )));
    }
    let opt = OptimizerConfig::new(config.learning_rate)?;
    let w0 = match config.weight_init {
        WeightInit::Zeros => TensorValue::zeros(dtype, &[input_dim, classes]),
        WeightInit::Uniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..input_dim * classes).map(|_| rng.random::<f64>()).collect();
            TensorValue::from_values(dtype, &[input_dim, classes], &v).expect("d times k")
        }
    };
    let b0 = TensorValue::filled(dtype, &[classes], config.bias_init);
    let pin = |i: usize| (devices.len() > 1).then(|| devices[i % devices.len()].clone());

    let mut g = Graph::new();
    let x = g.placeholder(dtype, Shape::from_opt(&[None, Some(input_dim)]), "x")?;
    let labels = g.placeholder(dtype, Shape::from_opt(&[None, Some(classes)]), "y_")?;
    let (weights, bias, probabilities) = g.scoped("layer", |g| -> Result<_, GraphError> {
        let weights = match pin(1) {
            Some(d) => g.on_device(&d, |g| g.variable(w0, "W"))?,
            None => g.variable(w0, "W")?,
        };
        let bias = match pin(2) {
            Some(d) => g.on_device(&d, |g| g.variable(b0, "b"))?,
            None => g.variable(b0, "b")?,
        };
        let xw = g.matmul(&x, &weights.var)?;
        let logits = g.add(&xw, &bias.var)?;
        let y = g.softmax(&logits)?;
        Ok((weights, bias, y))
    })?;
    let loss = g.scoped("loss", |g| -> Result<_, GraphError> {
        let rows = g.cross_entropy_rows(&labels, &probabilities)?;
        g.reduce_mean(&rows, &[])
    })?;
    let accuracy = g.scoped("accuracy", |g| -> Result<_, GraphError> {
        let predicted = g.argmax(&probabilities, 1)?;
        let actual = g.argmax(&labels, 1)?;
        let hits = g.equal(&predicted, &actual)?;
        g.reduce_mean(&hits, &[])
    })?;
    let summaries = g.scoped("summaries", |g| -> Result<_, GraphError> {
        g.scalar_summary("loss", &loss)?;
        g.scalar_summary("accuracy", &accuracy)?;
        g.histogram_summary("weights", &weights.var)?;
        g.histogram_summary("bias", &bias.var)?;
        g.merge_all_summaries()
    })?;
    let global_step = g.variable_untrainable(TensorValue::scalar(dtype, 0.0), "global_step")?;
    let train = minimize(&mut g, &loss, &opt)?;
    let step_op = g.scoped("train", |g| -> Result<_, GraphError> {
        let one = g.scalar(dtype, 1.0)?;
        let next = g.add(&global_step.var, &one)?;
        let bump = g.assign(&global_step.var, &next)?;
        g.group([train.op, bump.node], "step")
    })?;
    let init = g.initialize_all_variables()?;
    let saver = Saver::new(&mut g, "model.ckpt")?;
    Ok((
        g,
        Model {
            x,
            labels,
            weights,
            bias,
            probabilities,
            loss,
            accuracy,
            train,
            global_step,
            step_op,
            init,
            summaries,
            saver,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Total number of steps, counting any restored from a checkpoint.
    pub steps: u64,
    pub batch: usize,
    /// Seed of the per-epoch shuffle.
    pub shuffle_seed: u64,
    /// Number of uniform devices; ignored when `fleet` is set.
    pub devices: usize,
    pub fleet: Option<Fleet>,
    pub truncate_wire: bool,
    /// Restored at start when the file exists; written every
    /// `checkpoint_every` steps (0: only at the end).
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub events: Option<PathBuf>,
    /// Summaries are written every this many steps (0: never).
    pub summary_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            steps: 1000,
            batch: 100,
            shuffle_seed: 0,
            devices: 1,
            fleet: None,
            truncate_wire: false,
            checkpoint: None,
            checkpoint_every: 0,
            events: None,
            summary_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Step the run started from; nonzero after a restore.
    pub start_step: u64,
    /// Batch loss of each step run, measured before that step's update.
    pub losses: Vec<f64>,
    /// Loss and accuracy over the whole dataset after training.
    pub final_loss: f64,
    pub accuracy: f64,
    pub elapsed: Duration,
    /// Simulated session clock at the end.
    pub clock: f64,
}

pub struct Trainer {
    config: TrainConfig,
    data: Dataset,
    model: Model,
    session: Session,
    batcher: Batcher,
    events: Option<EventWriter>,
    step: u64,
}

impl Trainer {
    /// Builds the model and session, initializes the variables and restores
    /// the checkpoint when one exists.
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Trainer, WalkthroughError> {
        if config.batch == 0 {
            return Err(WalkthroughError::Config("batch must be at least 1".into()));
        }
        let fleet = match &config.fleet {
            Some(f) => f.clone(),
            None => Fleet::uniform(config.devices.max(1)),
        };
        let (graph, model) = build_model(&config.model, data.dim, data.classes, &fleet.names())?;
        let options = SessionOptions {
            fleet: Some(fleet),
            truncate_wire: config.truncate_wire,
            batch_hint: config.batch,
            ..SessionOptions::default()
        };
        let mut session = Session::with_options(graph, options)?;
        session.run_targets(&[model.init], &Feeds::new())?;

        let mut step = 0;
        let mut batcher = Batcher::new(data.len(), config.shuffle_seed);
        if let Some(path) = config.checkpoint.as_ref().filter(|p| p.exists()) {
            session.restore(&model.saver, path)?;
            let restored = session
                .variable(&model.global_step.var)
                .and_then(TensorValue::scalar_value)
                .unwrap_or(0.0);
            step = restored as u64;
            batcher.seek(step * config.batch as u64);
            log::info!("restored {} at step {step}", path.display());
        }
        let events = match &config.events {
            Some(path) => {
                let open = if step > 0 {
                    EventWriter::append(path)
                } else {
                    EventWriter::create(path)
                };
                Some(open.map_err(|e| WalkthroughError::Events {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?)
            }
            None => None,
        };
        Ok(Trainer {
            config,
            data,
            model,
            session,
            batcher,
            events,
            step,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    /// Completed steps, including restored ones.
    pub fn global_step(&self) -> u64 {
        self.step
    }

    /// Runs one update and returns the batch loss measured before it.
    pub fn step(&mut self) -> Result<f64, WalkthroughError> {
        let (x, y) = self
            .batcher
            .next_batch(&self.data, self.config.batch, self.config.model.dtype);
        let feeds = Feeds::new().with(&self.model.x, x).with(&self.model.labels, y);
        let summarize = self.events.is_some()
            && self.config.summary_every > 0
            && self.step.is_multiple_of(self.config.summary_every);
        let mut fetches = vec![self.model.loss.clone()];
        if summarize {
            fetches.push(self.model.summaries.clone());
        }
        let out = self
            .session
            .run_with_options(&fetches, &[self.model.step_op], &feeds, &RunOptions::default())?;
        let loss = out[0].scalar_value().unwrap_or(f64::NAN);
        if let (true, Some(writer)) = (summarize, self.events.as_mut()) {
            let values = out[1].as_summaries().unwrap_or(&[]);
            writer
                .write_summaries(self.step, self.session.clock(), values)
                .map_err(|e| WalkthroughError::Events {
                    path: self
                        .config
                        .events
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                    message: e.to_string(),
                })?;
        }
        self.step += 1;
        let every = self.config.checkpoint_every;
        if every > 0 && self.step.is_multiple_of(every) {
            self.save()?;
        }
        Ok(loss)
    }

    /// Loss on the batch the next step would use, without updating anything.
    pub fn peek_loss(&mut self) -> Result<f64, WalkthroughError> {
        let mut batcher = self.batcher.clone();
        let (x, y) = batcher.next_batch(&self.data, self.config.batch, self.config.model.dtype);
        let feeds = Feeds::new().with(&self.model.x, x).with(&self.model.labels, y);
        let out = self.session.run(std::slice::from_ref(&self.model.loss), &feeds)?;
        Ok(out[0].scalar_value().unwrap_or(f64::NAN))
    }

    /// Writes the checkpoint, if one is configured.
    pub fn save(&mut self) -> Result<(), WalkthroughError> {
        if let Some(path) = self.config.checkpoint.clone() {
            self.session.save(&self.model.saver, &path)?;
        }
        Ok(())
    }

    /// Loss and accuracy over the whole dataset.
    pub fn evaluate(&mut self) -> Result<(f64, f64), WalkthroughError> {
        let (x, y) = self.data.all(self.config.model.dtype);
        let feeds = Feeds::new().with(&self.model.x, x).with(&self.model.labels, y);
        let out = self
            .session
            .run(&[self.model.loss.clone(), self.model.accuracy.clone()], &feeds)?;
        Ok((
            out[0].scalar_value().unwrap_or(f64::NAN),
            out[1].scalar_value().unwrap_or(f64::NAN),
        ))
    }

    /// Steps until the configured total, calling `on_step(step, loss)` after
    /// each one, then saves and evaluates.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, f64)) -> Result<TrainReport, WalkthroughError> {
        let started = Instant::now();
        let start_step = self.step;
        let mut losses = Vec::new();
        while self.step < self.config.steps {
            let at = self.step;
            let loss = self.step()?;
            on_step(at, loss);
            losses.push(loss);
        }
        self.save()?;
        if let Some(w) = self.events.as_mut() {
            let _ = w.flush();
        }
        let (final_loss, accuracy) = self.evaluate()?;
        Ok(TrainReport {
            start_step,
            losses,
            final_loss,
            accuracy,
            elapsed: started.elapsed(),
            clock: self.session.clock(),
        })
    }
}

/// Means of consecutive `window`-sized blocks of `values`; a trailing
/// partial block is dropped.
pub fn block_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
