//! Plain gradient descent built from gradient and Assign nodes.

use crate::autodiff::{gradients, AutodiffError};
use crate::graph::{Graph, GraphError, NodeDef, NodeId, OpKind, TensorRef};
use crate::tensor::TensorValue;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("no variables to train")]
    NoVariables,
    #[error("{0} is not a variable")]
    NotAVariable(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Variables to update; the trainable collection when `None`.
    pub var_list: Option<Vec<TensorRef>>,
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64) -> Result<OptimizerConfig, TrainError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TrainError::InvalidLearningRate(learning_rate));
        }
        Ok(OptimizerConfig {
            learning_rate,
            var_list: None,
        })
    }

    /// Skips validation; lets tests use a zero rate.
    #[doc(hidden)]
    pub fn unchecked(learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate,
            var_list: None,
        }
    }

    pub fn with_var_list(mut self, vars: Vec<TensorRef>) -> OptimizerConfig {
        self.var_list = Some(vars);
        self
    }
}

/// Handles created by [`minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStep {
    /// Running this node performs one update of every variable.
    pub op: NodeId,
    /// Gradient of the loss for each updated variable, in order.
    pub gradients: Vec<TensorRef>,
    /// The Assign node updating each variable, in order.
    pub updates: Vec<NodeId>,
    pub variables: Vec<TensorRef>,
}

/// Adds `v <- v - lr * d loss / d v` for every variable and a NoOp grouping
/// the updates. Every update waits on every gradient, so all of them read
/// the variables' values from before the step.
pub fn minimize(graph: &mut Graph, loss: &TensorRef, config: &OptimizerConfig) -> Result<TrainStep, TrainError> {
    let vars = match &config.var_list {
        Some(v) => v.clone(),
        None => graph.trainable_variables(),
    };
    if vars.is_empty() {
        return Err(TrainError::NoVariables);
    }
    if let Some(v) = vars.iter().find(|v| graph.expect_node(v.node).kind != OpKind::Variable) {
        return Err(TrainError::NotAVariable(graph.expect_node(v.node).name.clone()));
    }
    let grads = gradients(graph, loss, &vars)?;
    let grad_nodes: Vec<NodeId> = grads.iter().map(|g| g.node).collect();
    let updates = graph.scoped("train", |g| -> Result<Vec<NodeId>, GraphError> {
        let lr = g.constant_named(TensorValue::scalar(loss.dtype, config.learning_rate), "learning_rate")?;
        let mut updates = Vec::with_capacity(vars.len());
        for (v, grad) in vars.iter().zip(&grads) {
            let step = g.mul(&lr, grad)?;
            let next = g.sub(v, &step)?;
            let update = g.insert(
                NodeDef::new(OpKind::Assign)
                    .input(v)
                    .input(&next)
                    .controls(grad_nodes.iter().copied())
                    .name("update"),
            )?;
            updates.push(update);
        }
        Ok(updates)
    })?;
    let op = graph.group(updates.iter().copied(), "train_step")?;
    Ok(TrainStep {
        op,
        gradients: grads,
        updates,
        variables: vars,
    })
}
