//! A dataflow-graph machine learning engine.
//!
//! Computations are built as a [`Graph`] of typed operations, differentiated
//! symbolically with [`gradients`], optimized and placed across a simulated
//! [`Fleet`] of devices, partitioned with Send/Recv pairs and executed by a
//! [`Session`].

pub mod autodiff;
pub mod data;
pub mod graph;
pub mod kernels;
pub mod passes;
pub mod runtime;
pub mod scenarios;
pub mod summaries;
pub mod tensor;
pub mod train;
pub mod walkthrough;

pub use autodiff::{gradients, AutodiffError};
pub use graph::{Graph, GraphError, Node, NodeDef, NodeId, OpKind, TensorId, TensorRef, Variable};
pub use kernels::KernelError;
pub use passes::{CostModel, Device, Fleet, PartitionedProgram, Placement, PlacementError};
pub use runtime::{Feeds, RunOptions, RunTrace, RuntimeError, Saver, Session, SessionOptions};
pub use summaries::{EventRecord, EventWriter, SummaryValue};
pub use tensor::{DType, Dim, Shape, TensorValue};
pub use train::{minimize, OptimizerConfig, TrainError, TrainStep};
