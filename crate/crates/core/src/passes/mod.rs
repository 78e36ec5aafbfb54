//! Graph-to-graph passes: common subgraph elimination, cost-model placement,
//! Send/Recv partitioning and the 16-bit wire truncation they rely on.

pub mod cse;
pub mod partition;
pub mod placement;
pub mod truncate;

pub use cse::{compute_node_count, eliminate_common_subgraphs, CseReport};
pub use partition::{partition, Channel, PartitionedProgram};
pub use placement::{place, CostModel, CostRow, Device, DeviceKind, Fleet, Placement, PlacementError};
pub use truncate::{from_wire16, to_wire16, truncate16_f32};
