//! The `graph` commands: passes over graphs stored as JSON.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Subcommand, ValueEnum};
use tensorgraph::graph::{deserialize, serialize};
use tensorgraph::passes::{eliminate_common_subgraphs, partition, place};
use tensorgraph::scenarios;
use tensorgraph::summaries::export_dot;
use tensorgraph::walkthrough::{build_model, ModelConfig};
use tensorgraph::{CostModel, Fleet, Graph};

use crate::error::CliError;
use crate::OutputArg;

#[derive(Debug, Clone, clap::Args)]
pub struct FleetArgs {
    /// Fleet description (JSON).
    #[arg(long)]
    fleet: Option<PathBuf>,
    /// Number of identical devices when no --fleet is given.
    #[arg(long, default_value_t = 1, conflicts_with = "fleet")]
    devices: usize,
    /// Extent assumed for dynamic dimensions when estimating costs.
    #[arg(long, default_value_t = 100)]
    batch_hint: usize,
}

impl FleetArgs {
    fn cost_model(&self) -> Result<CostModel, CliError> {
        let fleet = match &self.fleet {
            Some(path) => read_fleet(path)?,
            None if self.devices == 0 => return Err(CliError::Usage("--devices must be at least 1".into())),
            None => Fleet::uniform(self.devices),
        };
        Ok(CostModel::new(fleet).with_batch_hint(self.batch_hint))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Example {
    /// The softmax-regression training graph.
    Walkthrough,
    /// `(x + y) * (x + y)` built with two identical adds.
    DuplicateAdd,
    /// One constant on device A feeding two ops on device B.
    CrossDevice,
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    /// Merge identical subgraphs and write the smaller graph.
    Optimize {
        input: PathBuf,
        #[command(flatten)]
        output: OutputArg,
        /// List every merged node.
        #[arg(long)]
        report: bool,
    },
    /// Assign devices and write the cost table as CSV.
    Place {
        input: PathBuf,
        #[command(flatten)]
        fleet: FleetArgs,
        #[command(flatten)]
        output: OutputArg,
        /// Print the cost table.
        #[arg(long)]
        report: bool,
    },
    /// Place, split across devices and write the graph with Send/Recv pairs.
    Partition {
        input: PathBuf,
        #[command(flatten)]
        fleet: FleetArgs,
        /// Truncate f32 tensors crossing devices to 16 bits.
        #[arg(long)]
        truncate_wire: bool,
        #[command(flatten)]
        output: OutputArg,
        /// List the channels.
        #[arg(long)]
        report: bool,
    },
    /// Export Graphviz DOT with name scopes below --depth collapsed.
    Dot {
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[command(flatten)]
        output: OutputArg,
    },
    /// Write a built-in example graph as JSON.
    Example {
        #[arg(value_enum)]
        name: Example,
        #[command(flatten)]
        output: OutputArg,
    },
}

pub fn read_fleet(path: &Path) -> Result<Fleet, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Fleet::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_graph(path: &Path) -> Result<Graph, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    deserialize(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn plural(n: usize, word: &str) -> String {
    if n == 1 {
        format!("{n} {word}")
    } else {
        format!("{n} {word}s")
    }
}

pub fn run(command: &GraphCommand) -> Result<(), CliError> {
    match command {
        GraphCommand::Optimize { input, output, report } => {
            let g = read_graph(input)?;
            let (optimized, cse) = eliminate_common_subgraphs(&g);
            eprintln!("merged {}", plural(cse.merged_count(), "node"));
            if *report {
                for (removed, kept) in &cse.merged {
                    eprintln!("  {} -> {}", g.expect_node(*removed).name, g.expect_node(*kept).name);
                }
            }
            output.emit(&serialize(&optimized))
        }
        GraphCommand::Place {
            input,
            fleet,
            output,
            report,
        } => {
            let g = read_graph(input)?;
            let placement = place(&g, &fleet.cost_model()?)?;
            if *report {
                eprint!("{}", cost_table(&placement));
            }
            output.emit(placement.to_csv().as_bytes())
        }
        GraphCommand::Partition {
            input,
            fleet,
            truncate_wire,
            output,
            report,
        } => {
            let g = read_graph(input)?;
            let placement = place(&g, &fleet.cost_model()?)?;
            let program = partition(&g, &placement, *truncate_wire);
            eprintln!("{}", plural(program.channels.len(), "channel"));
            if *report {
                for c in &program.channels {
                    let what = match c.tensor {
                        Some(t) => format!("tensor {t}"),
                        None => "control".to_string(),
                    };
                    let wire = if c.truncate { ", truncated" } else { "" };
                    eprintln!("  #{}: {what} {} -> {}{wire}", c.id, c.src_device, c.dst_device);
                }
            }
            output.emit(&serialize(&program.graph))
        }
        GraphCommand::Dot { input, depth, output } => {
            let g = read_graph(input)?;
            output.emit(export_dot(&g, *depth).as_bytes())
        }
        GraphCommand::Example { name, output } => {
            let g = match name {
                Example::Walkthrough => build_model(&ModelConfig::default(), 784, 10, &[])?.0,
                Example::DuplicateAdd => scenarios::duplicate_add()?.graph,
                Example::CrossDevice => scenarios::cross_device()?.graph,
            };
            output.emit(&serialize(&g))
        }
    }
}

/// Aligned per-node costs with the chosen device marked.
fn cost_table(p: &tensorgraph::Placement) -> String {
    let width = p.log.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:width$}", "node");
    for d in &p.devices {
        let _ = write!(out, "  {d:>14}");
    }
    out.push('\n');
    for row in &p.log {
        let _ = write!(out, "{:width$}", row.name);
        for (d, cost) in p.devices.iter().zip(&row.costs) {
            let mark = if *d == row.device { '*' } else { ' ' };
            let _ = write!(out, "  {:>13.3}{mark}", cost);
        }
        out.push('\n');
    }
    out
}
