use std::collections::BTreeMap;
use std::sync::Arc;

use crossbeam_channel::bounded;

use super::bindings::Bindings;
use super::engine::{execute, Control, InPort, NodeRunner, OutPort};
use super::trace::ExecutionTrace;
use super::{RunOptions, RunOutput, RuntimeError};
use crate::graph::{DataflowGraph, DeploymentPlan, NodeId};

/// Runs the whole graph in this process, one thread per node.
pub fn run_local(g: &DataflowGraph, bindings: &Bindings, opts: &RunOptions) -> Result<RunOutput, RuntimeError> {
    run(g, None, bindings, opts)
}

/// Like [`run_local`], with channel traffic classified by the plan's dgroups.
pub fn run_plan_local(plan: &DeploymentPlan, bindings: &Bindings, opts: &RunOptions) -> Result<RunOutput, RuntimeError> {
    run(&plan.graph, Some(plan), bindings, opts)
}

fn run(
    g: &DataflowGraph,
    plan: Option<&DeploymentPlan>,
    bindings: &Bindings,
    opts: &RunOptions,
) -> Result<RunOutput, RuntimeError> {
    let ctl = Control::new(ExecutionTrace::new(g, plan));
    let mut ins: BTreeMap<NodeId, Vec<InPort>> = BTreeMap::new();
    let mut outs: BTreeMap<NodeId, Vec<OutPort>> = BTreeMap::new();
    for c in &g.channels {
        let (tx, rx) = bounded(opts.capacity.max(1));
        ins.entry(c.dst).or_default().push(InPort {
            src: c.src,
            role: c.role,
            rx,
            unpack: false,
        });
        outs.entry(c.src).or_default().push(OutPort {
            channel: c.id,
            role: c.role,
            tx,
            closed: false,
        });
    }
    let runners = g
        .nodes
        .iter()
        .map(|n| {
            NodeRunner::new(
                g,
                n.id,
                bindings,
                opts,
                ins.remove(&n.id).unwrap_or_default(),
                outs.remove(&n.id).unwrap_or_default(),
                Arc::clone(&ctl),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (trace, outputs) = execute(runners, Vec::new(), &ctl, opts)?;
    Ok(RunOutput { outputs, trace })
}
