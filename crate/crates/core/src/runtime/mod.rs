//! Executes dataflow graphs: in one process with a thread per node, or as one
//! dgroup of a deployment plan talking to its peers over TCP.

mod bindings;
mod codec;
mod engine;
mod local;
mod net;
mod trace;

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::graph::{ChannelId, GraphError, NodeId};

pub use bindings::{
    concat_rows, fold, payload, split_rows, Bindings, CallCtx, Concat, Emit, FedAvg, Logic, LogicError,
    LogicFactory, Payload, Reducer, Site, SplitRows, Spreader, Sum,
};
pub use codec::{
    body_len, decode_frame, decode_frame_with_limit, encode_frame, max_frame, read_frame, write_frame, CodecError,
    Envelope, MsgKind, TensorMsg, DEFAULT_MAX_FRAME, MAX_FRAME_ENV, PROTOCOL_VERSION,
};
pub use local::{run_local, run_plan_local};
pub use net::run_group;
pub use trace::{ChannelTrace, ExecutionTrace, RoundMark};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Handed to every logic factory.
    pub seed: u64,
    /// How long the execution may go without any message or logic call
    /// before it is declared stalled.
    pub watchdog: Duration,
    /// Buffered messages per channel.
    pub capacity: usize,
    /// Group mode: how long to wait for peers.
    pub connect_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            watchdog: Duration::from_secs(60),
            capacity: 16,
            connect_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Emissions of the program's output nodes, tagged with their round.
    pub outputs: BTreeMap<NodeId, Vec<(u32, Payload)>>,
    pub trace: ExecutionTrace,
}

impl RunOutput {
    /// All output emissions in node order.
    pub fn results(&self) -> Vec<Payload> {
        self.outputs.values().flatten().map(|(_, p)| p.clone()).collect()
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {node} ({label}) failed in `{name}`: {source}")]
    Node {
        node: NodeId,
        label: String,
        name: String,
        #[source]
        source: LogicError,
    },
    #[error("node {node}: cannot scatter {tensors} tensors over {outputs} outputs")]
    Scatter { node: NodeId, tensors: usize, outputs: usize },
    #[error("no dgroup named `{0}` in the plan")]
    UnknownGroup(String),
    #[error("channel {channel}: {source}")]
    Codec {
        channel: ChannelId,
        #[source]
        source: CodecError,
    },
    #[error("channel {channel} ({addr}): {message}")]
    Network {
        channel: ChannelId,
        addr: String,
        message: String,
    },
    #[error("channel {channel}: peer closed the connection before end of stream")]
    PeerClosed { channel: ChannelId },
    #[error("no progress for {idle_secs}s; blocked nodes: {blocked:?}")]
    Stalled { idle_secs: u64, blocked: Vec<NodeId> },
    #[error("{0} panicked")]
    Panicked(String),
    #[error("execution aborted")]
    Aborted,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::graph::{compile, predict_counts, DataflowGraph};
    use crate::tensor::DenseTensor;

    fn scalar(x: f32) -> Payload {
        payload(vec![DenseTensor::vector(vec![x])])
    }

    fn value(p: &Payload) -> f32 {
        p[0].as_f32().unwrap()[0]
    }

    fn graph(src: &str, b: &Bindings) -> DataflowGraph {
        compile(&parse(src).unwrap(), b).unwrap()
    }

    #[test]
    fn two_stage_pipeline() {
        let b = Bindings::new()
            .with_fn("a", |_, _| Ok(Emit::Data(scalar(1.0))))
            .with_fn("b", |_, x| Ok(Emit::Data(scalar(value(&x[0]) + 1.0))));
        let g = graph("seq(a) . seq(b)", &b);
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        assert_eq!(out.results().iter().map(value).collect::<Vec<_>>(), [2.0]);
        assert_eq!(out.trace.messages(), [1]);
        assert_eq!(out.trace.channels[0].bytes, 4 + 18 + 2 + 4 + 4);
    }

    #[test]
    fn gatherall_keeps_replica_order() {
        let b = Bindings::new()
            .with_fn("src", |_, _| Ok(Emit::Data(scalar(0.0))))
            .with_fn("tag", |ctx, _| Ok(Emit::Data(scalar(ctx.replica.unwrap() as f32))))
            .with_fn("collect", |_, parts| {
                Ok(Emit::Data(payload(parts.iter().map(|p| p[0].clone()).collect())))
            });
        let g = graph(
            "nodeset W = 5;\nseq(src) . 1toN(bcast) . dist[W]{par(tag)} . NtoOne(gatherall) . seq(collect)",
            &b,
        );
        for _ in 0..5 {
            let out = run_local(&g, &b, &RunOptions::default()).unwrap();
            let r = &out.results()[0];
            let got: Vec<f32> = r.iter().map(|t| t.as_f32().unwrap()[0]).collect();
            assert_eq!(got, [0.0, 1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn scatter_and_round_robin() {
        let b = Bindings::new()
            .with_fn("src", |_, _| Ok(Emit::Data(payload((0..6).map(|i| DenseTensor::vector(vec![i as f32])).collect()))))
            .with_fn("id", |_, x| Ok(Emit::Data(x[0].clone())));
        let g = graph("nodeset W = 3;\nseq(src) . 1toN(scatter) . dist[W]{par(id)} . NtoOne(reduce:concat)", &b);
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        let r = &out.results()[0];
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].as_f32().unwrap(), [0.0, 2.0, 4.0]);

        let g = graph("nodeset W = 4;\nseq(src) . 1toN(scatter) . dist[W]{par(id)} . NtoOne(gather)", &b);
        let err = run_local(&g, &b, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, RuntimeError::Scatter { tensors: 6, outputs: 4, .. }), "{err}");
    }

    fn master_worker_stub() -> (DataflowGraph, Bindings) {
        let b = Bindings::new()
            .with_fn("init", |_, _| Ok(Emit::Data(scalar(0.0))))
            .with_fn("test", |_, x| Ok(Emit::Data(x[0].clone())))
            .with_fn("train", |ctx, x| Ok(Emit::Data(scalar(value(&x[0]) + 1.0 + ctx.replica.unwrap() as f32))));
        let g = graph(
            "nodeset W = 3;\ncond r = 4;\n\
             seq(init) . feedback(dist[W]{par(test) . par(train)} . reduce(FedAvg) . 1toN(bcast), r)",
            &b,
        );
        (g, b)
    }

    #[test]
    fn master_worker_rounds_and_counts() {
        let (g, b) = master_worker_stub();
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        // Each round adds 1 + mean(0, 1, 2) = 2.
        let results = out.results();
        assert_eq!(results.len(), 1);
        assert_eq!(value(&results[0]), 8.0);
        assert_eq!(out.outputs.values().next().unwrap()[0].0, 4);
        assert_eq!(out.trace.messages(), predict_counts(&g, None).unwrap());
        let marks: Vec<u32> = out.trace.rounds.iter().map(|m| m.round).collect();
        assert_eq!(marks, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn p2p_counts_match_prediction() {
        let b = Bindings::new()
            .with_fn("init", |ctx, _| Ok(Emit::Data(scalar(ctx.replica.unwrap() as f32))))
            .with_fn("test", |_, x| Ok(Emit::Data(x[0].clone())))
            .with_fn("train", |_, x| Ok(Emit::Data(scalar(value(&x[0]) * 2.0))));
        let g = graph(
            "nodeset P = 4;\ncond r = 3;\n\
             dist[P]{seq(init)} . feedback(dist[P]{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}, r)",
            &b,
        );
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        assert_eq!(out.trace.messages(), predict_counts(&g, None).unwrap());
        // Every peer ends with the same average.
        let finals: Vec<f32> = out.results().iter().map(value).collect();
        assert_eq!(finals.len(), 4);
        assert!(finals.iter().all(|&v| v == finals[0]));
        // Round 1 trains each init (x2) then averages: mean(0,2,4,6) = 3, then 6, 12.
        assert_eq!(finals[0], 12.0);
    }

    #[test]
    fn end_of_stream_stops_an_unbounded_loop() {
        use std::sync::atomic::{AtomicU32, Ordering};
        use std::sync::Arc;
        let b = Bindings::new()
            .with_fn("init", |_, _| Ok(Emit::Data(scalar(0.0))))
            .with_logic("leaf", |_| {
                let frames = Arc::new(AtomicU32::new(0));
                Box::new(move |_: &CallCtx, _: &[Payload]| {
                    if frames.fetch_add(1, Ordering::SeqCst) >= 5 {
                        Ok(Emit::End)
                    } else {
                        Ok(Emit::Data(scalar(1.0)))
                    }
                })
            });
        let g = graph(
            "nodeset L = 3;\ncond f = inf;\nseq(init) . feedback(dist[L]{par(leaf)} . reduce(sum), f)",
            &b,
        );
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        assert!(out.results().is_empty());
        assert_eq!(out.trace.rounds.len(), 6);
        // init -> reducer once, 5 partials per leaf, 6 broadcasts to each leaf.
        assert_eq!(out.trace.total_messages(), 1 + 3 * 5 + 3 * 6);
    }

    #[test]
    fn logic_errors_name_the_node() {
        let b = Bindings::new()
            .with_fn("a", |_, _| Ok(Emit::Data(scalar(1.0))))
            .with_fn("boom", |_, _| Err(LogicError::other("bad input")));
        let g = graph("seq(a) . seq(boom)", &b);
        let err = run_local(&g, &b, &RunOptions::default()).unwrap_err();
        assert_eq!(err.to_string(), "node 1 (boom) failed in `boom`: bad input");
    }

    #[test]
    fn group_mode_matches_local() {
        use crate::graph::{partition, Endpoint};
        use std::collections::BTreeMap;
        let (g, b) = master_worker_stub();
        let assignment = g.assignment_by_home("A");
        let base = 24000 + (std::process::id() % 1000) as u16 * 8;
        let eps: BTreeMap<String, Endpoint> = ["A", "W0", "W1", "W2"]
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), Endpoint::new("127.0.0.1", base + i as u16)))
            .collect();
        let plan = partition(&g, &assignment, &eps).unwrap();
        let handles: Vec<_> = plan
            .dgroups
            .keys()
            .cloned()
            .map(|grp| {
                let (plan, b) = (plan.clone(), b.clone());
                std::thread::spawn(move || run_group(&plan, &grp, &b, &RunOptions::default()))
            })
            .collect();
        let mut merged: Option<ExecutionTrace> = None;
        let mut results = Vec::new();
        for h in handles {
            let out = h.join().unwrap().unwrap();
            results.extend(out.results());
            match &mut merged {
                Some(t) => t.merge(&out.trace),
                None => merged = Some(out.trace),
            }
        }
        let local = run_plan_local(&plan, &b, &RunOptions::default()).unwrap();
        assert_eq!(results, local.results());
        let merged = merged.unwrap();
        assert_eq!(merged.messages(), local.trace.messages());
        assert_eq!(merged.inter_bytes(), local.trace.inter_bytes());
        assert_eq!(merged.inter_messages(), 2 * 3 * 4);
    }
}
