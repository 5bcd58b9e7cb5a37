use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;

use crate::graph::{ChannelId, DataflowGraph, DeploymentPlan, NodeId};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ChannelTrace {
    pub id: ChannelId,
    pub src: NodeId,
    pub dst: NodeId,
    pub messages: u64,
    pub bytes: u64,
    pub inter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMark {
    pub node: NodeId,
    pub round: u32,
    pub elapsed_ms: f64,
}

/// What an execution did: DATA traffic per channel (counted at the sender,
/// in encoded frame bytes), node busy time and guard round marks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExecutionTrace {
    pub channels: Vec<ChannelTrace>,
    pub node_busy_ms: Vec<f64>,
    pub rounds: Vec<RoundMark>,
    pub wall_ms: f64,
}

impl ExecutionTrace {
    pub fn new(g: &DataflowGraph, plan: Option<&DeploymentPlan>) -> Self {
        ExecutionTrace {
            channels: g
                .channels
                .iter()
                .map(|c| ChannelTrace {
                    id: c.id,
                    src: c.src,
                    dst: c.dst,
                    messages: 0,
                    bytes: 0,
                    inter: plan.is_some_and(|p| p.classes[c.id as usize].is_inter()),
                })
                .collect(),
            node_busy_ms: vec![0.0; g.nodes.len()],
            rounds: Vec::new(),
            wall_ms: 0.0,
        }
    }

    pub fn record_send(&mut self, channel: ChannelId, bytes: usize) {
        let c = &mut self.channels[channel as usize];
        c.messages += 1;
        c.bytes += bytes as u64;
    }

    pub fn add_busy(&mut self, node: NodeId, d: Duration) {
        self.node_busy_ms[node as usize] += d.as_secs_f64() * 1e3;
    }

    pub fn messages(&self) -> Vec<u64> {
        self.channels.iter().map(|c| c.messages).collect()
    }

    pub fn total_messages(&self) -> u64 {
        self.channels.iter().map(|c| c.messages).sum()
    }

    pub fn inter_messages(&self) -> u64 {
        self.channels.iter().filter(|c| c.inter).map(|c| c.messages).sum()
    }

    pub fn inter_bytes(&self) -> u64 {
        self.channels.iter().filter(|c| c.inter).map(|c| c.bytes).sum()
    }

    /// Adds the counts of a trace taken on another group of the same plan.
    pub fn merge(&mut self, other: &ExecutionTrace) {
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            a.messages += b.messages;
            a.bytes += b.bytes;
        }
        for (a, b) in self.node_busy_ms.iter_mut().zip(&other.node_busy_ms) {
            *a += b;
        }
        self.rounds.extend(other.rounds.iter().cloned());
        self.wall_ms = self.wall_ms.max(other.wall_ms);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("src,dst,messages,bytes\n");
        for c in &self.channels {
            let _ = writeln!(out, "{},{},{},{}", c.src, c.dst, c.messages, c.bytes);
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "channels": self.channels.len(),
            "messages": self.total_messages(),
            "bytes": self.channels.iter().map(|c| c.bytes).sum::<u64>(),
            "inter_messages": self.inter_messages(),
            "inter_bytes": self.inter_bytes(),
            "rounds": self.rounds.iter().map(|r| r.round).max(),
        })
    }
}
