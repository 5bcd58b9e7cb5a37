//! The federated-learning and edge-inference programs, and the node logic
//! that runs them.

mod fl;
mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{BlockExpr, CondDecl, DistPolicy, NodeSetDecl, Program};
use crate::mlkit::{Hyperparams, MlError};

pub use fl::{fl_bindings, train_seed, FlLog, FlSetup, RoundAccuracy};
pub use tree::{
    decode_detections, encode_detections, read_frames, synthetic_frames, tree_bindings, write_frames, Detection,
    Detector, DetectorFactory, FrameDetections, StubDetector, TreeLog, TreeSetup,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    MasterWorker,
    P2p,
    Tree,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::MasterWorker => "master-worker",
            Scheme::P2p => "p2p",
            Scheme::Tree => "tree",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "master-worker" | "mw" => Ok(Scheme::MasterWorker),
            "p2p" | "peer-to-peer" => Ok(Scheme::P2p),
            "tree" => Ok(Scheme::Tree),
            other => Err(SchemeError::Invalid(format!(
                "unknown scheme `{other}` (expected master-worker, p2p or tree)"
            ))),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub scheme: Scheme,
    /// |W| or |P|.
    pub workers: u32,
    pub leaves: u32,
    pub combiners: u32,
    pub rounds: u32,
    pub hyperparams: Hyperparams,
    /// Tree only: detections scoring at most this are dropped.
    pub threshold: f32,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            scheme: Scheme::MasterWorker,
            workers: 2,
            leaves: 2,
            combiners: 1,
            rounds: 20,
            hyperparams: Hyperparams::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn master_worker(workers: u32, rounds: u32) -> Self {
        FederationConfig {
            scheme: Scheme::MasterWorker,
            workers,
            rounds,
            ..Default::default()
        }
    }

    pub fn p2p(peers: u32, rounds: u32) -> Self {
        FederationConfig {
            scheme: Scheme::P2p,
            workers: peers,
            rounds,
            ..Default::default()
        }
    }

    pub fn tree(leaves: u32, combiners: u32, threshold: f32) -> Self {
        FederationConfig {
            scheme: Scheme::Tree,
            leaves,
            combiners,
            threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        let bad = |m: String| Err(SchemeError::Invalid(m));
        match self.scheme {
            Scheme::MasterWorker | Scheme::P2p => {
                if self.workers == 0 {
                    return bad(format!("{} needs at least one worker", self.scheme));
                }
                if self.rounds == 0 {
                    return bad("rounds must be >= 1".into());
                }
                self.hyperparams.validate()?;
            }
            Scheme::Tree => {
                if self.combiners == 0 || self.leaves == 0 {
                    return bad("tree needs at least one leaf and one combiner".into());
                }
                if self.combiners > self.leaves {
                    return bad(format!(
                        "{} combiners cannot be fed by {} leaves",
                        self.combiners, self.leaves
                    ));
                }
                if !(0.0..=1.0).contains(&self.threshold) {
                    return bad(format!("threshold {} is outside [0, 1]", self.threshold));
                }
            }
        }
        Ok(())
    }
}

fn expect(cfg: &FederationConfig, scheme: Scheme) -> Result<(), SchemeError> {
    if cfg.scheme != scheme {
        return Err(SchemeError::Invalid(format!("expected a {scheme} configuration, got {}", cfg.scheme)));
    }
    cfg.validate()
}

/// `seq(init) . feedback(dist[W]{par(test) . par(train)} . reduce(FedAvg) . 1toN(bcast), r)`
pub fn build_master_worker(cfg: &FederationConfig) -> Result<Program, SchemeError> {
    expect(cfg, Scheme::MasterWorker)?;
    let body = BlockExpr::pipe([
        BlockExpr::distribute(BlockExpr::pipe([BlockExpr::par("test"), BlockExpr::par("train")]), "W"),
        BlockExpr::reduce("FedAvg"),
        BlockExpr::OneToN(DistPolicy::Broadcast),
    ]);
    Ok(
        Program::new(BlockExpr::pipe([BlockExpr::seq("init"), BlockExpr::feedback(body, "r")]))
            .with_nodeset("W", NodeSetDecl::Count(cfg.workers))
            .with_cond("r", CondDecl::Rounds(cfg.rounds)),
    )
}

/// `dist[P]{seq(init)} . feedback(dist[P]{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}, r)`
pub fn build_p2p(cfg: &FederationConfig) -> Result<Program, SchemeError> {
    expect(cfg, Scheme::P2p)?;
    let peer = BlockExpr::pipe([
        BlockExpr::par("test"),
        BlockExpr::par("train"),
        BlockExpr::OneToN(DistPolicy::Broadcast),
        BlockExpr::reduce("FedAvg"),
    ]);
    Ok(Program::new(BlockExpr::pipe([
        BlockExpr::distribute(BlockExpr::seq("init"), "P"),
        BlockExpr::feedback(BlockExpr::distribute(peer, "P"), "r"),
    ]))
    .with_nodeset("P", NodeSetDecl::Count(cfg.workers))
    .with_cond("r", CondDecl::Rounds(cfg.rounds)))
}

/// `seq(init) . feedback(dist[L]{par(infer)} . reduce(F) . dist[C]{par(combine)} . reduce(F) . dist[R]{seq(alert)}, forever)`
pub fn build_tree_inference(cfg: &FederationConfig) -> Result<Program, SchemeError> {
    expect(cfg, Scheme::Tree)?;
    let body = BlockExpr::pipe([
        BlockExpr::distribute(BlockExpr::par("infer"), "L"),
        BlockExpr::reduce("F"),
        BlockExpr::distribute(BlockExpr::par("combine"), "C"),
        BlockExpr::reduce("F"),
        BlockExpr::distribute(BlockExpr::seq("alert"), "R"),
    ]);
    Ok(
        Program::new(BlockExpr::pipe([BlockExpr::seq("init"), BlockExpr::feedback(body, "forever")]))
            .with_nodeset("L", NodeSetDecl::Count(cfg.leaves))
            .with_nodeset("C", NodeSetDecl::Count(cfg.combiners))
            .with_nodeset("R", NodeSetDecl::Count(1))
            .with_cond("forever", CondDecl::Infinite),
    )
}

pub fn build(cfg: &FederationConfig) -> Result<Program, SchemeError> {
    match cfg.scheme {
        Scheme::MasterWorker => build_master_worker(cfg),
        Scheme::P2p => build_p2p(cfg),
        Scheme::Tree => build_tree_inference(cfg),
    }
}
