#![allow(dead_code)]

pub mod gen;

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::Arc;

use dmlflow::graph::{partition, DataflowGraph, DeploymentPlan, Endpoint};
use dmlflow::mlkit::{partition as shard, Arch, Dataset, Hyperparams};
use dmlflow::schemes::{FlLog, FlSetup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three noisy, linearly separable classes in 8 dimensions.
pub fn toy_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label: u8 = rng.gen_range(0..3);
        for j in 0..dim {
            let base = if j % 3 == label as usize { 0.8 } else { 0.1 };
            images.push(base + rng.gen_range(0.0..0.2));
        }
        labels.push(label);
    }
    Dataset::from_rows(dim, images, labels).unwrap()
}

pub fn toy_setup(workers: u32, seed: u64, record_models: bool) -> FlSetup {
    let train = toy_data(480, 1);
    FlSetup {
        arch: Arch::new(vec![8, 6, 3]).unwrap(),
        hyperparams: Hyperparams {
            learning_rate: 0.05,
            momentum: 0.5,
            batch_size: 16,
            epochs_per_round: 2,
            rounds: 1,
        },
        seed,
        shards: Arc::new(shard(&train, workers, seed).unwrap()),
        test: Some(Arc::new(toy_data(90, 2))),
        record_models,
        log: Arc::new(FlLog::default()),
    }
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// One dgroup per home on OS-assigned localhost ports.
pub fn local_plan(g: &DataflowGraph) -> DeploymentPlan {
    let assignment = g.assignment_by_home("master");
    let mut endpoints = BTreeMap::new();
    for (_, group) in &assignment {
        endpoints
            .entry(group.clone())
            .or_insert_with(|| Endpoint::new("127.0.0.1", free_port()));
    }
    partition(g, &assignment, &endpoints).unwrap()
}

pub fn mw_src(w: u32, r: u32) -> String {
    format!(
        "nodeset W = {w};\ncond r = {r};\n\
         seq(init) . feedback(dist[W]{{par(test) . par(train)}} . reduce(FedAvg) . 1toN(bcast), r)"
    )
}

pub fn p2p_src(p: u32, r: u32) -> String {
    format!(
        "nodeset P = {p};\ncond r = {r};\n\
         dist[P]{{seq(init)}} . feedback(dist[P]{{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}}, r)"
    )
}
