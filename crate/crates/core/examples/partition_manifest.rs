//! Split a master-worker graph into one dgroup per worker plus a master
//! group, write the manifest, and predict the per-round traffic.

use std::collections::BTreeMap;

use dmlflow::dsl::parse;
use dmlflow::graph::{channel_stats, compile_structure, partition, Endpoint, Manifest};

fn main() {
    let w = 4;
    let g = compile_structure(
        &parse(&format!(
            "nodeset W = {w};\ncond r = 20;\n\
             seq(init) . feedback(dist[W]{{par(test) . par(train)}} . reduce(FedAvg) . 1toN(bcast), r)"
        ))
        .unwrap(),
    )
    .unwrap();
    let assignment = g.assignment_by_home("master");
    let mut endpoints = BTreeMap::new();
    for (i, (_, group)) in assignment.iter().enumerate() {
        endpoints
            .entry(group.clone())
            .or_insert_with(|| Endpoint::new("127.0.0.1", 9000 + i as u16));
    }
    let plan = partition(&g, &assignment, &endpoints).unwrap();
    let text = plan.to_manifest();
    print!("{text}");
    assert_eq!(Manifest::parse(&text).unwrap().plan(&g).unwrap(), plan);

    let stats = channel_stats(&plan).unwrap();
    println!(
        "{} inter-dgroup channels, {} messages per round, {} over 20 rounds",
        stats.inter_channels,
        stats.per_round_messages,
        stats.inter_messages(20)
    );
}
