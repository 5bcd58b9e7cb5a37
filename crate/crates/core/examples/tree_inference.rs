//! Edge inference over a leaves/combiners/root tree with the stub detector.

use dmlflow::graph::compile;
use dmlflow::runtime::{run_local, RunOptions};
use dmlflow::schemes::{build_tree_inference, tree_bindings, FederationConfig, TreeSetup};

fn main() {
    let tau = 0.6;
    let cfg = FederationConfig::tree(4, 2, tau);
    let setup = TreeSetup::synthetic(7, cfg.leaves, 148, tau);
    let b = tree_bindings(&setup);
    let g = compile(&build_tree_inference(&cfg).unwrap(), &b).unwrap();
    let out = run_local(&g, &b, &RunOptions::default()).unwrap();

    let emitted = setup.log.emitted();
    let kept = emitted.iter().filter(|d| d.score > tau).count();
    let alerts = setup.log.alerts();
    println!("{} boxes detected, {kept} above {tau}, {} alerts at the root", emitted.len(), alerts.len());
    println!("{} messages on {} channels", out.trace.total_messages(), out.trace.channels.len());
    for line in setup.log.alerts_jsonl().lines().take(3) {
        println!("{line}");
    }
}
