//! Master-worker and peer-to-peer federated averaging on an MNIST subset,
//! checking that both schemes end up with the same model.

use std::path::PathBuf;

use dmlflow::experiment::{load_mnist, run_once, ExperimentConfig};
use dmlflow::schemes::Scheme;

fn main() {
    let mut cfg = ExperimentConfig::parse(
        "[experiment]\nworkers = 4\nrounds = 3\nseed = 1\n[train]\nepochs_per_round = 1\ntrain_limit = 12000\n",
    )
    .unwrap();
    if let Some(dir) = std::env::var_os("DMLFLOW_MNIST_DIR") {
        cfg.data.dir = Some(PathBuf::from(dir));
    }
    let data = match load_mnist(&cfg) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("{e}");
            return;
        }
    };
    let mw = run_once(&cfg, 1, Some(&data)).unwrap();
    cfg.experiment.scheme = Scheme::P2p;
    let p2p = run_once(&cfg, 1, Some(&data)).unwrap();

    for a in [&mw, &p2p] {
        let r = &a.report;
        println!(
            "{:>13}: accuracy per round {:?}, {} inter-dgroup messages",
            r.scheme.name(),
            r.accuracy,
            r.inter_messages
        );
    }
    let diff = p2p.models.iter().filter_map(|m| m.max_abs_diff(&mw.models[0])).fold(0.0f32, f32::max);
    println!("largest weight difference between the schemes: {diff}");
}
