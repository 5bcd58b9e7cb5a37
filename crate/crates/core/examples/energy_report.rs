//! Energy per FLOP from user-supplied power readings, and merging the
//! reports of repeated runs.

use dmlflow::experiment::{energy_per_flop, report_merge, run_once, ExperimentConfig};
use dmlflow::mlkit::{count_forward_flops, Arch};

fn main() {
    let fwd = count_forward_flops(&Arch::mnist());
    let e = energy_per_flop(6.5, 14.0, 7_500, fwd, 2 * fwd).unwrap();
    println!("6.5 W over a 14 s epoch of 7500 images: {:.3} nJ/FLOP", e * 1e9);

    let cfg = ExperimentConfig::parse("[experiment]\nscheme = \"tree\"\n[tree]\nframes = 30\n").unwrap();
    let runs: Vec<_> = (0..5).map(|s| run_once(&cfg, s, None).unwrap().report).collect();
    let merged = report_merge(&runs).unwrap();
    println!("{}", serde_json::to_string_pretty(&merged).unwrap());
}
