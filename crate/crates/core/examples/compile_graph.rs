//! Compile the peer-to-peer program and print its nodes, channels and DOT.

use dmlflow::dsl::parse;
use dmlflow::graph::{compile_structure, to_dot};

fn main() {
    let p = parse(
        "nodeset P = 3;\ncond r = 2;\n\
         dist[P]{seq(init)} . feedback(dist[P]{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}, r)",
    )
    .unwrap();
    let g = compile_structure(&p).unwrap();
    print!("{g}");
    println!();
    print!("{}", to_dot(&g));
}
