//! Apply the gather/reduce and distribute/reduce identities and check that
//! both sides compile to the same graph shape.

use dmlflow::dsl::{parse, render_expr, rewrite, RuleId};
use dmlflow::graph::compile_structure;

fn main() {
    let mw = parse(
        "nodeset W = 3;\ncond r = 5;\n\
         seq(init) . feedback(dist[W]{par(test) . par(train)} . reduce(FedAvg) . 1toN(bcast), r)",
    )
    .unwrap();
    let split = rewrite(&mw, RuleId::R1Split).unwrap();
    println!("R1 split : {}", render_expr(&split.body));
    let back = rewrite(&split, RuleId::R1Fuse).unwrap();
    assert_eq!(back, mw);

    let p2p = parse(
        "nodeset P = 4;\ncond r = 5;\n\
         dist[P]{seq(init)} . feedback(dist[P]{par(test) . par(train) . 1toN(bcast) . reduce(FedAvg)}, r)",
    )
    .unwrap();
    let r2 = rewrite(&p2p, RuleId::R2Split).unwrap();
    println!("R2 split : {}", render_expr(&r2.body));
    let (a, b) = (compile_structure(&p2p).unwrap(), compile_structure(&r2).unwrap());
    println!("p2p graph: {} nodes, {} channels; identical after rewrite: {}", a.nodes.len(), a.channels.len(), a == b);
}
