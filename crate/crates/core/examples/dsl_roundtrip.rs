//! Parse a program, print it back, and show what the validator reports.

use dmlflow::dsl::{parse, render, validate};

const SOURCE: &str = "\
# master-worker federated averaging
nodeset W = 4;
cond r = 20;

seq(init) . feedback(dist[W]{par(test) . par(train)} . reduce(FedAvg) . 1toN(bcast), r)
";

fn main() {
    let program = parse(SOURCE).expect("valid program");
    let text = render(&program);
    print!("{text}");
    assert_eq!(parse(&text).unwrap(), program);

    for src in [
        "nodeset W = 2;\nseq(a) . dist[W]{par(b)} . reduce(mean)",
        "nodeset W = 2;\nseq(a) . 1toN(ucast:auto) . dist[W]{par(b)} . NtoOne(gather)",
        "seq(a) . feedback(seq(b), missing)",
    ] {
        println!("\n{src}");
        match parse(src) {
            Ok(p) => {
                for d in validate(&p) {
                    println!("  {d}");
                }
            }
            Err(e) => println!("  parse error at {e}"),
        }
    }
}
