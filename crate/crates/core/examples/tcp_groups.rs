//! Run each dgroup of a master-worker plan on its own thread, connected over
//! localhost TCP, and compare the result with the in-process run.

use std::thread;

use dmlflow::dsl::parse;
use dmlflow::experiment::default_plan;
use dmlflow::graph::compile;
use dmlflow::runtime::{payload, run_group, run_plan_local, Bindings, Emit, RunOptions};
use dmlflow::tensor::DenseTensor;

fn main() {
    let b = Bindings::new()
        .with_fn("init", |_, _| Ok(Emit::Data(payload(vec![DenseTensor::zeros(vec![3])]))))
        .with_fn("test", |_, x| Ok(Emit::Data(x[0].clone())))
        .with_fn("train", |ctx, x| {
            let v: Vec<f32> = x[0][0].as_f32()?.iter().map(|v| v + 1.0 + ctx.replica.unwrap() as f32).collect();
            Ok(Emit::Data(payload(vec![DenseTensor::vector(v)])))
        });
    let p = parse(
        "nodeset W = 2;\ncond r = 3;\n\
         seq(init) . feedback(dist[W]{par(test) . par(train)} . reduce(FedAvg) . 1toN(bcast), r)",
    )
    .unwrap();
    let g = compile(&p, &b).unwrap();
    let plan = default_plan(&g, 19400).unwrap();

    let handles: Vec<_> = plan
        .dgroups
        .keys()
        .cloned()
        .map(|group| {
            let (plan, b) = (plan.clone(), b.clone());
            thread::spawn(move || (group.clone(), run_group(&plan, &group, &b, &RunOptions::default()).unwrap()))
        })
        .collect();
    let mut dist = Vec::new();
    for h in handles {
        let (group, out) = h.join().unwrap();
        println!("{group}: sent {} messages, {} inter-dgroup bytes", out.trace.total_messages(), out.trace.inter_bytes());
        dist.extend(out.results());
    }
    let local = run_plan_local(&plan, &b, &RunOptions::default()).unwrap();
    println!("distributed {:?}", dist[0][0].as_f32().unwrap());
    println!("local       {:?}", local.results()[0][0].as_f32().unwrap());
    assert_eq!(dist, local.results());
}
