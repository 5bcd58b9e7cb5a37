//! Run a small scatter/reduce pipeline in-process with custom logic and
//! print the per-channel trace.

use dmlflow::dsl::parse;
use dmlflow::graph::compile;
use dmlflow::runtime::{payload, run_local, Bindings, Emit, RunOptions};
use dmlflow::tensor::DenseTensor;

fn main() {
    let b = Bindings::new()
        .with_fn("numbers", |_, _| {
            Ok(Emit::Data(payload((1..=4).map(|i| DenseTensor::vector(vec![i as f32; 3])).collect())))
        })
        .with_fn("square", |_, x| {
            let v: Vec<f32> = x[0][0].as_f32()?.iter().map(|v| v * v).collect();
            Ok(Emit::Data(payload(vec![DenseTensor::vector(v)])))
        });
    let p = parse("nodeset W = 4;\nseq(numbers) . 1toN(scatter) . dist[W]{par(square)} . NtoOne(reduce:sum)").unwrap();
    let g = compile(&p, &b).unwrap();
    let out = run_local(&g, &b, &RunOptions::default()).unwrap();
    println!("sum of squares: {:?}", out.results()[0][0].as_f32().unwrap());
    print!("{}", out.trace.to_csv());
}
