mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use dmlflow::dsl::parse;
use dmlflow::graph::{channel_stats, compile, predict_counts, DataflowGraph};
use dmlflow::runtime::{payload, run_local, Bindings, Emit, Payload, RunOptions};
use dmlflow::tensor::DenseTensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(x: f32) -> Payload {
    payload(vec![DenseTensor::vector(vec![x])])
}

fn value(p: &Payload) -> f32 {
    p[0].as_f32().unwrap()[0]
}

type Calls = Arc<Mutex<Vec<(u32, u32)>>>;

/// Stub FL logic: `train` adds one plus the replica index after a random
/// pause, and every call is logged as `(replica, round)`.
fn stub(jitter: u64) -> (Bindings, Calls) {
    let calls: Calls = Arc::default();
    let log = calls.clone();
    let b = Bindings::new()
        .with_fn("init", |_, _| Ok(Emit::Data(scalar(0.0))))
        .with_fn("test", |_, x| Ok(Emit::Data(x[0].clone())))
        .with_fn("train", move |ctx, x| {
            let replica = ctx.replica.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(jitter ^ ((replica as u64) << 32) ^ ctx.round as u64);
            std::thread::sleep(Duration::from_micros(rng.gen_range(0..400)));
            log.lock().unwrap().push((replica, ctx.round));
            Ok(Emit::Data(scalar(value(&x[0]) + 1.0 + replica as f32)))
        });
    (b, calls)
}

fn graph(src: &str, b: &Bindings) -> DataflowGraph {
    compile(&parse(src).unwrap(), b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn traced_counts_match_prediction(w in 1u32..7, r in 1u32..6, p2p in any::<bool>(), jitter in any::<u64>()) {
        let (b, calls) = stub(jitter);
        let src = if p2p { common::p2p_src(w, r) } else { common::mw_src(w, r) };
        let g = graph(&src, &b);
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        prop_assert_eq!(out.trace.messages(), predict_counts(&g, None).unwrap());

        let plan = common::local_plan(&g);
        let stats = channel_stats(&plan).unwrap();
        let per_round = if p2p { w as u64 * (w as u64 - 1) } else { 2 * w as u64 };
        prop_assert_eq!(stats.per_round_messages, per_round);
        prop_assert_eq!(calls.lock().unwrap().len() as u32, w * r);
    }

    #[test]
    fn rounds_arrive_in_order(w in 1u32..6, r in 1u32..6, p2p in any::<bool>(), jitter in any::<u64>()) {
        let (b, calls) = stub(jitter);
        let src = if p2p { common::p2p_src(w, r) } else { common::mw_src(w, r) };
        let g = graph(&src, &b);
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        let calls = calls.lock().unwrap();
        for replica in 0..w {
            let seen: Vec<u32> = calls.iter().filter(|c| c.0 == replica).map(|c| c.1).collect();
            prop_assert_eq!(seen, (1..=r).collect::<Vec<_>>());
        }
        let marks: Vec<u32> = out.trace.rounds.iter().map(|m| m.round).collect();
        prop_assert!(marks.windows(2).all(|p| p[0] <= p[1]));

        // Every round adds 1 + mean(replica) regardless of arrival order.
        let step = 1.0 + (w - 1) as f32 / 2.0;
        let results = out.results();
        prop_assert_eq!(results.len() as u32, if p2p { w } else { 1 });
        for p in &results {
            prop_assert!((value(p) - step * r as f32).abs() < 1e-4);
        }
    }

    #[test]
    fn gatherall_orders_by_replica(w in 1u32..8, jitter in any::<u64>()) {
        let b = Bindings::new()
            .with_fn("src", |_, _| Ok(Emit::Data(scalar(0.0))))
            .with_fn("tag", move |ctx, _| {
                let replica = ctx.replica.unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(jitter ^ replica as u64);
                std::thread::sleep(Duration::from_micros(rng.gen_range(0..800)));
                Ok(Emit::Data(scalar(replica as f32)))
            })
            .with_fn("collect", |_, parts| Ok(Emit::Data(payload(parts.iter().map(|p| p[0].clone()).collect()))));
        let g = graph(
            &format!("nodeset W = {w};\nseq(src) . 1toN(bcast) . dist[W]{{par(tag)}} . NtoOne(gatherall) . seq(collect)"),
            &b,
        );
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        let got: Vec<f32> = out.results()[0].iter().map(|t| t.as_f32().unwrap()[0]).collect();
        prop_assert_eq!(got, (0..w).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn round_robin_spreads_evenly(w in 1u32..6, items in 1u32..20) {
        let b = Bindings::new()
            .with_fn("src", move |_, _| {
                Ok(Emit::Data(payload((0..items).map(|i| DenseTensor::vector(vec![i as f32])).collect())))
            })
            .with_fn("id", |_, x| Ok(Emit::Data(x[0].clone())));
        let g = graph(
            &format!("nodeset W = {w};\nseq(src) . spread(split) . 1toN(ucast:rr) . dist[W]{{par(id)}} . NtoOne(gather)"),
            &b,
        );
        let out = run_local(&g, &b, &RunOptions::default()).unwrap();
        prop_assert_eq!(out.trace.messages(), predict_counts(&g, None).unwrap());
        let mut got: Vec<f32> = out.results().iter().flat_map(|p| p.iter().map(|t| t.as_f32().unwrap()[0])).collect();
        got.sort_by(f32::total_cmp);
        prop_assert_eq!(got, (0..items).map(|i| i as f32).collect::<Vec<_>>());
    }
}
