//! Strategies and oracles shared by the property suites and the acceptance run.

use dmlflow::dsl::{BlockExpr, CondDecl, DistPolicy, GatherPolicy, NodeSetDecl, Program, Selector};
use dmlflow::mlkit::{loss_and_grad, mlp_init, Arch, ModelParams};
use dmlflow::runtime::{Envelope, MsgKind, TensorMsg, PROTOCOL_VERSION};
use dmlflow::tensor::DenseTensor;
use proptest::prelude::*;

pub const NAMES: [&str; 5] = ["init", "train", "test", "f_2", "Agg"];

pub fn name() -> impl Strategy<Value = String> {
    prop::sample::select(&NAMES[..]).prop_map(str::to_string)
}

pub fn leaf() -> impl Strategy<Value = BlockExpr> {
    prop_oneof![
        name().prop_map(BlockExpr::Seq),
        name().prop_map(BlockExpr::Par),
        name().prop_map(BlockExpr::Reduce),
        name().prop_map(BlockExpr::Spread),
        prop_oneof![
            Just(DistPolicy::Broadcast),
            Just(DistPolicy::Scatter),
            Just(DistPolicy::Unicast(Selector::RoundRobin)),
            Just(DistPolicy::Unicast(Selector::Auto)),
            (0u32..9).prop_map(|k| DistPolicy::Unicast(Selector::Fixed(k))),
        ]
        .prop_map(BlockExpr::OneToN),
        prop_oneof![
            Just(GatherPolicy::Gather),
            Just(GatherPolicy::Gatherall),
            name().prop_map(GatherPolicy::Reduce),
        ]
        .prop_map(BlockExpr::NToOne),
    ]
}

pub fn expr() -> impl Strategy<Value = BlockExpr> {
    leaf().prop_recursive(4, 24, 4, |inner| {
        prop_oneof![
            (inner.clone(), prop::sample::select(&["W", "S"][..]))
                .prop_map(|(b, s)| BlockExpr::distribute(b, s)),
            (inner.clone(), prop::sample::select(&["r", "forever"][..]))
                .prop_map(|(b, c)| BlockExpr::feedback(b, c)),
            prop::collection::vec(inner, 2..4).prop_map(BlockExpr::pipe),
        ]
    })
}

pub fn program() -> impl Strategy<Value = Program> {
    (expr(), 1u32..9, 1u32..50).prop_map(|(body, w, r)| {
        Program::new(body)
            .with_nodeset("W", NodeSetDecl::Count(w))
            .with_nodeset("S", NodeSetDecl::Members(vec!["edge_a".into(), "edge_b".into()]))
            .with_cond("r", CondDecl::Rounds(r))
            .with_cond("forever", CondDecl::Infinite)
    })
}

pub fn tensor() -> impl Strategy<Value = DenseTensor> {
    prop::collection::vec(0u32..5, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().map(|&d| d as usize).product();
        prop_oneof![
            prop::collection::vec(-1e6f32..1e6, n).prop_map({
                let s = shape.clone();
                move |v| DenseTensor::from_f32(s.clone(), v).unwrap()
            }),
            prop::collection::vec(any::<i64>(), n).prop_map({
                let s = shape.clone();
                move |v| DenseTensor::from_i64(s.clone(), v).unwrap()
            }),
            prop::collection::vec(any::<u8>(), n).prop_map(move |v| DenseTensor::from_u8(shape.clone(), v).unwrap()),
        ]
    })
}

pub fn message() -> impl Strategy<Value = TensorMsg> {
    (
        prop_oneof![Just(MsgKind::Data), Just(MsgKind::Eos), Just(MsgKind::RoundEnd)],
        any::<u32>(),
        any::<u32>(),
        any::<u32>(),
        prop::collection::vec(tensor(), 0..4),
    )
        .prop_map(|(kind, source, channel, round, payload)| TensorMsg {
            envelope: Envelope {
                version: PROTOCOL_VERSION,
                kind,
                source,
                channel,
                round,
            },
            payload,
        })
}

/// Straightforward f64 forward pass and mean cross-entropy, plus the hidden
/// pre-activation closest to zero.
pub fn oracle(p: &ModelParams, inputs: &[f64], labels: &[u8]) -> (f64, f64) {
    let batch = labels.len();
    let layers = p.layers();
    let mut act: Vec<f64> = inputs.to_vec();
    let mut kink = f64::INFINITY;
    for (k, l) in layers.iter().enumerate() {
        let mut next = vec![0.0; batch * l.output];
        for b in 0..batch {
            for o in 0..l.output {
                let mut z: f64 = l.bias[o] as f64;
                for i in 0..l.input {
                    z += l.weight[o * l.input + i] as f64 * act[b * l.input + i];
                }
                if k + 1 < layers.len() {
                    kink = kink.min(z.abs());
                    z = z.max(0.0);
                }
                next[b * l.output + o] = z;
            }
        }
        act = next;
    }
    let classes = layers.last().unwrap().output;
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &act[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
    }
    (total / batch as f64, kink)
}

pub fn oracle_loss(p: &ModelParams, inputs: &[f64], labels: &[u8]) -> f64 {
    oracle(p, inputs, labels).0
}

pub fn grad_case() -> impl Strategy<Value = (Vec<usize>, u64, Vec<f32>, Vec<u8>)> {
    (prop::collection::vec(1usize..6, 3..5), any::<u64>(), 1usize..5).prop_flat_map(|(widths, seed, batch)| {
        let (input, classes) = (widths[0], *widths.last().unwrap());
        (
            Just(widths),
            Just(seed),
            prop::collection::vec(-1.0f32..1.0, batch * input),
            prop::collection::vec(0..classes.max(2) as u8, batch).prop_map(move |v| {
                v.into_iter().map(|y| y % classes as u8).collect()
            }),
        )
    })
}

/// The model with one entry shifted by about `delta`, and the exact shift.
pub fn perturbed(p: &ModelParams, buf: usize, idx: usize, delta: f32) -> (ModelParams, f64) {
    let mut q = p.clone();
    let v = &mut q.buffers_mut().nth(buf).unwrap()[idx];
    let before = *v;
    *v += delta;
    let shift = *v as f64 - before as f64;
    (q, shift)
}


/// Analytic gradients against central differences of the f64 oracle;
/// relative error at most 1e-3, measured against max(|fd|, 1e-3).
pub fn check_gradient((widths, seed, inputs, labels): (Vec<usize>, u64, Vec<f32>, Vec<u8>)) -> Result<(), TestCaseError> {
    let arch = Arch::new(widths).unwrap();
    let params = mlp_init(&arch, seed);
    let (loss, grad) = loss_and_grad(&params, &inputs, &labels);
    let x64: Vec<f64> = inputs.iter().map(|&v| v as f64).collect();
    let (reference, kink) = oracle(&params, &x64, &labels);
    prop_assume!(kink > 1e-3);
    prop_assert!((loss as f64 - reference).abs() < 1e-5 * (1.0 + reference.abs()));

    let h = 1e-4f32;
    let sizes: Vec<usize> = params.buffers().map(<[f32]>::len).collect();
    for (buf, &len) in sizes.iter().enumerate() {
        for idx in 0..len {
            let (up, du) = perturbed(&params, buf, idx, h);
            let (down, dd) = perturbed(&params, buf, idx, -h);
            let fd = (oracle_loss(&up, &x64, &labels) - oracle_loss(&down, &x64, &labels)) / (du - dd);
            let g = grad.buffers().nth(buf).unwrap()[idx] as f64;
            prop_assert!((g - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "buffer {} [{}]: {} vs {}", buf, idx, g, fd);
        }
    }
    Ok(())
}

/// FedAvg of `n` freshly initialised MNIST models against the f64 mean.
pub fn check_fedavg((n, seed): (usize, u64)) -> Result<(), TestCaseError> {
    let arch = Arch::mnist();
    let models: Vec<ModelParams> = (0..n as u64).map(|i| mlp_init(&arch, seed.wrapping_add(i))).collect();
    let avg = dmlflow::mlkit::fedavg(&models).unwrap();
    for (k, got) in avg.buffers().enumerate() {
        for (i, &v) in got.iter().enumerate() {
            let mean = models.iter().map(|m| m.buffers().nth(k).unwrap()[i] as f64).sum::<f64>() / n as f64;
            prop_assert!((v as f64 - mean).abs() <= 1e-7, "{} vs {}", v, mean);
        }
    }
    Ok(())
}
