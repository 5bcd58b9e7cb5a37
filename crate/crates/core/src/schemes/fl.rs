use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::mlkit::{evaluate, fedavg, mlp_init, train_epochs, Arch, Dataset, Hyperparams, MlError, ModelParams};
use crate::runtime::{payload, Bindings, CallCtx, Emit, LogicError, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundAccuracy {
    pub round: u32,
    pub replica: u32,
    pub accuracy: f32,
}

/// What the FL logic observed while running.
#[derive(Debug, Default)]
pub struct FlLog {
    pub accuracy: Mutex<Vec<RoundAccuracy>>,
    /// `(round, replica, mean epoch loss)` of every train call.
    pub losses: Mutex<Vec<(u32, u32, f32)>>,
    /// Models seen by `test`, when recording is enabled.
    pub models: Mutex<Vec<(u32, u32, ModelParams)>>,
}

impl FlLog {
    /// Test accuracies of one replica in round order.
    pub fn accuracy_of(&self, replica: u32) -> Vec<RoundAccuracy> {
        let mut v: Vec<RoundAccuracy> = self
            .accuracy
            .lock()
            .expect("log")
            .iter()
            .filter(|a| a.replica == replica)
            .copied()
            .collect();
        v.sort_by_key(|a| a.round);
        v
    }

    /// Recorded models sorted by round, then replica.
    pub fn models(&self) -> Vec<(u32, u32, ModelParams)> {
        let mut v = self.models.lock().expect("log").clone();
        v.sort_by_key(|(r, i, _)| (*r, *i));
        v
    }
}

/// Inputs shared by every FL node.
#[derive(Debug, Clone)]
pub struct FlSetup {
    pub arch: Arch,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    /// Shard `i` trains replica `i`.
    pub shards: Arc<Vec<Dataset>>,
    /// Without a test set `test` only forwards the model.
    pub test: Option<Arc<Dataset>>,
    pub record_models: bool,
    pub log: Arc<FlLog>,
}

/// Seed of the shuffle order for one replica in one round.
pub fn train_seed(seed: u64, replica: u32, round: u32) -> u64 {
    let mut z = seed ^ ((replica as u64) << 32 | round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn model_of(arch: &Arch, p: &Payload) -> Result<ModelParams, LogicError> {
    let m = ModelParams::from_tensors(p)?;
    if m.arch() != arch {
        return Err(MlError::ArchMismatch {
            expected: arch.to_string(),
            found: m.arch().to_string(),
        }
        .into());
    }
    Ok(m)
}

fn single(inputs: &[Payload]) -> Result<&Payload, LogicError> {
    match inputs {
        [p] => Ok(p),
        _ => Err(LogicError::other(format!("expected one model, got {} inputs", inputs.len()))),
    }
}

/// `init`, `test`, `train` and a `FedAvg` logic for gathered model vectors,
/// on top of the builtin reducers.
pub fn fl_bindings(setup: &FlSetup) -> Bindings {
    let init = Arc::new(setup.clone());
    let test = Arc::clone(&init);
    let train = Arc::clone(&init);
    let avg = Arc::clone(&init);
    Bindings::new()
        .with_fn("init", move |_, _| Ok(Emit::Data(payload(mlp_init(&init.arch, init.seed).to_tensors()))))
        .with_fn("test", move |ctx: &CallCtx, inputs| {
            let p = single(inputs)?;
            let replica = ctx.replica.unwrap_or(0);
            if test.test.is_some() || test.record_models {
                let m = model_of(&test.arch, p)?;
                if let Some(t) = &test.test {
                    let accuracy = evaluate(&m, t)?;
                    test.log.accuracy.lock().expect("log").push(RoundAccuracy {
                        round: ctx.round,
                        replica,
                        accuracy,
                    });
                }
                if test.record_models {
                    test.log.models.lock().expect("log").push((ctx.round, replica, m));
                }
            }
            Ok(Emit::Data(p.clone()))
        })
        .with_fn("train", move |ctx: &CallCtx, inputs| {
            let m = model_of(&train.arch, single(inputs)?)?;
            let replica = ctx.replica.unwrap_or(0);
            let shard = train
                .shards
                .get(replica as usize)
                .ok_or_else(|| LogicError::other(format!("no shard for replica {replica}")))?;
            let hp = &train.hyperparams;
            let out = train_epochs(&m, shard, hp, hp.epochs_per_round, train_seed(train.seed, replica, ctx.round))?;
            let loss = out.epoch_loss.last().copied().unwrap_or(f32::NAN);
            train.log.losses.lock().expect("log").push((ctx.round, replica, loss));
            Ok(Emit::Data(payload(out.params.to_tensors())))
        })
        .with_fn("FedAvg", move |_, inputs| {
            let models = inputs.iter().map(|p| model_of(&avg.arch, p)).collect::<Result<Vec<_>, _>>()?;
            Ok(Emit::Data(payload(fedavg(&models)?.to_tensors())))
        })
}
