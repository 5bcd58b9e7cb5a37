//! Federated averaging.

use super::model::ModelParams;
use super::MlError;

/// `acc[i] += x[i]`. Shared by [`fedavg`] and the runtime FedAvg reducer so
/// both paths perform the same float operations in the same order.
pub fn accumulate(acc: &mut [f32], x: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

/// `acc[i] /= count`.
pub fn normalize(acc: &mut [f32], count: usize) {
    let n = count as f32;
    for a in acc {
        *a /= n;
    }
}

/// Uniform elementwise mean, summed in list order.
pub fn fedavg(models: &[ModelParams]) -> Result<ModelParams, MlError> {
    let (first, rest) = models.split_first().ok_or(MlError::EmptyAggregation)?;
    let mut acc = first.clone();
    for m in rest {
        if m.arch() != first.arch() {
            return Err(MlError::ArchMismatch {
                expected: first.arch().to_string(),
                found: m.arch().to_string(),
            });
        }
        for (a, x) in acc.buffers_mut().zip(m.buffers()) {
            accumulate(a, x);
        }
    }
    for a in acc.buffers_mut() {
        normalize(a, models.len());
    }
    Ok(acc)
}
