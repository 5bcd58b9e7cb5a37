use serde::Serialize;

use super::ExperimentError;
use crate::runtime::RoundMark;
use crate::schemes::Scheme;

/// Joules per floating-point operation: `P * t / (N * (F_fwd + F_bwd))`.
pub fn energy_per_flop(
    mean_power_w: f32,
    t_epoch_s: f32,
    n_images: u32,
    flops_fwd: u64,
    flops_bwd: u64,
) -> Result<f64, ExperimentError> {
    if !(mean_power_w > 0.0 && mean_power_w.is_finite()) || !(t_epoch_s > 0.0 && t_epoch_s.is_finite()) {
        return Err(ExperimentError::Config(format!(
            "power ({mean_power_w} W) and epoch time ({t_epoch_s} s) must be positive"
        )));
    }
    if n_images == 0 || flops_fwd + flops_bwd == 0 {
        return Err(ExperimentError::Config("image and FLOP counts must be positive".into()));
    }
    Ok(mean_power_w as f64 * t_epoch_s as f64 / (n_images as f64 * (flops_fwd + flops_bwd) as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DetectionCounts {
    pub emitted: u64,
    pub above_threshold: u64,
    pub alerts: u64,
}

/// Wall-clock measurements, kept apart from the reproducible report.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunTiming {
    pub wall_s: f64,
    pub node_busy_ms: Vec<f64>,
    pub rounds: Vec<RoundMark>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scheme: Scheme,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub seed: u64,
    pub workers: u32,
    pub rounds: u32,
    pub messages: u64,
    pub bytes: u64,
    pub inter_messages: u64,
    pub inter_bytes: u64,
    /// Test accuracy of the global model after each round.
    pub accuracy: Vec<f32>,
    pub final_accuracy: Option<f32>,
    /// Largest weight difference between any two peers' final models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer_max_abs_diff: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detections: Option<DetectionCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_per_flop_j: Option<f64>,
    #[serde(skip)]
    pub timing: RunTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Keep min <= mean <= max despite rounding in the sum.
        Some(Stat {
            mean: mean.clamp(min, max),
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergedReport {
    pub scheme: Scheme,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub wall_s: Stat,
    pub messages: Stat,
    pub bytes: Stat,
    pub inter_bytes: Stat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<Stat>,
    /// Per-round mean accuracy over the runs.
    pub accuracy: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_per_flop_j: Option<Stat>,
}

pub fn report_merge(runs: &[RunReport]) -> Result<MergedReport, ExperimentError> {
    let first = runs.first().ok_or_else(|| ExperimentError::Merge("no runs to merge".into()))?;
    if let Some(r) = runs.iter().find(|r| r.scheme != first.scheme) {
        return Err(ExperimentError::Merge(format!(
            "cannot merge {} and {} runs",
            first.scheme, r.scheme
        )));
    }
    let stat = |f: &dyn Fn(&RunReport) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>()).expect("non-empty");
    let opt = |f: &dyn Fn(&RunReport) -> Option<f64>| {
        let v: Vec<f64> = runs.iter().filter_map(f).collect();
        if v.len() == runs.len() {
            Stat::of(&v)
        } else {
            None
        }
    };
    let len = runs.iter().map(|r| r.accuracy.len()).min().unwrap_or(0);
    let accuracy = (0..len)
        .map(|i| runs.iter().map(|r| r.accuracy[i] as f64).sum::<f64>() / runs.len() as f64)
        .collect();
    Ok(MergedReport {
        scheme: first.scheme,
        runs: runs.len(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        wall_s: stat(&|r| r.timing.wall_s),
        messages: stat(&|r| r.messages as f64),
        bytes: stat(&|r| r.bytes as f64),
        inter_bytes: stat(&|r| r.inter_bytes as f64),
        final_accuracy: opt(&|r| r.final_accuracy.map(f64::from)),
        accuracy,
        energy_per_flop_j: opt(&|r| r.energy_per_flop_j),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(scheme: Scheme, wall: f64, acc: f32) -> RunReport {
        RunReport {
            scheme,
            mode: "local".into(),
            group: None,
            seed: 0,
            workers: 2,
            rounds: 1,
            messages: 10,
            bytes: 100,
            inter_messages: 4,
            inter_bytes: 40,
            accuracy: vec![acc],
            final_accuracy: Some(acc),
            peer_max_abs_diff: None,
            detections: None,
            energy_per_flop_j: None,
            timing: RunTiming {
                wall_s: wall,
                ..Default::default()
            },
        }
    }

    #[test]
    fn energy_formula() {
        assert_eq!(energy_per_flop(1.0, 1.0, 1000, 600, 400).unwrap(), 1e-6);
        let base = energy_per_flop(3.0, 2.0, 100, 10, 20).unwrap();
        assert_eq!(energy_per_flop(6.0, 2.0, 100, 10, 20).unwrap(), 2.0 * base);
        assert_eq!(energy_per_flop(3.0, 2.0, 200, 10, 20).unwrap(), base / 2.0);
        assert!(energy_per_flop(0.0, 1.0, 1, 1, 1).is_err());
        assert!(energy_per_flop(1.0, -1.0, 1, 1, 1).is_err());
        assert!(energy_per_flop(1.0, 1.0, 0, 1, 1).is_err());
    }

    #[test]
    fn merge_statistics() {
        let one = report_merge(&[report(Scheme::P2p, 10.0, 0.9)]).unwrap();
        assert_eq!(one.wall_s, Stat { mean: 10.0, min: 10.0, max: 10.0 });
        let two = report_merge(&[report(Scheme::P2p, 10.0, 0.9), report(Scheme::P2p, 20.0, 0.8)]).unwrap();
        assert_eq!(two.wall_s.mean, 15.0);
        let acc = two.final_accuracy.unwrap();
        assert!(acc.min <= acc.mean && acc.mean <= acc.max);
        assert!(report_merge(&[report(Scheme::P2p, 1.0, 0.1), report(Scheme::Tree, 1.0, 0.1)]).is_err());
        assert!(report_merge(&[]).is_err());
    }
}
