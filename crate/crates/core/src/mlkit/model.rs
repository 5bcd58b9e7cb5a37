//! MLP architecture, parameters, initialization and the forward pass.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, MatRef};
use super::MlError;
use crate::tensor::DenseTensor;

/// Layer widths of a fully connected network, input first.
///
/// Parsed from and printed as `784-64-32-10`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Arch(Vec<usize>);

impl Arch {
    pub fn new(widths: Vec<usize>) -> Result<Self, MlError> {
        if widths.len() < 2 {
            return Err(MlError::InvalidArch(format!(
                "need at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(MlError::InvalidArch(format!("zero-width layer in {widths:?}")));
        }
        Ok(Arch(widths))
    }

    /// The 784-64-32-10 network used for MNIST.
    pub fn mnist() -> Self {
        Arch(vec![784, 64, 32, 10])
    }

    pub fn widths(&self) -> &[usize] {
        &self.0
    }

    pub fn input(&self) -> usize {
        self.0[0]
    }

    pub fn output(&self) -> usize {
        *self.0.last().expect("arch has at least two widths")
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn num_layers(&self) -> usize {
        self.0.len() - 1
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for Arch {
    type Err = MlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let widths = s
            .split('-')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| MlError::InvalidArch(format!("bad layer width {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Arch::new(widths)
    }
}

/// Σ(in·out + out) over all layers.
pub fn count_params(arch: &Arch) -> u64 {
    arch.layers().map(|(i, o)| (i * o + o) as u64).sum()
}

/// Forward FLOPs for one sample: one multiply and one add per MAC, bias
/// folded into the adds.
pub fn count_forward_flops(arch: &Arch) -> u64 {
    arch.layers().map(|(i, o)| 2 * (i * o) as u64).sum()
}

/// One dense layer; `weight` is row-major `[output, input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Weights and biases of an MLP. This is the object FedAvg averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(arch: &Arch) -> Self {
        let layers = arch
            .layers()
            .map(|(i, o)| Layer {
                input: i,
                output: o,
                weight: vec![0.0; i * o],
                bias: vec![0.0; o],
            })
            .collect();
        ModelParams {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameter buffers in a fixed order: w1, b1, w2, b2, ...
    pub fn buffers(&self) -> impl Iterator<Item = &[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Vec<f32>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Largest absolute elementwise difference; `None` on arch mismatch.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Option<f32> {
        if self.arch != other.arch {
            return None;
        }
        let mut worst = 0.0f32;
        for (a, b) in self.buffers().zip(other.buffers()) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }

    /// Encode as `[w1, b1, w2, b2, ...]` tensors.
    pub fn to_tensors(&self) -> Vec<DenseTensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(
                DenseTensor::from_f32(vec![l.output as u32, l.input as u32], l.weight.clone())
                    .expect("layer weight matches its shape"),
            );
            out.push(DenseTensor::vector(l.bias.clone()));
        }
        out
    }

    /// Inverse of [`ModelParams::to_tensors`]; the architecture is recovered
    /// from the tensor shapes.
    pub fn from_tensors(tensors: &[DenseTensor]) -> Result<Self, MlError> {
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(MlError::Malformed(format!(
                "expected weight/bias pairs, got {} tensors",
                tensors.len()
            )));
        }
        let mut widths = Vec::new();
        let mut layers = Vec::new();
        for pair in tensors.chunks(2) {
            let (w, b) = (&pair[0], &pair[1]);
            let &[out, inp] = w.shape() else {
                return Err(MlError::Malformed(format!("weight shape {:?}", w.shape())));
            };
            if b.shape() != [out] {
                return Err(MlError::Malformed(format!(
                    "bias shape {:?} for weight {:?}",
                    b.shape(),
                    w.shape()
                )));
            }
            if let Some(&prev) = widths.last() {
                if prev != inp as usize {
                    return Err(MlError::Malformed(format!(
                        "layer input {inp} does not chain onto width {prev}"
                    )));
                }
            } else {
                widths.push(inp as usize);
            }
            widths.push(out as usize);
            layers.push(Layer {
                input: inp as usize,
                output: out as usize,
                weight: w.as_f32().map_err(|e| MlError::Malformed(e.to_string()))?.to_vec(),
                bias: b.as_f32().map_err(|e| MlError::Malformed(e.to_string()))?.to_vec(),
            });
        }
        Ok(ModelParams {
            arch: Arch::new(widths)?,
            layers,
        })
    }
}

/// Weights ~ U(−√(1/in), +√(1/in)), biases zero. Deterministic per seed.
pub fn mlp_init(arch: &Arch, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(arch);
    for layer in params.layers_mut() {
        let bound = (1.0 / layer.input as f32).sqrt();
        for w in &mut layer.weight {
            *w = rng.gen_range(-bound..bound);
        }
    }
    params
}

/// Row-major logits `[batch, out]` for a row-major `[batch, in]` input.
pub(crate) fn forward_rows(params: &ModelParams, input: &[f32], batch: usize) -> Vec<f32> {
    let mut act = input.to_vec();
    let last = params.layers.len() - 1;
    for (idx, layer) in params.layers.iter().enumerate() {
        let mut z = affine(layer, &act, batch);
        if idx < last {
            relu_in_place(&mut z);
        }
        act = z;
    }
    act
}

/// `x · Wᵀ + b` for a batch of rows.
pub(crate) fn affine(layer: &Layer, x: &[f32], batch: usize) -> Vec<f32> {
    let mut z = Vec::with_capacity(batch * layer.output);
    for _ in 0..batch {
        z.extend_from_slice(&layer.bias);
    }
    gemm(
        1.0,
        MatRef::row_major(x, batch, layer.input),
        MatRef::transposed(&layer.weight, layer.output, layer.input),
        1.0,
        &mut z,
    );
    z
}

pub(crate) fn relu_in_place(v: &mut [f32]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Hidden layers apply affine + ReLU, the last layer is affine only.
pub fn forward(params: &ModelParams, batch: &DenseTensor) -> Result<DenseTensor, MlError> {
    let [rows, cols] = *batch.shape() else {
        return Err(MlError::ShapeMismatch(format!(
            "expected a [batch, {}] input, got {:?}",
            params.arch.input(),
            batch.shape()
        )));
    };
    if cols as usize != params.arch.input() {
        return Err(MlError::ShapeMismatch(format!(
            "input width {cols} does not match arch {}",
            params.arch
        )));
    }
    let x = batch.as_f32().map_err(|e| MlError::ShapeMismatch(e.to_string()))?;
    let logits = forward_rows(params, x, rows as usize);
    Ok(DenseTensor::from_f32(vec![rows, params.arch.output() as u32], logits)
        .expect("logits sized from arch"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_arch_counts() {
        let arch: Arch = "784-64-32-10".parse().unwrap();
        // 784*64+64 + 64*32+32 + 32*10+10
        assert_eq!(count_params(&arch), 50_240 + 2_080 + 330);
        assert_eq!(count_params(&arch), 52_650);
        assert_eq!(count_forward_flops(&arch), 2 * (784 * 64 + 64 * 32 + 32 * 10));
        assert_eq!(count_forward_flops(&arch), 105_088);
        assert_eq!(mlp_init(&arch, 1).param_count() as u64, count_params(&arch));
    }

    #[test]
    fn small_arch_counts() {
        let a: Arch = "784-10".parse().unwrap();
        assert_eq!((count_params(&a), count_forward_flops(&a)), (7_850, 15_680));
        let one: Arch = "1-1".parse().unwrap();
        assert_eq!((count_params(&one), count_forward_flops(&one)), (2, 2));
    }

    #[test]
    fn invalid_arch_is_rejected() {
        assert!("784".parse::<Arch>().is_err());
        assert!("784-0-10".parse::<Arch>().is_err());
        assert!("784-x-10".parse::<Arch>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Arch::mnist();
        let a = mlp_init(&arch, 7);
        assert_eq!(a, mlp_init(&arch, 7));
        assert_ne!(a, mlp_init(&arch, 8));
        for layer in a.layers() {
            let bound = (1.0 / layer.input as f32).sqrt();
            assert!(layer.weight.iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let p = ModelParams::zeros(&Arch::mnist());
        let x = DenseTensor::from_f32(vec![3, 784], vec![0.5; 3 * 784]).unwrap();
        let y = forward(&p, &x).unwrap();
        assert_eq!(y.shape(), &[3, 10]);
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_logits_equal_bias_when_weights_vanish() {
        let mut p = ModelParams::zeros(&"784-10".parse().unwrap());
        p.layers_mut()[0].bias = (0..10).map(|i| i as f32).collect();
        let x = DenseTensor::from_f32(vec![2, 784], (0..2 * 784).map(|i| i as f32 / 100.0).collect())
            .unwrap();
        let y = forward(&p, &x).unwrap();
        for row in y.as_f32().unwrap().chunks(10) {
            assert_eq!(row, (0..10).map(|i| i as f32).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::zeros(&Arch::mnist());
        let x = DenseTensor::from_f32(vec![1, 10], vec![0.0; 10]).unwrap();
        assert!(matches!(forward(&p, &x), Err(MlError::ShapeMismatch(_))));
    }

    #[test]
    fn tensor_encoding_round_trips() {
        let p = mlp_init(&"6-4-3".parse().unwrap(), 3);
        assert_eq!(ModelParams::from_tensors(&p.to_tensors()).unwrap(), p);
        let mut t = p.to_tensors();
        t.pop();
        assert!(ModelParams::from_tensors(&t).is_err());
    }
}
