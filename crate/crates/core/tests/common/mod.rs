#![allow(dead_code)]

use esmfl_core::model::{Layer, LayerParams};
use esmfl_core::pruning::{admm_init, admm_u_step, admm_z_step, SparsityConfig};
use esmfl_core::{Batch, Model, ModelArch, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Small architectures that together contain every layer type.
pub fn gradient_check_archs() -> Vec<(&'static str, ModelArch)> {
    vec![
        ("dense", ModelArch::mlp(&[5, 4, 3])),
        (
            "conv2d",
            ModelArch {
                input_shape: vec![2, 6, 6],
                num_classes: 3,
                layers: vec![
                    Layer::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1 },
                    Layer::Flatten,
                    Layer::Dense { inputs: 48, outputs: 3 },
                ],
            },
        ),
        (
            "conv2d_stride2",
            ModelArch {
                input_shape: vec![1, 7, 7],
                num_classes: 3,
                layers: vec![
                    Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2 },
                    Layer::Flatten,
                    Layer::Dense { inputs: 18, outputs: 3 },
                ],
            },
        ),
        (
            "relu",
            ModelArch {
                input_shape: vec![1, 5, 5],
                num_classes: 4,
                layers: vec![
                    Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 2, stride: 1 },
                    Layer::Relu,
                    Layer::Flatten,
                    Layer::Dense { inputs: 32, outputs: 4 },
                ],
            },
        ),
        (
            "maxpool",
            ModelArch {
                input_shape: vec![1, 9, 9],
                num_classes: 3,
                layers: vec![
                    Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 2, stride: 1 },
                    Layer::MaxPool { size: 2 },
                    Layer::Flatten,
                    Layer::Dense { inputs: 32, outputs: 3 },
                ],
            },
        ),
        (
            "flatten",
            ModelArch {
                input_shape: vec![2, 2, 2],
                num_classes: 2,
                layers: vec![Layer::Flatten, Layer::Dense { inputs: 8, outputs: 2 }],
            },
        ),
    ]
}

pub fn random_batch(arch: &ModelArch, size: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width: usize = arch.input_shape.iter().product();
    let mut shape = vec![size];
    shape.extend_from_slice(&arch.input_shape);
    let inputs = (0..size * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..size).map(|_| rng.gen_range(0..arch.num_classes)).collect();
    Batch::new(Tensor::new(shape, inputs).unwrap(), labels).unwrap()
}

/// Initial parameters with non-zero biases so bias gradients are exercised.
pub fn jittered_params(model: &Model, seed: u64) -> ParameterSet {
    let mut p = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for layer in p.layers_mut() {
        for b in layer.bias.data_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    p
}

/// Largest relative error between the analytic gradient and central
/// differences, over every parameter or a seeded sample of `limit` of them.
pub fn max_gradient_error(arch: ModelArch, seed: u64, limit: Option<usize>) -> f64 {
    let model = Model::new(arch.clone()).unwrap();
    let params = jittered_params(&model, seed);
    let batch = random_batch(&arch, 3, seed + 1);
    let analytic: Vec<f64> = model.backward(&params, &batch).unwrap().values().collect();
    let n = analytic.len();
    let coords: Vec<usize> = match limit {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            (0..k).map(|_| rng.gen_range(0..n)).collect()
        }
        _ => (0..n).collect(),
    };
    let loss_at = |i: usize, delta: f64| {
        let mut p = params.clone();
        *p.values_mut().nth(i).unwrap() += delta;
        model.forward_loss(&p, &batch).unwrap().0
    };
    coords
        .into_iter()
        .map(|i| {
            let numeric = (loss_at(i, FD_STEP) - loss_at(i, -FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[i];
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5)
        })
        .fold(0.0, f64::max)
}

/// Best cardinality-`k` approximation by exhaustive search over supports.
/// Among equally close supports the lexicographically smallest index set
/// wins.
pub fn exhaustive_projection(v: &[f64], k: usize) -> Vec<f64> {
    let n = v.len();
    let k = k.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let support: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
        // Summed in sorted order so equal excluded multisets give bit-equal distances.
        let mut dropped: Vec<f64> = (0..n).filter(|i| bits & (1 << i) == 0).map(|i| v[i] * v[i]).collect();
        dropped.sort_by(f64::total_cmp);
        let dist: f64 = dropped.iter().sum();
        let better = match &best {
            None => true,
            Some((d, s)) => dist < *d || (dist == *d && support < *s),
        };
        if better {
            best = Some((dist, support));
        }
    }
    let support = best.map(|b| b.1).unwrap_or_default();
    (0..n).map(|i| if support.contains(&i) { v[i] } else { 0.0 }).collect()
}

pub fn single_layer(id: &str, rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> LayerParams {
    LayerParams {
        id: id.into(),
        weight: Tensor::new(vec![rows, cols], weights).unwrap(),
        bias: Tensor::new(vec![bias.len()], bias).unwrap(),
    }
}

/// ADMM on `f(W) = 0.5 ||W - A||^2` with the exact W-step
/// `W = (A + rho (Z - U)) / (1 + rho)`; returns `||W - Z||_F` per iteration.
pub fn quadratic_admm_residuals(target: &[f64], keep: f64, rho: f64, iters: usize) -> Vec<f64> {
    let n = target.len();
    let a = ParameterSet::new(vec![single_layer("fc1", 1, n, target.to_vec(), vec![0.0])]).unwrap();
    let cfg = SparsityConfig::from_keep_fractions(&a, &BTreeMap::from([("fc1".to_string(), keep)])).unwrap();
    let mut state = admm_init(&a, &cfg, rho).unwrap();
    let mut residuals = Vec::with_capacity(iters);
    for _ in 0..iters {
        let layer = &state.layers()[0];
        let w: Vec<f64> = target
            .iter()
            .zip(layer.z.data())
            .zip(layer.u.data())
            .map(|((a, z), u)| (a + rho * (z - u)) / (1.0 + rho))
            .collect();
        let w_params = ParameterSet::new(vec![single_layer("fc1", 1, n, w, vec![0.0])]).unwrap();
        state = admm_z_step(&w_params, &state).unwrap();
        state = admm_u_step(&w_params, &state).unwrap();
        residuals.push(state.primal_residual_sq(&w_params).sqrt());
    }
    residuals
}

/// Encoded CSR blob length from first principles.
pub fn csr_blob_len(layers: &[(&str, Vec<usize>, usize, usize)]) -> usize {
    8 + layers
        .iter()
        .map(|(id, shape, bias, nnz)| {
            1 + id.len() + 1 + 4 * shape.len() + 4 + 4 + 4 * (shape[0] + 1) + 8 * nnz + 4 * bias
        })
        .sum::<usize>()
}

/// Encoded dense blob length from first principles.
pub fn dense_blob_len(layers: &[(&str, Vec<usize>, usize)]) -> usize {
    8 + layers
        .iter()
        .map(|(id, shape, bias)| {
            1 + id.len() + 1 + 4 * shape.len() + 4 + 4 * shape.iter().product::<usize>() + 4 * bias
        })
        .sum::<usize>()
}
