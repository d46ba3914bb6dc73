//! Finite-difference gradient checking for every layer kind.
//!
//! The numeric side uses central differences over forward evaluations only,
//! so it stays independent of the analytic backward implementations it
//! verifies.

use crate::nn::layers::{
    attention_backward, attention_forward, conv2d_backward, conv2d_forward, group_norm_backward,
    group_norm_forward, linear_backward, linear_forward, silu_backward, silu_forward,
    upsample_nearest2_backward, upsample_nearest2_forward, AttentionParams,
};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Layer kinds exercised by the finite-difference suite.
#[derive(Debug, Clone, Copy)]
pub enum CheckLayer {
    Conv3x3 { in_ch: usize, out_ch: usize, stride: usize },
    Conv1x1 { in_ch: usize, out_ch: usize },
    GroupNorm { channels: usize, groups: usize },
    Silu,
    SelfAttention { channels: usize, heads: usize, groups: usize },
    UpNearest2,
    Linear { in_dim: usize, out_dim: usize },
}

impl CheckLayer {
    pub fn name(&self) -> &'static str {
        match self {
            CheckLayer::Conv3x3 { stride: 1, .. } => "conv3x3",
            CheckLayer::Conv3x3 { .. } => "down_stride2",
            CheckLayer::Conv1x1 { .. } => "conv1x1",
            CheckLayer::GroupNorm { .. } => "group_norm",
            CheckLayer::Silu => "silu",
            CheckLayer::SelfAttention { .. } => "self_attention",
            CheckLayer::UpNearest2 => "up_nearest2",
            CheckLayer::Linear { .. } => "linear",
        }
    }

    pub fn param_shapes(&self, input_channels: usize) -> Vec<Vec<usize>> {
        match *self {
            CheckLayer::Conv3x3 { in_ch, out_ch, .. } => {
                vec![vec![out_ch, in_ch, 3, 3], vec![out_ch]]
            }
            CheckLayer::Conv1x1 { in_ch, out_ch } => vec![vec![out_ch, in_ch, 1, 1], vec![out_ch]],
            CheckLayer::GroupNorm { channels, .. } => vec![vec![channels], vec![channels]],
            CheckLayer::Silu | CheckLayer::UpNearest2 => vec![],
            CheckLayer::SelfAttention { channels, .. } => {
                let mut shapes = vec![vec![channels], vec![channels]];
                for _ in 0..4 {
                    shapes.push(vec![channels, channels]);
                    shapes.push(vec![channels]);
                }
                shapes
            }
            CheckLayer::Linear { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
        }
        .into_iter()
        .map(|s| {
            let _ = input_channels;
            s
        })
        .collect()
    }

    pub fn forward(&self, x: &Tensor<f64>, params: &[Tensor<f64>]) -> Tensor<f64> {
        match *self {
            CheckLayer::Conv3x3 { stride, .. } => {
                conv2d_forward(x, &params[0], &params[1], stride).unwrap().0
            }
            CheckLayer::Conv1x1 { .. } => conv2d_forward(x, &params[0], &params[1], 1).unwrap().0,
            CheckLayer::GroupNorm { groups, .. } => {
                group_norm_forward(x, &params[0], &params[1], groups).unwrap().0
            }
            CheckLayer::Silu => silu_forward(x).0,
            CheckLayer::SelfAttention { heads, groups, .. } => {
                let p = AttentionParams {
                    gn_scale: &params[0],
                    gn_shift: &params[1],
                    groups,
                    wq: &params[2],
                    bq: &params[3],
                    wk: &params[4],
                    bk: &params[5],
                    wv: &params[6],
                    bv: &params[7],
                    wo: &params[8],
                    bo: &params[9],
                };
                attention_forward(x, &p, heads).unwrap().0
            }
            CheckLayer::UpNearest2 => upsample_nearest2_forward(x).unwrap(),
            CheckLayer::Linear { .. } => linear_forward(x, &params[0], &params[1]).unwrap().0,
        }
    }

    /// Analytic gradients for the scalar loss sum(upstream .* forward(x)).
    pub fn backward(
        &self,
        x: &Tensor<f64>,
        params: &[Tensor<f64>],
        upstream: &Tensor<f64>,
    ) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        match *self {
            CheckLayer::Conv3x3 { stride, .. } => {
                let (_, ctx) = conv2d_forward(x, &params[0], &params[1], stride).unwrap();
                let (dx, dw, db) = conv2d_backward(&ctx, &params[0], upstream);
                (dx, vec![dw, db])
            }
            CheckLayer::Conv1x1 { .. } => {
                let (_, ctx) = conv2d_forward(x, &params[0], &params[1], 1).unwrap();
                let (dx, dw, db) = conv2d_backward(&ctx, &params[0], upstream);
                (dx, vec![dw, db])
            }
            CheckLayer::GroupNorm { groups, .. } => {
                let (_, ctx) = group_norm_forward(x, &params[0], &params[1], groups).unwrap();
                let (dx, dg, db) = group_norm_backward(&ctx, &params[0], upstream);
                (dx, vec![dg, db])
            }
            CheckLayer::Silu => {
                let (_, ctx) = silu_forward(x);
                (silu_backward(&ctx, upstream), vec![])
            }
            CheckLayer::SelfAttention { heads, groups, .. } => {
                let p = AttentionParams {
                    gn_scale: &params[0],
                    gn_shift: &params[1],
                    groups,
                    wq: &params[2],
                    bq: &params[3],
                    wk: &params[4],
                    bk: &params[5],
                    wv: &params[6],
                    bv: &params[7],
                    wo: &params[8],
                    bo: &params[9],
                };
                let (_, ctx) = attention_forward(x, &p, heads).unwrap();
                let (dx, g) = attention_backward(&ctx, &p, upstream);
                (
                    dx,
                    vec![
                        g.gn_scale, g.gn_shift, g.wq, g.bq, g.wk, g.bk, g.wv, g.bv, g.wo, g.bo,
                    ],
                )
            }
            CheckLayer::UpNearest2 => (upsample_nearest2_backward(upstream, x.shape()), vec![]),
            CheckLayer::Linear { .. } => {
                let (_, ctx) = linear_forward(x, &params[0], &params[1]).unwrap();
                let (dx, dw, db) = linear_backward(&ctx, &params[0], upstream);
                (dx, vec![dw, db])
            }
        }
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Norm scales near 1 keep normalization layers in a realistic regime.
fn nudge_norm_scales(layer: CheckLayer, mut params: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    if matches!(
        layer,
        CheckLayer::GroupNorm { .. } | CheckLayer::SelfAttention { .. }
    ) && !params.is_empty()
    {
        params[0] = params[0].map(|v| 1.0 + 0.3 * v);
    }
    params
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    // The absolute floor covers gradients that are exactly zero by symmetry
    // (the key bias cancels through softmax rows); central differences leave
    // ~1e-12 of rounding noise there which is not a backward defect.
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

/// Central finite differences (h = 1e-5) against the analytic backward for
/// one layer on a random input; returns the max relative error over every
/// parameter element and every input element.
pub fn finite_diff_layer(layer: CheckLayer, input_shape: &[usize], seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck", &[0]);
    let x = random_tensor(input_shape, &mut r);
    let params: Vec<Tensor<f64>> = layer
        .param_shapes(input_shape[0])
        .iter()
        .map(|s| random_tensor(s, &mut r))
        .collect();
    let params = nudge_norm_scales(layer, params);

    let y0 = layer.forward(&x, &params);
    let upstream = random_tensor(y0.shape(), &mut r);
    let loss = |x: &Tensor<f64>, params: &[Tensor<f64>]| -> f64 {
        let y = layer.forward(x, params);
        y.data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let (dx, dparams) = layer.backward(&x, &params, &upstream);

    let h = 1e-5;
    let mut max_err = 0.0_f64;

    let mut x_pert = x.clone();
    for i in 0..x.numel() {
        let orig = x_pert.data()[i];
        x_pert.data_mut()[i] = orig + h;
        let lp = loss(&x_pert, &params);
        x_pert.data_mut()[i] = orig - h;
        let lm = loss(&x_pert, &params);
        x_pert.data_mut()[i] = orig;
        max_err = max_err.max(rel_err(dx.data()[i], (lp - lm) / (2.0 * h)));
    }

    let mut p_pert = params.clone();
    for (pi, dp) in dparams.iter().enumerate() {
        for i in 0..dp.numel() {
            let orig = p_pert[pi].data()[i];
            p_pert[pi].data_mut()[i] = orig + h;
            let lp = loss(&x, &p_pert);
            p_pert[pi].data_mut()[i] = orig - h;
            let lm = loss(&x, &p_pert);
            p_pert[pi].data_mut()[i] = orig;
            max_err = max_err.max(rel_err(dp.data()[i], (lp - lm) / (2.0 * h)));
        }
    }
    max_err
}

/// Finite-difference check of end-to-end parameter gradients through a chain
/// of layers. Shapes must be compatible in sequence.
pub fn finite_diff_chain(layers: &[CheckLayer], input_shape: &[usize], seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck-chain", &[0]);
    let x = random_tensor(input_shape, &mut r);
    let mut all_params: Vec<Vec<Tensor<f64>>> = Vec::new();
    let mut cur_shape = input_shape.to_vec();
    for layer in layers {
        let params: Vec<Tensor<f64>> = layer
            .param_shapes(cur_shape[0])
            .iter()
            .map(|s| random_tensor(s, &mut r))
            .collect();
        let params = nudge_norm_scales(*layer, params);
        let probe = layer.forward(&Tensor::zeros(&cur_shape), &params);
        cur_shape = probe.shape().to_vec();
        all_params.push(params);
    }

    let forward_all = |x: &Tensor<f64>, all: &[Vec<Tensor<f64>>]| -> Tensor<f64> {
        let mut h = x.clone();
        for (layer, params) in layers.iter().zip(all) {
            h = layer.forward(&h, params);
        }
        h
    };

    let y0 = forward_all(&x, &all_params);
    let upstream = random_tensor(y0.shape(), &mut r);
    let loss = |x: &Tensor<f64>, all: &[Vec<Tensor<f64>>]| -> f64 {
        forward_all(x, all)
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    // Analytic pass: forward saving intermediates, then chain backward.
    let mut inputs = vec![x.clone()];
    for (layer, params) in layers.iter().zip(&all_params) {
        let next = layer.forward(inputs.last().unwrap(), params);
        inputs.push(next);
    }
    let mut grad = upstream.clone();
    let mut dparams_rev: Vec<Vec<Tensor<f64>>> = Vec::new();
    for (i, layer) in layers.iter().enumerate().rev() {
        let (dx, dp) = layer.backward(&inputs[i], &all_params[i], &grad);
        dparams_rev.push(dp);
        grad = dx;
    }
    dparams_rev.reverse();

    let h = 1e-5;
    let mut max_err = 0.0_f64;
    let mut pert = all_params.clone();
    for li in 0..layers.len() {
        for pi in 0..pert[li].len() {
            for i in 0..pert[li][pi].numel() {
                let orig = pert[li][pi].data()[i];
                pert[li][pi].data_mut()[i] = orig + h;
                let lp = loss(&x, &pert);
                pert[li][pi].data_mut()[i] = orig - h;
                let lm = loss(&x, &pert);
                pert[li][pi].data_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                max_err = max_err.max(rel_err(dparams_rev[li][pi].data()[i], numeric));
            }
        }
    }
    max_err
}

/// The layer kinds at small shapes used by the verification suite.
pub fn standard_suite() -> Vec<(CheckLayer, Vec<usize>)> {
    vec![
        (
            CheckLayer::Conv3x3 {
                in_ch: 3,
                out_ch: 4,
                stride: 1,
            },
            vec![3, 4, 4],
        ),
        (
            CheckLayer::Conv3x3 {
                in_ch: 3,
                out_ch: 4,
                stride: 2,
            },
            vec![3, 4, 4],
        ),
        (
            CheckLayer::Conv1x1 {
                in_ch: 4,
                out_ch: 3,
            },
            vec![4, 3, 3],
        ),
        (
            CheckLayer::GroupNorm {
                channels: 4,
                groups: 2,
            },
            vec![4, 3, 3],
        ),
        (CheckLayer::Silu, vec![2, 3, 3]),
        (
            CheckLayer::SelfAttention {
                channels: 4,
                heads: 1,
                groups: 2,
            },
            vec![4, 2, 2],
        ),
        (
            CheckLayer::SelfAttention {
                channels: 4,
                heads: 2,
                groups: 2,
            },
            vec![4, 2, 2],
        ),
        (CheckLayer::UpNearest2, vec![2, 2, 2]),
        (
            CheckLayer::Linear {
                in_dim: 5,
                out_dim: 4,
            },
            vec![5],
        ),
    ]
}
