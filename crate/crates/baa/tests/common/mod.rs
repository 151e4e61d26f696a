//! Shared helpers for integration tests.

use baa::tensor::gradcheck::{check_gradients, CheckReport};
use baa::tensor::ops;
use baa::tensor::{Tape, Tensor, Var};

/// Deterministic pseudo-random tensor in (-1, 1), splitmix-style hashing so
/// test inputs never depend on RNG crate internals.
pub fn probe_tensor(shape: &[usize], salt: u64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let mut z = (i as u64).wrapping_add(salt).wrapping_mul(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z % 2_000_000) as f64 / 1_000_000.0 - 1.0
    })
}

/// Like [`probe_tensor`] but keeps every element at least `margin` away from
/// `avoid`, for ops with a derivative kink there.
pub fn probe_tensor_away_from(shape: &[usize], salt: u64, avoid: f64, margin: f64) -> Tensor<f64> {
    probe_tensor(shape, salt).map(|v| {
        if (v - avoid).abs() < margin {
            avoid + margin * if v >= avoid { 2.0 } else { -2.0 }
        } else {
            v
        }
    })
}

/// Scalarises an output tensor with a fixed non-uniform probe so every output
/// element influences the loss differently.
pub fn probe_loss<'t>(y: Var<'t, f64>) -> Var<'t, f64> {
    let shape = y.shape();
    let probe = probe_tensor(&shape, 0xabcdef);
    let p = y.tape().constant(probe);
    y.mul(p).expect("probe shaped like output").sum()
}

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const PROBES_PER_TENSOR: usize = 96;

/// Runs the finite-difference check for every differentiable primitive.
/// Returns (name, report) pairs so callers can assert or print them.
pub fn primitive_gradient_checks() -> Vec<(&'static str, CheckReport)> {
    let mut out: Vec<(&'static str, CheckReport)> = Vec::new();
    let mut check = |name: &'static str,
                     inputs: Vec<Tensor<f64>>,
                     f: Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>>| {
        let report = check_gradients(&inputs, PROBES_PER_TENSOR, FD_STEP, f);
        out.push((name, report));
    };

    check(
        "add",
        vec![probe_tensor(&[3, 4], 1), probe_tensor(&[3, 4], 2)],
        Box::new(|_, v| probe_loss(v[0].add(v[1]).unwrap())),
    );
    check(
        "sub",
        vec![probe_tensor(&[3, 4], 3), probe_tensor(&[3, 4], 4)],
        Box::new(|_, v| probe_loss(v[0].sub(v[1]).unwrap())),
    );
    check(
        "mul",
        vec![probe_tensor(&[3, 4], 5), probe_tensor(&[3, 4], 6)],
        Box::new(|_, v| probe_loss(v[0].mul(v[1]).unwrap())),
    );
    check(
        "scale",
        vec![probe_tensor(&[7], 7)],
        Box::new(|_, v| probe_loss(v[0].scale(-2.5))),
    );
    check(
        "matmul",
        vec![probe_tensor(&[3, 5], 8), probe_tensor(&[5, 4], 9)],
        Box::new(|_, v| probe_loss(v[0].matmul(v[1]).unwrap())),
    );
    check(
        "relu",
        vec![probe_tensor_away_from(&[4, 9], 10, 0.0, 0.05)],
        Box::new(|_, v| probe_loss(v[0].relu())),
    );
    check(
        "leaky_relu",
        vec![probe_tensor_away_from(&[4, 9], 11, 0.0, 0.05)],
        Box::new(|_, v| probe_loss(v[0].leaky_relu(0.2))),
    );
    check(
        "sigmoid",
        vec![probe_tensor(&[5, 5], 12)],
        Box::new(|_, v| probe_loss(v[0].sigmoid())),
    );
    check(
        "softplus",
        vec![probe_tensor(&[5, 5], 13).map(|v| v * 4.0)],
        Box::new(|_, v| probe_loss(v[0].softplus())),
    );
    check(
        "log_clamped",
        vec![probe_tensor(&[5, 5], 14).map(|v| v.abs() + 0.1)],
        Box::new(|_, v| probe_loss(v[0].log_clamped(1e-12))),
    );
    check(
        "clamp",
        vec![probe_tensor_away_from(&[5, 5], 15, 0.5, 0.05)
            .map(|v| if (v + 0.5).abs() < 0.05 { v + 0.1 } else { v })],
        Box::new(|_, v| probe_loss(v[0].clamp(-0.5, 0.5))),
    );
    check(
        "softmax_rows",
        vec![probe_tensor(&[4, 7], 16).map(|v| v * 3.0)],
        Box::new(|_, v| probe_loss(v[0].softmax_rows().unwrap())),
    );
    check(
        "pairwise_sq_dist",
        vec![probe_tensor(&[5, 3], 17), probe_tensor(&[6, 3], 18)],
        Box::new(|_, v| probe_loss(v[0].pairwise_sq_dist(v[1]).unwrap())),
    );
    check(
        "sum",
        vec![probe_tensor(&[3, 3], 19)],
        Box::new(|_, v| v[0].sum()),
    );
    check(
        "mean",
        vec![probe_tensor(&[3, 3], 20)],
        Box::new(|_, v| v[0].mean()),
    );
    check(
        "reshape",
        vec![probe_tensor(&[2, 6], 21)],
        Box::new(|_, v| probe_loss(v[0].reshape(&[3, 4]).unwrap())),
    );
    check(
        "slice_rows",
        vec![probe_tensor(&[6, 4], 22)],
        Box::new(|_, v| probe_loss(v[0].slice_rows(1, 3).unwrap())),
    );
    check(
        "nchw_to_rows",
        vec![probe_tensor(&[2, 3, 2, 2], 23)],
        Box::new(|_, v| probe_loss(v[0].nchw_to_rows().unwrap())),
    );
    check(
        "rows_to_nchw",
        vec![probe_tensor(&[8, 3], 45)],
        Box::new(|_, v| probe_loss(v[0].rows_to_nchw(2, 2).unwrap())),
    );
    check(
        "concat_rows",
        vec![
            probe_tensor(&[2, 4], 24),
            probe_tensor(&[3, 4], 25),
            probe_tensor(&[1, 4], 26),
        ],
        Box::new(|t, v| probe_loss(ops::concat_rows(t, v).unwrap())),
    );
    check(
        "concat_channels",
        vec![probe_tensor(&[2, 2, 3, 3], 27), probe_tensor(&[2, 3, 3, 3], 28)],
        Box::new(|_, v| probe_loss(v[0].concat_channels(v[1]).unwrap())),
    );
    check(
        "add_chan_bias",
        vec![probe_tensor(&[2, 3, 4, 4], 29), probe_tensor(&[3], 30)],
        Box::new(|_, v| probe_loss(v[0].add_chan_bias(v[1]).unwrap())),
    );
    check(
        "add_row_bias",
        vec![probe_tensor(&[5, 3], 31), probe_tensor(&[3], 32)],
        Box::new(|_, v| probe_loss(v[0].add_row_bias(v[1]).unwrap())),
    );
    check(
        "conv2d_k3_s1_p1",
        vec![probe_tensor(&[2, 3, 6, 6], 33), probe_tensor(&[4, 3, 3, 3], 34)],
        Box::new(|_, v| probe_loss(v[0].conv2d(v[1], 1, 1).unwrap())),
    );
    check(
        "conv2d_k3_s2_p1",
        vec![probe_tensor(&[2, 3, 8, 8], 35), probe_tensor(&[4, 3, 3, 3], 36)],
        Box::new(|_, v| probe_loss(v[0].conv2d(v[1], 2, 1).unwrap())),
    );
    check(
        "conv2d_k5_s2_p2",
        vec![probe_tensor(&[2, 2, 8, 8], 37), probe_tensor(&[3, 2, 5, 5], 38)],
        Box::new(|_, v| probe_loss(v[0].conv2d(v[1], 2, 2).unwrap())),
    );
    check(
        "conv2d_k1_s1_p0",
        vec![probe_tensor(&[2, 4, 5, 5], 39), probe_tensor(&[3, 4, 1, 1], 40)],
        Box::new(|_, v| probe_loss(v[0].conv2d(v[1], 1, 0).unwrap())),
    );
    check(
        "tconv2x2",
        vec![probe_tensor(&[2, 4, 3, 3], 41), probe_tensor(&[4, 3, 2, 2], 42)],
        Box::new(|_, v| probe_loss(v[0].tconv2x2(v[1]).unwrap())),
    );
    check(
        "batch_norm_train",
        vec![
            probe_tensor(&[3, 4, 5, 5], 43),
            probe_tensor(&[4], 44).map(|v| v + 1.5),
            probe_tensor(&[4], 45),
        ],
        Box::new(|_, v| {
            probe_loss(ops::batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().out)
        }),
    );
    check(
        "batch_norm_eval",
        vec![
            probe_tensor(&[3, 4, 5, 5], 46),
            probe_tensor(&[4], 47).map(|v| v + 1.5),
            probe_tensor(&[4], 48),
        ],
        Box::new(|_, v| {
            let mean = [0.1, -0.2, 0.05, 0.3];
            let var = [1.1, 0.9, 1.4, 0.6];
            probe_loss(ops::batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap())
        }),
    );
    out
}
