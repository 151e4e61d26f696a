//! Dual discriminators and the balanced adversarial objective.
//!
//! Two discriminators score embedding grids: `D_ts` learns to rate source
//! embeddings high (in log) while driving its value on target embeddings
//! down, `D_st` the mirror image. The embedder minimises the sum of both
//! discriminator objectives, so each domain is pulled towards the other
//! with forces weighted by alpha (source side) and beta (target side).
//!
//! The discrete toy machinery exists to verify the objective against its
//! closed form: for fixed densities the optimal discriminators and the
//! optimum value are analytic, and tiny discriminators trained on exact
//! expectations must reproduce them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthworld::mix_seed;
use crate::tensor::nn::{BatchNorm2d, BoundConv2d, BoundDense, Conv2d, Dense};
use crate::tensor::{Adam, BnMode, Scalar, Tape, Tensor, TensorError, Var};

/// Channel width of both discriminator conv layers.
pub const DISC_WIDTH: usize = 32;
/// Discriminator outputs are clamped into this range; log stays finite and
/// a runaway discriminator cannot overflow the objective.
pub const SCORE_FLOOR: f64 = 1e-6;
pub const SCORE_CEIL: f64 = 1e6;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("balance weights must be positive and finite, got alpha={alpha}, beta={beta}")]
    BadWeights { alpha: f64, beta: f64 },
    #[error("bad toy distribution: {0}")]
    BadDistribution(String),
    #[error("source and target batches must match: {lhs:?} vs {rhs:?}")]
    BatchMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The alpha/beta pull strengths of the two KL directions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BalanceWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl BalanceWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, AdversaryError> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(AdversaryError::BadWeights { alpha, beta });
        }
        Ok(BalanceWeights { alpha, beta })
    }
}

impl Default for BalanceWeights {
    fn default() -> Self {
        BalanceWeights {
            alpha: 0.02,
            beta: 0.04,
        }
    }
}

// ---- discriminator ----

/// Strided-conv classifier over an embedding grid, ending in a strictly
/// positive scalar per image. First conv has no batch norm (it carries a
/// bias instead); the head is softplus-clamped into
/// `[SCORE_FLOOR, SCORE_CEIL]`.
pub struct Discriminator<T: Scalar = f32> {
    grid_side: usize,
    channels: usize,
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    bn: BatchNorm2d<T>,
    head: Dense<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(seed: u64, grid_side: usize, channels: usize) -> Self {
        assert!(
            grid_side >= 2 && grid_side % 2 == 0,
            "grid side must be even and at least 2, got {grid_side}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x64697363));
        let half = grid_side / 2;
        Discriminator {
            grid_side,
            channels,
            conv1: Conv2d::new(&mut rng, channels, DISC_WIDTH, 5, 2, 2, true),
            conv2: Conv2d::new(&mut rng, DISC_WIDTH, DISC_WIDTH, 5, 1, 2, false),
            bn: BatchNorm2d::new(DISC_WIDTH),
            head: Dense::new(&mut rng, DISC_WIDTH * half * half, 1),
        }
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bind<'t>(
        &'t self,
        tape: &'t Tape<T>,
        trainable: bool,
        vars: &mut Vec<Var<'t, T>>,
    ) -> BoundDiscriminator<'t, T> {
        BoundDiscriminator {
            grid_side: self.grid_side,
            conv1: self.conv1.bind(tape, trainable, vars),
            conv2: self.conv2.bind(tape, trainable, vars),
            bn: self.bn.bind(tape, trainable, vars),
            head: self.head.bind(tape, trainable, vars),
        }
    }

    /// Parameters in bind order; the optimiser and checkpoints rely on it.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("conv1.w".into(), &self.conv1.w),
            ("conv1.b".into(), self.conv1.b.as_ref().expect("conv1 has bias")),
            ("conv2.w".into(), &self.conv2.w),
            ("bn.gamma".into(), &self.bn.gamma),
            ("bn.beta".into(), &self.bn.beta),
            ("head.w".into(), &self.head.w),
            ("head.b".into(), &self.head.b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("conv1.w".into(), &mut self.conv1.w),
            ("conv1.b".into(), self.conv1.b.as_mut().expect("conv1 has bias")),
            ("conv2.w".into(), &mut self.conv2.w),
            ("bn.gamma".into(), &mut self.bn.gamma),
            ("bn.beta".into(), &mut self.bn.beta),
            ("head.w".into(), &mut self.head.w),
            ("head.b".into(), &mut self.head.b),
        ]
    }

    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("bn.running_mean".into(), self.bn.running_mean.borrow().clone()),
            ("bn.running_var".into(), self.bn.running_var.borrow().clone()),
        ]
    }

    pub fn set_buffer(&self, name: &str, value: Tensor<T>) -> Result<(), AdversaryError> {
        let cell = match name {
            "bn.running_mean" => &self.bn.running_mean,
            "bn.running_var" => &self.bn.running_var,
            other => {
                return Err(AdversaryError::BadDistribution(format!(
                    "no discriminator buffer named {other}"
                )))
            }
        };
        let mut t = cell.borrow_mut();
        if t.shape() != value.shape() {
            return Err(AdversaryError::Tensor(TensorError::ShapeMismatch {
                op: "set_buffer",
                lhs: t.shape().to_vec(),
                rhs: value.shape().to_vec(),
            }));
        }
        *t = value;
        Ok(())
    }
}

pub struct BoundDiscriminator<'t, T: Scalar = f32> {
    grid_side: usize,
    conv1: BoundConv2d<'t, T>,
    conv2: BoundConv2d<'t, T>,
    bn: crate::tensor::nn::BoundBatchNorm2d<'t, T>,
    head: BoundDense<'t, T>,
}

impl<'t, T: Scalar> BoundDiscriminator<'t, T> {
    /// Embedding rows `(B * cells, C)` to strictly positive scores `(B, 1)`.
    pub fn score_rows(&self, rows: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>, TensorError> {
        let slope = T::from_f64(0.2);
        let x = rows.rows_to_nchw(self.grid_side, self.grid_side)?;
        let x = self.conv1.forward(x)?.leaky_relu(slope);
        let x = self.bn.forward(self.conv2.forward(x)?, mode)?.leaky_relu(slope);
        let shape = x.shape();
        let flat = shape[1] * shape[2] * shape[3];
        let x = x.reshape(&[shape[0], flat])?;
        Ok(self
            .head
            .forward(x)?
            .softplus()
            .clamp(T::from_f64(SCORE_FLOOR), T::from_f64(SCORE_CEIL)))
    }
}

// ---- objectives ----

fn check_batches<T: Scalar>(
    emb_source: &Var<'_, T>,
    emb_target: &Var<'_, T>,
) -> Result<(), AdversaryError> {
    let (ls, lt) = (emb_source.shape(), emb_target.shape());
    if ls != lt {
        return Err(AdversaryError::BatchMismatch { lhs: ls, rhs: lt });
    }
    Ok(())
}

/// Objective of `D_ts` (to maximise): mean over the batch of
/// `alpha * log D(source) - D(target)`.
pub fn disc_ts_loss<'t, T: Scalar>(
    d: &BoundDiscriminator<'t, T>,
    emb_source: Var<'t, T>,
    emb_target: Var<'t, T>,
    w: &BalanceWeights,
    mode: BnMode,
) -> Result<Var<'t, T>, AdversaryError> {
    check_batches(&emb_source, &emb_target)?;
    let ds = d.score_rows(emb_source, mode)?;
    let dt = d.score_rows(emb_target, mode)?;
    let log_term = ds.log_clamped(T::from_f64(LOG_FLOOR)).mean().scale(T::from_f64(w.alpha));
    Ok(log_term.sub(dt.mean())?)
}

/// Objective of `D_st` (to maximise): mean over the batch of
/// `beta * log D(target) - D(source)`.
pub fn disc_st_loss<'t, T: Scalar>(
    d: &BoundDiscriminator<'t, T>,
    emb_source: Var<'t, T>,
    emb_target: Var<'t, T>,
    w: &BalanceWeights,
    mode: BnMode,
) -> Result<Var<'t, T>, AdversaryError> {
    check_batches(&emb_source, &emb_target)?;
    let dt = d.score_rows(emb_target, mode)?;
    let ds = d.score_rows(emb_source, mode)?;
    let log_term = dt.log_clamped(T::from_f64(LOG_FLOOR)).mean().scale(T::from_f64(w.beta));
    Ok(log_term.sub(ds.mean())?)
}

/// Generator objective (to minimise): the sum of both discriminator
/// objectives evaluated on the same batch. Callers freeze the
/// discriminators by binding them non-trainable, so gradients reach only
/// the embeddings.
pub fn gen_loss<'t, T: Scalar>(
    d_ts: &BoundDiscriminator<'t, T>,
    d_st: &BoundDiscriminator<'t, T>,
    emb_source: Var<'t, T>,
    emb_target: Var<'t, T>,
    w: &BalanceWeights,
    mode: BnMode,
) -> Result<Var<'t, T>, AdversaryError> {
    let ts = disc_ts_loss(d_ts, emb_source, emb_target, w, mode)?;
    let st = disc_st_loss(d_st, emb_source, emb_target, w, mode)?;
    Ok(ts.add(st)?)
}

/// Final embedder loss: adversarial pull plus cross-entropy regularisation.
pub fn total_mapper_loss(gen_loss_value: f64, ce_loss_value: f64, lambda_ce: f64) -> f64 {
    gen_loss_value + lambda_ce * ce_loss_value
}

// ---- discrete verification harness ----

/// A pair of discrete densities over K symbols plus a feature vector per
/// symbol for discriminator input. Supports must coincide symbol by symbol
/// so both KL directions are finite.
#[derive(Clone, Debug)]
pub struct DiscreteToyPair {
    pub p_s: Vec<f64>,
    pub q_t: Vec<f64>,
    /// `(K, F)` one feature row per symbol.
    pub features: Tensor<f64>,
}

impl DiscreteToyPair {
    /// One-hot symbol features.
    pub fn new(p_s: Vec<f64>, q_t: Vec<f64>) -> Result<Self, AdversaryError> {
        let k = p_s.len();
        let mut features = Tensor::zeros(&[k, k]);
        for i in 0..k {
            features.data_mut()[i * k + i] = 1.0;
        }
        Self::with_features(p_s, q_t, features)
    }

    pub fn with_features(
        p_s: Vec<f64>,
        q_t: Vec<f64>,
        features: Tensor<f64>,
    ) -> Result<Self, AdversaryError> {
        let k = p_s.len();
        if k == 0 || q_t.len() != k {
            return Err(AdversaryError::BadDistribution(format!(
                "support sizes differ or are empty: {} vs {}",
                k,
                q_t.len()
            )));
        }
        if features.shape().len() != 2 || features.dim(0) != k {
            return Err(AdversaryError::BadDistribution(format!(
                "features must be (K, F), got {:?} for K = {k}",
                features.shape()
            )));
        }
        for (name, v) in [("p_s", &p_s), ("q_t", &q_t)] {
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(AdversaryError::BadDistribution(format!(
                    "{name} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = v.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(AdversaryError::BadDistribution(format!(
                    "{name} sums to {sum}, not 1"
                )));
            }
        }
        for i in 0..k {
            if (p_s[i] > 0.0) != (q_t[i] > 0.0) {
                return Err(AdversaryError::BadDistribution(format!(
                    "symbol {i} is in one support but not the other; KL would diverge"
                )));
            }
        }
        Ok(DiscreteToyPair { p_s, q_t, features })
    }

    pub fn support_size(&self) -> usize {
        self.p_s.len()
    }
}

/// Closed-form optimum of the dual objective on a toy pair.
#[derive(Clone, Debug)]
pub struct AnalyticOptimum {
    /// `alpha * p_s / q_t` per symbol (0 on symbols with no mass).
    pub d1_star: Vec<f64>,
    /// `beta * q_t / p_s` per symbol (0 on symbols with no mass).
    pub d2_star: Vec<f64>,
    /// `alpha(log alpha - 1) + beta(log beta - 1) + alpha KL(p||q) + beta KL(q||p)`.
    pub value: f64,
}

pub fn analytic_optimum(toy: &DiscreteToyPair, w: &BalanceWeights) -> AnalyticOptimum {
    let mut d1 = Vec::with_capacity(toy.support_size());
    let mut d2 = Vec::with_capacity(toy.support_size());
    let mut kl_pq = 0.0;
    let mut kl_qp = 0.0;
    for (&p, &q) in toy.p_s.iter().zip(&toy.q_t) {
        if p == 0.0 {
            d1.push(0.0);
            d2.push(0.0);
            continue;
        }
        d1.push(w.alpha * p / q);
        d2.push(w.beta * q / p);
        kl_pq += p * (p / q).ln();
        kl_qp += q * (q / p).ln();
    }
    let value = w.alpha * (w.alpha.ln() - 1.0)
        + w.beta * (w.beta.ln() - 1.0)
        + w.alpha * kl_pq
        + w.beta * kl_qp;
    AnalyticOptimum {
        d1_star: d1,
        d2_star: d2,
        value,
    }
}

/// Exact dual objective for given per-symbol discriminator outputs:
/// `alpha E_p[log d1] - E_q[d1] + beta E_q[log d2] - E_p[d2]`.
pub fn toy_objective(toy: &DiscreteToyPair, d1: &[f64], d2: &[f64], w: &BalanceWeights) -> f64 {
    let mut v = 0.0;
    for i in 0..toy.support_size() {
        let (p, q) = (toy.p_s[i], toy.q_t[i]);
        if p > 0.0 {
            v += w.alpha * p * d1[i].max(LOG_FLOOR).ln();
            v -= p * d2[i];
        }
        if q > 0.0 {
            v -= q * d1[i];
            v += w.beta * q * d2[i].max(LOG_FLOOR).ln();
        }
    }
    v
}

/// Tiny positive-output MLP for the toy harness.
struct ToyDiscriminator {
    l1: Dense<f64>,
    l2: Dense<f64>,
}

impl ToyDiscriminator {
    fn new(seed: u64, in_dim: usize, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x746f7964));
        ToyDiscriminator {
            l1: Dense::new(&mut rng, in_dim, hidden),
            l2: Dense::new(&mut rng, hidden, 1),
        }
    }

    /// Per-symbol scores as a graph over the toy features.
    fn scores<'t>(
        &self,
        tape: &'t Tape<f64>,
        features: &Tensor<f64>,
        vars: &mut Vec<Var<'t, f64>>,
    ) -> Result<Var<'t, f64>, TensorError> {
        let l1 = self.l1.bind(tape, true, vars);
        let l2 = self.l2.bind(tape, true, vars);
        let x = tape.constant(features.clone());
        Ok(l2
            .forward(l1.forward(x)?.leaky_relu(0.2))?
            .softplus()
            .clamp(SCORE_FLOOR, SCORE_CEIL))
    }

    fn outputs(&self, features: &Tensor<f64>) -> Vec<f64> {
        let tape: Tape<f64> = Tape::new();
        let mut vars = Vec::new();
        let s = self.scores(&tape, features, &mut vars).expect("toy shapes fixed");
        s.to_tensor().data().to_vec()
    }
}

/// Result of fitting both toy discriminators to convergence.
pub struct FittedToys {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// Exact dual objective at the fitted outputs.
    pub value: f64,
}

/// Trains two tiny discriminators on the EXACT expected objectives (the
/// densities are known, so no sampling is involved) and reports their
/// per-symbol outputs and the achieved objective value. With enough steps
/// this converges to `analytic_optimum` on any valid pair, which is the
/// oracle the adversarial losses are verified against.
///
/// Keep `lr` at 0.005 or below: the score clamp has zero gradient outside
/// its range, so a step that overshoots through the floor strands the
/// discriminator there with no restoring force. 20k steps at 0.005 lands
/// within ~1e-7 of the optimum on every tested pair.
pub fn fit_toy_discriminators(
    toy: &DiscreteToyPair,
    w: &BalanceWeights,
    steps: usize,
    lr: f64,
    seed: u64,
) -> FittedToys {
    let k = toy.support_size();
    let weight_col = |v: &[f64]| {
        let mut t = Tensor::<f64>::zeros(&[k, 1]);
        t.data_mut().copy_from_slice(v);
        t
    };
    let p_col = weight_col(&toy.p_s);
    let q_col = weight_col(&toy.q_t);

    // maximise a*sum(w_log .* log s) - sum(w_lin .* s) by minimising its
    // negation; exact gradients, deterministic trajectory
    let fit = |seed: u64, a: f64, w_log: &Tensor<f64>, w_lin: &Tensor<f64>| -> ToyDiscriminator {
        let mut d = ToyDiscriminator::new(seed, toy.features.dim(1), 32);
        let mut adam: Adam<f64> = Adam::new(lr);
        for _ in 0..steps {
            let tape: Tape<f64> = Tape::new();
            let mut vars = Vec::new();
            let s = d.scores(&tape, &toy.features, &mut vars).expect("toy shapes fixed");
            let log_part = s
                .log_clamped(LOG_FLOOR)
                .mul(tape.constant(w_log.clone()))
                .expect("weights shaped like scores")
                .sum()
                .scale(a);
            let lin_part = s
                .mul(tape.constant(w_lin.clone()))
                .expect("weights shaped like scores")
                .sum();
            let loss = log_part.sub(lin_part).expect("scalars").neg();
            let mut grads = tape.backward(loss).expect("scalar loss");
            let grad_list: Vec<Option<Tensor<f64>>> =
                vars.iter().map(|v| grads.take(*v)).collect();
            let mut params: Vec<&mut Tensor<f64>> = vec![
                &mut d.l1.w,
                &mut d.l1.b,
                &mut d.l2.w,
                &mut d.l2.b,
            ];
            adam.step(&mut params, &grad_list);
        }
        d
    };

    let d1 = fit(mix_seed(seed, 1), w.alpha, &p_col, &q_col);
    let d2 = fit(mix_seed(seed, 2), w.beta, &q_col, &p_col);
    let (o1, o2) = (d1.outputs(&toy.features), d2.outputs(&toy.features));
    let value = toy_objective(toy, &o1, &o2, w);
    FittedToys {
        d1: o1,
        d2: o2,
        value,
    }
}
