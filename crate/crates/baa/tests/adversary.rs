//! The adversarial objective against its closed form: trained toy
//! discriminators must land on the analytic optimum, the batched losses
//! must match independent recomputation, and gradients must check out
//! against finite differences and the KL-descent property.

use baa::adversary::{
    analytic_optimum, disc_st_loss, disc_ts_loss, fit_toy_discriminators, gen_loss,
    AdversaryError, BalanceWeights, Discriminator, DiscreteToyPair, SCORE_CEIL, SCORE_FLOOR,
};
use baa::tensor::{BnMode, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID: usize = 4;
const CHANNELS: usize = 6;
const CELLS: usize = GRID * GRID;

fn random_rows<T: Scalar>(batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(&[batch * CELLS, CHANNELS]);
    for v in t.data_mut() {
        *v = T::from_f64(rng.gen_range(-1.5..1.5));
    }
    t
}

// ---- toy convergence oracle ----

#[test]
fn fitted_discriminators_reach_the_analytic_optimum() {
    let w = BalanceWeights::default();
    let pairs = [
        // matched densities: pure offset optimum
        DiscreteToyPair::new(vec![0.3, 0.7], vec![0.3, 0.7]).unwrap(),
        // the worked two-symbol example
        DiscreteToyPair::new(vec![0.5, 0.5], vec![0.25, 0.75]).unwrap(),
        // wider support with both directions active
        DiscreteToyPair::new(vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]).unwrap(),
    ];
    for (i, toy) in pairs.iter().enumerate() {
        let opt = analytic_optimum(toy, &w);
        let fitted = fit_toy_discriminators(toy, &w, 20_000, 0.005, 90 + i as u64);
        assert!(
            (fitted.value - opt.value).abs() < 1e-2,
            "pair {i}: fitted value {} vs analytic {}",
            fitted.value,
            opt.value
        );
        for k in 0..toy.support_size() {
            let rel1 = (fitted.d1[k] - opt.d1_star[k]).abs() / opt.d1_star[k];
            let rel2 = (fitted.d2[k] - opt.d2_star[k]).abs() / opt.d2_star[k];
            assert!(rel1 < 0.05, "pair {i} d1[{k}]: {} vs {}", fitted.d1[k], opt.d1_star[k]);
            assert!(rel2 < 0.05, "pair {i} d2[{k}]: {} vs {}", fitted.d2[k], opt.d2_star[k]);
        }
    }
}

// ---- batched losses ----

#[test]
fn scores_are_positive_bounded_and_deterministic() {
    let d = Discriminator::<f32>::new(3, GRID, CHANNELS);
    let rows = random_rows::<f32>(3, 101);
    let run = || {
        let tape: Tape<f32> = Tape::new();
        let mut vars = Vec::new();
        let bound = d.bind(&tape, false, &mut vars);
        bound
            .score_rows(tape.constant(rows.clone()), BnMode::Running)
            .unwrap()
            .to_tensor()
    };
    let s1 = run();
    let s2 = run();
    assert_eq!(s1.shape(), &[3, 1]);
    assert_eq!(s1.data(), s2.data());
    for &v in s1.data() {
        assert!(v as f64 >= SCORE_FLOOR && v as f64 <= SCORE_CEIL);
    }
}

/// Pins the discriminator to a constant output c by zeroing the head weights
/// and setting the bias to softplus^-1(c).
fn pin_constant<T: Scalar>(d: &mut Discriminator<T>, c: f64) {
    for (name, p) in d.named_params_mut() {
        if name == "head.w" {
            for v in p.data_mut() {
                *v = T::zero();
            }
        } else if name == "head.b" {
            p.data_mut()[0] = T::from_f64((c.exp() - 1.0).ln());
        }
    }
}

fn eval_losses<T: Scalar>(
    d_ts: &Discriminator<T>,
    d_st: &Discriminator<T>,
    src: &Tensor<T>,
    tgt: &Tensor<T>,
    w: &BalanceWeights,
) -> (f64, f64, f64) {
    let tape: Tape<T> = Tape::new();
    let mut vars = Vec::new();
    let bts = d_ts.bind(&tape, false, &mut vars);
    let bst = d_st.bind(&tape, false, &mut vars);
    let mode = BnMode::Batch { update_running: false };
    let s = tape.constant(src.clone());
    let t = tape.constant(tgt.clone());
    let v_ts = disc_ts_loss(&bts, s, t, w, mode).unwrap().value().item().to_f64();
    let v_st = disc_st_loss(&bst, s, t, w, mode).unwrap().value().item().to_f64();
    let g = gen_loss(&bts, &bst, s, t, w, mode).unwrap().value().item().to_f64();
    (v_ts, v_st, g)
}

#[test]
fn constant_discriminators_give_hand_values() {
    let w = BalanceWeights::default();
    let mut d_ts = Discriminator::<f64>::new(5, GRID, CHANNELS);
    let mut d_st = Discriminator::<f64>::new(6, GRID, CHANNELS);
    pin_constant(&mut d_ts, 1.0);
    pin_constant(&mut d_st, 1.0);
    let src = random_rows::<f64>(2, 7);
    let tgt = random_rows::<f64>(2, 8);
    let (v_ts, v_st, g) = eval_losses(&d_ts, &d_st, &src, &tgt, &w);
    // D == 1: alpha*log 1 - 1 = -1 on both sides, generator sees -2
    assert!((v_ts + 1.0).abs() < 1e-12, "{v_ts}");
    assert!((v_st + 1.0).abs() < 1e-12, "{v_st}");
    assert!((g + 2.0).abs() < 1e-12, "{g}");
}

#[test]
fn constant_discriminator_objective_peaks_at_alpha() {
    // with D == c the ts objective is alpha*log c - c, stationary at c = alpha
    let w = BalanceWeights::default();
    let src = random_rows::<f64>(2, 9);
    let tgt = random_rows::<f64>(2, 10);
    let value_at = |c: f64| {
        let mut d = Discriminator::<f64>::new(5, GRID, CHANNELS);
        pin_constant(&mut d, c);
        let tape: Tape<f64> = Tape::new();
        let mut vars = Vec::new();
        let bound = d.bind(&tape, false, &mut vars);
        let mode = BnMode::Batch { update_running: false };
        let v =
            disc_ts_loss(&bound, tape.constant(src.clone()), tape.constant(tgt.clone()), &w, mode)
                .unwrap()
                .value()
                .item();
        v
    };
    let at_alpha = value_at(w.alpha);
    assert!((at_alpha - (w.alpha * w.alpha.ln() - w.alpha)).abs() < 1e-12);
    assert!(at_alpha > value_at(w.alpha * 1.3));
    assert!(at_alpha > value_at(w.alpha / 1.3));
}

#[test]
fn losses_match_independent_recomputation() {
    let w = BalanceWeights::default();
    let d_ts = Discriminator::<f64>::new(11, GRID, CHANNELS);
    let d_st = Discriminator::<f64>::new(12, GRID, CHANNELS);
    let src = random_rows::<f64>(3, 13);
    let tgt = random_rows::<f64>(3, 14);
    let (v_ts, v_st, g) = eval_losses(&d_ts, &d_st, &src, &tgt, &w);

    // plain recomputation from raw scores
    let scores = |d: &Discriminator<f64>, rows: &Tensor<f64>| -> Vec<f64> {
        let tape: Tape<f64> = Tape::new();
        let mut vars = Vec::new();
        let bound = d.bind(&tape, false, &mut vars);
        bound
            .score_rows(tape.constant(rows.clone()), BnMode::Batch { update_running: false })
            .unwrap()
            .to_tensor()
            .data()
            .to_vec()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let log_mean = |v: &[f64]| mean(&v.iter().map(|x| x.ln()).collect::<Vec<_>>());

    let (ts_s, ts_t) = (scores(&d_ts, &src), scores(&d_ts, &tgt));
    let (st_s, st_t) = (scores(&d_st, &src), scores(&d_st, &tgt));
    let want_ts = w.alpha * log_mean(&ts_s) - mean(&ts_t);
    let want_st = w.beta * log_mean(&st_t) - mean(&st_s);
    assert!((v_ts - want_ts).abs() < 1e-12, "{v_ts} vs {want_ts}");
    assert!((v_st - want_st).abs() < 1e-12, "{v_st} vs {want_st}");
    assert!((g - (want_ts + want_st)).abs() < 1e-12, "{g}");
}

#[test]
fn st_loss_is_the_role_swapped_ts_loss() {
    let d = Discriminator::<f64>::new(21, GRID, CHANNELS);
    let src = random_rows::<f64>(2, 22);
    let tgt = random_rows::<f64>(2, 23);
    let w = BalanceWeights::new(0.02, 0.04).unwrap();
    let swapped = BalanceWeights::new(0.04, 0.02).unwrap();
    let eval = |as_st: bool, a: &Tensor<f64>, b: &Tensor<f64>, wts: &BalanceWeights| {
        let tape: Tape<f64> = Tape::new();
        let mut vars = Vec::new();
        let bound = d.bind(&tape, false, &mut vars);
        let mode = BnMode::Batch { update_running: false };
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let v = if as_st {
            disc_st_loss(&bound, x, y, wts, mode)
        } else {
            disc_ts_loss(&bound, x, y, wts, mode)
        };
        let v = v.unwrap().value().item();
        v
    };
    // swapping roles and weights maps one loss onto the other exactly
    let st = eval(true, &src, &tgt, &w);
    let ts_swapped = eval(false, &tgt, &src, &swapped);
    assert_eq!(st, ts_swapped);
}

#[test]
fn mismatched_batches_are_rejected() {
    let d = Discriminator::<f32>::new(2, GRID, CHANNELS);
    let src = random_rows::<f32>(2, 31);
    let tgt = random_rows::<f32>(3, 32);
    let tape: Tape<f32> = Tape::new();
    let mut vars = Vec::new();
    let bound = d.bind(&tape, false, &mut vars);
    let err = disc_ts_loss(
        &bound,
        tape.constant(src),
        tape.constant(tgt),
        &BalanceWeights::default(),
        BnMode::Running,
    )
    .unwrap_err();
    assert!(matches!(err, AdversaryError::BatchMismatch { .. }));
}

// ---- gradient structure ----

#[test]
fn generator_step_reaches_embeddings_but_not_frozen_discriminators() {
    let d_ts = Discriminator::<f64>::new(41, GRID, CHANNELS);
    let d_st = Discriminator::<f64>::new(42, GRID, CHANNELS);
    let w = BalanceWeights::default();

    let tape: Tape<f64> = Tape::new();
    let mut disc_vars = Vec::new();
    let bts = d_ts.bind(&tape, false, &mut disc_vars);
    let bst = d_st.bind(&tape, false, &mut disc_vars);
    assert!(disc_vars.is_empty(), "frozen bind must not expose trainables");

    let src = tape.leaf(random_rows::<f64>(2, 43));
    let tgt = tape.leaf(random_rows::<f64>(2, 44));
    let mode = BnMode::Batch { update_running: false };
    let loss = gen_loss(&bts, &bst, src, tgt, &w, mode).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gs = grads.get(src).expect("source embeddings receive gradient");
    let gt = grads.get(tgt).expect("target embeddings receive gradient");
    assert!(gs.data().iter().any(|&v| v != 0.0));
    assert!(gt.data().iter().any(|&v| v != 0.0));
}

#[test]
fn discriminator_step_reaches_discriminator_only() {
    let d_ts = Discriminator::<f64>::new(51, GRID, CHANNELS);
    let w = BalanceWeights::default();
    let tape: Tape<f64> = Tape::new();
    let mut vars = Vec::new();
    let bound = d_ts.bind(&tape, true, &mut vars);
    assert_eq!(vars.len(), d_ts.named_params().len());
    let src = tape.constant(random_rows::<f64>(2, 52));
    let tgt = tape.constant(random_rows::<f64>(2, 53));
    let mode = BnMode::Batch { update_running: false };
    let loss = disc_ts_loss(&bound, src, tgt, &w, mode).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        assert!(grads.get(*v).is_some(), "param {i} missing gradient");
    }
    assert!(grads.get(src).is_none(), "constants must not accumulate gradients");
}

#[test]
fn beta_scales_the_target_side_pull() {
    // with alpha fixed, larger beta must strengthen the gradient on target
    // embeddings relative to source embeddings
    let d_ts = Discriminator::<f64>::new(61, GRID, CHANNELS);
    let d_st = Discriminator::<f64>::new(62, GRID, CHANNELS);
    let src_t = random_rows::<f64>(2, 63);
    let tgt_t = random_rows::<f64>(2, 64);
    let ratio = |beta: f64| -> f64 {
        let w = BalanceWeights::new(0.02, beta).unwrap();
        let tape: Tape<f64> = Tape::new();
        let mut vars = Vec::new();
        let bts = d_ts.bind(&tape, false, &mut vars);
        let bst = d_st.bind(&tape, false, &mut vars);
        let src = tape.leaf(src_t.clone());
        let tgt = tape.leaf(tgt_t.clone());
        let mode = BnMode::Batch { update_running: false };
        let loss = gen_loss(&bts, &bst, src, tgt, &w, mode).unwrap();
        let grads = tape.backward(loss).unwrap();
        let nrm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        nrm(grads.get(tgt).unwrap()) / nrm(grads.get(src).unwrap())
    };
    let ratios: Vec<f64> = [0.01, 0.04, 0.16, 0.64].iter().map(|&b| ratio(b)).collect();
    for pair in ratios.windows(2) {
        assert!(pair[0] < pair[1], "ratios not increasing: {ratios:?}");
    }
}

// ---- KL descent on a 1-D Gaussian toy ----

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// KL(N(mu1, s1^2) || N(mu2, s2^2)) in closed form.
fn gauss_kl(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    (s2 / s1).ln() + (s1 * s1 + (mu1 - mu2) * (mu1 - mu2)) / (2.0 * s2 * s2) - 0.5
}

#[test]
fn generator_gradient_descends_both_kl_terms() {
    // generator emits p = N(mu, sigma^2); target is fixed N(0, 1); the
    // discriminators are frozen at their optima for the CURRENT p. The
    // generator terms of the objective are a*E_p[log d1] - E_p[d2]; one
    // gradient step on (mu, sigma) must shrink KL in both directions.
    let w = BalanceWeights::default();
    let (mu0, s0) = (1.0, 0.8);
    let (mu_t, s_t) = (0.0, 1.0);

    let objective = |mu: f64, sigma: f64| -> f64 {
        // d1*(x) = a p0(x)/q(x), d2*(x) = b q(x)/p0(x), frozen at (mu0, s0)
        let mut acc = 0.0;
        let (lo, hi, n) = (-12.0, 14.0, 26_000);
        let h = (hi - lo) / n as f64;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let p0 = normal_pdf(x, mu0, s0);
            let q = normal_pdf(x, mu_t, s_t);
            let d1 = w.alpha * p0 / q;
            let d2 = w.beta * q / p0;
            let p_theta = normal_pdf(x, mu, sigma);
            let weight = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += weight * h * p_theta * (w.alpha * d1.ln() - d2);
        }
        acc
    };

    // finite-difference gradient of the to-minimise objective
    let h = 1e-5;
    let g_mu = (objective(mu0 + h, s0) - objective(mu0 - h, s0)) / (2.0 * h);
    let g_s = (objective(mu0, s0 + h) - objective(mu0, s0 - h)) / (2.0 * h);
    let lr = 1.0;
    let (mu1, s1) = (mu0 - lr * g_mu, s0 - lr * g_s);

    let kl_before = (gauss_kl(mu0, s0, mu_t, s_t), gauss_kl(mu_t, s_t, mu0, s0));
    let kl_after = (gauss_kl(mu1, s1, mu_t, s_t), gauss_kl(mu_t, s_t, mu1, s1));
    assert!(
        kl_after.0 < kl_before.0,
        "KL(p||q) rose: {:?} -> {:?} (step mu {mu0}->{mu1}, sigma {s0}->{s1})",
        kl_before.0,
        kl_after.0
    );
    assert!(
        kl_after.1 < kl_before.1,
        "KL(q||p) rose: {:?} -> {:?}",
        kl_before.1,
        kl_after.1
    );
}

// ---- finite differences through the batched losses ----

#[derive(Clone, Copy)]
enum Loss {
    Ts,
    St,
    Gen,
}

/// Evaluates one of the three losses on perturbable copies of everything.
/// Returns the value plus, when requested, gradients for every discriminator
/// parameter (ts first, then st) and for both embedding batches.
fn loss_and_grads(
    d_ts: &Discriminator<f64>,
    d_st: &Discriminator<f64>,
    src: &Tensor<f64>,
    tgt: &Tensor<f64>,
    which: Loss,
    want_grads: bool,
) -> (f64, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let w = BalanceWeights::default();
    let mode = BnMode::Batch { update_running: false };
    let tape: Tape<f64> = Tape::new();
    let mut vars = Vec::new();
    let bts = d_ts.bind(&tape, true, &mut vars);
    let bst = d_st.bind(&tape, true, &mut vars);
    let s = tape.leaf(src.clone());
    let t = tape.leaf(tgt.clone());
    let loss: Var<'_, f64> = match which {
        Loss::Ts => disc_ts_loss(&bts, s, t, &w, mode).unwrap(),
        Loss::St => disc_st_loss(&bst, s, t, &w, mode).unwrap(),
        Loss::Gen => gen_loss(&bts, &bst, s, t, &w, mode).unwrap(),
    };
    let value = loss.value().item();
    if !want_grads {
        return (value, Vec::new(), Vec::new());
    }
    let mut grads = tape.backward(loss).unwrap();
    let param_grads = vars
        .iter()
        .map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    let emb_grads = vec![
        grads.take(s).unwrap_or_else(|| Tensor::zeros(&s.shape())),
        grads.take(t).unwrap_or_else(|| Tensor::zeros(&t.shape())),
    ];
    (value, param_grads, emb_grads)
}

#[test]
fn composed_adversarial_gradients_match_finite_differences() {
    let mut d_ts = Discriminator::<f64>::new(71, GRID, 3);
    let mut d_st = Discriminator::<f64>::new(72, GRID, 3);
    let mk_rows = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::<f64>::zeros(&[2 * CELLS, 3]);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    };
    let mut src = mk_rows(73);
    let mut tgt = mk_rows(74);
    let n_ts = d_ts.named_params().len();
    let n_all = n_ts + d_st.named_params().len();

    for which in [Loss::Ts, Loss::St, Loss::Gen] {
        let (base, param_grads, emb_grads) =
            loss_and_grads(&d_ts, &d_st, &src, &tgt, which, true);
        assert!(base.is_finite());
        let mut worst = 0.0f64;
        let mut compare = |analytic: f64, lp: f64, lm: f64, h: f64| {
            let numeric = (lp - lm) / (2.0 * h);
            // central differences bottom out at roundoff on the loss itself
            let noise = 256.0 * f64::EPSILON * base.abs().max(1.0) / h;
            if (analytic - numeric).abs() < noise {
                return;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        };

        fn param_elem<'a>(
            d_ts: &'a mut Discriminator<f64>,
            d_st: &'a mut Discriminator<f64>,
            pi: usize,
            n_ts: usize,
            e: usize,
        ) -> &'a mut f64 {
            let p = if pi < n_ts {
                d_ts.named_params_mut().swap_remove(pi).1
            } else {
                d_st.named_params_mut().swap_remove(pi - n_ts).1
            };
            &mut p.data_mut()[e]
        }

        for pi in 0..n_all {
            let len = if pi < n_ts {
                d_ts.named_params()[pi].1.len()
            } else {
                d_st.named_params()[pi - n_ts].1.len()
            };
            for e in [0, len / 2, len - 1] {
                let orig = *param_elem(&mut d_ts, &mut d_st, pi, n_ts, e);
                let h = 1e-6 * orig.abs().max(1.0);
                *param_elem(&mut d_ts, &mut d_st, pi, n_ts, e) = orig + h;
                let (lp, _, _) = loss_and_grads(&d_ts, &d_st, &src, &tgt, which, false);
                *param_elem(&mut d_ts, &mut d_st, pi, n_ts, e) = orig - h;
                let (lm, _, _) = loss_and_grads(&d_ts, &d_st, &src, &tgt, which, false);
                *param_elem(&mut d_ts, &mut d_st, pi, n_ts, e) = orig;
                compare(param_grads[pi].data()[e], lp, lm, h);
            }
        }

        fn emb_elem<'a>(
            src: &'a mut Tensor<f64>,
            tgt: &'a mut Tensor<f64>,
            ei: usize,
            e: usize,
        ) -> &'a mut f64 {
            let t = if ei == 0 { src } else { tgt };
            &mut t.data_mut()[e]
        }

        for (ei, grad) in emb_grads.iter().enumerate() {
            let len = src.len();
            for e in [0, len / 2, len - 1] {
                let orig = *emb_elem(&mut src, &mut tgt, ei, e);
                let h = 1e-6 * orig.abs().max(1.0);
                *emb_elem(&mut src, &mut tgt, ei, e) = orig + h;
                let (lp, _, _) = loss_and_grads(&d_ts, &d_st, &src, &tgt, which, false);
                *emb_elem(&mut src, &mut tgt, ei, e) = orig - h;
                let (lm, _, _) = loss_and_grads(&d_ts, &d_st, &src, &tgt, which, false);
                *emb_elem(&mut src, &mut tgt, ei, e) = orig;
                compare(grad.data()[e], lp, lm, h);
            }
        }
        assert!(worst < 1e-4, "gradients off by {worst:.3e}");
    }
}
