//! Two-phase training orchestration and evaluation.
//!
//! Phase one pretrains the embedding network on source sequences with the
//! matching cross entropy. Phase two freezes the task and runs the balanced
//! adversarial game: each iteration takes one discriminator step (both
//! discriminators, their own batch statistics) and one generator step
//! (frozen discriminators, fresh batches, plus the cross-entropy regulariser
//! on source sequences). Two optimisers exist at any time, one for the
//! embedding network and one covering both discriminators, on a 3:1
//! learning-rate split.
//!
//! Everything is replayable: batch order is derived statelessly from
//! `(seed, phase, epoch, cycle)`, checkpoints capture parameters, batch-norm
//! statistics and optimiser moments exactly, and a restored run continues
//! bit-for-bit where it left off.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::{
    disc_st_loss, disc_ts_loss, gen_loss, AdversaryError, BalanceWeights, Discriminator,
};
use crate::embednet::{
    build_gt_correspondence, ce_loss_graph, correspondence_graph, estimate_pose, grid_rays,
    gt_match_radius, images_to_nchw, infer_correspondence, BufferEntry, EmbedError, EmbedNet,
    FrameBuffer, BUFFER_CAPACITY, DEFAULT_TEMPERATURE, EMBED_STRIDE,
};
use crate::geometry::{ape, ate, unproject_grid, GeometryError, Intrinsics, Pose, Trajectory};
use crate::synthworld::{mix_seed, FrameSample, ImageDataset, SequenceDataset};
use crate::tensor::io::{load_tensor, save_tensor, ContainerError};
use crate::tensor::{Adam, BnMode, Scalar, Tape, Tensor, TensorError, Var};

const SALT_PRETRAIN: u64 = 0x7072657472;
const SALT_ADAPT_TGT: u64 = 0x616470745f74;
const SALT_ADAPT_SRC: u64 = 0x616470745f73;
const SALT_ADAPT_CE: u64 = 0x616470745f63;
const SALT_D_TS: u64 = 0x645f7473;
const SALT_D_ST: u64 = 0x645f7374;

/// Source sequences consumed by the cross-entropy regulariser per generator
/// step during adaptation.
const CE_SEQS_PER_STEP: usize = 2;

/// Generator losses beyond this magnitude indicate a diverged adversarial
/// game; training halts so the state can be dumped.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("generator loss {value} at step {step} exceeds ±{DIVERGENCE_LIMIT}; state left at the last finite parameters")]
    Diverged { step: u64, value: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---- configuration ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Sequences per batch; every frame of each sequence is in the forward.
    pub batch_sequences: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            epochs: 10,
            batch_sequences: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Images per domain per step.
    pub batch: usize,
    pub epochs: usize,
    pub disc_lr: f64,
    pub gen_lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            batch: 32,
            epochs: 10,
            disc_lr: 3e-4,
            gen_lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rows whose peak match probability falls below this are dropped from
    /// the pose solve; too few confident rows triggers the motion fallback.
    pub confidence_floor: f64,
    /// Fixed-point rounds of the depth/pose refinement.
    pub refine_iters: usize,
    /// Longest APE horizon reported (frames beyond the anchor).
    pub max_len: usize,
    /// Solved poses further than this from the previous estimate are
    /// implausible under the world's motion bounds and trigger the fallback.
    /// Keeps one bad solve from poisoning the buffer, which would otherwise
    /// compound through later matches.
    pub max_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            confidence_floor: 0.3,
            refine_iters: 8,
            max_len: 50,
            max_step: 3.0 * crate::synthworld::MAX_STEP_MM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Embedding channels of the network under training.
    pub channels: usize,
    /// Softmax temperature of the correspondence head, shared by training
    /// and inference.
    pub temperature: f64,
    /// Weight of the cross-entropy regulariser inside the generator loss.
    pub lambda_ce: f64,
    pub weights: BalanceWeights,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            channels: 16,
            temperature: DEFAULT_TEMPERATURE,
            lambda_ce: 0.1,
            weights: BalanceWeights::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let positive = |v: f64, name: &str| -> Result<(), TrainError> {
            if !v.is_finite() || v <= 0.0 {
                return Err(TrainError::Config(format!("{name} must be finite and positive, got {v}")));
            }
            Ok(())
        };
        positive(self.pretrain.lr, "pretrain.lr")?;
        positive(self.adapt.disc_lr, "adapt.disc_lr")?;
        positive(self.adapt.gen_lr, "adapt.gen_lr")?;
        positive(self.temperature, "temperature")?;
        if !self.lambda_ce.is_finite() || self.lambda_ce < 0.0 {
            return bad(format!("lambda_ce must be finite and non-negative, got {}", self.lambda_ce));
        }
        let ratio = self.adapt.disc_lr / self.adapt.gen_lr;
        if (ratio - 3.0).abs() > 3.0 * 1e-9 {
            return bad(format!(
                "discriminator/generator learning-rate ratio must be 3:1, got {}:{} ({ratio:.6})",
                self.adapt.disc_lr, self.adapt.gen_lr
            ));
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_sequences == 0 {
            return bad("pretrain epochs and batch size must be positive".into());
        }
        if self.adapt.epochs == 0 || self.adapt.batch == 0 {
            return bad("adapt epochs and batch size must be positive".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval.confidence_floor) {
            return bad(format!(
                "eval.confidence_floor must lie in [0, 1), got {}",
                self.eval.confidence_floor
            ));
        }
        if self.eval.max_len == 0 {
            return bad("eval.max_len must be positive".into());
        }
        if !(self.eval.max_step > 0.0) {
            return bad(format!("eval.max_step must be positive, got {}", self.eval.max_step));
        }
        // re-run the weight invariants in case the struct was deserialised
        BalanceWeights::new(self.weights.alpha, self.weights.beta)?;
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON form; identifies a run's configuration
/// in metrics and checkpoints.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialises");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- training log ----

/// One logged step. Values that did not occur in the step (adversarial terms
/// during pretraining, the missing side under unidirectional adaptation, or
/// non-finite losses) stay empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub v_dts: Option<f64>,
    pub v_dst: Option<f64>,
    pub gen_loss: Option<f64>,
    pub ce_loss: Option<f64>,
    pub v_f: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,V_Dts,V_Dst,GEN_loss,CE_loss,V_F\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step,
                cell(r.v_dts),
                cell(r.v_dst),
                cell(r.gen_loss),
                cell(r.ce_loss),
                cell(r.v_f)
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Maps non-finite values to empty log cells; the log must stay JSON-safe.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

// ---- run state ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Both discriminators, full two-sided generator loss.
    Balanced,
    /// Only the source-to-target side (the β terms).
    S2t,
    /// Only the target-to-source side (the α terms).
    T2s,
    /// No adversarial steps at all; the pretrained network is kept as is.
    None,
}

impl AdaptMode {
    pub fn parse(s: &str) -> Option<AdaptMode> {
        match s {
            "baa" => Some(AdaptMode::Balanced),
            "s2t" => Some(AdaptMode::S2t),
            "t2s" => Some(AdaptMode::T2s),
            "none" => Some(AdaptMode::None),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdaptMode::Balanced => "baa",
            AdaptMode::S2t => "s2t",
            AdaptMode::T2s => "t2s",
            AdaptMode::None => "none",
        }
    }

    fn trains_ts(&self) -> bool {
        matches!(self, AdaptMode::Balanced | AdaptMode::T2s)
    }

    fn trains_st(&self) -> bool {
        matches!(self, AdaptMode::Balanced | AdaptMode::S2t)
    }
}

/// Everything a run owns: the three networks, the two optimisers, the
/// counters and the log. Checkpoints serialise this exactly.
pub struct RunState {
    pub config: TrainConfig,
    pub phase: Phase,
    pub mode: Option<AdaptMode>,
    /// Completed epochs within the current phase.
    pub epoch: usize,
    /// Optimisation steps within the current phase.
    pub step: u64,
    /// Steps whose update was skipped because a loss or gradient went
    /// non-finite.
    pub skipped_steps: u64,
    pub net: EmbedNet,
    pub d_ts: Discriminator,
    pub d_st: Discriminator,
    pub gen_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
    pub log: TrainingLog,
}

impl RunState {
    pub fn new(config: TrainConfig, input_size: usize) -> Result<RunState, TrainError> {
        config.validate()?;
        let net = EmbedNet::new(config.seed, input_size, config.channels);
        let grid = net.grid_side();
        Ok(RunState {
            d_ts: Discriminator::new(mix_seed(config.seed, SALT_D_TS), grid, config.channels),
            d_st: Discriminator::new(mix_seed(config.seed, SALT_D_ST), grid, config.channels),
            gen_opt: Adam::new(config.pretrain.lr),
            disc_opt: Adam::new(config.adapt.disc_lr),
            net,
            phase: Phase::Pretrain,
            mode: None,
            epoch: 0,
            step: 0,
            skipped_steps: 0,
            log: TrainingLog::default(),
            config,
        })
    }

    /// Switches a completed pretraining state into the adaptation phase:
    /// fresh counters, fresh log, fresh optimisers at the adaptation rates.
    fn enter_adapt(&mut self, mode: AdaptMode) {
        self.phase = Phase::Adapt;
        self.mode = Some(mode);
        self.epoch = 0;
        self.step = 0;
        self.skipped_steps = 0;
        self.log = TrainingLog::default();
        self.gen_opt = Adam::new(self.config.adapt.gen_lr);
        self.disc_opt = Adam::new(self.config.adapt.disc_lr);
    }
}

// ---- seeded shuffling ----

/// Endless shuffled index stream: each exhaustion reshuffles with a seed
/// derived from `(seed, cycle)`, so any position is a pure function of the
/// draw count.
struct IndexStream {
    n: usize,
    seed: u64,
    cycle: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl IndexStream {
    fn new(n: usize, seed: u64) -> IndexStream {
        assert!(n > 0, "cannot stream over an empty split");
        let mut s = IndexStream {
            n,
            seed,
            cycle: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.cycle));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
        self.cycle += 1;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

// ---- dataset checks ----

fn check_image(img: &Tensor<f32>, size: usize, what: &str) -> Result<(), TrainError> {
    if img.shape() != [size, size, 3] {
        return Err(TrainError::Dataset(format!(
            "{what}: image shape {:?} does not match the network input {size}x{size}x3",
            img.shape()
        )));
    }
    Ok(())
}

fn check_source_sequences(data: &SequenceDataset, size: usize) -> Result<(), TrainError> {
    if data.sequences.is_empty() {
        return Err(TrainError::Dataset("source split holds no sequences".into()));
    }
    for (s, seq) in data.sequences.iter().enumerate() {
        if seq.len() < 2 {
            return Err(TrainError::Dataset(format!(
                "source sequence {s} holds {} frames; need at least 2",
                seq.len()
            )));
        }
        for (i, f) in seq.iter().enumerate() {
            check_image(&f.image, size, &format!("source sequence {s} frame {i}"))?;
            if f.depth.is_none() || f.pose.is_none() {
                return Err(TrainError::Dataset(format!(
                    "source sequence {s} frame {i} is missing depth or pose; supervised matching needs both"
                )));
            }
        }
    }
    Ok(())
}

fn check_target_images(data: &ImageDataset, size: usize) -> Result<(), TrainError> {
    if data.images.is_empty() {
        return Err(TrainError::Dataset("target split holds no images".into()));
    }
    for (i, f) in data.images.iter().enumerate() {
        check_image(&f.image, size, &format!("target image {i}"))?;
    }
    Ok(())
}

// ---- shared step plumbing ----

/// Applies collected gradients to the network parameters. Returns false when
/// the optimiser skipped a non-finite update.
fn apply_net_step(state: &mut RunState, grads: &[Option<Tensor<f32>>]) -> bool {
    let mut params = state.net.named_params_mut();
    let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().map(|(_, p)| &mut **p).collect();
    state.gen_opt.step(&mut refs, grads) == crate::tensor::StepOutcome::Applied
}

/// Mean matching cross entropy of one sequence under a streaming buffer:
/// frame `i` matches against the up-to-[`BUFFER_CAPACITY`] frames before it.
/// `rows` must hold the sequence's embedding rows contiguously from
/// `base_row`. Returns the per-term losses; empty when every row is masked.
fn sequence_ce_terms<'t, T: Scalar>(
    rows: Var<'t, T>,
    base_row: usize,
    seq: &[FrameSample],
    k: &Intrinsics,
    cells: usize,
    temperature: f64,
) -> Result<Vec<Var<'t, T>>, TrainError> {
    let mut terms = Vec::new();
    for i in 1..seq.len() {
        let lo = i.saturating_sub(BUFFER_CAPACITY);
        let depth = seq[i].depth.as_ref().expect("checked by dataset validation");
        let radius = gt_match_radius(depth, k, EMBED_STRIDE);
        let gt = build_gt_correspondence::<T>(&seq[lo..=i], k, EMBED_STRIDE, radius)?;
        let current = rows.slice_rows(base_row + i * cells, cells)?;
        let buffer = rows.slice_rows(base_row + lo * cells, (i - lo) * cells)?;
        let probs = correspondence_graph(current, buffer, temperature)?;
        match ce_loss_graph(&gt, probs) {
            Ok(term) => terms.push(term),
            // geometry with no revisited cells carries no signal; skip
            Err(EmbedError::AllRowsMasked) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(terms)
}

fn mean_of<'t, T: Scalar>(terms: Vec<Var<'t, T>>) -> Option<Var<'t, T>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next()?;
    let sum = it.fold(first, |a, b| a.add(b).expect("scalar terms"));
    Some(sum.scale(T::from_f64(1.0 / n as f64)))
}

// ---- pretraining ----

/// Per-epoch progress snapshot handed to the caller's callback.
#[derive(Clone, Copy, Debug)]
pub struct EpochSummary {
    pub phase: Phase,
    /// 1-based index of the epoch that just finished.
    pub epoch: usize,
    pub steps: u64,
    pub mean_ce: f64,
    /// Mean generator loss; absent during pretraining and under mode `none`.
    pub mean_gen: Option<f64>,
    pub skipped_steps: u64,
    pub seconds: f64,
}

/// One pretraining gradient computation over a batch of sequences. Returns
/// the parameter gradients in `named_params` order and the loss value.
fn pretrain_step(
    net: &EmbedNet,
    seqs: &[&Vec<FrameSample>],
    k: &Intrinsics,
    temperature: f64,
) -> Result<(Vec<Option<Tensor<f32>>>, f64), TrainError> {
    let images: Vec<&Tensor<f32>> = seqs.iter().flat_map(|s| s.iter().map(|f| &f.image)).collect();
    let x = images_to_nchw(&images, net.input_size())?;
    let cells = net.grid_side() * net.grid_side();

    let tape: Tape<f32> = Tape::new();
    let mut vars = Vec::new();
    let bound = net.bind(&tape, true, &mut vars);
    let rows = bound.forward(tape.constant(x), BnMode::Batch { update_running: true })?;

    let mut terms = Vec::new();
    let mut base = 0;
    for seq in seqs {
        terms.extend(sequence_ce_terms(rows, base, seq, k, cells, temperature)?);
        base += seq.len() * cells;
    }
    let Some(loss) = mean_of(terms) else {
        return Ok((vec![None; vars.len()], f64::NAN));
    };
    let value = loss.value().item() as f64;
    let mut grads = tape.backward(loss)?;
    Ok((vars.iter().map(|v| grads.take(*v)).collect(), value))
}

/// Pretrains the embedding network on supervised source sequences, resuming
/// from `state.epoch`. Emits one log row per step and one summary per epoch.
pub fn pretrain(
    state: &mut RunState,
    source_train: &SequenceDataset,
    k: &Intrinsics,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<Vec<EpochSummary>, TrainError> {
    if state.phase != Phase::Pretrain {
        return Err(TrainError::Config("state is already past pretraining".into()));
    }
    check_source_sequences(source_train, state.net.input_size())?;
    let cfg = state.config.clone();
    let n = source_train.sequences.len();
    let batch = cfg.pretrain.batch_sequences.min(n);
    let steps_per_epoch = n / batch;

    let mut summaries = Vec::new();
    for epoch in state.epoch..cfg.pretrain.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, SALT_PRETRAIN), epoch as u64));
        order.shuffle(&mut rng);

        let (mut ce_sum, mut ce_count) = (0.0, 0u64);
        let skipped_before = state.skipped_steps;
        for b in 0..steps_per_epoch {
            let seqs: Vec<&Vec<FrameSample>> = order[b * batch..(b + 1) * batch]
                .iter()
                .map(|&i| &source_train.sequences[i])
                .collect();
            let (grads, ce) = pretrain_step(&state.net, &seqs, k, cfg.temperature)?;
            let applied = ce.is_finite() && apply_net_step(state, &grads);
            if !applied {
                state.skipped_steps += 1;
            } else {
                ce_sum += ce;
                ce_count += 1;
            }
            state.step += 1;
            state.log.rows.push(LogRow {
                step: state.step,
                v_dts: None,
                v_dst: None,
                gen_loss: None,
                ce_loss: finite(ce),
                v_f: None,
            });
        }

        state.epoch = epoch + 1;
        let summary = EpochSummary {
            phase: Phase::Pretrain,
            epoch: state.epoch,
            steps: steps_per_epoch as u64,
            mean_ce: if ce_count > 0 { ce_sum / ce_count as f64 } else { f64::NAN },
            mean_gen: None,
            skipped_steps: state.skipped_steps - skipped_before,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&summary);
        summaries.push(summary);
    }
    Ok(summaries)
}

// ---- adaptation ----

/// Embeds a batch without touching the network: no gradients, batch
/// statistics, running estimates untouched. This is the discriminator-step
/// view of the embeddings.
fn embed_rows_detached(
    net: &EmbedNet,
    images: &[&Tensor<f32>],
) -> Result<Tensor<f32>, TrainError> {
    let x = images_to_nchw(images, net.input_size())?;
    let tape: Tape<f32> = Tape::new();
    let mut vars = Vec::new();
    let bound = net.bind(&tape, false, &mut vars);
    let rows = bound.forward(tape.constant(x), BnMode::Batch { update_running: false })?;
    Ok(rows.to_tensor())
}

struct DiscStepOutcome {
    v_dts: Option<f64>,
    v_dst: Option<f64>,
    applied: bool,
}

/// One discriminator ascent step on detached embeddings. Gradient slots stay
/// aligned with `d_ts ++ d_st` parameter order even when a mode trains only
/// one side.
fn disc_step(
    state: &mut RunState,
    mode: AdaptMode,
    src_rows: Tensor<f32>,
    tgt_rows: Tensor<f32>,
) -> Result<DiscStepOutcome, TrainError> {
    let w = state.config.weights;
    let n_ts = state.d_ts.named_params().len();
    let n_st = state.d_st.named_params().len();

    let (mut v_dts, mut v_dst) = (None, None);
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; n_ts + n_st];
    {
        let tape: Tape<f32> = Tape::new();
        let mut ts_vars = Vec::new();
        let mut st_vars = Vec::new();
        let bts = state.d_ts.bind(&tape, mode.trains_ts(), &mut ts_vars);
        let bst = state.d_st.bind(&tape, mode.trains_st(), &mut st_vars);
        let s = tape.constant(src_rows);
        let t = tape.constant(tgt_rows);
        // the discriminators own these batches: update their running stats
        let bn = BnMode::Batch { update_running: true };

        let mut objective: Option<Var<'_, f32>> = None;
        if mode.trains_ts() {
            let v = disc_ts_loss(&bts, s, t, &w, bn)?;
            v_dts = Some(v.value().item() as f64);
            objective = Some(v);
        }
        if mode.trains_st() {
            let v = disc_st_loss(&bst, s, t, &w, bn)?;
            v_dst = Some(v.value().item() as f64);
            objective = Some(match objective {
                Some(o) => o.add(v)?,
                None => v,
            });
        }
        let Some(objective) = objective else {
            return Ok(DiscStepOutcome { v_dts: None, v_dst: None, applied: false });
        };
        // discriminators maximise; the tape minimises
        let mut g = tape.backward(objective.neg())?;
        for (i, v) in ts_vars.iter().enumerate() {
            grads[i] = g.take(*v);
        }
        for (i, v) in st_vars.iter().enumerate() {
            grads[n_ts + i] = g.take(*v);
        }
    }

    let mut ts_params = state.d_ts.named_params_mut();
    let mut st_params = state.d_st.named_params_mut();
    let mut refs: Vec<&mut Tensor<f32>> = ts_params
        .iter_mut()
        .map(|(_, p)| &mut **p)
        .chain(st_params.iter_mut().map(|(_, p)| &mut **p))
        .collect();
    let applied = state.disc_opt.step(&mut refs, &grads) == crate::tensor::StepOutcome::Applied;
    Ok(DiscStepOutcome { v_dts, v_dst, applied })
}

struct GenStepOutcome {
    gen: f64,
    ce: Option<f64>,
    v_f: f64,
    grads: Vec<Option<Tensor<f32>>>,
}

/// One generator descent computation: adversarial terms through frozen
/// discriminators plus the weighted cross-entropy regulariser on fresh
/// source sequences. Does not apply the step; the caller checks the
/// divergence guard first.
fn gen_step(
    state: &RunState,
    mode: AdaptMode,
    src_imgs: &[&Tensor<f32>],
    tgt_imgs: &[&Tensor<f32>],
    ce_seqs: &[&Vec<FrameSample>],
    k: &Intrinsics,
) -> Result<GenStepOutcome, TrainError> {
    let cfg = &state.config;
    let cells = state.net.grid_side() * state.net.grid_side();
    let src_x = images_to_nchw(src_imgs, state.net.input_size())?;
    let tgt_x = images_to_nchw(tgt_imgs, state.net.input_size())?;
    let ce_images: Vec<&Tensor<f32>> =
        ce_seqs.iter().flat_map(|s| s.iter().map(|f| &f.image)).collect();

    let tape: Tape<f32> = Tape::new();
    let mut vars = Vec::new();
    let bound = state.net.bind(&tape, true, &mut vars);
    let mut frozen = Vec::new();
    let bts = state.d_ts.bind(&tape, false, &mut frozen);
    let bst = state.d_st.bind(&tape, false, &mut frozen);
    debug_assert!(frozen.is_empty());

    // generator-owned forwards: batch statistics feed the running estimates
    let net_bn = BnMode::Batch { update_running: true };
    let src_rows = bound.forward(tape.constant(src_x), net_bn)?;
    let tgt_rows = bound.forward(tape.constant(tgt_x), net_bn)?;
    // the frozen discriminators still normalise with the live batch, but
    // their running estimates belong to their own steps
    let disc_bn = BnMode::Batch { update_running: false };
    let adversarial = match mode {
        AdaptMode::Balanced => gen_loss(&bts, &bst, src_rows, tgt_rows, &cfg.weights, disc_bn)?,
        AdaptMode::S2t => disc_st_loss(&bst, src_rows, tgt_rows, &cfg.weights, disc_bn)?,
        AdaptMode::T2s => disc_ts_loss(&bts, src_rows, tgt_rows, &cfg.weights, disc_bn)?,
        AdaptMode::None => unreachable!("mode none never reaches a generator step"),
    };
    let gen = adversarial.value().item() as f64;

    let mut ce_terms = Vec::new();
    if !ce_seqs.is_empty() {
        let ce_x = images_to_nchw(&ce_images, state.net.input_size())?;
        let ce_rows = bound.forward(tape.constant(ce_x), net_bn)?;
        let mut base = 0;
        for seq in ce_seqs {
            ce_terms.extend(sequence_ce_terms(ce_rows, base, seq, k, cells, cfg.temperature)?);
            base += seq.len() * cells;
        }
    }
    let ce_mean = mean_of(ce_terms);
    let ce = ce_mean.map(|c| c.value().item() as f64);

    let total = match ce_mean {
        Some(c) => adversarial.add(c.scale(cfg.lambda_ce as f32))?,
        None => adversarial,
    };
    let v_f = total.value().item() as f64;
    let mut g = tape.backward(total)?;
    Ok(GenStepOutcome {
        gen,
        ce,
        v_f,
        grads: vars.iter().map(|v| g.take(*v)).collect(),
    })
}

/// Adversarial adaptation of a pretrained network against unordered target
/// images, with the matching loss on source sequences as a regulariser.
///
/// Each iteration consumes one target batch: a discriminator step on
/// detached embeddings, then a generator step through frozen discriminators
/// on the same target batch and a fresh source batch. On
/// [`TrainError::Diverged`] the state still holds the last finite
/// parameters, so the caller can dump it.
pub fn adapt(
    state: &mut RunState,
    source_train: &SequenceDataset,
    target_train: &ImageDataset,
    mode: AdaptMode,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<Vec<EpochSummary>, TrainError> {
    match (state.phase, state.mode) {
        (Phase::Pretrain, _) => state.enter_adapt(mode),
        (Phase::Adapt, Some(m)) if m == mode => {}
        (Phase::Adapt, m) => {
            return Err(TrainError::Config(format!(
                "state was adapting with mode {:?}, cannot resume with {:?}",
                m.map(|m| m.name()),
                mode.name()
            )));
        }
    }
    if mode == AdaptMode::None {
        state.epoch = state.config.adapt.epochs;
        return Ok(Vec::new());
    }
    let size = state.net.input_size();
    check_source_sequences(source_train, size)?;
    check_target_images(target_train, size)?;

    let cfg = state.config.clone();
    let batch = cfg.adapt.batch.min(target_train.images.len());
    let steps_per_epoch = (target_train.images.len() / batch).max(1);
    let src_frames: Vec<&Tensor<f32>> = source_train
        .sequences
        .iter()
        .flat_map(|s| s.iter().map(|f| &f.image))
        .collect();

    let mut summaries = Vec::new();
    for epoch in state.epoch..cfg.adapt.epochs {
        let t0 = Instant::now();
        let e = epoch as u64;
        let mut tgt_stream = IndexStream::new(
            target_train.images.len(),
            mix_seed(mix_seed(cfg.seed, SALT_ADAPT_TGT), e),
        );
        let mut src_stream = IndexStream::new(
            src_frames.len(),
            mix_seed(mix_seed(cfg.seed, SALT_ADAPT_SRC), e),
        );
        let mut ce_stream = IndexStream::new(
            source_train.sequences.len(),
            mix_seed(mix_seed(cfg.seed, SALT_ADAPT_CE), e),
        );

        let (mut ce_sum, mut ce_count) = (0.0, 0u64);
        let (mut gen_sum, mut gen_count) = (0.0, 0u64);
        let skipped_before = state.skipped_steps;
        for _ in 0..steps_per_epoch {
            let tgt_idx = tgt_stream.take(batch);
            let tgt_imgs: Vec<&Tensor<f32>> =
                tgt_idx.iter().map(|&i| &target_train.images[i].image).collect();

            // discriminator step: batch-stat embeddings, no generator traces
            let src_disc: Vec<&Tensor<f32>> =
                src_stream.take(batch).into_iter().map(|i| src_frames[i]).collect();
            let src_rows = embed_rows_detached(&state.net, &src_disc)?;
            let tgt_rows = embed_rows_detached(&state.net, &tgt_imgs)?;
            let disc = disc_step(state, mode, src_rows, tgt_rows)?;
            if !disc.applied {
                state.skipped_steps += 1;
            }

            // generator step: fresh source batch and CE sequences
            let src_gen: Vec<&Tensor<f32>> =
                src_stream.take(batch).into_iter().map(|i| src_frames[i]).collect();
            let ce_seqs: Vec<&Vec<FrameSample>> = ce_stream
                .take(CE_SEQS_PER_STEP.min(source_train.sequences.len()))
                .into_iter()
                .map(|i| &source_train.sequences[i])
                .collect();
            let out = gen_step(state, mode, &src_gen, &tgt_imgs, &ce_seqs, k_of(size))?;
            state.step += 1;
            if out.gen.is_finite() && out.gen.abs() > DIVERGENCE_LIMIT {
                state.log.rows.push(LogRow {
                    step: state.step,
                    v_dts: disc.v_dts.and_then(finite),
                    v_dst: disc.v_dst.and_then(finite),
                    gen_loss: finite(out.gen),
                    ce_loss: out.ce.and_then(finite),
                    v_f: finite(out.v_f),
                });
                return Err(TrainError::Diverged { step: state.step, value: out.gen });
            }
            let applied = out.v_f.is_finite() && apply_net_step(state, &out.grads);
            if !applied {
                state.skipped_steps += 1;
            } else {
                gen_sum += out.gen;
                gen_count += 1;
                if let Some(c) = out.ce {
                    ce_sum += c;
                    ce_count += 1;
                }
            }
            state.log.rows.push(LogRow {
                step: state.step,
                v_dts: disc.v_dts.and_then(finite),
                v_dst: disc.v_dst.and_then(finite),
                gen_loss: finite(out.gen),
                ce_loss: out.ce.and_then(finite),
                v_f: finite(out.v_f),
            });
        }

        state.epoch = epoch + 1;
        let summary = EpochSummary {
            phase: Phase::Adapt,
            epoch: state.epoch,
            steps: steps_per_epoch as u64,
            mean_ce: if ce_count > 0 { ce_sum / ce_count as f64 } else { f64::NAN },
            mean_gen: (gen_count > 0).then(|| gen_sum / gen_count as f64),
            skipped_steps: state.skipped_steps - skipped_before,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&summary);
        summaries.push(summary);
    }
    Ok(summaries)
}

/// The CE regulariser needs intrinsics; sequences carry none, so they are
/// reconstructed from the image size (the whole pipeline uses the square
/// default camera).
fn k_of(size: usize) -> &'static Intrinsics {
    use std::sync::OnceLock;
    static CACHE: OnceLock<std::sync::Mutex<std::collections::HashMap<usize, &'static Intrinsics>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| std::sync::Mutex::new(std::collections::HashMap::new()));
    let mut map = cache.lock().expect("intrinsics cache lock");
    map.entry(size)
        .or_insert_with(|| Box::leak(Box::new(Intrinsics::square(size))))
}

// ---- evaluation ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub index: usize,
    pub ape5: f64,
    pub ape50: f64,
    pub ate50: f64,
    pub fallbacks: usize,
}

/// Aggregate localisation quality on a test split. `ape_curve[i]` is the
/// mean APE over trajectories at horizon `i + 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub ape5: f64,
    pub ape50: f64,
    pub ate50: f64,
    pub ape_curve: Vec<f64>,
    pub per_trajectory: Vec<TrajectoryReport>,
    pub fallback_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }
}

/// Constant-velocity reference: anchored to the first two true poses, then
/// repeats their relative motion forever.
pub fn constant_velocity_baseline(reference: &Trajectory) -> Trajectory {
    let poses = &reference.poses;
    if poses.len() < 2 {
        return reference.clone();
    }
    let delta = poses[0].inverse().compose(&poses[1]);
    let mut est = vec![poses[0], poses[1]];
    for _ in 2..poses.len() {
        est.push(est.last().expect("nonempty").compose(&delta));
    }
    Trajectory::new(est)
}

fn extrapolate(est: &[Pose]) -> Pose {
    let n = est.len();
    if n >= 2 {
        let delta = est[n - 2].inverse().compose(&est[n - 1]);
        est[n - 1].compose(&delta)
    } else {
        est[n - 1]
    }
}

/// Localises one sequence frame by frame: the first frame anchors the buffer
/// with its true pose and depth, every later frame is matched against the
/// buffer and solved for pose; low-confidence solves fall back to constant
/// velocity. Returns (estimate, reference, fallback count).
pub fn localize_sequence(
    net: &EmbedNet,
    seq: &[FrameSample],
    k: &Intrinsics,
    eval: &EvalConfig,
    temperature: f64,
) -> Result<(Trajectory, Trajectory, usize), TrainError> {
    if seq.len() < 2 {
        return Err(TrainError::Dataset("test sequence holds fewer than 2 frames".into()));
    }
    let missing = |i: usize, what: &str| {
        TrainError::Dataset(format!("test frame {i} is missing {what}"))
    };
    let anchor = seq[0].pose.ok_or_else(|| missing(0, "the anchor pose"))?;
    let depth0 = seq[0].depth.as_ref().ok_or_else(|| missing(0, "the anchor depth"))?;
    let mut reference = Vec::with_capacity(seq.len());
    for (i, f) in seq.iter().enumerate() {
        reference.push(f.pose.ok_or_else(|| missing(i, "its reference pose"))?);
    }

    let images: Vec<&Tensor<f32>> = seq.iter().map(|f| &f.image).collect();
    let grids = net.embed_batch(&images)?;
    let rays = grid_rays(k, EMBED_STRIDE);

    let cam0 = unproject_grid(depth0, k, EMBED_STRIDE)?;
    let depths0: Vec<f64> = cam0.points.iter().map(|p| p.z).collect();
    let points0 = cam0.to_world(&anchor)?.points;

    let mut buffer = FrameBuffer::new();
    buffer.push(BufferEntry {
        grid: grids[0].clone(),
        points_world: points0,
        depths: depths0,
        pose: Some(anchor),
    });

    let mut est = vec![anchor];
    let mut fallbacks = 0usize;
    for t in 1..seq.len() {
        let inf = infer_correspondence(&grids[t], &buffer, temperature)?;
        let bpoints = buffer.stacked_points();
        let bdepths = buffer.stacked_depths();
        let solved = match estimate_pose(
            &inf,
            &rays,
            &bpoints,
            &bdepths,
            eval.confidence_floor,
            eval.refine_iters,
        ) {
            Ok(e) => Some(e.pose),
            Err(EmbedError::LowConfidence { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        // plausibility gate: an accepted step must respect the motion
        // bounds, else the solve is as good as lost (NaN fails the
        // comparison and is gated too)
        let prev = est.last().expect("anchored");
        let pose = match solved {
            Some(p) if (p.translation() - prev.translation()).norm() <= eval.max_step => p,
            _ => {
                fallbacks += 1;
                extrapolate(&est)
            }
        };

        // the new buffer entry triangulates each cell by projecting its
        // expected buffer match back onto the cell's ray at the solved pose
        let cols = bpoints.len();
        let inv = pose.inverse();
        let mut points = Vec::with_capacity(rays.len());
        let mut depths = Vec::with_capacity(rays.len());
        for (j, ray) in rays.iter().enumerate() {
            let row = &inf.probs.data()[j * cols..(j + 1) * cols];
            let mut expect = Vector3::zeros();
            for (i, &p) in row.iter().enumerate() {
                expect += p as f64 * bpoints[i];
            }
            let d = (ray.dot(&inv.apply(expect)) / ray.norm_squared()).max(1.0);
            points.push(pose.apply(ray * d));
            depths.push(d);
        }
        buffer.push(BufferEntry {
            grid: grids[t].clone(),
            points_world: points,
            depths,
            pose: Some(pose),
        });
        est.push(pose);
    }
    Ok((Trajectory::new(est), Trajectory::new(reference), fallbacks))
}

/// Collapses per-trajectory results into an [`EvalReport`]. Exposed so
/// plumbing can be verified with oracle trajectories.
pub fn aggregate_reports(
    runs: &[(Trajectory, Trajectory, usize)],
    max_len: usize,
    seed: u64,
    config_hash: String,
) -> Result<EvalReport, TrainError> {
    if runs.is_empty() {
        return Err(TrainError::Dataset("no trajectories to aggregate".into()));
    }
    let mut per_trajectory = Vec::with_capacity(runs.len());
    let mut curve_sums = vec![0.0; max_len];
    let mut curve_counts = vec![0usize; max_len];
    let mut fallback_count = 0;
    for (index, (est, reference, fallbacks)) in runs.iter().enumerate() {
        let horizon = reference.len() - 1;
        let n5 = 5.min(horizon);
        let n50 = max_len.min(horizon);
        per_trajectory.push(TrajectoryReport {
            index,
            ape5: ape(reference, est, n5)?,
            ape50: ape(reference, est, n50)?,
            ate50: ate(reference, est, n50)?.rmse,
            fallbacks: *fallbacks,
        });
        fallback_count += fallbacks;
        for n in 1..=n50 {
            curve_sums[n - 1] += ape(reference, est, n)?;
            curve_counts[n - 1] += 1;
        }
    }
    let k = runs.len() as f64;
    let mean = |f: fn(&TrajectoryReport) -> f64| per_trajectory.iter().map(f).sum::<f64>() / k;
    Ok(EvalReport {
        ape5: mean(|t| t.ape5),
        ape50: mean(|t| t.ape50),
        ate50: mean(|t| t.ate50),
        ape_curve: curve_sums
            .iter()
            .zip(&curve_counts)
            .take_while(|(_, &c)| c > 0)
            .map(|(&s, &c)| s / c as f64)
            .collect(),
        per_trajectory,
        fallback_count,
        seed,
        config_hash,
    })
}

/// Frame-by-frame localisation over every sequence of a test split.
pub fn evaluate(
    net: &EmbedNet,
    test: &SequenceDataset,
    k: &Intrinsics,
    cfg: &TrainConfig,
) -> Result<EvalReport, TrainError> {
    let mut runs = Vec::with_capacity(test.sequences.len());
    for seq in &test.sequences {
        runs.push(localize_sequence(net, seq, k, &cfg.eval, cfg.temperature)?);
    }
    aggregate_reports(&runs, cfg.eval.max_len, cfg.seed, config_hash(cfg))
}

/// Fraction of ground-truth-matched grid cells whose inferred best match is
/// the true one, pooled over sequences. Each sequence is scored with its
/// final frame against a buffer of the preceding frames.
pub fn top1_accuracy(
    net: &EmbedNet,
    test: &SequenceDataset,
    k: &Intrinsics,
    temperature: f64,
) -> Result<f64, TrainError> {
    check_source_sequences(test, net.input_size())?;
    let (mut correct, mut total) = (0u64, 0u64);
    for seq in &test.sequences {
        let last = seq.len() - 1;
        let lo = last.saturating_sub(BUFFER_CAPACITY);
        let window = &seq[lo..=last];
        let images: Vec<&Tensor<f32>> = window.iter().map(|f| &f.image).collect();
        let grids = net.embed_batch(&images)?;

        let mut buffer = FrameBuffer::new();
        for (f, grid) in window[..window.len() - 1].iter().zip(&grids) {
            let depth = f.depth.as_ref().expect("validated");
            let cam = unproject_grid(depth, k, EMBED_STRIDE)?;
            let depths: Vec<f64> = cam.points.iter().map(|p| p.z).collect();
            let points = cam.to_world(&f.pose.expect("validated"))?.points;
            buffer.push(BufferEntry {
                grid: grid.clone(),
                points_world: points,
                depths,
                pose: f.pose,
            });
        }

        let depth = window[window.len() - 1].depth.as_ref().expect("validated");
        let radius = gt_match_radius(depth, k, EMBED_STRIDE);
        let gt = build_gt_correspondence::<f32>(window, k, EMBED_STRIDE, radius)?;
        let inf = infer_correspondence(grids.last().expect("nonempty"), &buffer, temperature)?;
        let cols = inf.probs.dim(1);
        for (j, gt_match) in gt.matches().iter().enumerate() {
            let Some(g) = gt_match else { continue };
            let row = &inf.probs.data()[j * cols..(j + 1) * cols];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("softmax rows are finite"))
                .map(|(i, _)| i);
            total += 1;
            if best == Some(*g) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(TrainError::Dataset(
            "no ground-truth matches in the test split; cannot score accuracy".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

// ---- checkpoints ----

#[derive(Serialize, Deserialize)]
struct StateFile {
    phase: Phase,
    mode: Option<AdaptMode>,
    epoch: usize,
    step: u64,
    skipped_steps: u64,
    input_size: usize,
    config: TrainConfig,
    config_hash: String,
    gen_opt_steps: u64,
    disc_opt_steps: u64,
    log: TrainingLog,
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ten"))
}

fn save_group(
    dir: &Path,
    prefix: &str,
    params: &[(String, &Tensor<f32>)],
) -> Result<(), TrainError> {
    for (name, t) in params {
        save_tensor(tensor_path(dir, &format!("{prefix}.{name}")), t, "param")?;
    }
    Ok(())
}

fn save_moments(dir: &Path, prefix: &str, names: &[String], opt: &Adam<f32>) -> Result<(), TrainError> {
    if opt.step == 0 {
        return Ok(());
    }
    if opt.m.len() != names.len() {
        return Err(TrainError::Checkpoint(format!(
            "{prefix}: optimiser tracks {} tensors but the model has {} parameters",
            opt.m.len(),
            names.len()
        )));
    }
    for (i, name) in names.iter().enumerate() {
        save_tensor(tensor_path(dir, &format!("{prefix}.{name}.m")), &opt.m[i], "moment")?;
        save_tensor(tensor_path(dir, &format!("{prefix}.{name}.v")), &opt.v[i], "moment")?;
    }
    Ok(())
}

/// Writes the complete run state under `dir`: parameters, batch-norm
/// statistics, optimiser moments and counters, and the log. Restoring the
/// checkpoint continues the run bit for bit.
pub fn save_checkpoint(dir: impl AsRef<Path>, state: &RunState) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    save_group(dir, "net", &state.net.named_params())?;
    save_group(dir, "d_ts", &state.d_ts.named_params())?;
    save_group(dir, "d_st", &state.d_st.named_params())?;
    for (name, t) in state.net.named_buffers() {
        save_tensor(tensor_path(dir, &format!("net.buf.{name}")), &t, "buffer")?;
    }
    for (prefix, d) in [("d_ts", &state.d_ts), ("d_st", &state.d_st)] {
        for (name, t) in d.named_buffers() {
            save_tensor(tensor_path(dir, &format!("{prefix}.buf.{name}")), &t, "buffer")?;
        }
    }

    let net_names: Vec<String> = state.net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let disc_names: Vec<String> = state
        .d_ts
        .named_params()
        .iter()
        .map(|(n, _)| format!("d_ts.{n}"))
        .chain(state.d_st.named_params().iter().map(|(n, _)| format!("d_st.{n}")))
        .collect();
    save_moments(dir, "adam_gen", &net_names, &state.gen_opt)?;
    save_moments(dir, "adam_disc", &disc_names, &state.disc_opt)?;

    let file = StateFile {
        phase: state.phase,
        mode: state.mode,
        epoch: state.epoch,
        step: state.step,
        skipped_steps: state.skipped_steps,
        input_size: state.net.input_size(),
        config_hash: config_hash(&state.config),
        config: state.config.clone(),
        gen_opt_steps: state.gen_opt.step,
        disc_opt_steps: state.disc_opt.step,
        log: state.log.clone(),
    };
    let path = dir.join("state.json");
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(&path, json).map_err(io_err(&path))
}

fn load_into(dir: &Path, prefix: &str, params: &mut [(String, &mut Tensor<f32>)]) -> Result<(), TrainError> {
    for (name, p) in params {
        let path = tensor_path(dir, &format!("{prefix}.{name}"));
        let (t, _) = load_tensor::<f32>(&path)?;
        if t.shape() != p.shape() {
            return Err(TrainError::Checkpoint(format!(
                "{}: stored shape {:?} does not fit parameter shape {:?}",
                path.display(),
                t.shape(),
                p.shape()
            )));
        }
        **p = t;
    }
    Ok(())
}

fn load_moments(dir: &Path, prefix: &str, names: &[String], steps: u64, lr: f64) -> Result<Adam<f32>, TrainError> {
    let mut opt = Adam::new(lr);
    opt.step = steps;
    if steps == 0 {
        return Ok(opt);
    }
    for name in names {
        let (m, _) = load_tensor::<f32>(tensor_path(dir, &format!("{prefix}.{name}.m")))?;
        let (v, _) = load_tensor::<f32>(tensor_path(dir, &format!("{prefix}.{name}.v")))?;
        opt.m.push(m);
        opt.v.push(v);
    }
    Ok(opt)
}

/// Restores a run saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<RunState, TrainError> {
    let dir = dir.as_ref();
    let path = dir.join("state.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: StateFile = serde_json::from_str(&text)?;
    file.config.validate()?;
    if config_hash(&file.config) != file.config_hash {
        return Err(TrainError::Checkpoint(
            "config hash does not match the stored config; the checkpoint was edited".into(),
        ));
    }

    let mut state = RunState::new(file.config, file.input_size)?;
    load_into(dir, "net", &mut state.net.named_params_mut())?;
    load_into(dir, "d_ts", &mut state.d_ts.named_params_mut())?;
    load_into(dir, "d_st", &mut state.d_st.named_params_mut())?;
    for (name, _) in state.net.named_buffers() {
        let (t, _) = load_tensor::<f32>(tensor_path(dir, &format!("net.buf.{name}")))?;
        state.net.set_buffer(&name, t)?;
    }
    for (prefix, d) in [("d_ts", &state.d_ts), ("d_st", &state.d_st)] {
        for (name, _) in d.named_buffers() {
            let (t, _) = load_tensor::<f32>(tensor_path(dir, &format!("{prefix}.buf.{name}")))?;
            d.set_buffer(&name, t)?;
        }
    }

    state.phase = file.phase;
    state.mode = file.mode;
    state.epoch = file.epoch;
    state.step = file.step;
    state.skipped_steps = file.skipped_steps;
    state.log = file.log;

    let gen_lr = match state.phase {
        Phase::Pretrain => state.config.pretrain.lr,
        Phase::Adapt => state.config.adapt.gen_lr,
    };
    let net_names: Vec<String> = state.net.named_params().iter().map(|(n, _)| n.clone()).collect();
    let disc_names: Vec<String> = state
        .d_ts
        .named_params()
        .iter()
        .map(|(n, _)| format!("d_ts.{n}"))
        .chain(state.d_st.named_params().iter().map(|(n, _)| format!("d_st.{n}")))
        .collect();
    state.gen_opt = load_moments(dir, "adam_gen", &net_names, file.gen_opt_steps, gen_lr)?;
    state.disc_opt = load_moments(
        dir,
        "adam_disc",
        &disc_names,
        file.disc_opt_steps,
        state.config.adapt.disc_lr,
    )?;
    Ok(state)
}
