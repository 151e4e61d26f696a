//! The localisation embedder: a small U-Net mapping an RGB image to a grid
//! of per-cell embedding vectors, plus everything built on those vectors —
//! ground-truth and inferred correspondence matrices, the matching
//! cross-entropy loss, soft-correspondence pose estimation, and the
//! exclusivity statistic.
//!
//! Layout conventions, shared with the geometry module:
//!
//! * The embedding grid has side `input_size / 4`. Vector `i` lives at grid
//!   cell `(i / side, i % side)` and corresponds to the depth sample of the
//!   same cell in [`crate::geometry::unproject_grid`].
//! * Correspondence matrices are `(grid cells) x (buffer cells)`; buffer
//!   columns run over buffered frames oldest to newest, each contributing
//!   one grid of cells in row-major order.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::geometry::{unproject_grid, Frame, GeometryError, Intrinsics, Pose};
use crate::synthworld::{mix_seed, FrameSample};
use crate::tensor::ops::{pairwise_sq_dist_forward, softmax_row};
use crate::tensor::nn::{BatchNorm2d, BoundBatchNorm2d, BoundConv2d, BoundTConv2, Conv2d, TConv2};
use crate::tensor::{BnMode, Scalar, Tape, Tensor, TensorError, Var};

/// Image-to-grid downsampling factor (two stride-2 stages survive the
/// decoder).
pub const EMBED_STRIDE: usize = 4;
/// Number of past frames a correspondence is built against.
pub const BUFFER_CAPACITY: usize = 4;
/// Softmax temperature for inferred correspondences.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("expected a {expected}x{expected}x3 image, got shape {got:?}")]
    WrongResolution { expected: usize, got: Vec<usize> },
    #[error("{0} frames are required, got {1}")]
    NotEnoughFrames(&'static str, usize),
    #[error("frame {index} is missing {what}")]
    MissingGroundTruth { index: usize, what: &'static str },
    #[error("the frame buffer is empty")]
    EmptyBuffer,
    #[error("correspondence shape mismatch: {context} ({lhs} vs {rhs})")]
    DimMismatch {
        context: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("all correspondence rows are masked; the loss is undefined")]
    AllRowsMasked,
    #[error("only {confident} rows at or above the confidence floor; at least 3 needed")]
    LowConfidence { confident: usize },
    #[error("no batch-norm buffer named {name}")]
    UnknownBuffer { name: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ---- network ----

struct ConvBlock<T: Scalar> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvBlock {
            conv: Conv2d::new(rng, cin, cout, k, stride, k / 2, false),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn bind<'t>(
        &'t self,
        tape: &'t Tape<T>,
        trainable: bool,
        vars: &mut Vec<Var<'t, T>>,
    ) -> BoundConvBlock<'t, T> {
        BoundConvBlock {
            conv: self.conv.bind(tape, trainable, vars),
            bn: self.bn.bind(tape, trainable, vars),
        }
    }
}

struct BoundConvBlock<'t, T: Scalar> {
    conv: BoundConv2d<'t, T>,
    bn: BoundBatchNorm2d<'t, T>,
}

impl<'t, T: Scalar> BoundConvBlock<'t, T> {
    fn forward(&self, x: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>, TensorError> {
        Ok(self.bn.forward(self.conv.forward(x)?, mode)?.relu())
    }
}

/// Encoder-decoder embedder. The encoder doubles channels from 8 to 128
/// while halving resolution; the decoder upsamples twice with skip
/// concatenation; a 1x1 projection emits `channels` values per grid cell.
pub struct EmbedNet<T: Scalar = f32> {
    input_size: usize,
    channels: usize,
    stem: ConvBlock<T>,
    down: Vec<ConvBlock<T>>,
    up1_t: TConv2<T>,
    up1_c: ConvBlock<T>,
    up2_t: TConv2<T>,
    up2_c: ConvBlock<T>,
    proj: Conv2d<T>,
}

impl<T: Scalar> EmbedNet<T> {
    pub fn new(seed: u64, input_size: usize, channels: usize) -> Self {
        assert!(
            input_size >= 16 && input_size % 16 == 0,
            "input size must be a positive multiple of 16, got {input_size}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x656d626564));
        let widths = [8usize, 16, 32, 64, 128];
        let stem = ConvBlock::new(&mut rng, 3, widths[0], 3, 1);
        let down = (0..4)
            .map(|i| ConvBlock::new(&mut rng, widths[i], widths[i + 1], 3, 2))
            .collect();
        let up1_t = TConv2::new(&mut rng, widths[4], widths[3]);
        let up1_c = ConvBlock::new(&mut rng, widths[3] * 2, widths[3], 3, 1);
        let up2_t = TConv2::new(&mut rng, widths[3], widths[2]);
        let up2_c = ConvBlock::new(&mut rng, widths[2] * 2, widths[2], 3, 1);
        let proj = Conv2d::new(&mut rng, widths[2], channels, 1, 1, 0, true);
        EmbedNet {
            input_size,
            channels,
            stem,
            down,
            up1_t,
            up1_c,
            up2_t,
            up2_c,
            proj,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Grid side length; the grid has `side * side` cells.
    pub fn grid_side(&self) -> usize {
        self.input_size / EMBED_STRIDE
    }

    pub fn bind<'t>(
        &'t self,
        tape: &'t Tape<T>,
        trainable: bool,
        vars: &mut Vec<Var<'t, T>>,
    ) -> BoundEmbedNet<'t, T> {
        BoundEmbedNet {
            input_size: self.input_size,
            stem: self.stem.bind(tape, trainable, vars),
            down: self.down.iter().map(|d| d.bind(tape, trainable, vars)).collect(),
            up1_t: self.up1_t.bind(tape, trainable, vars),
            up1_c: self.up1_c.bind(tape, trainable, vars),
            up2_t: self.up2_t.bind(tape, trainable, vars),
            up2_c: self.up2_c.bind(tape, trainable, vars),
            proj: self.proj.bind(tape, trainable, vars),
        }
    }

    /// Parameters in bind order; the optimiser and checkpoints rely on it.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        fn block<'a, T: Scalar>(name: &str, b: &'a ConvBlock<T>) -> Vec<(String, &'a Tensor<T>)> {
            vec![
                (format!("{name}.conv.w"), &b.conv.w),
                (format!("{name}.bn.gamma"), &b.bn.gamma),
                (format!("{name}.bn.beta"), &b.bn.beta),
            ]
        }
        out.extend(block("stem", &self.stem));
        for (i, d) in self.down.iter().enumerate() {
            out.extend(block(&format!("down{}", i + 1), d));
        }
        out.push(("up1.tconv.w".into(), &self.up1_t.w));
        out.extend(block("up1", &self.up1_c));
        out.push(("up2.tconv.w".into(), &self.up2_t.w));
        out.extend(block("up2", &self.up2_c));
        out.push(("proj.w".into(), &self.proj.w));
        out.push(("proj.b".into(), self.proj.b.as_ref().expect("proj has bias")));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        fn block<'a, T: Scalar>(name: &str, b: &'a mut ConvBlock<T>) -> Vec<(String, &'a mut Tensor<T>)> {
            vec![
                (format!("{name}.conv.w"), &mut b.conv.w),
                (format!("{name}.bn.gamma"), &mut b.bn.gamma),
                (format!("{name}.bn.beta"), &mut b.bn.beta),
            ]
        }
        out.extend(block("stem", &mut self.stem));
        for (i, d) in self.down.iter_mut().enumerate() {
            out.extend(block(&format!("down{}", i + 1), d));
        }
        out.push(("up1.tconv.w".into(), &mut self.up1_t.w));
        out.extend(block("up1", &mut self.up1_c));
        out.push(("up2.tconv.w".into(), &mut self.up2_t.w));
        out.extend(block("up2", &mut self.up2_c));
        out.push(("proj.w".into(), &mut self.proj.w));
        out.push(("proj.b".into(), self.proj.b.as_mut().expect("proj has bias")));
        out
    }

    fn buffer_cells(&self) -> Vec<(String, &std::cell::RefCell<Tensor<T>>)> {
        fn block<'a, T: Scalar>(
            name: &str,
            b: &'a ConvBlock<T>,
            out: &mut Vec<(String, &'a std::cell::RefCell<Tensor<T>>)>,
        ) {
            out.push((format!("{name}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &b.bn.running_var));
        }
        let mut out = Vec::new();
        block("stem", &self.stem, &mut out);
        for (i, d) in self.down.iter().enumerate() {
            block(&format!("down{}", i + 1), d, &mut out);
        }
        block("up1", &self.up1_c, &mut out);
        block("up2", &self.up2_c, &mut out);
        out
    }

    /// Batch-norm running statistics, cloned out of their cells.
    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        self.buffer_cells()
            .into_iter()
            .map(|(n, c)| (n, c.borrow().clone()))
            .collect()
    }

    pub fn set_buffer(&self, name: &str, value: Tensor<T>) -> Result<(), EmbedError> {
        for (n, cell) in self.buffer_cells() {
            if n == name {
                let mut t = cell.borrow_mut();
                if t.shape() != value.shape() {
                    return Err(EmbedError::Tensor(TensorError::ShapeMismatch {
                        op: "set_buffer",
                        lhs: t.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    }));
                }
                *t = value;
                return Ok(());
            }
        }
        Err(EmbedError::UnknownBuffer {
            name: name.to_string(),
        })
    }
}

pub struct BoundEmbedNet<'t, T: Scalar = f32> {
    input_size: usize,
    stem: BoundConvBlock<'t, T>,
    down: Vec<BoundConvBlock<'t, T>>,
    up1_t: BoundTConv2<'t, T>,
    up1_c: BoundConvBlock<'t, T>,
    up2_t: BoundTConv2<'t, T>,
    up2_c: BoundConvBlock<'t, T>,
    proj: BoundConv2d<'t, T>,
}

impl<'t, T: Scalar> BoundEmbedNet<'t, T> {
    /// `(N, 3, S, S)` image batch to `(N * cells, channels)` embedding rows.
    pub fn forward(&self, x: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>, EmbedError> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(EmbedError::WrongResolution {
                expected: self.input_size,
                got: shape,
            });
        }
        let s = self.stem.forward(x, mode)?;
        let d1 = self.down[0].forward(s, mode)?;
        let d2 = self.down[1].forward(d1, mode)?;
        let d3 = self.down[2].forward(d2, mode)?;
        let d4 = self.down[3].forward(d3, mode)?;
        let u1 = self.up1_t.forward(d4)?.concat_channels(d3)?;
        let u1 = self.up1_c.forward(u1, mode)?;
        let u2 = self.up2_t.forward(u1)?.concat_channels(d2)?;
        let u2 = self.up2_c.forward(u2, mode)?;
        Ok(self.proj.forward(u2)?.nchw_to_rows()?)
    }
}

/// Stacks HWC images in `[0, 1]` into an `(N, 3, S, S)` batch.
pub fn images_to_nchw(images: &[&Tensor<f32>], size: usize) -> Result<Tensor<f32>, EmbedError> {
    if images.is_empty() {
        return Err(EmbedError::NotEnoughFrames("at least 1", 0));
    }
    for img in images {
        if img.shape() != [size, size, 3] {
            return Err(EmbedError::WrongResolution {
                expected: size,
                got: img.shape().to_vec(),
            });
        }
    }
    let n = images.len();
    let mut out = Tensor::zeros(&[n, 3, size, size]);
    let hw = size * size;
    let dst = out.data_mut();
    for (i, img) in images.iter().enumerate() {
        let src = img.data();
        for ch in 0..3 {
            let plane = &mut dst[(i * 3 + ch) * hw..(i * 3 + ch + 1) * hw];
            for (k, p) in plane.iter_mut().enumerate() {
                *p = src[k * 3 + ch];
            }
        }
    }
    Ok(out)
}

// ---- embedding grids ----

/// Per-cell embedding vectors, `(cells, channels)`, row-major grid order.
#[derive(Clone, Debug)]
pub struct EmbeddingGrid {
    pub vectors: Tensor<f32>,
    pub stride: usize,
}

impl EmbeddingGrid {
    pub fn cells(&self) -> usize {
        self.vectors.dim(0)
    }
}

impl EmbedNet<f32> {
    /// Frozen-weight embedding of one HWC image (running batch-norm stats,
    /// no gradients).
    pub fn embed(&self, image: &Tensor<f32>) -> Result<EmbeddingGrid, EmbedError> {
        Ok(self.embed_batch(&[image])?.pop().expect("one image in"))
    }

    /// Frozen-weight embedding of a batch. Identical results to one-by-one
    /// calls: inference batch norm is per-element.
    pub fn embed_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<EmbeddingGrid>, EmbedError> {
        let x = images_to_nchw(images, self.input_size)?;
        let tape: Tape<f32> = Tape::new();
        let mut vars = Vec::new();
        let bound = self.bind(&tape, false, &mut vars);
        let rows = bound.forward(tape.constant(x), BnMode::Running)?;
        let all = rows.to_tensor();
        let cells = self.grid_side() * self.grid_side();
        let c = self.channels;
        Ok((0..images.len())
            .map(|i| {
                let mut vecs = Tensor::zeros(&[cells, c]);
                vecs.data_mut()
                    .copy_from_slice(&all.data()[i * cells * c..(i + 1) * cells * c]);
                EmbeddingGrid {
                    vectors: vecs,
                    stride: EMBED_STRIDE,
                }
            })
            .collect())
    }
}

// ---- frame buffer ----

/// One buffered frame: its embedding grid, the world-frame 3D point of each
/// grid cell, the camera-frame depth each point was created from, and (in
/// training) the pose.
#[derive(Clone, Debug)]
pub struct BufferEntry {
    pub grid: EmbeddingGrid,
    pub points_world: Vec<Vector3<f64>>,
    pub depths: Vec<f64>,
    pub pose: Option<Pose>,
}

/// FIFO ring of the last [`BUFFER_CAPACITY`] frames.
#[derive(Clone, Debug, Default)]
pub struct FrameBuffer {
    entries: VecDeque<BufferEntry>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        FrameBuffer {
            entries: VecDeque::with_capacity(BUFFER_CAPACITY),
        }
    }

    pub fn push(&mut self, entry: BufferEntry) {
        if self.entries.len() == BUFFER_CAPACITY {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first; the column order of correspondence matrices.
    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&BufferEntry> {
        self.entries.back()
    }

    /// All buffered embedding rows, `(len * cells, channels)`.
    pub fn stacked_vectors(&self) -> Result<Tensor<f32>, EmbedError> {
        let first = self.entries.front().ok_or(EmbedError::EmptyBuffer)?;
        let (cells, c) = (first.grid.vectors.dim(0), first.grid.vectors.dim(1));
        let mut out = Tensor::zeros(&[self.entries.len() * cells, c]);
        for (i, e) in self.entries.iter().enumerate() {
            out.data_mut()[i * cells * c..(i + 1) * cells * c]
                .copy_from_slice(e.grid.vectors.data());
        }
        Ok(out)
    }

    pub fn stacked_points(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().flat_map(|e| e.points_world.iter().copied()).collect()
    }

    pub fn stacked_depths(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.depths.iter().copied()).collect()
    }
}

// ---- correspondence matrices ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrKind {
    /// Rows are one-hot or all-zero (masked).
    GroundTruth,
    /// Rows are probability distributions.
    Inferred,
}

#[derive(Clone, Debug)]
pub struct CorrespondenceMatrix<T: Scalar = f32> {
    /// `(current cells, buffer cells)`.
    pub probs: Tensor<T>,
    pub kind: CorrKind,
}

impl<T: Scalar> CorrespondenceMatrix<T> {
    /// Column index of the one-hot entry per row; `None` for masked rows.
    pub fn matches(&self) -> Vec<Option<usize>> {
        assert_eq!(self.kind, CorrKind::GroundTruth);
        let (rows, cols) = (self.probs.dim(0), self.probs.dim(1));
        (0..rows)
            .map(|j| {
                let row = &self.probs.data()[j * cols..(j + 1) * cols];
                row.iter().position(|&v| v > T::from_f64(0.5))
            })
            .collect()
    }

    pub fn matched_rows(&self) -> usize {
        self.matches().iter().flatten().count()
    }
}

/// Half the world-space footprint of one grid cell at the median depth of
/// the strided samples: the threshold under which two cell points count as
/// the same 3D location.
pub fn gt_match_radius(depth: &Tensor<f32>, k: &Intrinsics, stride: usize) -> f64 {
    let (h, w) = (depth.dim(0), depth.dim(1));
    let mut samples: Vec<f32> = (0..h / stride)
        .flat_map(|gy| {
            (0..w / stride).map(move |gx| {
                (gy * stride + stride / 2, gx * stride + stride / 2)
            })
        })
        .map(|(py, px)| depth.data()[py * w + px])
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite depth"));
    let median = samples[samples.len() / 2] as f64;
    0.5 * stride as f64 * median / k.fx
}

/// Geometry-only ground truth: frames are chronological with the current
/// frame last; every frame must carry depth and pose. Each current cell
/// matches the single nearest buffer cell point within `radius` (one-hot),
/// or is left all-zero and masked out of the loss.
pub fn build_gt_correspondence<T: Scalar>(
    frames: &[FrameSample],
    k: &Intrinsics,
    stride: usize,
    radius: f64,
) -> Result<CorrespondenceMatrix<T>, EmbedError> {
    if frames.len() < 2 {
        return Err(EmbedError::NotEnoughFrames("at least 2", frames.len()));
    }
    let world_points = |i: usize| -> Result<Vec<Vector3<f64>>, EmbedError> {
        let f = &frames[i];
        let depth = f.depth.as_ref().ok_or(EmbedError::MissingGroundTruth {
            index: i,
            what: "depth",
        })?;
        let pose = f.pose.ok_or(EmbedError::MissingGroundTruth {
            index: i,
            what: "pose",
        })?;
        let pc = unproject_grid(depth, k, stride)?;
        debug_assert_eq!(pc.frame, Frame::Camera);
        Ok(pc.to_world(&pose)?.points)
    };

    let current = world_points(frames.len() - 1)?;
    let mut buffer = Vec::new();
    for i in 0..frames.len() - 1 {
        buffer.extend(world_points(i)?);
    }

    let (rows, cols) = (current.len(), buffer.len());
    let mut probs = Tensor::<T>::zeros(&[rows, cols]);
    for (j, cur) in current.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (i, bp) in buffer.iter().enumerate() {
            let d = (cur - bp).norm();
            if d < best.0 {
                best = (d, i);
            }
        }
        if best.0 <= radius {
            probs.data_mut()[j * cols + best.1] = T::one();
        }
    }
    Ok(CorrespondenceMatrix {
        probs,
        kind: CorrKind::GroundTruth,
    })
}

/// Row-stochastic soft matches: row j is the softmax over buffer cells of
/// the negative squared embedding distance divided by `temperature`. Uses
/// the same kernels as the training graph, so inference equals a frozen
/// forward pass bit for bit.
pub fn infer_correspondence(
    current: &EmbeddingGrid,
    buffer: &FrameBuffer,
    temperature: f64,
) -> Result<CorrespondenceMatrix<f32>, EmbedError> {
    let stacked = buffer.stacked_vectors()?;
    if stacked.dim(1) != current.vectors.dim(1) {
        return Err(EmbedError::DimMismatch {
            context: "embedding channels",
            lhs: current.vectors.dim(1),
            rhs: stacked.dim(1),
        });
    }
    let mut logits = pairwise_sq_dist_forward(&current.vectors, &stacked);
    let scale = (-1.0 / temperature) as f32;
    for v in logits.data_mut() {
        *v *= scale;
    }
    let (rows, cols) = (logits.dim(0), logits.dim(1));
    let mut probs = Tensor::zeros(&[rows, cols]);
    for j in 0..rows {
        softmax_row(
            &logits.data()[j * cols..(j + 1) * cols],
            &mut probs.data_mut()[j * cols..(j + 1) * cols],
        );
    }
    Ok(CorrespondenceMatrix {
        probs,
        kind: CorrKind::Inferred,
    })
}

/// Graph twin of [`infer_correspondence`] for training.
pub fn correspondence_graph<'t, T: Scalar>(
    current_rows: Var<'t, T>,
    buffer_rows: Var<'t, T>,
    temperature: f64,
) -> Result<Var<'t, T>, TensorError> {
    current_rows
        .pairwise_sq_dist(buffer_rows)?
        .scale(T::from_f64(-1.0 / temperature))
        .softmax_rows()
}

const LOG_FLOOR: f64 = 1e-12;

/// Matching cross entropy: the mean over matched rows of the negative log
/// probability assigned to each row's true buffer cell. Masked rows carry
/// no gradient and arbitrary values there cannot affect the loss.
pub fn ce_loss_graph<'t, T: Scalar>(
    gt: &CorrespondenceMatrix<T>,
    probs: Var<'t, T>,
) -> Result<Var<'t, T>, EmbedError> {
    assert_eq!(gt.kind, CorrKind::GroundTruth);
    let shape = probs.shape();
    if shape != gt.probs.shape() {
        return Err(EmbedError::DimMismatch {
            context: "gt vs inferred rows",
            lhs: gt.probs.dim(0),
            rhs: shape[0],
        });
    }
    let matched = gt.matched_rows();
    if matched == 0 {
        return Err(EmbedError::AllRowsMasked);
    }
    let mask = probs.tape().constant(gt.probs.clone());
    let picked = probs.log_clamped(T::from_f64(LOG_FLOOR)).mul(mask)?;
    Ok(picked.sum().scale(T::from_f64(-1.0 / matched as f64)))
}

/// Plain twin of [`ce_loss_graph`] for evaluation.
pub fn ce_loss<T: Scalar>(
    gt: &CorrespondenceMatrix<T>,
    inf: &CorrespondenceMatrix<T>,
) -> Result<f64, EmbedError> {
    if gt.probs.shape() != inf.probs.shape() {
        return Err(EmbedError::DimMismatch {
            context: "gt vs inferred rows",
            lhs: gt.probs.dim(0),
            rhs: inf.probs.dim(0),
        });
    }
    let cols = gt.probs.dim(1);
    let mut total = 0.0;
    let mut matched = 0usize;
    for (j, m) in gt.matches().iter().enumerate() {
        if let Some(i) = m {
            let p = inf.probs.data()[j * cols + i].to_f64().max(LOG_FLOOR);
            total -= p.ln();
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(EmbedError::AllRowsMasked);
    }
    Ok(total / matched as f64)
}

// ---- pose estimation ----

/// Rays with camera-frame z = 1 through each grid cell centre, row-major;
/// multiplying a ray by a depth gives the cell's camera-frame point.
pub fn grid_rays(k: &Intrinsics, stride: usize) -> Vec<Vector3<f64>> {
    let (gh, gw) = (k.height / stride, k.width / stride);
    let mut rays = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let (px, py) = (gx * stride + stride / 2, gy * stride + stride / 2);
            rays.push(k.unproject(px as f64, py as f64, 1.0));
        }
    }
    rays
}

#[derive(Clone, Copy, Debug)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub confident_rows: usize,
    pub mean_confidence: f64,
}

/// Recovers the current camera-to-world pose from soft correspondences.
///
/// The current frame has no depth: each confident row bootstraps its depth
/// from the expectation of its matched buffer points' capture depths, and
/// `refine_iters` fixed-point rounds replace that with the depth implied by
/// the latest pose estimate. Rows whose peak probability falls below
/// `confidence_floor` are dropped; pairs are weighted by peak probability.
pub fn estimate_pose(
    inf: &CorrespondenceMatrix<f32>,
    rays: &[Vector3<f64>],
    buffer_points: &[Vector3<f64>],
    buffer_depths: &[f64],
    confidence_floor: f64,
    refine_iters: usize,
) -> Result<PoseEstimate, EmbedError> {
    let (rows, cols) = (inf.probs.dim(0), inf.probs.dim(1));
    if rows != rays.len() {
        return Err(EmbedError::DimMismatch {
            context: "rows vs rays",
            lhs: rows,
            rhs: rays.len(),
        });
    }
    if cols != buffer_points.len() || cols != buffer_depths.len() {
        return Err(EmbedError::DimMismatch {
            context: "cols vs buffer points",
            lhs: cols,
            rhs: buffer_points.len(),
        });
    }

    struct Pair {
        ray: Vector3<f64>,
        target: Vector3<f64>,
        depth: f64,
        weight: f64,
    }
    let mut pairs = Vec::new();
    for j in 0..rows {
        let row = &inf.probs.data()[j * cols..(j + 1) * cols];
        let conf = row.iter().fold(0.0f32, |a, &b| a.max(b)) as f64;
        if conf < confidence_floor {
            continue;
        }
        let mut target = Vector3::zeros();
        let mut depth = 0.0;
        for (i, &p) in row.iter().enumerate() {
            let p = p as f64;
            target += p * buffer_points[i];
            depth += p * buffer_depths[i];
        }
        pairs.push(Pair {
            ray: rays[j],
            target,
            depth,
            weight: conf,
        });
    }
    if pairs.len() < 3 {
        return Err(EmbedError::LowConfidence {
            confident: pairs.len(),
        });
    }

    let weights: Vec<f64> = pairs.iter().map(|p| p.weight).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|p| p.target).collect();
    let solve = |depths: &[f64]| -> Result<Pose, EmbedError> {
        let src: Vec<Vector3<f64>> = pairs
            .iter()
            .zip(depths)
            .map(|(p, &d)| p.ray * d)
            .collect();
        Ok(crate::geometry::umeyama_align(&src, &dst, Some(&weights))?)
    };

    let mut depths: Vec<f64> = pairs.iter().map(|p| p.depth).collect();
    let mut pose = solve(&depths)?;
    // orthogonal iteration: project the back-transformed targets onto their
    // rays, then re-solve; both half-steps lower the object-space error
    for _ in 0..refine_iters {
        let inv = pose.inverse();
        for (d, p) in depths.iter_mut().zip(&pairs) {
            let q = inv.apply(p.target);
            *d = (p.ray.dot(&q) / p.ray.norm_squared()).max(1.0);
        }
        pose = solve(&depths)?;
    }

    let mean_confidence = weights.iter().sum::<f64>() / weights.len() as f64;
    Ok(PoseEstimate {
        pose,
        confident_rows: pairs.len(),
        mean_confidence,
    })
}

// ---- exclusivity ----

/// Per-vector leakage: 1 minus the self probability under a softmax over
/// negative intra-image pairwise distances (self included). Zero means the
/// vector matches only itself; near one means it is indistinguishable from
/// its peers.
pub fn exclusivity_values(grid: &EmbeddingGrid, temperature: f64) -> Vec<f64> {
    let n = grid.vectors.dim(0);
    let mut logits = pairwise_sq_dist_forward(&grid.vectors, &grid.vectors);
    let scale = (-1.0 / temperature) as f32;
    for v in logits.data_mut() {
        *v *= scale;
    }
    let mut row = vec![0.0f32; n];
    (0..n)
        .map(|i| {
            softmax_row(&logits.data()[i * n..(i + 1) * n], &mut row);
            1.0 - row[i] as f64
        })
        .collect()
}

pub const HISTOGRAM_BINS: usize = 64;

/// Counts over `HISTOGRAM_BINS` equal bins spanning `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn new() -> Self {
        Histogram {
            counts: vec![0; HISTOGRAM_BINS],
            total: 0,
        }
    }

    pub fn add(&mut self, value: f64) {
        let bin = ((value * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        self.counts[bin] += 1;
        self.total += 1;
    }

    /// Fraction of samples strictly below `threshold` bins-wise: counts all
    /// bins whose right edge is at or below the threshold.
    pub fn mass_below(&self, threshold: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let full_bins = (threshold * HISTOGRAM_BINS as f64).round() as usize;
        let c: u64 = self.counts.iter().take(full_bins.min(HISTOGRAM_BINS)).sum();
        c as f64 / self.total as f64
    }

    /// `bin_left,count` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.6},{}\n", i as f64 / HISTOGRAM_BINS as f64, c));
        }
        out
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulates [`exclusivity_values`] of every grid into one histogram.
pub fn exclusivity_histogram(grids: &[EmbeddingGrid], temperature: f64) -> Histogram {
    let mut h = Histogram::new();
    for g in grids {
        for v in exclusivity_values(g, temperature) {
            h.add(v);
        }
    }
    h
}
