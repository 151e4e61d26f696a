//! Differentiable operations on [`Var`] handles.
//!
//! Forward passes compute eagerly; each op registers a closure that maps the
//! output gradient to parent gradients. Closures avoid capturing parent
//! tensors (they are handed back at backward time) except where an
//! intermediate is worth caching, like the im2col matrix of a convolution.
//!
//! Shape errors carry both shapes in the message.

use super::dense::{Tensor, TensorError};
use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::scalar::Scalar;
use super::tape::{Tape, Var};
use crate::par;

fn require_rank<T: Scalar>(
    op: &'static str,
    t: &Tensor<T>,
    rank: usize,
) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::RankMismatch {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    // ---- elementwise binary ----

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            a.zip_map(&b, "add", |x, y| x + y)?
        };
        Ok(self.tape.push_op(value, vec![self.id, rhs.id], || {
            Box::new(|args| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| args.grad.clone()),
                ]
            })
        }))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            a.zip_map(&b, "sub", |x, y| x - y)?
        };
        Ok(self.tape.push_op(value, vec![self.id, rhs.id], || {
            Box::new(|args| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| args.grad.map(|g| -g)),
                ]
            })
        }))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            a.zip_map(&b, "mul", |x, y| x * y)?
        };
        Ok(self.tape.push_op(value, vec![self.id, rhs.id], || {
            Box::new(|args| {
                vec![
                    args.needs[0].then(|| {
                        args.grad
                            .zip_map(args.parents[1], "mul_back", |g, b| g * b)
                            .expect("shapes fixed at forward")
                    }),
                    args.needs[1].then(|| {
                        args.grad
                            .zip_map(args.parents[0], "mul_back", |g, a| g * a)
                            .expect("shapes fixed at forward")
                    }),
                ]
            })
        }))
    }

    // ---- scalar ----

    pub fn scale(self, s: T) -> Var<'t, T> {
        let value = self.value().map(|x| x * s);
        self.tape.push_op(value, vec![self.id], || {
            Box::new(move |args| vec![args.needs[0].then(|| args.grad.map(|g| g * s))])
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    // ---- unary maps ----

    pub fn relu(self) -> Var<'t, T> {
        let value = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    args.grad
                        .zip_map(args.parents[0], "relu_back", |g, x| {
                            if x > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        })
                        .expect("shapes fixed")
                })]
            })
        })
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        let value = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.tape.push_op(value, vec![self.id], || {
            Box::new(move |args| {
                vec![args.needs[0].then(|| {
                    args.grad
                        .zip_map(args.parents[0], "leaky_relu_back", |g, x| {
                            if x > T::zero() {
                                g
                            } else {
                                g * slope
                            }
                        })
                        .expect("shapes fixed")
                })]
            })
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let one = T::one();
        let value = self.value().map(|x| one / (one + (-x).exp()));
        self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    args.grad
                        .zip_map(args.value, "sigmoid_back", |g, y| g * y * (T::one() - y))
                        .expect("shapes fixed")
                })]
            })
        })
    }

    /// `ln(1 + e^x)`, numerically stable at both tails. Always positive.
    pub fn softplus(self) -> Var<'t, T> {
        let hi = T::from_f64(30.0);
        let value = self.value().map(|x| {
            if x > hi {
                x
            } else if x < -hi {
                x.exp()
            } else {
                (T::one() + x.exp()).ln()
            }
        });
        self.tape.push_op(value, vec![self.id], || {
            Box::new(move |args| {
                vec![args.needs[0].then(|| {
                    args.grad
                        .zip_map(args.parents[0], "softplus_back", |g, x| {
                            g * (T::one() / (T::one() + (-x).exp()))
                        })
                        .expect("shapes fixed")
                })]
            })
        })
    }

    /// `ln(max(x, floor))`. The clamp keeps vanishing probabilities from
    /// producing infinities; gradient is zero in the clamped region.
    pub fn log_clamped(self, floor: T) -> Var<'t, T> {
        let value = self.value().map(|x| x.max(floor).ln());
        self.tape.push_op(value, vec![self.id], || {
            Box::new(move |args| {
                vec![args.needs[0].then(|| {
                    args.grad
                        .zip_map(args.parents[0], "log_back", |g, x| {
                            if x > floor {
                                g / x
                            } else {
                                T::zero()
                            }
                        })
                        .expect("shapes fixed")
                })]
            })
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let value = self.value().map(|x| x.max(lo).min(hi));
        self.tape.push_op(value, vec![self.id], || {
            Box::new(move |args| {
                vec![args.needs[0].then(|| {
                    args.grad
                        .zip_map(args.parents[0], "clamp_back", |g, x| {
                            if x > lo && x < hi {
                                g
                            } else {
                                T::zero()
                            }
                        })
                        .expect("shapes fixed")
                })]
            })
        })
    }

    // ---- reductions ----

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(T::from_f64(self.value().sum_f64()));
        self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    Tensor::full(args.parents[0].shape(), args.grad.item())
                })]
            })
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let value = Tensor::scalar(T::from_f64(self.value().mean_f64()));
        self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    let n = T::from_f64(args.parents[0].len() as f64);
                    Tensor::full(args.parents[0].shape(), args.grad.item() / n)
                })]
            })
        })
    }

    // ---- shape ----

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    args.grad
                        .clone()
                        .reshape(args.parents[0].shape())
                        .expect("same element count")
                })]
            })
        }))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let v = self.value();
            require_rank("slice_rows", &v, 2)?;
            let (m, c) = (v.dim(0), v.dim(1));
            if start + len > m {
                return Err(TensorError::LengthMismatch {
                    op: "slice_rows",
                    shape: vec![start, len],
                    len: m,
                });
            }
            Tensor::from_vec(&[len, c], v.data()[start * c..(start + len) * c].to_vec())?
        };
        Ok(self.tape.push_op(value, vec![self.id], || {
            Box::new(move |args| {
                vec![args.needs[0].then(|| {
                    let c = args.parents[0].dim(1);
                    let mut dx = Tensor::zeros(args.parents[0].shape());
                    dx.data_mut()[start * c..(start + len) * c].copy_from_slice(args.grad.data());
                    dx
                })]
            })
        }))
    }

    /// (N, C, H, W) -> (N*H*W, C): one row per spatial cell, image-major then
    /// row-major within the image.
    pub fn nchw_to_rows(self) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let v = self.value();
            require_rank("nchw_to_rows", &v, 4)?;
            let (n, c, h, w) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
            let mut out = Tensor::zeros(&[n * h * w, c]);
            permute_nchw_to_rows(v.data(), out.data_mut(), n, c, h * w);
            out
        };
        Ok(self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    let xs = args.parents[0].shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut dx = Tensor::zeros(xs);
                    permute_rows_to_nchw(args.grad.data(), dx.data_mut(), n, c, hw);
                    dx
                })]
            })
        }))
    }

    /// (N*H*W, C) -> (N, C, H, W): exact inverse of [`Self::nchw_to_rows`]
    /// for the given spatial size.
    pub fn rows_to_nchw(self, h: usize, w: usize) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let v = self.value();
            require_rank("rows_to_nchw", &v, 2)?;
            let (rows, c) = (v.dim(0), v.dim(1));
            if h == 0 || w == 0 || rows % (h * w) != 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "rows_to_nchw",
                    lhs: vec![rows, c],
                    rhs: vec![h, w],
                });
            }
            let n = rows / (h * w);
            let mut out = Tensor::zeros(&[n, c, h, w]);
            permute_rows_to_nchw(v.data(), out.data_mut(), n, c, h * w);
            out
        };
        Ok(self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    let gs = args.grad.shape();
                    let (n, c, hw) = (gs[0], gs[1], gs[2] * gs[3]);
                    let mut dx = Tensor::zeros(&[n * hw, c]);
                    permute_nchw_to_rows(args.grad.data(), dx.data_mut(), n, c, hw);
                    dx
                })]
            })
        }))
    }

    // ---- matrix ----

    /// (M, K) x (K, N) -> (M, N).
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            require_rank("matmul", &a, 2)?;
            require_rank("matmul", &b, 2)?;
            if a.dim(1) != b.dim(0) {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
            let mut c = Tensor::zeros(&[m, n]);
            gemm_nn(c.data_mut(), a.data(), b.data(), m, k, n);
            c
        };
        Ok(self.tape.push_op(value, vec![self.id, rhs.id], || {
            Box::new(|args| {
                let a = args.parents[0];
                let b = args.parents[1];
                let (m, k) = (a.dim(0), a.dim(1));
                let n = b.dim(1);
                let da = args.needs[0].then(|| {
                    let mut da = Tensor::zeros(a.shape());
                    // dA = g * B^T, with B stored (K, N)
                    gemm_nt(da.data_mut(), args.grad.data(), b.data(), m, n, k);
                    da
                });
                let db = args.needs[1].then(|| {
                    let mut db = Tensor::zeros(b.shape());
                    // dB = A^T * g
                    gemm_tn(db.data_mut(), a.data(), args.grad.data(), k, m, n);
                    db
                });
                vec![da, db]
            })
        }))
    }

    /// Squared Euclidean distance between every row pair: a (M, C), b (N, C)
    /// -> (M, N).
    pub fn pairwise_sq_dist(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            require_rank("pairwise_sq_dist", &a, 2)?;
            require_rank("pairwise_sq_dist", &b, 2)?;
            if a.dim(1) != b.dim(1) {
                return Err(TensorError::ShapeMismatch {
                    op: "pairwise_sq_dist",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            pairwise_sq_dist_forward(&a, &b)
        };
        Ok(self.tape.push_op(value, vec![self.id, rhs.id], || {
            Box::new(|args| pairwise_sq_dist_backward(args.grad, args.parents[0], args.parents[1], args.needs))
        }))
    }

    /// Row-wise softmax of a 2-D tensor, numerically stabilised.
    pub fn softmax_rows(self) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let v = self.value();
            require_rank("softmax_rows", &v, 2)?;
            let mut out = Tensor::zeros(v.shape());
            let n = v.dim(1);
            let src = v.data();
            par::for_each_chunk_mut(out.data_mut(), n, |r, row| {
                softmax_row(&src[r * n..(r + 1) * n], row);
            });
            out
        };
        Ok(self.tape.push_op(value, vec![self.id], || {
            Box::new(|args| {
                vec![args.needs[0].then(|| {
                    let n = args.value.dim(1);
                    let y = args.value.data();
                    let g = args.grad.data();
                    let mut dx = Tensor::zeros(args.value.shape());
                    par::for_each_chunk_mut(dx.data_mut(), n, |r, row| {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        for ((d, &gv), &yv) in row.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - dot);
                        }
                    });
                    dx
                })]
            })
        }))
    }

    // ---- bias broadcasts ----

    /// (N, C, H, W) + bias (C).
    pub fn add_chan_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let x = self.value();
            let b = bias.value();
            require_rank("add_chan_bias", &x, 4)?;
            require_rank("add_chan_bias", &b, 1)?;
            if x.dim(1) != b.dim(0) {
                return Err(TensorError::ShapeMismatch {
                    op: "add_chan_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (c, hw) = (x.dim(1), x.dim(2) * x.dim(3));
            let mut out = x.clone();
            let bd = b.data();
            par::for_each_chunk_mut(out.data_mut(), hw, |i, seg| {
                let bv = bd[i % c];
                for v in seg.iter_mut() {
                    *v += bv;
                }
            });
            out
        };
        Ok(self.tape.push_op(value, vec![self.id, bias.id], || {
            Box::new(|args| {
                let dx = args.needs[0].then(|| args.grad.clone());
                let db = args.needs[1].then(|| {
                    let xs = args.parents[0].shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let g = args.grad.data();
                    let mut db = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        let mut acc = 0.0f64;
                        for im in 0..n {
                            let base = (im * c + ch) * hw;
                            for &gv in &g[base..base + hw] {
                                acc += gv.to_f64();
                            }
                        }
                        db.data_mut()[ch] = T::from_f64(acc);
                    }
                    db
                });
                vec![dx, db]
            })
        }))
    }

    /// (M, N) + bias (N), broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let x = self.value();
            let b = bias.value();
            require_rank("add_row_bias", &x, 2)?;
            require_rank("add_row_bias", &b, 1)?;
            if x.dim(1) != b.dim(0) {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let n = x.dim(1);
            let mut out = x.clone();
            let bd = b.data();
            par::for_each_chunk_mut(out.data_mut(), n, |_, row| {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            });
            out
        };
        Ok(self.tape.push_op(value, vec![self.id, bias.id], || {
            Box::new(|args| {
                let dx = args.needs[0].then(|| args.grad.clone());
                let db = args.needs[1].then(|| {
                    let (m, n) = (args.grad.dim(0), args.grad.dim(1));
                    let g = args.grad.data();
                    let mut db = Tensor::zeros(&[n]);
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += g[i * n + j].to_f64();
                        }
                        db.data_mut()[j] = T::from_f64(acc);
                    }
                    db
                });
                vec![dx, db]
            })
        }))
    }

    // ---- convolutions ----

    /// 2-D convolution, NCHW input, (Cout, Cin, KH, KW) weight.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        let (value, cols, dims) = {
            let x = self.value();
            let w = weight.value();
            require_rank("conv2d", &x, 4)?;
            require_rank("conv2d", &w, 4)?;
            if x.dim(1) != w.dim(1) {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let dims = ConvDims::new(&x, &w, stride, pad)?;
            let cols = im2col(x.data(), &dims);
            let mut out_mat = vec![T::zero(); dims.cout * dims.ncols()];
            gemm_nn(
                &mut out_mat,
                w.data(),
                &cols,
                dims.cout,
                dims.kvol(),
                dims.ncols(),
            );
            let mut out = Tensor::zeros(&[dims.n, dims.cout, dims.oh, dims.ow]);
            // out_mat is channel-major; interleave back to NCHW
            let ohw = dims.oh * dims.ow;
            let ncols = dims.ncols();
            let cout = dims.cout;
            par::for_each_chunk_mut(out.data_mut(), ohw, |nc, seg| {
                let (im, ch) = (nc / cout, nc % cout);
                seg.copy_from_slice(&out_mat[ch * ncols + im * ohw..ch * ncols + (im + 1) * ohw]);
            });
            (out, cols, dims)
        };
        Ok(self.tape.push_op(value, vec![self.id, weight.id], || {
            Box::new(move |args| {
                let x = args.parents[0];
                let w = args.parents[1];
                let ohw = dims.oh * dims.ow;
                let ncols = dims.ncols();
                // gradient back to channel-major layout
                let mut gmat = vec![T::zero(); dims.cout * ncols];
                let g = args.grad.data();
                par::for_each_chunk_mut(&mut gmat, ncols, |ch, seg| {
                    for im in 0..dims.n {
                        seg[im * ohw..(im + 1) * ohw]
                            .copy_from_slice(&g[(im * dims.cout + ch) * ohw..(im * dims.cout + ch + 1) * ohw]);
                    }
                });
                let dw = args.needs[1].then(|| {
                    let mut dw = Tensor::zeros(w.shape());
                    gemm_nt(dw.data_mut(), &gmat, &cols, dims.cout, ncols, dims.kvol());
                    dw
                });
                let dx = args.needs[0].then(|| {
                    // W^T as (kvol, cout)
                    let mut wt = vec![T::zero(); dims.kvol() * dims.cout];
                    let wd = w.data();
                    for co in 0..dims.cout {
                        for kv in 0..dims.kvol() {
                            wt[kv * dims.cout + co] = wd[co * dims.kvol() + kv];
                        }
                    }
                    let mut dcols = vec![T::zero(); dims.kvol() * ncols];
                    gemm_nn(&mut dcols, &wt, &gmat, dims.kvol(), dims.cout, ncols);
                    let mut dx = Tensor::zeros(x.shape());
                    col2im(&dcols, dx.data_mut(), &dims);
                    dx
                });
                vec![dx, dw]
            })
        }))
    }

    /// Transposed convolution with a fixed 2x2 kernel and stride 2: exact
    /// doubling of spatial size, each output pixel fed by exactly one input
    /// pixel. Weight layout (Cin, Cout, 2, 2).
    pub fn tconv2x2(self, weight: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let x = self.value();
            let w = weight.value();
            require_rank("tconv2x2", &x, 4)?;
            require_rank("tconv2x2", &w, 4)?;
            if x.dim(1) != w.dim(0) || w.dim(2) != 2 || w.dim(3) != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "tconv2x2",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            tconv_forward(&x, &w)
        };
        Ok(self.tape.push_op(value, vec![self.id, weight.id], || {
            Box::new(|args| {
                let x = args.parents[0];
                let w = args.parents[1];
                let dx = args.needs[0].then(|| tconv_backward_x(args.grad, x, w));
                let dw = args.needs[1].then(|| tconv_backward_w(args.grad, x, w));
                vec![dx, dw]
            })
        }))
    }

    /// Concatenate along the channel axis: (N, C1, H, W) ++ (N, C2, H, W).
    pub fn concat_channels(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            require_rank("concat_channels", &a, 4)?;
            require_rank("concat_channels", &b, 4)?;
            if a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (n, c1, c2, hw) = (a.dim(0), a.dim(1), b.dim(1), a.dim(2) * a.dim(3));
            let mut out = Tensor::zeros(&[n, c1 + c2, a.dim(2), a.dim(3)]);
            let (ad, bd) = (a.data(), b.data());
            par::for_each_chunk_mut(out.data_mut(), (c1 + c2) * hw, |im, seg| {
                seg[..c1 * hw].copy_from_slice(&ad[im * c1 * hw..(im + 1) * c1 * hw]);
                seg[c1 * hw..].copy_from_slice(&bd[im * c2 * hw..(im + 1) * c2 * hw]);
            });
            out
        };
        Ok(self.tape.push_op(value, vec![self.id, rhs.id], || {
            Box::new(|args| {
                let a = args.parents[0];
                let b = args.parents[1];
                let (n, c1, c2, hw) = (a.dim(0), a.dim(1), b.dim(1), a.dim(2) * a.dim(3));
                let g = args.grad.data();
                let _ = n;
                let da = args.needs[0].then(|| {
                    let mut da = Tensor::zeros(a.shape());
                    par::for_each_chunk_mut(da.data_mut(), c1 * hw, |im, seg| {
                        let base = im * (c1 + c2) * hw;
                        seg.copy_from_slice(&g[base..base + c1 * hw]);
                    });
                    da
                });
                let db = args.needs[1].then(|| {
                    let mut db = Tensor::zeros(b.shape());
                    par::for_each_chunk_mut(db.data_mut(), c2 * hw, |im, seg| {
                        let base = im * (c1 + c2) * hw + c1 * hw;
                        seg.copy_from_slice(&g[base..base + c2 * hw]);
                    });
                    db
                });
                vec![da, db]
            })
        }))
    }
}

/// Concatenate 2-D tensors along rows. All parts must share the column count.
pub fn concat_rows<'t, T: Scalar>(
    tape: &'t Tape<T>,
    parts: &[Var<'t, T>],
) -> Result<Var<'t, T>, TensorError> {
    assert!(!parts.is_empty(), "concat_rows needs at least one part");
    let mut row_counts = Vec::with_capacity(parts.len());
    let value = {
        let mut cols = None;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            require_rank("concat_rows", &v, 2)?;
            match cols {
                None => cols = Some(v.dim(1)),
                Some(c) if c != v.dim(1) => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![c],
                        rhs: v.shape().to_vec(),
                    })
                }
                _ => {}
            }
            row_counts.push(v.dim(0));
            data.extend_from_slice(v.data());
        }
        let rows: usize = row_counts.iter().sum();
        Tensor::from_vec(&[rows, cols.unwrap()], data)?
    };
    let parents: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push_op(value, parents, || {
        Box::new(move |args| {
            let c = args.value.dim(1);
            let g = args.grad.data();
            let mut out = Vec::with_capacity(row_counts.len());
            let mut row = 0;
            for (i, &m) in row_counts.iter().enumerate() {
                out.push(args.needs[i].then(|| {
                    Tensor::from_vec(&[m, c], g[row * c..(row + m) * c].to_vec())
                        .expect("slice sized to shape")
                }));
                row += m;
            }
            out
        })
    }))
}

/// Training-mode batch norm output plus the batch statistics it used, so the
/// caller can fold them into running estimates without a second pass.
pub struct BnTrainOut<'t, T: Scalar> {
    pub out: Var<'t, T>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Batch norm over (N, H, W) per channel using the batch's own statistics.
/// The backward pass accounts for the dependence of those statistics on `x`.
pub fn batch_norm_train<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<BnTrainOut<'t, T>, TensorError> {
    let (mean, var) = {
        let xv = x.value();
        require_rank("batch_norm", &xv, 4)?;
        batch_stats(&xv)
    };
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
    let inv: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
        .collect();
    Ok(BnTrainOut {
        out: affine_norm(x, gamma, beta, mean_t, inv, true)?,
        batch_mean: mean,
        batch_var: var,
    })
}

/// Batch norm with frozen statistics (inference with running estimates).
pub fn batch_norm_eval<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Var<'t, T>, TensorError> {
    let inv: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();
    affine_norm(x, gamma, beta, mean.to_vec(), inv, false)
}

/// Per-channel mean and biased variance over (N, H, W), f64 accumulation.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for im in 0..n {
            let base = (im * c + ch) * hw;
            for &v in &xd[base..base + hw] {
                s += v.to_f64();
            }
        }
        mean[ch] = s / m;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut s = 0.0f64;
        for im in 0..n {
            let base = (im * c + ch) * hw;
            for &v in &xd[base..base + hw] {
                let d = v.to_f64() - mu;
                s += d * d;
            }
        }
        var[ch] = s / m;
    }
    (mean, var)
}

/// Shared affine-normalisation node. `mean`/`inv_std` are the statistics used
/// to whiten `x`; with `coupled` the backward pass treats them as functions
/// of `x` (training), otherwise as constants (inference).
fn affine_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    coupled: bool,
) -> Result<Var<'t, T>, TensorError> {
    let value = {
        let xv = x.value();
        require_rank("batch_norm", &xv, 4)?;
        let g = gamma.value();
        let b = beta.value();
        let c = xv.dim(1);
        if g.dim(0) != c || b.dim(0) != c || mean.len() != c || inv_std.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let hw = xv.dim(2) * xv.dim(3);
        let mut out = xv.clone();
        let (gd, bd) = (g.data(), b.data());
        let (mn, iv) = (&mean, &inv_std);
        par::for_each_chunk_mut(out.data_mut(), hw, |i, seg| {
            let ch = i % c;
            let (m, s, ga, be) = (mn[ch], iv[ch], gd[ch], bd[ch]);
            for v in seg.iter_mut() {
                *v = (*v - m) * s * ga + be;
            }
        });
        out
    };
    let tape = x.tape;
    Ok(tape.push_op(value, vec![x.id, gamma.id, beta.id], || {
        Box::new(move |args| {
            let xv = args.parents[0];
            let gv = args.parents[1];
            let (n, c, hw) = (xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3));
            let m = (n * hw) as f64;
            let g = args.grad.data();
            let xd = xv.data();
            let gammad = gv.data();

            // per-channel sums of g and g*xhat, f64 accumulators
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for im in 0..n {
                for ch in 0..c {
                    let base = (im * c + ch) * hw;
                    let (mn, iv) = (mean[ch], inv_std[ch]);
                    let mut sg = 0.0f64;
                    let mut sgx = 0.0f64;
                    for k in 0..hw {
                        let gvv = g[base + k].to_f64();
                        let xh = ((xd[base + k] - mn) * iv).to_f64();
                        sg += gvv;
                        sgx += gvv * xh;
                    }
                    sum_g[ch] += sg;
                    sum_gx[ch] += sgx;
                }
            }

            let dgamma = args.needs[1].then(|| {
                let mut t = Tensor::zeros(&[c]);
                for ch in 0..c {
                    t.data_mut()[ch] = T::from_f64(sum_gx[ch]);
                }
                t
            });
            let dbeta = args.needs[2].then(|| {
                let mut t = Tensor::zeros(&[c]);
                for ch in 0..c {
                    t.data_mut()[ch] = T::from_f64(sum_g[ch]);
                }
                t
            });
            let dx = args.needs[0].then(|| {
                let mut dx = Tensor::zeros(xv.shape());
                let dd = dx.data_mut();
                for im in 0..n {
                    for ch in 0..c {
                        let base = (im * c + ch) * hw;
                        let (mn, iv, ga) = (mean[ch], inv_std[ch], gammad[ch]);
                        if coupled {
                            let mg = T::from_f64(sum_g[ch] / m);
                            let mgx = T::from_f64(sum_gx[ch] / m);
                            for k in 0..hw {
                                let xh = (xd[base + k] - mn) * iv;
                                dd[base + k] = ga * iv * (g[base + k] - mg - xh * mgx);
                            }
                        } else {
                            for k in 0..hw {
                                dd[base + k] = g[base + k] * ga * iv;
                            }
                        }
                    }
                }
                dx
            });
            vec![dx, dgamma, dbeta]
        })
    }))
}

// ---- helpers ----

pub(crate) fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let mut mx = src[0];
    for &v in src.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for (d, &v) in dst.iter_mut().zip(src) {
        let e = (v - mx).exp();
        *d = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
}

fn permute_nchw_to_rows<T: Scalar>(x: &[T], out: &mut [T], _n: usize, c: usize, hw: usize) {
    par::for_each_chunk_mut(out, hw * c, |im, seg| {
        // seg holds all rows of one image: hw rows of c values
        for ch in 0..c {
            let src = &x[(im * c + ch) * hw..(im * c + ch + 1) * hw];
            for (k, &v) in src.iter().enumerate() {
                seg[k * c + ch] = v;
            }
        }
    });
}

fn permute_rows_to_nchw<T: Scalar>(rows: &[T], out: &mut [T], _n: usize, c: usize, hw: usize) {
    par::for_each_chunk_mut(out, hw * c, |im, seg| {
        let src = &rows[im * hw * c..(im + 1) * hw * c];
        for ch in 0..c {
            for k in 0..hw {
                seg[ch * hw + k] = src[k * c + ch];
            }
        }
    });
}

pub(crate) fn pairwise_sq_dist_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, c) = (a.dim(0), a.dim(1));
    let n = b.dim(0);
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    par::for_each_chunk_mut(out.data_mut(), n, |i, row| {
        let ar = &ad[i * c..(i + 1) * c];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &bd[j * c..(j + 1) * c];
            let mut s = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                let d = x - y;
                s += d * d;
            }
            *o = s;
        }
    });
    out
}

fn pairwise_sq_dist_backward<T: Scalar>(
    grad: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (m, c) = (a.dim(0), a.dim(1));
    let n = b.dim(0);
    let g = grad.data();
    let two = T::from_f64(2.0);

    let da = needs[0].then(|| {
        // dA = 2 * (rowsum(g) .* a - g * B)
        let mut gb = vec![T::zero(); m * c];
        gemm_nn(&mut gb, g, b.data(), m, n, c);
        let mut da = Tensor::zeros(a.shape());
        let ad = a.data();
        for i in 0..m {
            let mut rs = T::zero();
            for j in 0..n {
                rs += g[i * n + j];
            }
            for k in 0..c {
                da.data_mut()[i * c + k] = two * (rs * ad[i * c + k] - gb[i * c + k]);
            }
        }
        da
    });
    let db = needs[1].then(|| {
        // dB = 2 * (colsum(g) .* b - g^T * A)
        let mut gta = vec![T::zero(); n * c];
        gemm_tn(&mut gta, g, a.data(), n, m, c);
        let mut db = Tensor::zeros(b.shape());
        let bd = b.data();
        for j in 0..n {
            let mut cs = T::zero();
            for i in 0..m {
                cs += g[i * n + j];
            }
            for k in 0..c {
                db.data_mut()[j * c + k] = two * (cs * bd[j * c + k] - gta[j * c + k]);
            }
        }
        db
    });
    vec![da, db]
}

/// Convolution geometry, all sizes resolved at forward time.
#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        assert!(stride > 0, "conv2d stride must be positive");
        let (h, wd) = (x.dim(2), x.dim(3));
        let (kh, kw) = (w.dim(2), w.dim(3));
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        Ok(ConvDims {
            n: x.dim(0),
            cin: x.dim(1),
            h,
            w: wd,
            cout: w.dim(0),
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn kvol(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn ncols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unrolls image patches to a (cin*kh*kw) x (n*oh*ow) matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let ncols = d.ncols();
    let mut cols = vec![T::zero(); d.kvol() * ncols];
    let ohw = d.oh * d.ow;
    par::for_each_chunk_mut(&mut cols, ncols, |r, row| {
        let ch = r / (d.kh * d.kw);
        let ky = (r / d.kw) % d.kh;
        let kx = r % d.kw;
        for im in 0..d.n {
            let xbase = (im * d.cin + ch) * d.h * d.w;
            for oy in 0..d.oh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let iy = iy as usize;
                let rbase = im * ohw + oy * d.ow;
                for ox in 0..d.ow {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    row[rbase + ox] = x[xbase + iy * d.w + ix as usize];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Scalar>(dcols: &[T], dx: &mut [T], d: &ConvDims) {
    let ncols = d.ncols();
    let ohw = d.oh * d.ow;
    let chw = d.cin * d.h * d.w;
    par::for_each_chunk_mut(dx, chw, |im, dxn| {
        for r in 0..d.kvol() {
            let ch = r / (d.kh * d.kw);
            let ky = (r / d.kw) % d.kh;
            let kx = r % d.kw;
            let row = &dcols[r * ncols..(r + 1) * ncols];
            for oy in 0..d.oh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let iy = iy as usize;
                let rbase = im * ohw + oy * d.ow;
                for ox in 0..d.ow {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    dxn[ch * d.h * d.w + iy * d.w + ix as usize] += row[rbase + ox];
                }
            }
        }
    });
}

fn tconv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let _ = n;
    let cout = w.dim(1);
    let (oh, ow) = (2 * h, 2 * wd);
    // weight re-packed (ky, kx, cout, cin) so the cin dot is contiguous
    let mut wp = vec![T::zero(); 4 * cout * cin];
    let wdta = w.data();
    for ci in 0..cin {
        for co in 0..cout {
            for ky in 0..2 {
                for kx in 0..2 {
                    wp[(((ky * 2 + kx) * cout) + co) * cin + ci] =
                        wdta[((ci * cout + co) * 2 + ky) * 2 + kx];
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let xd = x.data();
    par::for_each_chunk_mut(out.data_mut(), cout * oh * ow, |im, seg| {
        let mut xv = vec![T::zero(); cin];
        for iy in 0..h {
            for ix in 0..wd {
                for (ci, v) in xv.iter_mut().enumerate() {
                    *v = xd[((im * cin + ci) * h + iy) * wd + ix];
                }
                for ky in 0..2 {
                    for kx in 0..2 {
                        let (o_y, o_x) = (2 * iy + ky, 2 * ix + kx);
                        for co in 0..cout {
                            let wrow = &wp[((ky * 2 + kx) * cout + co) * cin..][..cin];
                            let mut s = T::zero();
                            for (&a, &b) in xv.iter().zip(wrow) {
                                s += a * b;
                            }
                            seg[(co * oh + o_y) * ow + o_x] = s;
                        }
                    }
                }
            }
        }
    });
    out
}

fn tconv_backward_x<T: Scalar>(grad: &Tensor<T>, x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let _ = n;
    let cout = w.dim(1);
    let (oh, ow) = (2 * h, 2 * wd);
    // weight re-packed (ky, kx, cin, cout)
    let mut wp = vec![T::zero(); 4 * cin * cout];
    let wdta = w.data();
    for ci in 0..cin {
        for co in 0..cout {
            for ky in 0..2 {
                for kx in 0..2 {
                    wp[(((ky * 2 + kx) * cin) + ci) * cout + co] =
                        wdta[((ci * cout + co) * 2 + ky) * 2 + kx];
                }
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    let g = grad.data();
    par::for_each_chunk_mut(dx.data_mut(), cin * h * wd, |im, seg| {
        let mut gv = vec![T::zero(); cout];
        for iy in 0..h {
            for ix in 0..wd {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let (o_y, o_x) = (2 * iy + ky, 2 * ix + kx);
                        for (co, v) in gv.iter_mut().enumerate() {
                            *v = g[((im * cout + co) * oh + o_y) * ow + o_x];
                        }
                        for ci in 0..cin {
                            let wrow = &wp[((ky * 2 + kx) * cin + ci) * cout..][..cout];
                            let mut s = T::zero();
                            for (&a, &b) in gv.iter().zip(wrow) {
                                s += a * b;
                            }
                            seg[(ci * h + iy) * wd + ix] += s;
                        }
                    }
                }
            }
        }
    });
    dx
}

fn tconv_backward_w<T: Scalar>(grad: &Tensor<T>, x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = w.dim(1);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dw = Tensor::zeros(w.shape());
    let dwd = dw.data_mut();
    let (xd, g) = (x.data(), grad.data());
    // accumulation order fixed: images, then rows, then columns
    for im in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let (o_y, o_x) = (2 * iy + ky, 2 * ix + kx);
                        for ci in 0..cin {
                            let xv = xd[((im * cin + ci) * h + iy) * wd + ix];
                            if xv == T::zero() {
                                continue;
                            }
                            for co in 0..cout {
                                dwd[((ci * cout + co) * 2 + ky) * 2 + kx] +=
                                    xv * g[((im * cout + co) * oh + o_y) * ow + o_x];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}
