//! A small 3D CNN: `n` blocks of (3³ conv, zero padding 1, ReLU, 2³ max
//! pool), then fully connected layers with ReLU between them and a linear
//! head.
//!
//! All parameters live in one flat vector. Per conv block the layout is
//! `weights[c_out][c_in][27]` then `bias[c_out]`; per dense layer it is
//! `weights[out][in]` then `bias[out]`. Feature maps are `[channel][z][y][x]`
//! with `x` fastest, matching volume storage.
//!
//! Convolutions are lowered to matrix products (im2col); products run on
//! one thread in a fixed order, so results are bitwise reproducible.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::Path;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::RotationKind;
use crate::rng::SeededRng;

/// Floating-point element type of a network.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `c ← alpha·a·b + beta·c` for strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), beta: Self, c: &mut [Self], c_strides: (isize, isize));
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], sa: (isize, isize), b: &[f32], sb: (isize, isize), beta: f32, c: &mut [f32], sc: (isize, isize)) {
        check_extent(m, k, sa, a.len());
        check_extent(k, n, sb, b.len());
        check_extent(m, n, sc, c.len());
        // SAFETY: the three extent checks above keep every strided access in bounds.
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta, c.as_mut_ptr(), sc.0, sc.1) }
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), beta: f64, c: &mut [f64], sc: (isize, isize)) {
        check_extent(m, k, sa, a.len());
        check_extent(k, n, sb, b.len());
        check_extent(m, n, sc, c.len());
        // SAFETY: the three extent checks above keep every strided access in bounds.
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta, c.as_mut_ptr(), sc.0, sc.1) }
    }
}

fn check_extent(rows: usize, cols: usize, (rs, cs): (isize, isize), len: usize) {
    assert!(rs >= 0 && cs >= 0);
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
        assert!(last < len, "matrix {rows}x{cols} with strides ({rs},{cs}) exceeds buffer of {len}");
    }
}

/// Row-major strides of a `rows × cols` matrix, and of its transpose view.
fn rm(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}
fn tr(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// Output nodes: 3 translation values plus the rotation encoding per plane.
pub fn output_layout(kind: RotationKind, n_planes: usize, combined: bool) -> usize {
    let per_plane = 3 + kind.len();
    if combined {
        per_plane * n_planes
    } else {
        per_plane
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Edge length of the cubic input grid.
    pub input_dims: usize,
    pub channels: Vec<usize>,
    /// Hidden dense widths; the head width follows from the layout.
    pub hidden: Vec<usize>,
    pub kind: RotationKind,
    pub n_planes: usize,
    pub combined: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dims: 72,
            channels: vec![8, 16, 32, 64, 128],
            hidden: vec![1024, 256],
            kind: RotationKind::SixD,
            n_planes: 3,
            combined: true,
        }
    }
}

impl NetworkConfig {
    pub fn n_out(&self) -> usize {
        output_layout(self.kind, self.n_planes, self.combined)
    }

    /// Planes predicted by one network.
    pub fn planes_per_output(&self) -> usize {
        if self.combined {
            self.n_planes
        } else {
            1
        }
    }

    /// Spatial edge after each block (floor halving).
    pub fn block_dims(&self) -> Vec<usize> {
        let mut d = self.input_dims;
        self.channels
            .iter()
            .map(|_| {
                d /= 2;
                d
            })
            .collect()
    }

    pub fn flatten_len(&self) -> usize {
        let d = self.block_dims().last().copied().unwrap_or(self.input_dims);
        let c = self.channels.last().copied().unwrap_or(1);
        c * d * d * d
    }

    /// `(in, out)` of every dense layer.
    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.flatten_len()];
        widths.extend(&self.hidden);
        widths.push(self.n_out());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// `(c_in, c_out)` of every conv block.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut c_in = 1;
        self.channels
            .iter()
            .map(|&c| {
                let s = (c_in, c);
                c_in = c;
                s
            })
            .collect()
    }

    /// `Σ (27·c_in·c_out + c_out) + Σ (in·out + out)`.
    pub fn param_count(&self) -> usize {
        let conv: usize = self.conv_shapes().iter().map(|&(i, o)| 27 * i * o + o).sum();
        let dense: usize = self.dense_shapes().iter().map(|&(i, o)| i * o + o).sum();
        conv + dense
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::Config("network channels and widths must be positive".into()));
        }
        if self.n_planes == 0 {
            return Err(Error::Config("network needs at least one plane".into()));
        }
        if self.block_dims().last().copied().unwrap_or(0) == 0 {
            return Err(Error::Config(format!(
                "input edge {} is too small for {} pooling blocks",
                self.input_dims,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// He-normal weights: `N(0, sqrt(2/fan_in))`.
pub fn he_init(fan_in: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(fan_in > 0, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug)]
struct Span {
    w: usize,
    b: usize,
    end: usize,
}

fn param_spans(cfg: &NetworkConfig) -> (Vec<Span>, Vec<Span>) {
    let mut off = 0;
    let mut span = |fan_in: usize, fan_out: usize| {
        let s = Span {
            w: off,
            b: off + fan_in * fan_out,
            end: off + fan_in * fan_out + fan_out,
        };
        off = s.end;
        s
    };
    let conv = cfg.conv_shapes().into_iter().map(|(i, o)| span(27 * i, o)).collect();
    let dense = cfg.dense_shapes().into_iter().map(|(i, o)| span(i, o)).collect();
    (conv, dense)
}

/// Intermediate values of one forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<S> {
    blocks: Vec<BlockTrace<S>>,
    /// Input of each dense layer (post-activation of the previous one).
    dense_inputs: Vec<Vec<S>>,
    pub output: Vec<S>,
}

#[derive(Clone, Debug)]
struct BlockTrace<S> {
    edge: usize,
    cols: Vec<S>,
    /// Post-ReLU conv output; its positive entries are the ReLU mask.
    act: Vec<S>,
    argmax: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Network<S: Scalar = f32> {
    cfg: NetworkConfig,
    params: Vec<S>,
    grads: Vec<S>,
    conv_spans: Vec<Span>,
    dense_spans: Vec<Span>,
    trace: Option<Trace<S>>,
}

impl<S: Scalar> Network<S> {
    /// He-initialized network; biases start at zero.
    pub fn new(cfg: NetworkConfig, rng: &SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (conv_spans, dense_spans) = param_spans(&cfg);
        let mut params = vec![S::zero(); cfg.param_count()];
        let conv_shapes = cfg.conv_shapes();
        let dense_shapes = cfg.dense_shapes();
        let fans = conv_shapes.iter().map(|&(i, _)| 27 * i).chain(dense_shapes.iter().map(|&(i, _)| i));
        for (layer, (span, fan_in)) in conv_spans.iter().chain(&dense_spans).zip(fans).enumerate() {
            let w = he_init(fan_in, span.b - span.w, &mut rng.stream("he-init", layer as u64));
            for (p, x) in params[span.w..span.b].iter_mut().zip(w) {
                *p = S::from_f64(x);
            }
        }
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: NetworkConfig, params: Vec<S>) -> Result<Self> {
        cfg.validate()?;
        if params.len() != cfg.param_count() {
            return Err(Error::ShapeMismatch {
                expected: vec![cfg.param_count()],
                actual: vec![params.len()],
            });
        }
        let (conv_spans, dense_spans) = param_spans(&cfg);
        Ok(Network {
            grads: vec![S::zero(); params.len()],
            cfg,
            params,
            conv_spans,
            dense_spans,
            trace: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn grads(&self) -> &[S] {
        &self.grads
    }

    /// Parameters and gradients together, for an optimizer step.
    pub fn params_and_grads(&mut self) -> (&mut [S], &[S]) {
        (&mut self.params, &self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = S::zero());
    }

    /// Index range of the head (last dense layer) weights and bias.
    pub fn head_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.dense_spans.last().expect("at least one dense layer");
        (s.w..s.b, s.b..s.end)
    }

    /// Forward pass that keeps the trace for a following [`Network::backward`].
    pub fn forward(&mut self, input: &[S]) -> Result<Vec<S>> {
        let t = self.forward_trace(input)?;
        let out = t.output.clone();
        self.trace = Some(t);
        Ok(out)
    }

    /// Accumulates parameter gradients for the last forward pass.
    pub fn backward(&mut self, d_out: &[S]) -> Result<()> {
        let trace = self.trace.take().ok_or(Error::MissingForward)?;
        let mut grads = std::mem::take(&mut self.grads);
        let r = self.backward_trace(&trace, d_out, &mut grads);
        self.grads = grads;
        r
    }

    /// Forward pass without side effects; safe to share across threads.
    pub fn infer(&self, input: &[S]) -> Result<Vec<S>> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &[S]) -> Result<Trace<S>> {
        let d = self.cfg.input_dims;
        if input.len() != d * d * d {
            return Err(Error::ShapeMismatch {
                expected: vec![d, d, d],
                actual: vec![input.len()],
            });
        }
        let mut x = input.to_vec();
        let mut edge = d;
        let mut blocks = Vec::with_capacity(self.conv_spans.len());
        for (span, &(c_in, c_out)) in self.conv_spans.iter().zip(&self.cfg.conv_shapes()) {
            let n = edge * edge * edge;
            let cols = im2col(&x, c_in, edge);
            let mut act = vec![S::zero(); c_out * n];
            for (o, row) in act.chunks_mut(n).enumerate() {
                row.fill(self.params[span.b + o]);
            }
            S::gemm(c_out, 27 * c_in, n, S::one(), &self.params[span.w..span.b], rm(27 * c_in), &cols, rm(n), S::one(), &mut act, rm(n));
            act.iter_mut().for_each(|v| *v = v.max(S::zero()));
            let (pooled, argmax) = max_pool(&act, c_out, edge);
            blocks.push(BlockTrace { edge, cols, act, argmax });
            x = pooled;
            edge /= 2;
        }

        let mut dense_inputs = Vec::with_capacity(self.dense_spans.len());
        let last = self.dense_spans.len() - 1;
        for (l, (span, &(n_in, n_out))) in self.dense_spans.iter().zip(&self.cfg.dense_shapes()).enumerate() {
            let mut y = self.params[span.b..span.end].to_vec();
            S::gemm(n_out, n_in, 1, S::one(), &self.params[span.w..span.b], rm(n_in), &x, (1, 1), S::one(), &mut y, (1, 1));
            if l < last {
                y.iter_mut().for_each(|v| *v = v.max(S::zero()));
            }
            dense_inputs.push(std::mem::replace(&mut x, y));
        }
        Ok(Trace {
            blocks,
            dense_inputs,
            output: x,
        })
    }

    /// Adds ∂(d_out · output)/∂params into `grads`.
    pub fn backward_trace(&self, trace: &Trace<S>, d_out: &[S], grads: &mut [S]) -> Result<()> {
        if d_out.len() != self.cfg.n_out() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.n_out()],
                actual: vec![d_out.len()],
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.params.len()],
                actual: vec![grads.len()],
            });
        }
        let mut dy = d_out.to_vec();
        let shapes = self.cfg.dense_shapes();
        for l in (0..self.dense_spans.len()).rev() {
            let span = self.dense_spans[l];
            let (n_in, n_out) = shapes[l];
            let x = &trace.dense_inputs[l];
            for (g, d) in grads[span.b..span.end].iter_mut().zip(&dy) {
                *g = *g + *d;
            }
            // dW += dy · xᵀ
            S::gemm(n_out, 1, n_in, S::one(), &dy, (1, 1), x, (n_in as isize, 1), S::one(), &mut grads[span.w..span.b], rm(n_in));
            let mut dx = vec![S::zero(); n_in];
            S::gemm(n_in, n_out, 1, S::one(), &self.params[span.w..span.b], tr(n_in), &dy, (1, 1), S::zero(), &mut dx, (1, 1));
            // ReLU between layers; the flattened conv output is already non-negative
            // and its mask is applied by the pooling scatter below.
            if l > 0 {
                for (d, &v) in dx.iter_mut().zip(x) {
                    if v <= S::zero() {
                        *d = S::zero();
                    }
                }
            }
            dy = dx;
        }

        let conv_shapes = self.cfg.conv_shapes();
        for b in (0..self.conv_spans.len()).rev() {
            let span = self.conv_spans[b];
            let (c_in, c_out) = conv_shapes[b];
            let bt = &trace.blocks[b];
            let n = bt.edge * bt.edge * bt.edge;
            let mut d_act = vec![S::zero(); c_out * n];
            for (&idx, &g) in bt.argmax.iter().zip(&dy) {
                d_act[idx as usize] = g;
            }
            for (d, &a) in d_act.iter_mut().zip(&bt.act) {
                if a <= S::zero() {
                    *d = S::zero();
                }
            }
            for (o, row) in d_act.chunks(n).enumerate() {
                let s = row.iter().fold(S::zero(), |acc, &v| acc + v);
                grads[span.b + o] = grads[span.b + o] + s;
            }
            let k = 27 * c_in;
            // dW += dAct · colsᵀ
            S::gemm(c_out, n, k, S::one(), &d_act, rm(n), &bt.cols, tr(n), S::one(), &mut grads[span.w..span.b], rm(k));
            if b > 0 {
                let mut d_cols = vec![S::zero(); k * n];
                S::gemm(k, c_out, n, S::one(), &self.params[span.w..span.b], tr(k), &d_act, rm(n), S::zero(), &mut d_cols, rm(n));
                dy = col2im(&d_cols, c_in, bt.edge);
            }
        }
        Ok(())
    }

    /// Mean-reduced gradient over a batch. Samples are traced in parallel;
    /// the reduction runs in sample order so the result does not depend on
    /// the thread count. `loss_grad(i, output)` returns `(loss, ∂loss/∂output)`.
    pub fn batch_gradient<F>(&mut self, inputs: &[&[S]], loss_grad: F) -> Result<Vec<f64>>
    where
        F: Fn(usize, &[S]) -> Result<(f64, Vec<S>)> + Sync,
    {
        self.zero_grad();
        let this = &*self;
        let per_sample: Vec<Result<(f64, Vec<S>)>> = inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let t = this.forward_trace(x)?;
                let (l, d_out) = loss_grad(i, &t.output)?;
                let mut g = vec![S::zero(); this.params.len()];
                this.backward_trace(&t, &d_out, &mut g)?;
                Ok((l, g))
            })
            .collect();
        let scale = S::from_f64(1.0 / inputs.len().max(1) as f64);
        let mut losses = Vec::with_capacity(inputs.len());
        for r in per_sample {
            let (l, g) = r?;
            losses.push(l);
            for (acc, v) in self.grads.iter_mut().zip(g) {
                *acc = *acc + v * scale;
            }
        }
        Ok(losses)
    }

    pub fn to_f32(&self) -> Network<f32> {
        let p = self.params.iter().map(|&v| Scalar::to_f64(v) as f32).collect();
        Network::from_params(self.cfg.clone(), p).expect("same config")
    }

    pub fn to_f64(&self) -> Network<f64> {
        let p = self.params.iter().map(|&v| Scalar::to_f64(v)).collect();
        Network::from_params(self.cfg.clone(), p).expect("same config")
    }
}

/// `[c][27][n]` patch matrix of a `[c][e][e][e]` map, zero padded by 1.
fn im2col<S: Scalar>(x: &[S], channels: usize, e: usize) -> Vec<S> {
    let n = e * e * e;
    let mut cols = vec![S::zero(); channels * 27 * n];
    cols.par_chunks_mut(27 * n).enumerate().for_each(|(c, block)| {
        let src = &x[c * n..(c + 1) * n];
        for (k, row) in block.chunks_mut(n).enumerate() {
            let (dz, dy, dx) = (k / 9, (k / 3) % 3, k % 3);
            for z in 0..e {
                let Some(sz) = (z + dz).checked_sub(1).filter(|&v| v < e) else { continue };
                for y in 0..e {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < e) else { continue };
                    let dst = &mut row[(z * e + y) * e..(z * e + y + 1) * e];
                    let s = &src[(sz * e + sy) * e..(sz * e + sy + 1) * e];
                    match dx {
                        0 => dst[1..].copy_from_slice(&s[..e - 1]),
                        1 => dst.copy_from_slice(s),
                        _ => dst[..e - 1].copy_from_slice(&s[1..]),
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`].
fn col2im<S: Scalar>(cols: &[S], channels: usize, e: usize) -> Vec<S> {
    let n = e * e * e;
    let mut x = vec![S::zero(); channels * n];
    x.par_chunks_mut(n).enumerate().for_each(|(c, dst_all)| {
        let block = &cols[c * 27 * n..(c + 1) * 27 * n];
        for (k, row) in block.chunks(n).enumerate() {
            let (dz, dy, dx) = (k / 9, (k / 3) % 3, k % 3);
            for z in 0..e {
                let Some(sz) = (z + dz).checked_sub(1).filter(|&v| v < e) else { continue };
                for y in 0..e {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < e) else { continue };
                    let src = &row[(z * e + y) * e..(z * e + y + 1) * e];
                    let dst = &mut dst_all[(sz * e + sy) * e..(sz * e + sy + 1) * e];
                    let (d, s) = match dx {
                        0 => (&mut dst[..e - 1], &src[1..]),
                        1 => (&mut dst[..], &src[..]),
                        _ => (&mut dst[1..], &src[..e - 1]),
                    };
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    });
    x
}

/// 2³ max pool with stride 2 (trailing odd planes dropped); returns the
/// pooled map and the flat source index of every maximum.
fn max_pool<S: Scalar>(x: &[S], channels: usize, e: usize) -> (Vec<S>, Vec<u32>) {
    let h = e / 2;
    let n_in = e * e * e;
    let n_out = h * h * h;
    let mut out = vec![S::zero(); channels * n_out];
    let mut arg = vec![0u32; channels * n_out];
    for c in 0..channels {
        for z in 0..h {
            for y in 0..h {
                for xo in 0..h {
                    let mut best = S::neg_infinity();
                    let mut best_i = 0;
                    for (dz, dy, dx) in (0..8).map(|q| (q >> 2, (q >> 1) & 1, q & 1)) {
                        let i = c * n_in + ((2 * z + dz) * e + 2 * y + dy) * e + 2 * xo + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    let o = c * n_out + (z * h + y) * h + xo;
                    out[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

/// Optimizer velocity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<S = f32> {
    pub velocity: Vec<S>,
}

/// Classic momentum: `v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step<S: Scalar>(params: &mut [S], grads: &[S], state: &mut SgdState<S>, lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![params.len()],
            actual: vec![grads.len()],
        });
    }
    if state.velocity.is_empty() {
        state.velocity = vec![S::zero(); params.len()];
    }
    let (lr, mu) = (S::from_f64(lr), S::from_f64(momentum));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = mu * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Step decay: `lr₀ · decay^⌊epoch / step_size⌋`.
pub fn lr_schedule(lr0: f64, decay: f64, step_size: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / step_size.max(1)) as i32)
}

const CHECKPOINT_MAGIC: &str = "STDPLANE-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained network plus free-form metadata needed to use it.
///
/// File layout: the line `STDPLANE-CHECKPOINT 1`, then `key=value` lines
/// (network configuration first, metadata keys prefixed with `meta.`),
/// then a line `end`, then `param_count` little-endian `f32` values.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.network.config();
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut head = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        head += &format!("input_dims={}\n", c.input_dims);
        head += &format!("channels={}\n", join(&c.channels));
        head += &format!("hidden={}\n", join(&c.hidden));
        head += &format!("kind={}\n", c.kind);
        head += &format!("n_planes={}\n", c.n_planes);
        head += &format!("combined={}\n", c.combined);
        head += &format!("param_count={}\n", c.param_count());
        for (k, v) in &self.meta {
            head += &format!("meta.{k}={v}\n");
        }
        head += "end\n";
        let mut bytes = head.into_bytes();
        for p in self.network.params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::parse(source, line, msg);
        let end_marker = b"\nend\n";
        let split = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad(1, "missing header terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad(1, "header is not UTF-8".into()))?;
        let blob = &bytes[split + end_marker.len()..];
        let mut lines = head.lines();
        let first = lines.next().unwrap_or("");
        let version = first
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(1, "not a checkpoint file".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(1, format!("unsupported checkpoint version {version}")));
        }
        let mut fields = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(i + 2, format!("expected key=value, got '{line}'")))?;
            match k.strip_prefix("meta.") {
                Some(m) => {
                    meta.insert(m.to_string(), v.to_string());
                }
                None => {
                    fields.insert(k.to_string(), (i + 2, v.to_string()));
                }
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(1, format!("missing key '{k}'")));
        let num = |k: &str| -> Result<usize> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| bad(*line, format!("bad value for {k}: '{v}'")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let (line, v) = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| x.parse().map_err(|_| bad(*line, format!("bad value for {k}: '{v}'")))).collect()
        };
        let (kline, kind) = get("kind")?;
        let cfg = NetworkConfig {
            input_dims: num("input_dims")?,
            channels: list("channels")?,
            hidden: list("hidden")?,
            kind: kind.parse().map_err(|e: Error| bad(*kline, e.to_string()))?,
            n_planes: num("n_planes")?,
            combined: get("combined")?.1 == "true",
        };
        let count = num("param_count")?;
        if count != cfg.param_count() || blob.len() != 4 * count {
            return Err(bad(1, format!("parameter blob has {} bytes, expected {}", blob.len(), 4 * cfg.param_count())));
        }
        let params = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Checkpoint {
            network: Network::from_params(cfg, params)?,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
