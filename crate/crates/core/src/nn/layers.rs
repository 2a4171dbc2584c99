//! Layer parameter blocks and the per-layer forward/backward math.
//!
//! All three layer kinds reduce to the same pattern: build per-entry (and
//! optional per-row self) coefficients, run the shared sparse aggregation
//! kernel, then apply a dense projection. They differ only in where the
//! coefficients come from:
//!
//! * gcn: the adjacency weights themselves (normalization is baked into the
//!   graph as rescaled weights plus self-loop edges),
//! * sage: 1/indegree per entry plus a unit self term (mean of neighbors,
//!   "add" combine with the node's own embedding),
//! * gat: softmax attention over each row's in-edges and a self term, with
//!   multi-head outputs concatenated.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::AtomicU64;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::sparse::{aggregate, aggregate_backward, AggCoeffs, EdgePartition, SparseAdj};
use super::{NnError, Scalar};

// ====== Kinds and dropout ======

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Gcn,
    Sage,
    Gat,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Sage => "sage",
            LayerKind::Gat => "gat",
        })
    }
}

impl FromStr for LayerKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "gcn" => Ok(LayerKind::Gcn),
            "sage" => Ok(LayerKind::Sage),
            "gat" => Ok(LayerKind::Gat),
            other => Err(NnError::SchemaError(format!("unknown layer kind {other:?}"))),
        }
    }
}

/// Dropout rates; a rate of 0 disables that site. Masks are drawn from a
/// ChaCha stream seeded per forward pass, so a fixed seed reproduces the
/// exact masks (finite-difference checks rely on this).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub input: f32,
    pub hidden: f32,
    pub attention: f32,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn all(rate: f32, seed: u64) -> Self {
        DropoutSpec {
            input: rate,
            hidden: rate,
            attention: rate,
            seed,
        }
    }
}

/// Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate).
pub(super) fn dropout_mask<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize),
    rate: f32,
) -> Array2<T> {
    let keep = 1.0 - rate as f64;
    let scale = T::from_f64(1.0 / keep);
    let mut m = Array2::zeros(shape);
    for v in m.iter_mut() {
        if rng.random::<f64>() < keep {
            *v = scale;
        }
    }
    m
}

// ====== Parameters ======

/// One layer's parameters. `w` holds one projection per head (a single
/// entry for gcn/sage); the attention vectors are empty except for gat.
/// `bias` spans the concatenated output width.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub kind: LayerKind,
    pub w: Vec<Array2<T>>,
    pub attn_src: Vec<Array2<T>>,
    pub attn_dst: Vec<Array2<T>>,
    pub bias: Array2<T>,
}

pub(super) fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = T::from_f64(rng.random_range(-a..a));
    }
    m
}

impl<T: Scalar> LayerParams<T> {
    pub fn init(
        kind: LayerKind,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(NnError::ShapeError("zero layer dimension".into()));
        }
        let heads = if kind == LayerKind::Gat { heads } else { 1 };
        if heads == 0 || out_dim % heads != 0 {
            return Err(NnError::ShapeError(format!(
                "output width {out_dim} not divisible into {heads} heads"
            )));
        }
        let per_head = out_dim / heads;
        let mut w = Vec::with_capacity(heads);
        let mut attn_src = Vec::new();
        let mut attn_dst = Vec::new();
        for _ in 0..heads {
            w.push(glorot(rng, in_dim, per_head));
        }
        if kind == LayerKind::Gat {
            for _ in 0..heads {
                attn_src.push(glorot(rng, 1, per_head));
                attn_dst.push(glorot(rng, 1, per_head));
            }
        }
        Ok(LayerParams {
            kind,
            w,
            attn_src,
            attn_dst,
            bias: Array2::zeros((1, out_dim)),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w[0].nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.bias.ncols()
    }

    pub fn heads(&self) -> usize {
        self.w.len()
    }

    /// Flat tensor list in a fixed order; gradients use the same order.
    pub fn tensors(&self) -> Vec<&Array2<T>> {
        let mut v: Vec<&Array2<T>> = self.w.iter().collect();
        v.extend(self.attn_src.iter());
        v.extend(self.attn_dst.iter());
        v.push(&self.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut v: Vec<&mut Array2<T>> = self.w.iter_mut().collect();
        v.extend(self.attn_src.iter_mut());
        v.extend(self.attn_dst.iter_mut());
        v.push(&mut self.bias);
        v
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let c = |m: &Array2<T>| m.mapv(|v| U::from_f64(v.as_f64()));
        LayerParams {
            kind: self.kind,
            w: self.w.iter().map(c).collect(),
            attn_src: self.attn_src.iter().map(c).collect(),
            attn_dst: self.attn_dst.iter().map(c).collect(),
            bias: c(&self.bias),
        }
    }
}

/// Gradients aligned with [`LayerParams::tensors`] order.
#[derive(Debug, Clone)]
pub(super) struct LayerGrads<T> {
    pub w: Vec<Array2<T>>,
    pub attn_src: Vec<Array2<T>>,
    pub attn_dst: Vec<Array2<T>>,
    pub bias: Array2<T>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn into_tensors(self) -> Vec<Array2<T>> {
        let mut v = self.w;
        v.extend(self.attn_src);
        v.extend(self.attn_dst);
        v.push(self.bias);
        v
    }
}

// ====== Forward ======

/// Everything a layer needs besides parameters and input: the adjacency to
/// aggregate over, its edge partition, which rows must be produced, and the
/// shared work counter.
pub(super) struct LayerIo<'a, T> {
    pub adj: &'a SparseAdj<T>,
    pub part: &'a EdgePartition,
    pub active: Option<&'a [bool]>,
    pub ops: Option<&'a AtomicU64>,
}

pub(super) enum LayerCache<T> {
    /// gcn and sage: cached aggregation output and pre-activation.
    Linear {
        coeffs: Vec<T>,
        self_coeff: Option<Vec<T>>,
        z: Array2<T>,
        y: Array2<T>,
    },
    Gat {
        p: Vec<Array2<T>>,
        raw_entry: Vec<Vec<T>>,
        raw_self: Vec<Vec<T>>,
        alpha_entry: Vec<Vec<T>>,
        alpha_self: Vec<Vec<T>>,
        mask_entry: Option<Vec<Vec<T>>>,
        mask_self: Option<Vec<Vec<T>>>,
        y: Array2<T>,
    },
}

fn relu_inplace<T: Scalar>(m: &mut Array2<T>) {
    m.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

fn zero_inactive<T: Scalar>(m: &mut Array2<T>, active: Option<&[bool]>) {
    if let Some(mask) = active {
        for (r, &a) in mask.iter().enumerate() {
            if !a {
                m.row_mut(r).fill(T::zero());
            }
        }
    }
}

const LEAKY_SLOPE: f64 = 0.2;

fn leaky<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::from_f64(LEAKY_SLOPE)
    }
}

fn leaky_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::from_f64(LEAKY_SLOPE)
    }
}

fn sage_coeffs<T: Scalar>(adj: &SparseAdj<T>) -> (Vec<T>, Vec<T>) {
    let mut entry = vec![T::zero(); adj.len()];
    for r in 0..adj.rows() {
        let range = adj.row_range(r);
        if range.is_empty() {
            continue;
        }
        let inv = T::from_f64(1.0 / range.len() as f64);
        for c in entry[range].iter_mut() {
            *c = inv;
        }
    }
    (entry, vec![T::one(); adj.rows()])
}

/// Row-wise softmax over each row's entry logits plus its self logit,
/// accumulated in f64. Inactive rows keep zero coefficients.
fn attention_softmax<T: Scalar>(
    adj: &SparseAdj<T>,
    raw_entry: &[T],
    raw_self: &[T],
    active: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let mut alpha_entry = vec![T::zero(); adj.len()];
    let mut alpha_self = vec![T::zero(); adj.rows()];
    for r in 0..adj.rows() {
        if let Some(mask) = active {
            if !mask[r] {
                continue;
            }
        }
        let range = adj.row_range(r);
        let mut max = raw_self[r].as_f64();
        for &v in &raw_entry[range.clone()] {
            max = max.max(v.as_f64());
        }
        let mut sum = 0.0f64;
        let mut exps = Vec::with_capacity(range.len() + 1);
        for &v in &raw_entry[range.clone()] {
            let e = (v.as_f64() - max).exp();
            exps.push(e);
            sum += e;
        }
        let e_self = (raw_self[r].as_f64() - max).exp();
        sum += e_self;
        for (i, e) in range.clone().zip(exps) {
            alpha_entry[i] = T::from_f64(e / sum);
        }
        alpha_self[r] = T::from_f64(e_self / sum);
    }
    (alpha_entry, alpha_self)
}

pub(super) fn layer_forward<T: Scalar>(
    params: &LayerParams<T>,
    io: &LayerIo<'_, T>,
    h_in: &Array2<T>,
    last: bool,
    attn_drop: Option<(f32, &mut ChaCha8Rng)>,
) -> Result<(Array2<T>, LayerCache<T>), NnError> {
    if h_in.ncols() != params.in_dim() {
        return Err(NnError::ShapeError(format!(
            "layer expects {} input columns, got {}",
            params.in_dim(),
            h_in.ncols()
        )));
    }
    if h_in.nrows() != io.adj.rows() {
        return Err(NnError::ShapeError(format!(
            "layer input has {} rows, adjacency has {}",
            h_in.nrows(),
            io.adj.rows()
        )));
    }
    match params.kind {
        LayerKind::Gcn | LayerKind::Sage => {
            let (coeffs, self_coeff) = if params.kind == LayerKind::Gcn {
                (
                    io.adj.entries().iter().map(|e| e.weight).collect(),
                    None,
                )
            } else {
                let (e, s) = sage_coeffs(io.adj);
                (e, Some(s))
            };
            let z = aggregate(
                io.adj,
                io.part,
                &h_in.view(),
                AggCoeffs {
                    entry: &coeffs,
                    self_coeff: self_coeff.as_deref(),
                },
                io.active,
                io.ops,
            )?;
            let y = z.dot(&params.w[0]) + &params.bias;
            let mut out = y.clone();
            if !last {
                relu_inplace(&mut out);
            }
            zero_inactive(&mut out, io.active);
            Ok((
                out,
                LayerCache::Linear {
                    coeffs,
                    self_coeff,
                    z,
                    y,
                },
            ))
        }
        LayerKind::Gat => gat_forward(params, io, h_in, last, attn_drop),
    }
}

fn gat_forward<T: Scalar>(
    params: &LayerParams<T>,
    io: &LayerIo<'_, T>,
    h_in: &Array2<T>,
    last: bool,
    mut attn_drop: Option<(f32, &mut ChaCha8Rng)>,
) -> Result<(Array2<T>, LayerCache<T>), NnError> {
    let heads = params.heads();
    let per_head = params.out_dim() / heads;
    let rows = io.adj.rows();
    let mut y = Array2::<T>::zeros((rows, params.out_dim()));
    let mut p_cache = Vec::with_capacity(heads);
    let mut raw_entry_cache = Vec::with_capacity(heads);
    let mut raw_self_cache = Vec::with_capacity(heads);
    let mut alpha_entry_cache = Vec::with_capacity(heads);
    let mut alpha_self_cache = Vec::with_capacity(heads);
    let mut mask_entry_cache: Option<Vec<Vec<T>>> = None;
    let mut mask_self_cache: Option<Vec<Vec<T>>> = None;

    for h in 0..heads {
        let p = h_in.dot(&params.w[h]);
        let s_src: Vec<T> = p.dot(&params.attn_src[h].t()).column(0).to_vec();
        let s_dst: Vec<T> = p.dot(&params.attn_dst[h].t()).column(0).to_vec();
        let raw_entry: Vec<T> = io
            .adj
            .entries()
            .iter()
            .map(|e| leaky(s_src[e.src as usize] + s_dst[e.dst as usize]))
            .collect();
        let raw_self: Vec<T> = (0..rows).map(|r| leaky(s_src[r] + s_dst[r])).collect();
        let (alpha_entry, alpha_self) =
            attention_softmax(io.adj, &raw_entry, &raw_self, io.active);

        // Attention dropout draws one mask value per entry and per row in a
        // fixed order so the stream does not depend on which rows are active.
        let (used_entry, used_self) = if let Some((rate, rng)) = attn_drop.as_mut() {
            let keep = 1.0 - *rate as f64;
            let scale = T::from_f64(1.0 / keep);
            let me: Vec<T> = (0..io.adj.len())
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let ms: Vec<T> = (0..rows)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let ue: Vec<T> = alpha_entry.iter().zip(&me).map(|(&a, &m)| a * m).collect();
            let us: Vec<T> = alpha_self.iter().zip(&ms).map(|(&a, &m)| a * m).collect();
            mask_entry_cache.get_or_insert_with(Vec::new).push(me);
            mask_self_cache.get_or_insert_with(Vec::new).push(ms);
            (ue, us)
        } else {
            (alpha_entry.clone(), alpha_self.clone())
        };

        let head_out = aggregate(
            io.adj,
            io.part,
            &p.view(),
            AggCoeffs {
                entry: &used_entry,
                self_coeff: Some(&used_self),
            },
            io.active,
            io.ops,
        )?;
        y.slice_mut(s![.., h * per_head..(h + 1) * per_head])
            .assign(&head_out);

        p_cache.push(p);
        raw_entry_cache.push(raw_entry);
        raw_self_cache.push(raw_self);
        alpha_entry_cache.push(alpha_entry);
        alpha_self_cache.push(alpha_self);
    }

    y += &params.bias;
    let mut out = y.clone();
    if !last {
        relu_inplace(&mut out);
    }
    zero_inactive(&mut out, io.active);
    Ok((
        out,
        LayerCache::Gat {
            p: p_cache,
            raw_entry: raw_entry_cache,
            raw_self: raw_self_cache,
            alpha_entry: alpha_entry_cache,
            alpha_self: alpha_self_cache,
            mask_entry: mask_entry_cache,
            mask_self: mask_self_cache,
            y,
        },
    ))
}

// ====== Backward ======

/// Returns the gradient for `h_in` plus parameter gradients. `d_out` must
/// be zero on inactive rows (guaranteed when the loss touches target rows
/// only and upstream layers were masked the same way).
pub(super) fn layer_backward<T: Scalar>(
    params: &LayerParams<T>,
    io: &LayerIo<'_, T>,
    cache: &LayerCache<T>,
    h_in: &Array2<T>,
    d_out: &Array2<T>,
    last: bool,
) -> Result<(Array2<T>, LayerGrads<T>), NnError> {
    match (params.kind, cache) {
        (LayerKind::Gcn | LayerKind::Sage, LayerCache::Linear { coeffs, self_coeff, z, y }) => {
            let mut dy = d_out.clone();
            if !last {
                ndarray::Zip::from(&mut dy).and(y).for_each(|g, &v| {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            let dw = z.t().dot(&dy);
            let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dz = dy.dot(&params.w[0].t());
            let (dh, _, _) = aggregate_backward(
                io.adj,
                &dz.view(),
                &h_in.view(),
                AggCoeffs {
                    entry: coeffs,
                    self_coeff: self_coeff.as_deref(),
                },
                io.active,
            )?;
            Ok((
                dh,
                LayerGrads {
                    w: vec![dw],
                    attn_src: Vec::new(),
                    attn_dst: Vec::new(),
                    bias: db,
                },
            ))
        }
        (LayerKind::Gat, LayerCache::Gat { .. }) => {
            gat_backward(params, io, cache, h_in, d_out, last)
        }
        _ => Err(NnError::CacheError(
            "cache does not match layer kind".into(),
        )),
    }
}

fn gat_backward<T: Scalar>(
    params: &LayerParams<T>,
    io: &LayerIo<'_, T>,
    cache: &LayerCache<T>,
    h_in: &Array2<T>,
    d_out: &Array2<T>,
    last: bool,
) -> Result<(Array2<T>, LayerGrads<T>), NnError> {
    let LayerCache::Gat {
        p,
        raw_entry,
        raw_self,
        alpha_entry,
        alpha_self,
        mask_entry,
        mask_self,
        y,
    } = cache
    else {
        return Err(NnError::CacheError("expected gat cache".into()));
    };
    let heads = params.heads();
    let per_head = params.out_dim() / heads;
    let rows = io.adj.rows();

    let mut dy = d_out.clone();
    if !last {
        ndarray::Zip::from(&mut dy).and(y).for_each(|g, &v| {
            if v <= T::zero() {
                *g = T::zero();
            }
        });
    }
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));

    let mut dh_in = Array2::<T>::zeros(h_in.raw_dim());
    let mut dw = Vec::with_capacity(heads);
    let mut dattn_src = Vec::with_capacity(heads);
    let mut dattn_dst = Vec::with_capacity(heads);

    for h in 0..heads {
        let d_head = dy.slice(s![.., h * per_head..(h + 1) * per_head]).to_owned();
        let used_entry: Vec<T> = match mask_entry {
            Some(masks) => alpha_entry[h]
                .iter()
                .zip(&masks[h])
                .map(|(&a, &m)| a * m)
                .collect(),
            None => alpha_entry[h].clone(),
        };
        let used_self: Vec<T> = match mask_self {
            Some(masks) => alpha_self[h]
                .iter()
                .zip(&masks[h])
                .map(|(&a, &m)| a * m)
                .collect(),
            None => alpha_self[h].clone(),
        };
        let (mut dp, dcoeff_entry, dcoeff_self) = aggregate_backward(
            io.adj,
            &d_head.view(),
            &p[h].view(),
            AggCoeffs {
                entry: &used_entry,
                self_coeff: Some(&used_self),
            },
            io.active,
        )?;

        let dalpha_entry: Vec<T> = match mask_entry {
            Some(masks) => dcoeff_entry
                .iter()
                .zip(&masks[h])
                .map(|(&g, &m)| g * m)
                .collect(),
            None => dcoeff_entry,
        };
        let dalpha_self: Vec<T> = match mask_self {
            Some(masks) => dcoeff_self
                .iter()
                .zip(&masks[h])
                .map(|(&g, &m)| g * m)
                .collect(),
            None => dcoeff_self,
        };

        // Softmax and leaky-relu backward, accumulating into the two score
        // vectors: every logit e = leaky(s_src[src] + s_dst[dst]).
        let mut ds_src = vec![T::zero(); rows];
        let mut ds_dst = vec![T::zero(); rows];
        for r in 0..rows {
            if let Some(mask) = io.active {
                if !mask[r] {
                    continue;
                }
            }
            let range = io.adj.row_range(r);
            let mut dot = alpha_self[h][r] * dalpha_self[r];
            for i in range.clone() {
                dot = dot + alpha_entry[h][i] * dalpha_entry[i];
            }
            for i in range.clone() {
                let da = alpha_entry[h][i] * (dalpha_entry[i] - dot);
                let de = da * leaky_grad(raw_entry[h][i]);
                let e = io.adj.entries()[i];
                ds_src[e.src as usize] = ds_src[e.src as usize] + de;
                ds_dst[e.dst as usize] = ds_dst[e.dst as usize] + de;
            }
            let da = alpha_self[h][r] * (dalpha_self[r] - dot);
            let de = da * leaky_grad(raw_self[h][r]);
            ds_src[r] = ds_src[r] + de;
            ds_dst[r] = ds_dst[r] + de;
        }

        // s_src[r] = p[r] . attn_src, s_dst[r] = p[r] . attn_dst.
        let mut da_src = Array2::<T>::zeros((1, per_head));
        let mut da_dst = Array2::<T>::zeros((1, per_head));
        for r in 0..rows {
            let pr = p[h].row(r);
            if ds_src[r] != T::zero() {
                for j in 0..per_head {
                    da_src[[0, j]] = da_src[[0, j]] + ds_src[r] * pr[j];
                    dp[[r, j]] = dp[[r, j]] + ds_src[r] * params.attn_src[h][[0, j]];
                }
            }
            if ds_dst[r] != T::zero() {
                for j in 0..per_head {
                    da_dst[[0, j]] = da_dst[[0, j]] + ds_dst[r] * pr[j];
                    dp[[r, j]] = dp[[r, j]] + ds_dst[r] * params.attn_dst[h][[0, j]];
                }
            }
        }

        dw.push(h_in.t().dot(&dp));
        dh_in += &dp.dot(&params.w[h].t());
        dattn_src.push(da_src);
        dattn_dst.push(da_dst);
    }

    Ok((
        dh_in,
        LayerGrads {
            w: dw,
            attn_src: dattn_src,
            attn_dst: dattn_dst,
            bias: db,
        },
    ))
}
