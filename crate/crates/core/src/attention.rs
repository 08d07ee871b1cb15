//! Multi-head local self-attention over square neighborhoods.
//!
//! For an output pixel `(i, j)` and head `h`, the layer attends over the
//! `e x e` window centered on `(i, j)`:
//!
//! ```text
//! a_rs = q_ij . (k_rs + rel(r, s))
//! w_rs = exp(a_rs) M_rs / sum exp(a_cd) M_cd
//! y_ij = sum w_rs v_rs
//! ```
//!
//! `rel(r, s)` concatenates a width embedding (column offset, first half of
//! the head dimensions) and a height embedding (row offset, second half).
//! Out-of-image cells are zero pixels, so their keys reduce to the
//! embedding and their values to zero.
//!
//! The adaptive variant derives `M` and the window extent from learnable
//! per-head spans; the fixed variant uses a constant extent and an all-ones
//! mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{create_adaptive_mask, kernel_extent, span_masks, SpanParam};
use crate::tensor::ops::MASK_EPS;
use crate::tensor::{Float, Graph, Parameter, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Adaptive,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub heads: usize,
    pub stride: usize,
    pub variant: AttentionVariant,
    pub fixed_kernel_extent: usize,
    pub ramp: usize,
    pub input_size: usize,
}

impl AttentionLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.out_channels % self.heads != 0 {
            return Err(Error::ChannelMismatch(format!(
                "{} output channels over {} heads",
                self.out_channels, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::ChannelMismatch(format!(
                "head dimension {} is odd",
                self.head_dim()
            )));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(Error::InvalidConfig("empty attention input".into()));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidConfig(format!("attention stride {}", self.stride)));
        }
        if self.fixed_kernel_extent % 2 == 0 {
            return Err(Error::EvenExtent(self.fixed_kernel_extent));
        }
        if self.ramp == 0 {
            return Err(Error::InvalidConfig("ramp length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.out_channels / self.heads.max(1)
    }

    /// Rows of each relative embedding table: every offset a window of the
    /// largest reachable extent `2 * input_size + 1` can see.
    pub fn table_len(&self) -> usize {
        2 * self.input_size + 1
    }

    pub fn output_size(&self) -> usize {
        self.input_size / self.stride
    }
}

#[derive(Clone, Debug)]
pub struct AttentionLayerParams<T> {
    /// `[Cout, Cin]`; rows `h * d_head .. (h + 1) * d_head` belong to head `h`.
    pub q: Parameter<T>,
    pub k: Parameter<T>,
    pub v: Parameter<T>,
    /// `[table_len, d_head / 2]`, row `table_len / 2` is offset zero.
    pub emb_h: Parameter<T>,
    pub emb_w: Parameter<T>,
    /// `[heads]`, adaptive variant only.
    pub spans: Option<Parameter<T>>,
}

impl<T: Float> AttentionLayerParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionLayerConfig, init_span: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (cin, cout) = (cfg.in_channels, cfg.out_channels);
        let proj_std = (1.0 / cin as f64).sqrt();
        let half = cfg.head_dim() / 2;
        let emb_std = (1.0 / cfg.head_dim() as f64).sqrt();
        let mut proj = || Parameter::new(Tensor::randn(&[cout, cin], proj_std, rng));
        let (q, k, v) = (proj(), proj(), proj());
        let emb_h = Parameter::new(Tensor::randn(&[cfg.table_len(), half], emb_std, rng));
        let emb_w = Parameter::new(Tensor::randn(&[cfg.table_len(), half], emb_std, rng));
        let spans = match cfg.variant {
            AttentionVariant::Adaptive => {
                Some(Parameter::new(Tensor::full(&[cfg.heads], T::from_f64(init_span))).without_decay())
            }
            AttentionVariant::Fixed => None,
        };
        Ok(Self {
            q,
            k,
            v,
            emb_h,
            emb_w,
            spans,
        })
    }

    /// Current per-head spans as stored (not clamped).
    pub fn span_values(&self) -> Vec<f64> {
        self.spans.as_ref().map(|p| p.value.to_f64_vec()).unwrap_or_default()
    }

    pub fn span_params(&self, ramp: usize) -> Vec<SpanParam> {
        self.span_values().into_iter().map(|z| SpanParam { z, ramp }).collect()
    }

    /// Window extent this layer computes with its current spans.
    pub fn extent(&self, cfg: &AttentionLayerConfig) -> Result<usize> {
        match cfg.variant {
            AttentionVariant::Fixed => Ok(cfg.fixed_kernel_extent),
            AttentionVariant::Adaptive => kernel_extent(&self.span_values(), cfg.ramp, cfg.input_size),
        }
    }

    /// Clamps every span into `[0, input_size]`.
    pub fn project_spans(&mut self, input_size: usize) {
        if let Some(p) = self.spans.as_mut() {
            let hi = T::from_f64(input_size as f64);
            for z in p.value.data_mut() {
                *z = z.max(T::zero()).min(hi);
            }
        }
    }

    fn check(&self, cfg: &AttentionLayerConfig) -> Result<()> {
        cfg.validate()?;
        let (cin, cout) = (cfg.in_channels, cfg.out_channels);
        for (name, p) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if p.value.shape() != [cout, cin] {
                return Err(Error::ChannelMismatch(format!(
                    "{name} projection {:?}, layer is {cin} -> {cout}",
                    p.value.shape()
                )));
            }
        }
        let half = cfg.head_dim() / 2;
        for p in [&self.emb_h, &self.emb_w] {
            if p.value.ndim() != 2 || p.value.shape()[1] != half {
                return Err(Error::ChannelMismatch(format!(
                    "embedding table {:?} for head dimension {}",
                    p.value.shape(),
                    cfg.head_dim()
                )));
            }
        }
        match (&self.spans, cfg.variant) {
            (Some(z), AttentionVariant::Adaptive) if z.value.len() == cfg.heads => Ok(()),
            (None, AttentionVariant::Fixed) => Ok(()),
            _ => Err(Error::InvalidConfig(
                "span parameters do not match the layer variant".into(),
            )),
        }
    }
}

/// Centered `extent` rows of both tables.
pub fn slice_relative_embeddings<T: Float>(
    g: &mut Graph<T>,
    emb_h: Var,
    emb_w: Var,
    extent: usize,
) -> Result<(Var, Var)> {
    let table = g.shape(emb_h)[0];
    if extent > table || g.shape(emb_w)[0] != table {
        return Err(Error::ExtentExceedsTable { extent, table });
    }
    if extent % 2 == 0 {
        return Err(Error::EvenExtent(extent));
    }
    let start = (table - extent) / 2;
    Ok((g.slice_rows(emb_h, start, extent)?, g.slice_rows(emb_w, start, extent)?))
}

/// `[extent², d_head]` embedding grid: cell `(r, s)` is `rel_w[s] ++ rel_h[r]`.
pub fn relative_grid<T: Float>(g: &mut Graph<T>, rel_h: Var, rel_w: Var) -> Result<Var> {
    let [e, half] = g.value(rel_h).dims2()?;
    if g.shape(rel_w) != [e, half] {
        return Err(Error::ShapeMismatch(format!(
            "height table {:?} vs width table {:?}",
            g.shape(rel_h),
            g.shape(rel_w)
        )));
    }
    let dh = 2 * half;
    let (hv, wv) = (g.value(rel_h).data(), g.value(rel_w).data());
    let mut out = vec![T::zero(); e * e * dh];
    for r in 0..e {
        for s in 0..e {
            let cell = &mut out[(r * e + s) * dh..][..dh];
            cell[..half].copy_from_slice(&wv[s * half..][..half]);
            cell[half..].copy_from_slice(&hv[r * half..][..half]);
        }
    }
    let out = Tensor::from_vec(&[e * e, dh], out)?;
    Ok(g.record(out, &[rel_h, rel_w], move |args| {
        let gd = args.grad.data();
        let mut dh_ = vec![T::zero(); e * half];
        let mut dw_ = vec![T::zero(); e * half];
        for r in 0..e {
            for s in 0..e {
                let cell = &gd[(r * e + s) * dh..][..dh];
                for d in 0..half {
                    dw_[s * half + d] += cell[d];
                    dh_[r * half + d] += cell[half + d];
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_vec(&[e, half], dh_)?),
            Some(Tensor::from_vec(&[e, half], dw_)?),
        ])
    }))
}

/// Adds the relative embeddings to keys laid out as `[..., extent², d_head]`.
pub fn add_relative_embeddings<T: Float>(g: &mut Graph<T>, keys: Var, rel_h: Var, rel_w: Var) -> Result<Var> {
    let grid = relative_grid(g, rel_h, rel_w)?;
    let (ks, gs) = (g.shape(keys), g.shape(grid));
    if ks.len() < 2 || ks[ks.len() - 2..] != *gs {
        return Err(Error::ShapeMismatch(format!("keys {ks:?} for embedding grid {gs:?}")));
    }
    g.add(keys, grid)
}

/// Geometry shared by the fused window kernels. Feature maps are
/// channel-last rows `[B * S * S, C]`.
#[derive(Clone, Copy, Debug)]
struct WindowGeom {
    batch: usize,
    side: usize,
    channels: usize,
    heads: usize,
    extent: usize,
}

impl WindowGeom {
    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn pixels(&self) -> usize {
        self.side * self.side
    }

    fn cells(&self) -> usize {
        self.extent * self.extent
    }

    /// Row of the neighbor at window cell `(r, s)` of pixel `(i, j)`, if it
    /// lies inside the image.
    #[inline]
    fn neighbor(&self, b: usize, i: usize, j: usize, r: usize, s: usize) -> Option<usize> {
        let p = self.extent / 2;
        let y = (i + r).checked_sub(p)?;
        let x = (j + s).checked_sub(p)?;
        (y < self.side && x < self.side).then(|| (b * self.side + y) * self.side + x)
    }

    fn check(&self, g_rows: usize, g_cols: usize, what: &str) -> Result<()> {
        if g_rows != self.batch * self.pixels() || g_cols != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "{what} is {g_rows}x{g_cols}, expected {}x{}",
                self.batch * self.pixels(),
                self.channels
            )));
        }
        Ok(())
    }
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Logits `[B, S², heads, extent²]` of queries against windowed keys plus
/// the embedding grid `[extent², d_head]`.
fn window_logits<T: Float>(g: &mut Graph<T>, q: Var, k: Var, grid: Var, geom: WindowGeom) -> Result<Var> {
    let [qn, qc] = g.value(q).dims2()?;
    let [kn, kc] = g.value(k).dims2()?;
    geom.check(qn, qc, "query rows")?;
    geom.check(kn, kc, "key rows")?;
    let (dh, cells) = (geom.head_dim(), geom.cells());
    if g.shape(grid) != [cells, dh] {
        return Err(Error::ShapeMismatch(format!("embedding grid {:?}", g.shape(grid))));
    }
    let (qv, kv, rv) = (g.value(q).data(), g.value(k).data(), g.value(grid).data());
    let (hn, e, side) = (geom.heads, geom.extent, geom.side);
    let mut out = vec![T::zero(); geom.batch * geom.pixels() * hn * cells];
    let mut kr = vec![T::zero(); dh];
    for b in 0..geom.batch {
        for i in 0..side {
            for j in 0..side {
                let row = (b * side + i) * side + j;
                let qrow = &qv[row * qc..][..qc];
                for h in 0..hn {
                    let qh = &qrow[h * dh..][..dh];
                    let o = &mut out[(row * hn + h) * cells..][..cells];
                    for r in 0..e {
                        for s in 0..e {
                            let c = r * e + s;
                            let rel = &rv[c * dh..][..dh];
                            o[c] = match geom.neighbor(b, i, j, r, s) {
                                Some(n) => {
                                    let kh = &kv[n * kc + h * dh..][..dh];
                                    for d in 0..dh {
                                        kr[d] = kh[d] + rel[d];
                                    }
                                    dot(qh, &kr)
                                }
                                None => dot(qh, rel),
                            };
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[geom.batch, geom.pixels(), hn, cells], out)?;
    Ok(g.record(out, &[q, k, grid], move |args| {
        let (qv, kv, rv) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
        let gd = args.grad.data();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dr = vec![T::zero(); rv.len()];
        for b in 0..geom.batch {
            for i in 0..side {
                for j in 0..side {
                    let row = (b * side + i) * side + j;
                    for h in 0..hn {
                        let qh = &qv[row * qc + h * dh..][..dh];
                        let go = &gd[(row * hn + h) * cells..][..cells];
                        for r in 0..e {
                            for s in 0..e {
                                let c = r * e + s;
                                let gc = go[c];
                                if gc == T::zero() {
                                    continue;
                                }
                                let rel = &rv[c * dh..][..dh];
                                let dqh = &mut dq[row * qc + h * dh..][..dh];
                                match geom.neighbor(b, i, j, r, s) {
                                    Some(n) => {
                                        let kh = &kv[n * kc + h * dh..][..dh];
                                        for d in 0..dh {
                                            dqh[d] += gc * (kh[d] + rel[d]);
                                        }
                                        let dkh = &mut dk[n * kc + h * dh..][..dh];
                                        for d in 0..dh {
                                            dkh[d] += gc * qh[d];
                                        }
                                    }
                                    None => {
                                        for d in 0..dh {
                                            dqh[d] += gc * rel[d];
                                        }
                                    }
                                }
                                let drc = &mut dr[c * dh..][..dh];
                                for d in 0..dh {
                                    drc[d] += gc * qh[d];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_vec(args.inputs[0].shape(), dq)?),
            Some(Tensor::from_vec(args.inputs[1].shape(), dk)?),
            Some(Tensor::from_vec(args.inputs[2].shape(), dr)?),
        ])
    }))
}

/// Weighted sums of windowed values: `[B, S², heads, extent²]` weights and
/// `[B * S², C]` values to `[B * S², C]`.
fn window_aggregate<T: Float>(g: &mut Graph<T>, w: Var, v: Var, geom: WindowGeom) -> Result<Var> {
    let [vn, vc] = g.value(v).dims2()?;
    geom.check(vn, vc, "value rows")?;
    let (dh, cells, hn, e, side) = (geom.head_dim(), geom.cells(), geom.heads, geom.extent, geom.side);
    if g.shape(w) != [geom.batch, geom.pixels(), hn, cells] {
        return Err(Error::ShapeMismatch(format!("attention weights {:?}", g.shape(w))));
    }
    let (wv, vv) = (g.value(w).data(), g.value(v).data());
    let mut out = vec![T::zero(); vv.len()];
    for b in 0..geom.batch {
        for i in 0..side {
            for j in 0..side {
                let row = (b * side + i) * side + j;
                for h in 0..hn {
                    let wc = &wv[(row * hn + h) * cells..][..cells];
                    let o = &mut out[row * vc + h * dh..][..dh];
                    for r in 0..e {
                        for s in 0..e {
                            let weight = wc[r * e + s];
                            if let Some(n) = geom.neighbor(b, i, j, r, s) {
                                let vh = &vv[n * vc + h * dh..][..dh];
                                for d in 0..dh {
                                    o[d] += weight * vh[d];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[vn, vc], out)?;
    Ok(g.record(out, &[w, v], move |args| {
        let (wv, vv, gd) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
        let mut dw = vec![T::zero(); wv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        for b in 0..geom.batch {
            for i in 0..side {
                for j in 0..side {
                    let row = (b * side + i) * side + j;
                    for h in 0..hn {
                        let gh = &gd[row * vc + h * dh..][..dh];
                        let base = (row * hn + h) * cells;
                        for r in 0..e {
                            for s in 0..e {
                                let c = r * e + s;
                                if let Some(n) = geom.neighbor(b, i, j, r, s) {
                                    let vh = &vv[n * vc + h * dh..][..dh];
                                    dw[base + c] = dot(gh, vh);
                                    let weight = wv[base + c];
                                    let dvh = &mut dv[n * vc + h * dh..][..dh];
                                    for d in 0..dh {
                                        dvh[d] += weight * gh[d];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_vec(args.inputs[0].shape(), dw)?),
            Some(Tensor::from_vec(args.inputs[1].shape(), dv)?),
        ])
    }))
}

/// Layer weights already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub emb_h: Var,
    pub emb_w: Var,
    pub spans: Option<Var>,
}

impl<T: Float> AttentionLayerParams<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> AttentionVars {
        AttentionVars {
            q: g.param(&self.q),
            k: g.param(&self.k),
            v: g.param(&self.v),
            emb_h: g.param(&self.emb_h),
            emb_w: g.param(&self.emb_w),
            spans: self.spans.as_ref().map(|z| g.param(z)),
        }
    }
}

/// Differentiable layer forward on `[B, Cin, S, S]`.
pub fn attention_forward<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    params: &AttentionLayerParams<T>,
    cfg: &AttentionLayerConfig,
) -> Result<Var> {
    params.check(cfg)?;
    let vars = params.bind(g);
    attention_forward_vars(g, x, vars, cfg)
}

/// [`attention_forward`] with weights given as graph variables. The window
/// extent follows the current values of `vars.spans`.
pub fn attention_forward_vars<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    vars: AttentionVars,
    cfg: &AttentionLayerConfig,
) -> Result<Var> {
    cfg.validate()?;
    let [b, cin, h, w] = g.value(x).dims4()?;
    if cin != cfg.in_channels {
        return Err(Error::ChannelMismatch(format!(
            "input has {cin} channels, layer expects {}",
            cfg.in_channels
        )));
    }
    if h != cfg.input_size || w != cfg.input_size {
        return Err(Error::ShapeMismatch(format!(
            "input plane {h}x{w}, layer built for {}",
            cfg.input_size
        )));
    }
    let extent = match (vars.spans, cfg.variant) {
        (Some(z), AttentionVariant::Adaptive) => kernel_extent(&g.value(z).to_f64_vec(), cfg.ramp, cfg.input_size)?,
        (None, AttentionVariant::Fixed) => cfg.fixed_kernel_extent,
        _ => {
            return Err(Error::InvalidConfig(
                "span parameters do not match the layer variant".into(),
            ))
        }
    };
    let geom = WindowGeom {
        batch: b,
        side: h,
        channels: cfg.out_channels,
        heads: cfg.heads,
        extent,
    };

    let rows = g.to_pixel_rows(x)?;
    let project = |g: &mut Graph<T>, p: Var| -> Result<Var> {
        let pt = g.transpose(p)?;
        g.matmul(rows, pt)
    };
    let q = project(g, vars.q)?;
    let k = project(g, vars.k)?;
    let v = project(g, vars.v)?;

    let (rel_h, rel_w) = slice_relative_embeddings(g, vars.emb_h, vars.emb_w, extent)?;
    let grid = relative_grid(g, rel_h, rel_w)?;
    let logits = window_logits(g, q, k, grid, geom)?;

    let mask = match vars.spans {
        Some(z) => {
            let z = g.project(z, 0.0, cfg.input_size as f64);
            span_masks(g, z, cfg.ramp, extent)?
        }
        None => g.constant(Tensor::ones(&[cfg.heads, extent * extent])),
    };
    let weights = g.softmax_masked(logits, mask, MASK_EPS)?;
    let y = window_aggregate(g, weights, v, geom)?;
    let y = g.from_pixel_rows(y, b, h, w)?;
    if cfg.stride == 2 {
        g.avg_pool2(y)
    } else {
        Ok(y)
    }
}

/// Literal per-pixel transcription of the layer, used as an oracle.
pub fn attention_forward_naive<T: Float>(
    x: &Tensor<T>,
    params: &AttentionLayerParams<T>,
    cfg: &AttentionLayerConfig,
) -> Result<Tensor<T>> {
    let mut macs = 0;
    attention_forward_naive_counted(x, params, cfg, &mut macs)
}

/// [`attention_forward_naive`] that also adds every multiply of a
/// projection, logit or weighted-sum product to `macs`.
pub fn attention_forward_naive_counted<T: Float>(
    x: &Tensor<T>,
    params: &AttentionLayerParams<T>,
    cfg: &AttentionLayerConfig,
    macs: &mut u64,
) -> Result<Tensor<T>> {
    naive(x, params, cfg, macs, None)
}

/// Normalized attention weights of output pixel `(row, col)` of image
/// `batch`: one `extent x extent` row-major grid per head.
pub fn attention_weights_at<T: Float>(
    x: &Tensor<T>,
    params: &AttentionLayerParams<T>,
    cfg: &AttentionLayerConfig,
    batch: usize,
    row: usize,
    col: usize,
) -> Result<Vec<Vec<f64>>> {
    let s = cfg.input_size;
    if batch >= x.shape().first().copied().unwrap_or(0) || row >= s || col >= s {
        return Err(Error::ShapeMismatch(format!(
            "pixel ({batch}, {row}, {col}) outside the input"
        )));
    }
    let mut probe = Probe {
        at: (batch, row, col),
        weights: Vec::new(),
    };
    naive(x, params, cfg, &mut 0, Some(&mut probe))?;
    Ok(probe.weights)
}

struct Probe {
    at: (usize, usize, usize),
    weights: Vec<Vec<f64>>,
}

fn naive<T: Float>(
    x: &Tensor<T>,
    params: &AttentionLayerParams<T>,
    cfg: &AttentionLayerConfig,
    macs: &mut u64,
    mut probe: Option<&mut Probe>,
) -> Result<Tensor<T>> {
    params.check(cfg)?;
    let [b, cin, s_, s2] = x.dims4()?;
    if cin != cfg.in_channels {
        return Err(Error::ChannelMismatch(format!(
            "input has {cin} channels, layer expects {}",
            cfg.in_channels
        )));
    }
    if s_ != cfg.input_size || s2 != s_ {
        return Err(Error::ShapeMismatch(format!("input plane {s_}x{s2}")));
    }
    let s = s_;
    let extent = params.extent(cfg)?;
    let table = params.emb_h.value.shape()[0];
    if extent > table {
        return Err(Error::ExtentExceedsTable { extent, table });
    }
    let (cout, hn, dh) = (cfg.out_channels, cfg.heads, cfg.head_dim());
    let half = dh / 2;
    let pad = extent / 2;
    let ps = s + 2 * pad;
    let start = (table - extent) / 2;

    let masks: Vec<Vec<T>> = match cfg.variant {
        AttentionVariant::Adaptive => params
            .span_values()
            .iter()
            .map(|&z| {
                let z = T::from_f64(z).max(T::zero()).min(T::from_f64(s as f64)).as_f64();
                create_adaptive_mask::<T>(extent, z, cfg.ramp).map(|m| m.values.into_data())
            })
            .collect::<Result<_>>()?,
        AttentionVariant::Fixed => vec![vec![T::one(); extent * extent]; hn],
    };
    let (qw, kw, vw) = (params.q.value.data(), params.k.value.data(), params.v.value.data());
    let (eh, ew) = (params.emb_h.value.data(), params.emb_w.value.data());
    let eps = T::from_f64(MASK_EPS);

    let mut y = vec![T::zero(); b * cout * s * s];
    for n in 0..b {
        // zero-padded input, then keys and values at every padded pixel
        let mut xp = vec![T::zero(); cin * ps * ps];
        for c in 0..cin {
            for i in 0..s {
                for j in 0..s {
                    xp[(c * ps + i + pad) * ps + j + pad] = x.at(&[n, c, i, j]);
                }
            }
        }
        let project = |wt: &[T], pix: &[T], at: usize, macs: &mut u64| -> Vec<T> {
            let mut out = vec![T::zero(); cout];
            for (o, acc) in out.iter_mut().enumerate() {
                for c in 0..cin {
                    *acc += wt[o * cin + c] * pix[c * ps * ps + at];
                    *macs += 1;
                }
            }
            out
        };
        let mut keys = vec![Vec::new(); ps * ps];
        let mut vals = vec![Vec::new(); ps * ps];
        for at in 0..ps * ps {
            keys[at] = project(kw, &xp, at, macs);
            vals[at] = project(vw, &xp, at, macs);
        }
        for i in 0..s {
            for j in 0..s {
                let q = project(qw, &xp, (i + pad) * ps + j + pad, macs);
                for h in 0..hn {
                    let mut logits = vec![T::zero(); extent * extent];
                    for r in 0..extent {
                        for c in 0..extent {
                            let key = &keys[(i + r) * ps + j + c];
                            let mut a = T::zero();
                            for d in 0..dh {
                                let rel = if d < half {
                                    ew[(start + c) * half + d]
                                } else {
                                    eh[(start + r) * half + d - half]
                                };
                                a += q[h * dh + d] * (key[h * dh + d] + rel);
                                *macs += 1;
                            }
                            logits[r * extent + c] = a;
                        }
                    }
                    let amax = logits.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    let mut wts = vec![T::zero(); extent * extent];
                    for (cell, wt) in wts.iter_mut().enumerate() {
                        *wt = (logits[cell] - amax).exp() * masks[h][cell];
                        z += *wt;
                    }
                    z += eps;
                    if z == T::zero() {
                        return Err(Error::AllMaskedWithoutEpsilon {
                            row: (n * s + i) * s + j,
                        });
                    }
                    if let Some(p) = probe.as_deref_mut().filter(|p| p.at == (n, i, j)) {
                        p.weights.push(wts.iter().map(|&w| (w / z).as_f64()).collect());
                    }
                    for d in 0..dh {
                        let mut acc = T::zero();
                        for r in 0..extent {
                            for c in 0..extent {
                                let val = &vals[(i + r) * ps + j + c];
                                acc += wts[r * extent + c] / z * val[h * dh + d];
                                *macs += 1;
                            }
                        }
                        y[((n * cout + h * dh + d) * s + i) * s + j] = acc;
                    }
                }
            }
        }
    }
    let y = Tensor::from_vec(&[b, cout, s, s], y)?;
    if cfg.stride == 2 {
        let mut g = Graph::inference();
        let v = g.constant(y);
        let p = g.avg_pool2(v)?;
        return Ok(g.value(p).clone());
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(cin: usize, cout: usize, heads: usize, s: usize, variant: AttentionVariant) -> AttentionLayerConfig {
        AttentionLayerConfig {
            in_channels: cin,
            out_channels: cout,
            heads,
            stride: 1,
            variant,
            fixed_kernel_extent: 3,
            ramp: 2,
            input_size: s,
        }
    }

    #[test]
    fn slices_are_centered() {
        let mut g = Graph::<f64>::new();
        let t: Vec<f64> = (0..9).map(f64::from).collect();
        let eh = g.leaf(Tensor::from_vec(&[9, 1], t.clone()).unwrap());
        let ew = g.leaf(Tensor::from_vec(&[9, 1], t).unwrap());
        let (h, _) = slice_relative_embeddings(&mut g, eh, ew, 9).unwrap();
        assert_eq!(g.value(h).data(), &[0., 1., 2., 3., 4., 5., 6., 7., 8.]);
        let (h, _) = slice_relative_embeddings(&mut g, eh, ew, 5).unwrap();
        assert_eq!(g.value(h).data(), &[2., 3., 4., 5., 6.]);
        let (h, _) = slice_relative_embeddings(&mut g, eh, ew, 1).unwrap();
        assert_eq!(g.value(h).data(), &[4.]);
        assert!(matches!(
            slice_relative_embeddings(&mut g, eh, ew, 11),
            Err(Error::ExtentExceedsTable { extent: 11, table: 9 })
        ));
    }

    #[test]
    fn embedding_grid_layout() {
        let mut g = Graph::<f64>::new();
        let rh = g.leaf(Tensor::from_vec(&[3, 2], vec![10., 11., 20., 21., 30., 31.]).unwrap());
        let rw = g.leaf(Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let keys = g.constant(Tensor::zeros(&[9, 4]));
        let out = add_relative_embeddings(&mut g, keys, rh, rw).unwrap();
        let v = g.value(out);
        // cell (0, 2)
        assert_eq!(&v.data()[2 * 4..3 * 4], &[5., 6., 10., 11.]);
        // same column, same first half
        assert_eq!(&v.data()[2 * 4..2 * 4 + 2], &v.data()[8 * 4..8 * 4 + 2]);
    }

    #[test]
    fn constant_image_uniform_weights() {
        let c = cfg(1, 2, 1, 5, AttentionVariant::Fixed);
        let mut p = AttentionLayerParams::<f64>::init(&c, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.q.value = Tensor::zeros(&[2, 1]);
        p.k.value = Tensor::zeros(&[2, 1]);
        p.emb_h.value = Tensor::zeros(&[11, 1]);
        p.emb_w.value = Tensor::zeros(&[11, 1]);
        p.v.value = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let x = Tensor::full(&[1, 1, 5, 5], 3.0);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = attention_forward(&mut g, xv, &p, &c).unwrap();
        let y = g.value(y);
        assert!((y.at(&[0, 0, 2, 2]) - 3.0).abs() < 1e-12);
        // corner sees 4 of 9 cells, the rest are zero pixels
        assert!((y.at(&[0, 0, 0, 0]) - 3.0 * 4.0 / 9.0).abs() < 1e-12);
        let naive = attention_forward_naive(&x, &p, &c).unwrap();
        assert!((naive.at(&[0, 0, 2, 2]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_window_is_value_projection() {
        let c = AttentionLayerConfig {
            fixed_kernel_extent: 1,
            ..cfg(2, 2, 1, 1, AttentionVariant::Fixed)
        };
        let p = AttentionLayerParams::<f64>::init(&c, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, -2.0]).unwrap();
        let y = attention_forward_naive(&x, &p, &c).unwrap();
        let v = p.v.value.data();
        assert!((y.data()[0] - (v[0] * 0.5 - v[1] * 2.0)).abs() < 1e-10);
        assert!((y.data()[1] - (v[2] * 0.5 - v[3] * 2.0)).abs() < 1e-10);
    }

    #[test]
    fn fused_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for variant in [AttentionVariant::Adaptive, AttentionVariant::Fixed] {
            let c = AttentionLayerConfig {
                stride: 2,
                ..cfg(3, 4, 2, 4, variant)
            };
            let mut p = AttentionLayerParams::<f64>::init(&c, 0.6, &mut rng).unwrap();
            if let Some(z) = p.spans.as_mut() {
                z.value = Tensor::from_vec(&[2], vec![0.3, 1.7]).unwrap();
            }
            let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = attention_forward(&mut g, xv, &p, &c).unwrap();
            let naive = attention_forward_naive(&x, &p, &c).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 4, 2, 2]);
            for (a, b) in g.value(y).data().iter().zip(naive.data()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch() {
        let c = cfg(3, 4, 2, 4, AttentionVariant::Fixed);
        let p = AttentionLayerParams::<f64>::init(&c, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(
            attention_forward(&mut g, x, &p, &c),
            Err(Error::ChannelMismatch(_))
        ));
        let bad = cfg(3, 6, 4, 4, AttentionVariant::Fixed);
        assert!(matches!(bad.validate(), Err(Error::ChannelMismatch(_))));
    }
}
