//! Attention pooling, class/region token updates and the per-patch pooling
//! closed form.
//!
//! A single masked multi-head attention kernel serves every path: each query
//! row names the key rows it may attend to. The class token and patch tokens
//! attend to `[class, patches]`; a region token attends to its member patches
//! and to itself; text tokens attend causally. Because every row's output is
//! computed only from its own query and its allowed keys, appending region
//! rows to a sequence leaves the class and patch outputs bit-identical.
//!
//! The attention temperature is `sqrt(head_dim)`, the convention the
//! pre-trained weights were trained with.

use std::ops::Range;

use rayon::prelude::*;

use crate::bundle::{Activation, WeightsBundle};
use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm, linear, quick_gelu, softmax_in_place, Tensor};

pub const LN_EPS: f32 = 1e-5;

/// Projection weights of one multi-head attention layer, `[out, in]` layout.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new(
        (wq, bq): (Tensor, Tensor),
        (wk, bk): (Tensor, Tensor),
        (wv, bv): (Tensor, Tensor),
        (out_w, out_b): (Tensor, Tensor),
        heads: usize,
    ) -> Result<Self> {
        let c = wq.dim(1);
        if heads == 0 || wq.dim(0) % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide attention width {}",
                wq.dim(0)
            )));
        }
        for (w, b) in [(&wq, &bq), (&wk, &bk), (&wv, &bv)] {
            if w.shape() != [wq.dim(0), c] || b.len() != wq.dim(0) {
                return Err(Error::dim("attention projection", wq.shape(), w.shape()));
            }
        }
        if out_w.dim(1) != wv.dim(0) || out_b.len() != out_w.dim(0) {
            return Err(Error::dim("attention output", wv.shape(), out_w.shape()));
        }
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            out_w,
            out_b,
            heads,
        })
    }

    /// Split a packed `[3C, C]` input projection.
    pub fn from_packed(in_w: &Tensor, in_b: &Tensor, out_w: Tensor, out_b: Tensor, heads: usize) -> Result<Self> {
        if in_w.rank() != 2 || !in_w.dim(0).is_multiple_of(3) || in_b.len() != in_w.dim(0) {
            return Err(Error::dim("in_proj", in_w.shape(), in_b.shape()));
        }
        let c = in_w.dim(0) / 3;
        let part = |i: usize| {
            (
                in_w.slice_rows(i * c, c),
                Tensor::new([c], in_b.data()[i * c..(i + 1) * c].to_vec()).unwrap(),
            )
        };
        Self::new(part(0), part(1), part(2), (out_w, out_b), heads)
    }

    pub fn inner_width(&self) -> usize {
        self.wq.dim(0)
    }

    pub fn head_dim(&self) -> usize {
        self.inner_width() / self.heads
    }

    pub fn tau(&self) -> f32 {
        (self.head_dim() as f32).sqrt()
    }
}

/// Key rows a query row may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeySet {
    Span(Range<usize>),
    Indices(Vec<usize>),
}

impl KeySet {
    fn for_each(&self, mut f: impl FnMut(usize)) {
        match self {
            KeySet::Span(r) => r.clone().for_each(&mut f),
            KeySet::Indices(v) => v.iter().copied().for_each(&mut f),
        }
    }

    fn len(&self) -> usize {
        match self {
            KeySet::Span(r) => r.len(),
            KeySet::Indices(v) => v.len(),
        }
    }
}

/// Per-row allowed keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: Vec<KeySet>,
}

impl AttentionMask {
    pub fn new(rows: Vec<KeySet>) -> Self {
        Self { rows }
    }

    pub fn full(n: usize) -> Self {
        Self::new(vec![KeySet::Span(0..n); n])
    }

    pub fn causal(n: usize) -> Self {
        Self::new((0..n).map(|i| KeySet::Span(0..i + 1)).collect())
    }

    /// `[class, patches]` attend to each other; each appended region row
    /// attends to its member patches (token index = 1 + patch index) and to
    /// itself.
    pub fn with_regions(grid_tokens: usize, memberships: &[Vec<usize>]) -> Self {
        let mut rows = vec![KeySet::Span(0..grid_tokens); grid_tokens];
        for (m, members) in memberships.iter().enumerate() {
            let mut keys: Vec<usize> = members.iter().map(|p| p + 1).collect();
            keys.push(grid_tokens + m);
            rows.push(KeySet::Indices(keys));
        }
        Self::new(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &KeySet {
        &self.rows[i]
    }
}

/// Multi-head attention of every row of `x` over its allowed keys, followed
/// by the output projection.
pub fn masked_attention(x: &Tensor, mask: &AttentionMask, w: &AttentionWeights) -> Result<Tensor> {
    if mask.len() != x.rows() {
        return Err(Error::dim("attention mask", &[mask.len()], x.shape()));
    }
    let q = linear(x, &w.wq, Some(&w.bq))?;
    let k = linear(x, &w.wk, Some(&w.bk))?;
    let v = linear(x, &w.wv, Some(&w.bv))?;
    let mixed = attend(&q, &k, &v, |i| mask.row(i), w.heads)?;
    linear(&mixed, &w.out_w, Some(&w.out_b))
}

/// Per-head softmax(q·k / sqrt(d)) weighted value sums. Row `i` of `q`
/// attends to the rows of `k`/`v` named by `keys(i)`.
fn attend<'a>(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    keys: impl Fn(usize) -> &'a KeySet + Sync,
    heads: usize,
) -> Result<Tensor> {
    let width = q.dim(1);
    let hd = width / heads;
    let tau = (hd as f32).sqrt();
    let mut out = vec![0.0f32; q.rows() * width];
    let (kd, vd) = (k.data(), v.data());
    let n_keys = k.rows();
    let bad = std::sync::atomic::AtomicBool::new(false);
    out.par_chunks_mut(width).enumerate().for_each(|(i, orow)| {
        let ks = keys(i);
        if ks.len() == 0 {
            bad.store(true, std::sync::atomic::Ordering::Relaxed);
            return;
        }
        let qrow = q.row(i);
        let mut idx = Vec::with_capacity(ks.len());
        ks.for_each(|j| idx.push(j));
        if idx.iter().any(|&j| j >= n_keys) {
            bad.store(true, std::sync::atomic::Ordering::Relaxed);
            return;
        }
        let mut scores = vec![0.0f32; idx.len()];
        for h in 0..heads {
            let qh = &qrow[h * hd..(h + 1) * hd];
            for (s, &j) in scores.iter_mut().zip(&idx) {
                let kh = &kd[j * width + h * hd..j * width + (h + 1) * hd];
                *s = qh.iter().zip(kh).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() as f32;
            }
            softmax_in_place(&mut scores, tau);
            for c in 0..hd {
                let mut acc = 0.0f64;
                for (a, &j) in scores.iter().zip(&idx) {
                    acc += *a as f64 * vd[j * width + h * hd + c] as f64;
                }
                orow[h * hd + c] = acc as f32;
            }
        }
    });
    if bad.into_inner() {
        return Err(Error::Region("attention row with no valid keys".into()));
    }
    Tensor::new([q.rows(), width], out)
}

/// Attention pooling of one query token over a set of tokens (rows of `pool`).
pub fn attention_pool(query: &[f32], pool: &Tensor, w: &AttentionWeights) -> Result<Vec<f32>> {
    if pool.rows() == 0 {
        return Err(Error::Parameter("attention_pool over an empty set".into()));
    }
    let q = linear(&Tensor::new([1, query.len()], query.to_vec())?, &w.wq, Some(&w.bq))?;
    let k = linear(pool, &w.wk, Some(&w.bk))?;
    let v = linear(pool, &w.wv, Some(&w.bv))?;
    let all = KeySet::Span(0..pool.rows());
    let mixed = attend(&q, &k, &v, |_| &all, w.heads)?;
    Ok(linear(&mixed, &w.out_w, Some(&w.out_b))?.into_data())
}

/// Attention weights each head of `query` assigns to the rows of `pool`.
pub fn attention_weights(query: &[f32], pool: &Tensor, w: &AttentionWeights) -> Result<Vec<Vec<f32>>> {
    let q = linear(&Tensor::new([1, query.len()], query.to_vec())?, &w.wq, Some(&w.bq))?;
    let k = linear(pool, &w.wk, Some(&w.bk))?;
    let hd = w.head_dim();
    Ok((0..w.heads)
        .map(|h| {
            let qh = &q.data()[h * hd..(h + 1) * hd];
            let mut s: Vec<f32> = (0..pool.rows())
                .map(|j| {
                    let kh = &k.row(j)[h * hd..(h + 1) * hd];
                    qh.iter().zip(kh).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() as f32
                })
                .collect();
            softmax_in_place(&mut s, w.tau());
            s
        })
        .collect())
}

/// Pre-norm transformer block: `x + attn(ln_1 x)`, then `x + mlp(ln_2 x)`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: (Tensor, Tensor),
    pub attn: AttentionWeights,
    pub ln2: (Tensor, Tensor),
    pub fc: (Tensor, Tensor),
    pub proj: (Tensor, Tensor),
    pub activation: Activation,
}

impl Block {
    pub fn from_bundle(b: &WeightsBundle, prefix: &str, heads: usize) -> Result<Self> {
        let t = |n: &str| b.tensor(&format!("{prefix}.{n}")).cloned();
        Ok(Self {
            ln1: (t("ln_1.weight")?, t("ln_1.bias")?),
            attn: AttentionWeights::from_packed(
                &t("attn.in_proj_weight")?,
                &t("attn.in_proj_bias")?,
                t("attn.out_proj.weight")?,
                t("attn.out_proj.bias")?,
                heads,
            )?,
            ln2: (t("ln_2.weight")?, t("ln_2.bias")?),
            fc: (t("mlp.c_fc.weight")?, t("mlp.c_fc.bias")?),
            proj: (t("mlp.c_proj.weight")?, t("mlp.c_proj.bias")?),
            activation: b.dims.activation,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let h = layer_norm(x, &self.ln1.0, &self.ln1.1, LN_EPS)?;
        let a = masked_attention(&h, mask, &self.attn)?;
        let x1 = add(x, &a);
        let h2 = layer_norm(&x1, &self.ln2.0, &self.ln2.1, LN_EPS)?;
        let mut m = linear(&h2, &self.fc.0, Some(&self.fc.1))?;
        match self.activation {
            Activation::QuickGelu => quick_gelu(&mut m),
            Activation::Gelu => gelu(&mut m),
        }
        let m = linear(&m, &self.proj.0, Some(&self.proj.1))?;
        Ok(add(&x1, &m))
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + b.data()[i])
}

/// Class token (row 0) followed by `grid_h * grid_w` patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != 1 + grid_h * grid_w {
            return Err(Error::dim("token grid", tokens.shape(), &[1 + grid_h * grid_w]));
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn class_token(&self) -> &[f32] {
        self.tokens.row(0)
    }

    pub fn patches(&self) -> Tensor {
        self.tokens.slice_rows(1, self.patch_count())
    }
}

/// Region tokens and the patch indices (0-based, class slot excluded) each
/// one pools over.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionTokenSet {
    pub tokens: Tensor,
    pub memberships: Vec<Vec<usize>>,
}

impl RegionTokenSet {
    /// Every region token starts as a copy of the grid's class token.
    pub fn from_class_token(grid: &TokenGrid, memberships: Vec<Vec<usize>>) -> Result<Self> {
        for (m, members) in memberships.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Region(format!("region {m} has no member patches")));
            }
            if let Some(p) = members.iter().find(|&&p| p >= grid.patch_count()) {
                return Err(Error::Region(format!(
                    "region {m} references patch {p} outside a {}-patch grid",
                    grid.patch_count()
                )));
            }
        }
        let c = grid.class_token();
        let tokens = Tensor::from_fn([memberships.len(), c.len()], |i| c[i % c.len()]);
        Ok(Self {
            tokens,
            memberships,
        })
    }

    pub fn len(&self) -> usize {
        self.memberships.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memberships.is_empty()
    }
}

/// One standard block over `[class, patches]`.
pub fn class_token_update(grid: &TokenGrid, block: &Block) -> Result<TokenGrid> {
    let n = grid.tokens.rows();
    let tokens = block.forward(&grid.tokens, &AttentionMask::full(n))?;
    TokenGrid::new(tokens, grid.grid_h, grid.grid_w)
}

/// Joint masked pass over `[class, patches, regions]`; returns the updated
/// grid and regions. Grid rows never see region rows.
pub fn joint_update(grid: &TokenGrid, regions: &RegionTokenSet, block: &Block) -> Result<(TokenGrid, RegionTokenSet)> {
    let n = grid.tokens.rows();
    let c = grid.tokens.dim(1);
    let mut data = Vec::with_capacity((n + regions.len()) * c);
    data.extend_from_slice(grid.tokens.data());
    data.extend_from_slice(regions.tokens.data());
    let seq = Tensor::new([n + regions.len(), c], data)?;
    let mask = AttentionMask::with_regions(n, &regions.memberships);
    let out = block.forward(&seq, &mask)?;
    let new_grid = TokenGrid::new(out.slice_rows(0, n), grid.grid_h, grid.grid_w)?;
    let new_regions = RegionTokenSet {
        tokens: out.slice_rows(n, regions.len()),
        memberships: regions.memberships.clone(),
    };
    Ok((new_grid, new_regions))
}

/// Update region tokens through one block: each attends only to its member
/// patches and itself.
pub fn region_token_update(regions: &RegionTokenSet, grid: &TokenGrid, block: &Block) -> Result<RegionTokenSet> {
    Ok(joint_update(grid, regions, block)?.1)
}

/// Run every block jointly, returning the final grid and region tokens.
pub fn forward_with_regions(
    grid: TokenGrid,
    regions: RegionTokenSet,
    blocks: &[Block],
) -> Result<(TokenGrid, RegionTokenSet)> {
    blocks
        .iter()
        .try_fold((grid, regions), |(g, r), b| joint_update(&g, &r, b))
}

/// The ResNet "class token": arithmetic mean of the patch tokens.
pub fn resnet_class_token(patches: &Tensor) -> Result<Vec<f32>> {
    if patches.rank() != 2 || patches.rows() == 0 {
        return Err(Error::Parameter("mean over an empty patch set".into()));
    }
    let (n, c) = (patches.rows(), patches.dim(1));
    let mut acc = vec![0.0f64; c];
    for i in 0..n {
        for (a, v) in acc.iter_mut().zip(patches.row(i)) {
            *a += *v as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

/// Per-patch pooled embeddings: pooling patch `m` over the duplicate set
/// `{f_m, f_m}` puts weight 1/2 on each copy in every head, so the result is
/// just the projected value `out_proj(W_v f_m)`. No softmax is evaluated.
pub fn resnet_per_patch_pool(patches: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let v = linear(patches, &w.wv, Some(&w.bv))?;
    linear(&v, &w.out_w, Some(&w.out_b))
}
