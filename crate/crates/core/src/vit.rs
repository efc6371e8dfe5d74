//! Vision transformer image tower with stride-reduced patchify and region
//! tokens.

use rayon::prelude::*;

use crate::attention::{class_token_update, forward_with_regions, Block, RegionTokenSet, TokenGrid, LN_EPS};
use crate::bundle::{Arch, WeightsBundle};
use crate::error::{Error, Result};
use crate::score::normalize_embedding;
use crate::superpixel::{regions_to_patch_sets, SuperpixelMap};
use crate::tensor::{bilinear_resize, conv2d, layer_norm, layer_norm_row, linear, Conv2dParams, Tensor};
use crate::text::Embedding;

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    conv1: Tensor,
    class_embedding: Tensor,
    positional: Tensor,
    ln_pre: (Tensor, Tensor),
    blocks: Vec<Block>,
    ln_post: (Tensor, Tensor),
    /// `[D, C]`
    projection: Tensor,
    patch_size: usize,
}

/// Resample the grid part of a `[1 + g*g, C]` positional table to
/// `new_h x new_w`, keeping the class slot.
pub fn interpolate_positional_table(pos: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let c = pos.dim(1);
    let cells = pos.rows() - 1;
    let g = (cells as f64).sqrt().round() as usize;
    if g * g != cells {
        return Err(Error::Bundle(format!("positional grid of {cells} cells is not square")));
    }
    let grid = pos.slice_rows(1, cells).reshape([g, g, c])?;
    let resized = bilinear_resize(&grid, new_h, new_w)?;
    let mut data = Vec::with_capacity((1 + new_h * new_w) * c);
    data.extend_from_slice(pos.row(0));
    data.extend_from_slice(resized.data());
    Tensor::new([1 + new_h * new_w, c], data)
}

/// Positional embeddings of a ViT bundle resized to a new patch grid.
pub fn interpolate_positional_embeddings(bundle: &WeightsBundle, new_grid: (usize, usize)) -> Result<Tensor> {
    interpolate_positional_table(bundle.tensor("visual.positional_embedding")?, new_grid.0, new_grid.1)
}

impl VisionTransformer {
    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        if b.arch != Arch::Vit {
            return Err(Error::Arch(format!("expected a vit bundle, got {}", b.arch)));
        }
        let t = |n: &str| b.tensor(n).cloned();
        let blocks = (0..b.dims.layers)
            .map(|i| Block::from_bundle(b, &format!("visual.transformer.resblocks.{i}"), b.dims.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv1: t("visual.conv1.weight")?,
            class_embedding: t("visual.class_embedding")?,
            positional: t("visual.positional_embedding")?,
            ln_pre: (t("visual.ln_pre.weight")?, t("visual.ln_pre.bias")?),
            blocks,
            ln_post: (t("visual.ln_post.weight")?, t("visual.ln_post.bias")?),
            projection: t("visual.proj")?.transpose()?,
            patch_size: b.dims.patch_size,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, layer: usize) -> &Block {
        &self.blocks[layer]
    }

    pub fn width(&self) -> usize {
        self.class_embedding.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.dim(0)
    }

    /// Patch embedding at stride `patch_size / stride_divisor`, class token
    /// prepended, interpolated positional embeddings added.
    pub fn patchify(&self, image: &Tensor, stride_divisor: usize) -> Result<TokenGrid> {
        if stride_divisor == 0 || !self.patch_size.is_multiple_of(stride_divisor) {
            return Err(Error::Config(format!(
                "patch size {} is not divisible by stride divisor {stride_divisor}",
                self.patch_size
            )));
        }
        let stride = self.patch_size / stride_divisor;
        let fm = conv2d(
            image,
            &self.conv1,
            None,
            Conv2dParams {
                stride,
                dilation: 1,
                padding: 0,
            },
        )?;
        let (c, gh, gw) = (fm.dim(0), fm.dim(1), fm.dim(2));
        let pos = interpolate_positional_table(&self.positional, gh, gw)?;
        let n = gh * gw;
        let mut tokens = Tensor::zeros([1 + n, c]);
        for (k, (o, p)) in tokens.row_mut(0).iter_mut().zip(pos.row(0)).enumerate() {
            *o = self.class_embedding.data()[k] + p;
        }
        let fd = fm.data();
        for i in 0..n {
            let prow = pos.row(1 + i).to_vec();
            let row = tokens.row_mut(1 + i);
            for k in 0..c {
                row[k] = fd[k * n + i] + prow[k];
            }
        }
        TokenGrid::new(tokens, gh, gw)
    }

    /// Input to the first block: patchify followed by the pre-norm.
    pub fn embed(&self, image: &Tensor, stride_divisor: usize) -> Result<TokenGrid> {
        let g = self.patchify(image, stride_divisor)?;
        let tokens = layer_norm(&g.tokens, &self.ln_pre.0, &self.ln_pre.1, LN_EPS)?;
        TokenGrid::new(tokens, g.grid_h, g.grid_w)
    }

    /// Token grid after every block.
    pub fn forward(&self, grid: TokenGrid) -> Result<TokenGrid> {
        self.blocks.iter().try_fold(grid, |g, b| class_token_update(&g, b))
    }

    /// Class token after each block, `[L, C]`.
    pub fn class_token_trace(&self, image: &Tensor, stride_divisor: usize) -> Result<Tensor> {
        let mut g = self.embed(image, stride_divisor)?;
        let mut rows = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            g = class_token_update(&g, b)?;
            rows.push(g.class_token().to_vec());
        }
        Tensor::from_rows(&rows)
    }

    /// Final norm and projection of one output token, not normalized.
    pub fn project(&self, token: &[f32]) -> Result<Embedding> {
        let mut t = token.to_vec();
        layer_norm_row(&mut t, self.ln_post.0.data(), self.ln_post.1.data(), LN_EPS);
        let p = linear(&Tensor::new([1, t.len()], t)?, &self.projection, None)?;
        Ok(Embedding {
            values: p.into_data(),
            normalized: false,
        })
    }

    /// [`VisionTransformer::project`] followed by L2 normalization.
    pub fn head(&self, token: &[f32]) -> Result<Embedding> {
        normalize_embedding(&self.project(token)?)
    }

    /// Standard whole-image embedding from the class token.
    pub fn image_embedding(&self, image: &Tensor, stride_divisor: usize) -> Result<Embedding> {
        let g = self.forward(self.embed(image, stride_divisor)?)?;
        self.head(g.class_token())
    }

    /// Patch grid size for an `h x w` input.
    pub fn grid_size(&self, h: usize, w: usize, stride_divisor: usize) -> (usize, usize) {
        let s = self.patch_size / stride_divisor.max(1);
        ((h - self.patch_size) / s + 1, (w - self.patch_size) / s + 1)
    }

    /// Final embeddings of region tokens over the given patch sets, all run
    /// in one masked pass, together with the class-token image embedding.
    pub fn region_embeddings(
        &self,
        image: &Tensor,
        stride_divisor: usize,
        memberships: Vec<Vec<usize>>,
    ) -> Result<(Embedding, Vec<Embedding>)> {
        let grid = self.embed(image, stride_divisor)?;
        let regions = RegionTokenSet::from_class_token(&grid, memberships)?;
        let (grid, regions) = forward_with_regions(grid, regions, &self.blocks)?;
        let image_emb = self.head(grid.class_token())?;
        let region_embs = (0..regions.len())
            .into_par_iter()
            .map(|m| self.head(regions.tokens.row(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok((image_emb, region_embs))
    }

    /// Per-pixel embeddings: every pixel of region `m` of each map takes that
    /// region's projected token; maps are averaged and the result normalized.
    pub fn spatial_features(
        &self,
        image: &Tensor,
        stride_divisor: usize,
        maps: &[SuperpixelMap],
    ) -> Result<crate::features::SpatialFeatureMap> {
        let (h, w) = (image.dim(1), image.dim(2));
        if maps.is_empty() {
            return Err(Error::Config("at least one superpixel map is required".into()));
        }
        if let Some(m) = maps.iter().find(|m| (m.height, m.width) != (h, w)) {
            return Err(Error::dim("superpixel map", &[m.height, m.width], &[h, w]));
        }
        let (gh, gw) = self.grid_size(h, w, stride_divisor);
        let mut memberships = Vec::new();
        let mut offsets = Vec::with_capacity(maps.len());
        for m in maps {
            offsets.push(memberships.len());
            memberships.extend(regions_to_patch_sets(m, gh, gw));
        }
        // projected but unnormalized; the average is normalized once
        let grid = self.embed(image, stride_divisor)?;
        let tokens = RegionTokenSet::from_class_token(&grid, memberships)?;
        let (_, tokens) = forward_with_regions(grid, tokens, &self.blocks)?;
        let regions = (0..tokens.len())
            .into_par_iter()
            .map(|m| self.project(tokens.tokens.row(m)))
            .collect::<Result<Vec<_>>>()?;
        let lookup: Vec<Vec<&[f32]>> = maps
            .iter()
            .zip(&offsets)
            .map(|(m, &off)| m.labels.iter().map(|&l| regions[off + l as usize].values.as_slice()).collect())
            .collect();
        crate::features::average_and_normalize(h, w, self.embed_dim(), &lookup, (gh, gw))
    }
}
