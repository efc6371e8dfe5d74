//! Modified ResNet image tower: a layer plan that can be rewritten into its
//! dilated (a-trous) form, and per-patch pooled spatial features.

use rayon::prelude::*;

use crate::attention::{attention_pool, resnet_class_token, resnet_per_patch_pool, AttentionWeights};
use crate::bundle::{Arch, WeightsBundle};
use crate::error::{Error, Result};
use crate::features::SpatialFeatureMap;
use crate::score::normalize_embedding;
use crate::tensor::{avg_pool2d, bilinear_resize, conv2d, Conv2dParams, Tensor};
use crate::text::Embedding;
use crate::vit::interpolate_positional_table;

pub const BN_EPS: f64 = 1e-5;

/// Inference-time batch norm folded into a per-channel affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl BatchNorm {
    pub fn fold(weight: &[f32], bias: &[f32], mean: &[f32], var: &[f32]) -> Self {
        let (scale, shift) = (0..weight.len())
            .map(|c| {
                let s = weight[c] as f64 / (var[c] as f64 + BN_EPS).sqrt();
                (s as f32, (bias[c] as f64 - mean[c] as f64 * s) as f32)
            })
            .unzip();
        Self { scale, shift }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            scale: vec![1.0; c],
            shift: vec![0.0; c],
        }
    }

    fn from_bundle(b: &WeightsBundle, prefix: &str) -> Result<Self> {
        let t = |s: &str| b.tensor(&format!("{prefix}.{s}"));
        Ok(Self::fold(
            t("weight")?.data(),
            t("bias")?.data(),
            t("running_mean")?.data(),
            t("running_var")?.data(),
        ))
    }
}

/// Bias-free convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub weight: Tensor,
    pub bn: BatchNorm,
    pub params: Conv2dParams,
}

impl ConvBn {
    fn from_bundle(b: &WeightsBundle, conv: &str, bn: &str, padding: usize) -> Result<Self> {
        Ok(Self {
            weight: b.tensor(&format!("{conv}.weight"))?.clone(),
            bn: BatchNorm::from_bundle(b, bn)?,
            params: Conv2dParams {
                stride: 1,
                dilation: 1,
                padding,
            },
        })
    }

    fn forward(&self, x: &Tensor, relu: bool) -> Result<Tensor> {
        let mut y = conv2d(x, &self.weight, None, self.params)?;
        let plane = y.dim(1) * y.dim(2);
        y.data_mut().par_chunks_mut(plane).enumerate().for_each(|(c, p)| {
            let (s, t) = (self.bn.scale[c], self.bn.shift[c]);
            for v in p {
                *v = *v * s + t;
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        });
        Ok(y)
    }
}

/// Average pooling; `pad_end` replicates the last row and column that many
/// times before pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_end: usize,
}

impl PoolSpec {
    pub fn strided(k: usize) -> Self {
        Self {
            k,
            stride: k,
            dilation: 1,
            pad_end: 0,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let padded;
        let src = if self.pad_end > 0 {
            padded = pad_end_replicate(x, self.pad_end);
            &padded
        } else {
            x
        };
        avg_pool2d(src, self.k, self.stride, self.dilation)
    }
}

fn pad_end_replicate(x: &Tensor, p: usize) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (nh, nw) = (h + p, w + p);
    let d = x.data();
    Tensor::from_fn([c, nh, nw], |i| {
        let (ch, rem) = (i / (nh * nw), i % (nh * nw));
        let (y, xx) = ((rem / nw).min(h - 1), (rem % nw).min(w - 1));
        d[ch * h * w + y * w + xx]
    })
}

/// `relu(bn3(conv3(pool(relu(bn2(conv2(relu(bn1(conv1 x)))))))) + shortcut)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub pool: Option<PoolSpec>,
    pub conv3: ConvBn,
    pub downsample: Option<(Option<PoolSpec>, ConvBn)>,
}

impl Bottleneck {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.conv1.forward(x, true)?;
        y = self.conv2.forward(&y, true)?;
        if let Some(p) = &self.pool {
            y = p.forward(&y)?;
        }
        y = self.conv3.forward(&y, false)?;
        let shortcut = match &self.downsample {
            Some((pool, conv)) => {
                let s = match pool {
                    Some(p) => p.forward(x)?,
                    None => x.clone(),
                };
                conv.forward(&s, false)?
            }
            None => x.clone(),
        };
        if shortcut.shape() != y.shape() {
            return Err(Error::dim("bottleneck residual", shortcut.shape(), y.shape()));
        }
        for (a, b) in y.data_mut().iter_mut().zip(shortcut.data()) {
            *a = (*a + b).max(0.0);
        }
        Ok(y)
    }

    fn stride(&self) -> usize {
        self.pool.map_or(1, |p| p.stride)
    }
}

/// Stem convolutions (each followed by ReLU), optional stem pool, residual
/// blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub stem: Vec<ConvBn>,
    pub stem_pool: Option<PoolSpec>,
    pub blocks: Vec<Bottleneck>,
}

impl LayerPlan {
    /// The reference modified ResNet: three-conv stem with a stride-2 first
    /// conv and a 2x2 average pool, then four stages of bottlenecks whose
    /// first block downsamples with a 2x2 average pool (stages 2-4).
    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        if b.arch != Arch::Resnet {
            return Err(Error::Arch(format!("expected a resnet bundle, got {}", b.arch)));
        }
        let mut stem = Vec::new();
        for i in 1..=3 {
            stem.push(ConvBn::from_bundle(b, &format!("visual.conv{i}"), &format!("visual.bn{i}"), 1)?);
        }
        stem[0].params.stride = 2;
        let counts = b
            .dims
            .resnet_blocks
            .clone()
            .ok_or_else(|| Error::Bundle("resnet bundle lacks block counts".into()))?;
        let mut blocks = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let p = format!("visual.layer{}.{i}", s + 1);
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let pool = (stride > 1).then(|| PoolSpec::strided(stride));
                let downsample = if b.tensors.contains_key(&format!("{p}.downsample.0.weight")) {
                    Some((pool, ConvBn::from_bundle(b, &format!("{p}.downsample.0"), &format!("{p}.downsample.1"), 0)?))
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    conv1: ConvBn::from_bundle(b, &format!("{p}.conv1"), &format!("{p}.bn1"), 0)?,
                    conv2: ConvBn::from_bundle(b, &format!("{p}.conv2"), &format!("{p}.bn2"), 1)?,
                    pool,
                    conv3: ConvBn::from_bundle(b, &format!("{p}.conv3"), &format!("{p}.bn3"), 0)?,
                    downsample,
                });
            }
        }
        Ok(Self {
            stem,
            stem_pool: Some(PoolSpec::strided(2)),
            blocks,
        })
    }

    /// A-trous rewrite of the residual blocks: each strided pool becomes a
    /// stride-1 pool dilated by the running factor, which is then multiplied
    /// by the old stride; every later convolution is dilated (and padded) by
    /// the running factor. The stem is left as is. Weights are untouched.
    pub fn dilated(&self) -> Self {
        let mut out = self.clone();
        let mut d = 1;
        for block in &mut out.blocks {
            for conv in [&mut block.conv1, &mut block.conv2, &mut block.conv3] {
                conv.params.dilation *= d;
                conv.params.padding *= d;
            }
            let stride = block.stride();
            let dilate = |p: &mut PoolSpec| {
                if p.stride > 1 {
                    *p = PoolSpec {
                        k: p.k,
                        stride: 1,
                        dilation: d,
                        pad_end: d * (p.k - 1),
                    };
                }
            };
            if let Some(p) = block.pool.as_mut() {
                dilate(p);
            }
            if let Some((Some(p), _)) = block.downsample.as_mut() {
                dilate(p);
            }
            d *= stride;
        }
        out
    }

    /// Total stride of the residual blocks (the dense-grid spacing of the
    /// original output positions after dilation).
    pub fn block_stride(&self) -> usize {
        self.blocks.iter().map(Bottleneck::stride).product()
    }

    pub fn forward_stem(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for conv in &self.stem {
            y = conv.forward(&y, true)?;
        }
        match &self.stem_pool {
            Some(p) => p.forward(&y),
            None => Ok(y),
        }
    }

    pub fn forward_blocks(&self, x: &Tensor) -> Result<Tensor> {
        self.blocks.iter().try_fold(x.clone(), |y, b| b.forward(&y))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_blocks(&self.forward_stem(x)?)
    }
}

/// Dilated layer plan of a ResNet bundle.
pub fn dilate_network(bundle: &WeightsBundle) -> Result<LayerPlan> {
    Ok(LayerPlan::from_bundle(bundle)?.dilated())
}

#[derive(Clone, Debug)]
pub struct ModifiedResNet {
    plan: LayerPlan,
    dilated: LayerPlan,
    pool: AttentionWeights,
    positional: Tensor,
}

impl ModifiedResNet {
    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        let plan = LayerPlan::from_bundle(b)?;
        let t = |n: &str| b.tensor(&format!("visual.attnpool.{n}")).cloned();
        let pool = AttentionWeights::new(
            (t("q_proj.weight")?, t("q_proj.bias")?),
            (t("k_proj.weight")?, t("k_proj.bias")?),
            (t("v_proj.weight")?, t("v_proj.bias")?),
            (t("c_proj.weight")?, t("c_proj.bias")?),
            b.dims.heads,
        )?;
        Ok(Self {
            dilated: plan.dilated(),
            plan,
            pool,
            positional: t("positional_embedding")?,
        })
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn pool_weights(&self) -> &AttentionWeights {
        &self.pool
    }

    pub fn embed_dim(&self) -> usize {
        self.pool.out_w.dim(0)
    }

    /// Backbone feature map `[C, h, w]`.
    pub fn backbone(&self, image: &Tensor, dilated: bool) -> Result<Tensor> {
        if dilated {
            self.dilated.forward(image)
        } else {
            self.plan.forward(image)
        }
    }

    /// Positional table for an `h x w` feature grid. On the dense grid the
    /// source positions sit `spacing` cells apart and the margin beyond the
    /// last one repeats the edge.
    fn positional_for(&self, h: usize, w: usize, spacing: usize) -> Result<Tensor> {
        let g = ((self.positional.rows() - 1) as f64).sqrt().round() as usize;
        let (vh, vw) = (((g - 1) * spacing + 1).min(h), ((g - 1) * spacing + 1).min(w));
        let table = interpolate_positional_table(&self.positional, vh, vw)?;
        if (vh, vw) == (h, w) {
            return Ok(table);
        }
        let c = table.dim(1);
        let mut out = Tensor::zeros([1 + h * w, c]);
        out.row_mut(0).copy_from_slice(table.row(0));
        for y in 0..h {
            for x in 0..w {
                out.row_mut(1 + y * w + x).copy_from_slice(table.row(1 + y.min(vh - 1) * vw + x.min(vw - 1)));
            }
        }
        Ok(out)
    }

    /// Patch tokens with positional embeddings added, and the class token
    /// (patch mean plus the class-slot embedding).
    pub fn tokens(&self, fm: &Tensor, dilated: bool) -> Result<(Tensor, Vec<f32>)> {
        let (c, h, w) = (fm.dim(0), fm.dim(1), fm.dim(2));
        let n = h * w;
        let raw = Tensor::from_fn([n, c], |i| fm.data()[(i % c) * n + i / c]);
        let spacing = if dilated { self.plan.block_stride() } else { 1 };
        let pos = if dilated {
            self.positional_for(h, w, spacing)?
        } else {
            interpolate_positional_table(&self.positional, h, w)?
        };
        let mut cls = resnet_class_token(&raw)?;
        for (v, p) in cls.iter_mut().zip(pos.row(0)) {
            *v += p;
        }
        let patches = Tensor::from_fn([n, c], |i| raw.data()[i] + pos.data()[c + i]);
        Ok((patches, cls))
    }

    /// Standard image embedding: attention pooling of the class token over
    /// `[class, patches]`.
    pub fn image_embedding(&self, image: &Tensor) -> Result<Embedding> {
        let fm = self.backbone(image, false)?;
        let (patches, cls) = self.tokens(&fm, false)?;
        let mut rows: Vec<&[f32]> = vec![&cls];
        rows.extend((0..patches.rows()).map(|i| patches.row(i)));
        let pool = Tensor::from_rows(&rows)?;
        normalize_embedding(&Embedding {
            values: attention_pool(&cls, &pool, &self.pool)?,
            normalized: false,
        })
    }

    /// Per-patch pooled embeddings `[h, w, D]` before upsampling.
    pub fn patch_embeddings(&self, image: &Tensor, dilated: bool) -> Result<Tensor> {
        let fm = self.backbone(image, dilated)?;
        let (h, w) = (fm.dim(1), fm.dim(2));
        let (patches, _) = self.tokens(&fm, dilated)?;
        let pooled = resnet_per_patch_pool(&patches, &self.pool)?;
        let d = pooled.dim(1);
        pooled.reshape([h, w, d])
    }

    /// Per-pixel features at the input resolution.
    pub fn spatial_features(&self, image: &Tensor, dilated: bool) -> Result<SpatialFeatureMap> {
        let grid = self.patch_embeddings(image, dilated)?;
        let (gh, gw) = (grid.dim(0), grid.dim(1));
        let up = bilinear_resize(&grid, image.dim(1), image.dim(2))?;
        SpatialFeatureMap::normalized_from(up, (gh, gw))
    }
}
