//! Per-pixel spatial embeddings for either image tower.

use rayon::prelude::*;

use crate::bundle::{Arch, WeightsBundle};
use crate::error::{Error, Result};
use crate::imageio::PreparedImage;
use crate::resnet::ModifiedResNet;
use crate::superpixel::{slic_segment, SuperpixelMap, DEFAULT_COMPACTNESS, DEFAULT_ITERATIONS};
use crate::tensor::Tensor;
use crate::text::Embedding;
use crate::vit::VisionTransformer;

/// `H x W x D` per-pixel embeddings and the patch grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatureMap {
    pub embeddings: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub normalized: bool,
}

impl SpatialFeatureMap {
    pub fn height(&self) -> usize {
        self.embeddings.dim(0)
    }

    pub fn width(&self) -> usize {
        self.embeddings.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim(2)
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let d = self.dim();
        let p = y * self.width() + x;
        &self.embeddings.data()[p * d..(p + 1) * d]
    }

    /// Normalize every pixel vector of an `[H, W, D]` tensor.
    pub fn normalized_from(mut embeddings: Tensor, grid: (usize, usize)) -> Result<Self> {
        let d = embeddings.dim(2);
        embeddings.data_mut().par_chunks_mut(d).try_for_each(normalize_in_place)?;
        Ok(Self {
            embeddings,
            grid_h: grid.0,
            grid_w: grid.1,
            normalized: true,
        })
    }
}

fn normalize_in_place(v: &mut [f32]) -> Result<()> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("zero feature vector".into()));
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    Ok(())
}

/// Pixel `p` gets the mean of `lookup[k][p]` over maps `k`, renormalized.
pub(crate) fn average_and_normalize(
    h: usize,
    w: usize,
    d: usize,
    lookup: &[Vec<&[f32]>],
    grid: (usize, usize),
) -> Result<SpatialFeatureMap> {
    let mut data = vec![0.0f32; h * w * d];
    let k = lookup.len() as f64;
    data.par_chunks_mut(d).enumerate().try_for_each(|(p, out)| {
        let mut acc = vec![0.0f64; d];
        for map in lookup {
            for (a, v) in acc.iter_mut().zip(map[p]) {
                *a += *v as f64;
            }
        }
        let n = acc.iter().map(|a| (a / k).powi(2)).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::Degenerate(format!("pixel {p} averages to a zero vector")));
        }
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = (a / k / n) as f32;
        }
        Ok(())
    })?;
    Ok(SpatialFeatureMap {
        embeddings: Tensor::new([h, w, d], data)?,
        grid_h: grid.0,
        grid_w: grid.1,
        normalized: true,
    })
}

/// Feature-extraction settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub arch: Arch,
    /// 1 keeps the patch stride; 2 and 4 slide the patch window at half or
    /// a quarter of the patch size.
    pub stride_divisor: usize,
    pub slic_counts: Vec<usize>,
    pub dilation_enabled: bool,
    pub compactness: f32,
    pub slic_iterations: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            stride_divisor: 1,
            slic_counts: parse_slic_spec("100:600:50").expect("default spec"),
            dilation_enabled: true,
            compactness: DEFAULT_COMPACTNESS,
            slic_iterations: DEFAULT_ITERATIONS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.stride_divisor) {
            return Err(Error::Config(format!("stride divisor must be 1, 2 or 4, got {}", self.stride_divisor)));
        }
        if self.slic_counts.is_empty() {
            return Err(Error::Config("superpixel counts must be non-empty".into()));
        }
        if self.slic_counts.windows(2).any(|p| p[0] > p[1]) || self.slic_counts[0] == 0 {
            return Err(Error::Config("superpixel counts must be positive and ascending".into()));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) || self.slic_iterations == 0 {
            return Err(Error::Config(format!(
                "SLIC needs positive compactness and iterations, got {} and {}",
                self.compactness, self.slic_iterations
            )));
        }
        Ok(())
    }
}

/// `start:stop:step` (inclusive stop), a comma list, or a single count.
pub fn parse_slic_spec(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad superpixel spec {spec:?}; expected start:stop:step or a comma list"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let counts = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step == 0 || start > stop {
            return Err(bad());
        }
        (start..=stop).step_by(step).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if counts.is_empty() || counts.contains(&0) || counts.windows(2).any(|p| p[0] > p[1]) {
        return Err(bad());
    }
    Ok(counts)
}

/// Either image tower.
#[derive(Clone, Debug)]
pub enum VisualModel {
    Vit(VisionTransformer),
    Resnet(ModifiedResNet),
}

impl VisualModel {
    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        Ok(match b.arch {
            Arch::Vit => Self::Vit(VisionTransformer::from_bundle(b)?),
            Arch::Resnet => Self::Resnet(ModifiedResNet::from_bundle(b)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Self::Vit(_) => Arch::Vit,
            Self::Resnet(_) => Arch::Resnet,
        }
    }

    /// Whole-image embedding from the normalized input.
    pub fn image_embedding(&self, input: &Tensor, stride_divisor: usize) -> Result<Embedding> {
        match self {
            Self::Vit(v) => v.image_embedding(input, stride_divisor),
            Self::Resnet(r) => r.image_embedding(input),
        }
    }
}

/// Superpixel maps for each count, computed in parallel.
pub fn superpixel_maps(rgb: &Tensor, cfg: &PipelineConfig) -> Result<Vec<SuperpixelMap>> {
    cfg.slic_counts
        .par_iter()
        .map(|&k| slic_segment(rgb, k, cfg.compactness, cfg.slic_iterations, cfg.seed))
        .collect()
}

/// Per-pixel features at the model resolution: the superpixel-averaged
/// region-token map for ViT, the per-patch pooled map for ResNet.
pub fn multiscale_feature_map(image: &PreparedImage, model: &VisualModel, cfg: &PipelineConfig) -> Result<SpatialFeatureMap> {
    cfg.validate()?;
    if cfg.arch != model.arch() {
        return Err(Error::Arch(format!("configured for {} but the model is {}", cfg.arch, model.arch())));
    }
    match model {
        VisualModel::Vit(v) => {
            let maps = superpixel_maps(&image.rgb, cfg)?;
            v.spatial_features(&image.input, cfg.stride_divisor, &maps)
        }
        VisualModel::Resnet(r) => r.spatial_features(&image.input, cfg.dilation_enabled),
    }
}

/// ViT features for one superpixel map.
pub fn vit_spatial_features(
    input: &Tensor,
    model: &VisionTransformer,
    map: &SuperpixelMap,
    cfg: &PipelineConfig,
) -> Result<SpatialFeatureMap> {
    model.spatial_features(input, cfg.stride_divisor, std::slice::from_ref(map))
}

/// ResNet features, dilated when the configuration asks for it.
pub fn resnet_spatial_features(input: &Tensor, model: &ModifiedResNet, cfg: &PipelineConfig) -> Result<SpatialFeatureMap> {
    model.spatial_features(input, cfg.dilation_enabled)
}
