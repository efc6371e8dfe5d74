//! Small random-weight bundles and synthetic score maps for tests,
//! benchmarks and smoke runs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::{expected_tensors, Activation, Arch, Dims, Preprocess, TokenizerData, WeightsBundle};
use crate::resnet::{BatchNorm, Bottleneck, ConvBn, LayerPlan, PoolSpec};
use crate::tensor::{Conv2dParams, Tensor};
use crate::tokenizer::vocab_from_merges;

/// Shape of a toy bundle.
#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input_resolution: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub resnet_blocks: Vec<usize>,
    pub sigma: f32,
    pub seed: u64,
}

impl ToyConfig {
    /// 3-layer ViT, width 32, 4 heads, 8-pixel patches on a 32x32 input (4x4 grid).
    pub fn vit() -> Self {
        Self {
            arch: Arch::Vit,
            embed_dim: 16,
            width: 32,
            layers: 3,
            heads: 4,
            patch_size: 8,
            input_resolution: 32,
            text_width: 16,
            text_layers: 2,
            text_heads: 2,
            context_length: 16,
            resnet_blocks: Vec::new(),
            sigma: 0.07,
            seed: 0,
        }
    }

    /// Modified ResNet with one bottleneck per stage, stem width 8, 64x64 input.
    pub fn resnet() -> Self {
        Self {
            arch: Arch::Resnet,
            width: 8,
            layers: 1,
            heads: 4,
            patch_size: 32,
            input_resolution: 64,
            resnet_blocks: vec![1, 1, 1, 1],
            ..Self::vit()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

const TOY_MERGES: &[(&str, &str)] = &[
    ("c", "a"),
    ("ca", "t</w>"),
    ("p", "h"),
    ("o", "t"),
    ("ph", "ot"),
    ("phot", "o</w>"),
    ("o", "f</w>"),
    ("d", "o"),
    ("do", "g</w>"),
    ("a", "n</w>"),
    ("t", "h"),
    ("th", "e</w>"),
    ("m", "an</w>"),
    ("r", "e"),
    ("re", "d</w>"),
];

/// Tokenizer over the 512 byte symbols plus a handful of English merges.
pub fn toy_tokenizer(context_length: usize) -> TokenizerData {
    let merges: Vec<(String, String)> = TOY_MERGES
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    TokenizerData {
        context_length,
        ..vocab_from_merges(&merges)
    }
}

/// Random-weight bundle whose tensor set passes validation.
pub fn toy_bundle(cfg: &ToyConfig) -> WeightsBundle {
    let tokenizer = toy_tokenizer(cfg.context_length);
    let dims = Dims {
        embed_dim: cfg.embed_dim,
        width: cfg.width,
        layers: cfg.layers,
        heads: cfg.heads,
        patch_size: cfg.patch_size,
        input_resolution: cfg.input_resolution,
        text_width: cfg.text_width,
        text_layers: cfg.text_layers,
        text_heads: cfg.text_heads,
        vocab_size: tokenizer.vocab.lines().count(),
        context_length: cfg.context_length,
        resnet_blocks: (cfg.arch == Arch::Resnet).then(|| cfg.resnet_blocks.clone()),
        activation: Activation::QuickGelu,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors: BTreeMap<String, Tensor> = expected_tensors(cfg.arch, &dims)
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, &mut rng);
            (name, t)
        })
        .collect();
    WeightsBundle {
        arch: cfg.arch,
        dims,
        tensors,
        sigma_default: cfg.sigma,
        preprocess: Preprocess::default(),
        tokenizer,
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut uniform = |scale: f32| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale));
    let is_norm = name.contains("ln_") || name.contains(".bn") || name.contains("downsample.1");
    if is_norm && name.ends_with(".weight") {
        let mut t = uniform(0.1);
        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        t
    } else if name.ends_with("running_var") {
        let mut t = uniform(0.5);
        t.data_mut().iter_mut().for_each(|v| *v = 1.0 + v.abs());
        t
    } else if name.ends_with(".bias") || name.ends_with("running_mean") {
        uniform(0.05)
    } else if name.contains("embedding") {
        uniform(0.5)
    } else {
        let fan_in: usize = if name.ends_with("proj") && shape.len() == 2 {
            // `visual.proj` / `text_projection` are stored [in, out]
            shape[0]
        } else {
            shape[1..].iter().product()
        };
        uniform((3.0 / fan_in.max(1) as f32).sqrt())
    }
}

/// Smooth positive map: a constant floor plus a few random Gaussian bumps
/// and mild noise.
pub fn smooth_random_map(h: usize, w: usize, bumps: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.05..0.25) * h.min(w) as f64,
                rng.random_range(1.0..4.0),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = 1.0;
            for &(cy, cx, s, a) in &centers {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
            v += rng.random_range(0.0..0.05);
            out.push(v);
        }
    }
    out
}

/// One dominant Gaussian blob on a unit floor.
pub fn gaussian_blob_map(h: usize, w: usize, seed: u64) -> Vec<f64> {
    smooth_random_map(h, w, 1, seed)
}

/// Independent uniform values in `(0.01, 1]`.
pub fn uniform_random_map(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w).map(|_| rng.random_range(0.01..=1.0)).collect()
}

/// Random residual blocks without a stem: `(planes, stride)` per block,
/// output width `4 * planes`.
pub fn toy_layer_plan(seed: u64, in_channels: usize, blocks: &[(usize, usize)]) -> LayerPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |cin: usize, cout: usize, k: usize, padding: usize| {
        let scale = (3.0 / (cin * k * k) as f32).sqrt();
        ConvBn {
            weight: Tensor::from_fn([cout, cin, k, k], |_| rng.random_range(-scale..scale)),
            bn: BatchNorm {
                scale: (0..cout).map(|_| rng.random_range(0.8..1.2)).collect(),
                shift: (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect(),
            },
            params: Conv2dParams {
                stride: 1,
                dilation: 1,
                padding,
            },
        }
    };
    let mut inplanes = in_channels;
    let mut out = Vec::new();
    for &(planes, stride) in blocks {
        let pool = (stride > 1).then(|| PoolSpec::strided(stride));
        let conv1 = conv(inplanes, planes, 1, 0);
        let conv2 = conv(planes, planes, 3, 1);
        let conv3 = conv(planes, planes * 4, 1, 0);
        let downsample = (stride > 1 || inplanes != planes * 4).then(|| (pool, conv(inplanes, planes * 4, 1, 0)));
        out.push(Bottleneck {
            conv1,
            conv2,
            pool,
            conv3,
            downsample,
        });
        inplanes = planes * 4;
    }
    LayerPlan {
        stem: Vec::new(),
        stem_pool: None,
        blocks: out,
    }
}
