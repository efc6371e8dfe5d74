//! End-to-end grounding: image and phrase in, box out.

use std::time::Instant;

use image::RgbImage;
use serde::Serialize;

use crate::bundle::WeightsBundle;
use crate::error::Result;
use crate::features::{multiscale_feature_map, PipelineConfig, SpatialFeatureMap, VisualModel};
use crate::imageio::{prepare, PreparedImage};
use crate::score::{compute_score_map, ScoreMap};
use crate::search::{map_box_to_image_coords, search, BoundingBox, HierarchicalParams, Lambda, SearchMethod};
use crate::text::{apply_template, Embedding, TextEncoder};

/// Everything that shapes a prediction besides the weights and inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOptions {
    pub features: PipelineConfig,
    /// Temperature; `None` takes the bundle's value.
    pub sigma: Option<f32>,
    pub lambda: Lambda,
    pub method: SearchMethod,
    pub hier: HierarchicalParams,
    /// Wrap the phrase in the caption template before encoding.
    pub template: bool,
}

impl GroundingOptions {
    pub fn new(features: PipelineConfig) -> Self {
        Self {
            features,
            sigma: None,
            lambda: Lambda::default(),
            method: SearchMethod::Ess,
            hier: HierarchicalParams::default(),
            template: false,
        }
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub features_ms: f64,
    pub text_ms: f64,
    pub score_ms: f64,
    pub search_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grounding {
    /// Box in original image pixels.
    pub bbox: BoundingBox,
    /// Box on the model-resolution score map.
    pub map_box: BoundingBox,
    pub score: f64,
    pub lambda: f64,
    pub method: SearchMethod,
    pub evaluated: u64,
    pub timings: Timings,
}

/// Loaded weights for both towers.
#[derive(Debug)]
pub struct Grounder {
    bundle: WeightsBundle,
    text: TextEncoder,
    visual: VisualModel,
}

impl Grounder {
    pub fn from_bundle(bundle: WeightsBundle) -> Result<Self> {
        Ok(Self {
            text: TextEncoder::from_bundle(&bundle)?,
            visual: VisualModel::from_bundle(&bundle)?,
            bundle,
        })
    }

    pub fn bundle(&self) -> &WeightsBundle {
        &self.bundle
    }

    pub fn visual(&self) -> &VisualModel {
        &self.visual
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    /// Default options for this bundle's architecture.
    pub fn default_options(&self) -> GroundingOptions {
        GroundingOptions::new(PipelineConfig::new(self.bundle.arch))
    }

    /// Resize and normalize an image for this model.
    pub fn prepare(&self, img: &RgbImage) -> Result<PreparedImage> {
        prepare(img, self.bundle.dims.input_resolution, &self.bundle.preprocess)
    }

    pub fn encode_phrase(&self, phrase: &str, template: bool) -> Result<Embedding> {
        if template {
            self.text.encode(&apply_template(phrase))
        } else {
            self.text.encode(phrase)
        }
    }

    pub fn features(&self, image: &PreparedImage, opts: &GroundingOptions) -> Result<SpatialFeatureMap> {
        multiscale_feature_map(image, &self.visual, &opts.features)
    }

    /// Score map at model resolution.
    pub fn score_map(&self, image: &PreparedImage, phrase: &str, opts: &GroundingOptions) -> Result<ScoreMap> {
        let feats = self.features(image, opts)?;
        let text = self.encode_phrase(phrase, opts.template)?;
        compute_score_map(&feats, &text, opts.sigma.unwrap_or(self.bundle.sigma_default))
    }

    /// Score map resampled to the original image size.
    pub fn heatmap(&self, image: &PreparedImage, phrase: &str, opts: &GroundingOptions) -> Result<ScoreMap> {
        self.score_map(image, phrase, opts)?.resized(image.orig_h, image.orig_w)
    }

    /// Search an already computed feature map.
    pub fn ground_features(
        &self,
        image: &PreparedImage,
        feats: &SpatialFeatureMap,
        phrase: &str,
        opts: &GroundingOptions,
    ) -> Result<Grounding> {
        Ok(self.ground_features_with_map(image, feats, phrase, opts)?.0)
    }

    /// Like [`Grounder::ground_features`], also returning the model-resolution
    /// score map that was searched.
    pub fn ground_features_with_map(
        &self,
        image: &PreparedImage,
        feats: &SpatialFeatureMap,
        phrase: &str,
        opts: &GroundingOptions,
    ) -> Result<(Grounding, ScoreMap)> {
        let mut timings = Timings::default();
        let t = Instant::now();
        let text = self.encode_phrase(phrase, opts.template)?;
        timings.text_ms = ms(t);
        let t = Instant::now();
        let map = compute_score_map(feats, &text, opts.sigma.unwrap_or(self.bundle.sigma_default))?;
        timings.score_ms = ms(t);
        let t = Instant::now();
        let lambda = opts.lambda.resolve(&map)?;
        let found = search(&map, lambda, opts.method, opts.hier)?;
        timings.search_ms = ms(t);
        let (sh, sw) = image.scales();
        let g = Grounding {
            bbox: map_box_to_image_coords(&found.bbox, sh, sw, image.orig_h, image.orig_w)?,
            map_box: found.bbox,
            score: found.score,
            lambda,
            method: found.method,
            evaluated: found.evaluated,
            timings,
        };
        Ok((g, map))
    }

    pub fn ground(&self, image: &PreparedImage, phrase: &str, opts: &GroundingOptions) -> Result<Grounding> {
        Ok(self.ground_with_map(image, phrase, opts)?.0)
    }

    pub fn ground_with_map(&self, image: &PreparedImage, phrase: &str, opts: &GroundingOptions) -> Result<(Grounding, ScoreMap)> {
        let t = Instant::now();
        let feats = self.features(image, opts)?;
        let features_ms = ms(t);
        let (mut g, map) = self.ground_features_with_map(image, &feats, phrase, opts)?;
        g.timings.features_ms = features_ms;
        Ok((g, map))
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}
