//! Reference-activation fixture archives and the checks that compare the
//! engine against them.
//!
//! An archive is a directory holding `index.json` and one raw dump (see
//! [`crate::rawio`]) per recorded array. The index lists image samples
//! (model input, image embedding, optional per-layer class tokens) and text
//! samples (phrase, token ids, text embedding), with paths relative to the
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::{Arch, WeightsBundle};
use crate::error::{Error, Result};
use crate::features::VisualModel;
use crate::rawio::{read_raw, write_raw, RawArray};
use crate::tensor::Tensor;
use crate::text::{Embedding, TextEncoder};

pub const INDEX_FILE: &str = "index.json";
pub const MIN_COSINE: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFixture {
    pub name: String,
    #[serde(default = "one")]
    pub stride_divisor: usize,
    /// `[3, H, W]` normalized model input.
    pub input: String,
    /// `[D]` image embedding.
    pub embedding: String,
    /// `[L, C]` class token after each layer (ViT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_tokens: Option<String>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextFixture {
    pub phrase: String,
    /// Token ids with start, end and padding.
    pub ids: Vec<u32>,
    /// `[D]` text embedding.
    pub embedding: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureIndex {
    pub model_id: String,
    pub arch: Arch,
    pub embed_dim: usize,
    pub images: Vec<ImageFixture>,
    pub texts: Vec<TextFixture>,
}

/// An index together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct FixtureArchive {
    pub dir: PathBuf,
    pub index: FixtureIndex,
}

impl FixtureArchive {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let text = std::fs::read_to_string(dir.join(INDEX_FILE))?;
        Ok(Self {
            index: serde_json::from_str(&text)?,
            dir,
        })
    }

    pub fn array(&self, rel: &str) -> Result<RawArray> {
        read_raw(self.dir.join(rel))
    }

    /// Check every recorded shape against the bundle dims.
    pub fn check_shapes(&self, bundle: &WeightsBundle) -> Result<()> {
        let d = bundle.dims.embed_dim;
        let bad = |what: &str, shape: &[usize]| Error::Format(format!("fixture {what} has shape {shape:?}"));
        if self.index.embed_dim != d || self.index.arch != bundle.arch {
            return Err(Error::Format(format!(
                "fixture is for a {} model with D={}, bundle is {} with D={d}",
                self.index.arch, self.index.embed_dim, bundle.arch
            )));
        }
        for f in &self.index.images {
            let input = self.array(&f.input)?;
            if input.shape.len() != 3 || input.shape[0] != 3 {
                return Err(bad(&f.input, &input.shape));
            }
            let e = self.array(&f.embedding)?;
            if e.shape != [d] {
                return Err(bad(&f.embedding, &e.shape));
            }
            if let Some(ct) = &f.class_tokens {
                let t = self.array(ct)?;
                if t.shape != [bundle.dims.layers, bundle.dims.width] {
                    return Err(bad(ct, &t.shape));
                }
            }
        }
        for f in &self.index.texts {
            let e = self.array(&f.embedding)?;
            if e.shape != [d] {
                return Err(bad(&f.embedding, &e.shape));
            }
            if f.ids.len() != bundle.dims.context_length {
                return Err(Error::Format(format!("fixture ids for {:?} have length {}", f.phrase, f.ids.len())));
            }
        }
        Ok(())
    }
}

/// One compared quantity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParityRow {
    pub name: String,
    /// Cosine for embeddings, the lowest per-layer cosine for class-token
    /// traces, 1 or 0 for token ids.
    pub cosine: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ParityReport {
    pub rows: Vec<ParityRow>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    fn push(&mut self, name: String, cosine: f64) {
        self.rows.push(ParityRow {
            name,
            cosine,
            pass: cosine >= MIN_COSINE,
        });
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    Embedding {
        values: a.to_vec(),
        normalized: false,
    }
    .cosine(&Embedding {
        values: b.to_vec(),
        normalized: false,
    })
}

fn input_tensor(raw: &RawArray) -> Result<Tensor> {
    Tensor::new(raw.shape.clone(), raw.to_f32())
}

/// Run the engine on every fixture input and compare.
pub fn check_parity(archive: &FixtureArchive, bundle: &WeightsBundle) -> Result<ParityReport> {
    archive.check_shapes(bundle)?;
    let visual = VisualModel::from_bundle(bundle)?;
    let text = TextEncoder::from_bundle(bundle)?;
    let mut report = ParityReport::default();
    for f in &archive.index.images {
        let input = input_tensor(&archive.array(&f.input)?)?;
        let got = visual.image_embedding(&input, f.stride_divisor)?;
        report.push(format!("image:{}", f.name), cosine(&got.values, &archive.array(&f.embedding)?.to_f32()));
        if let (Some(ct), VisualModel::Vit(v)) = (&f.class_tokens, &visual) {
            let want = archive.array(ct)?;
            let got = v.class_token_trace(&input, f.stride_divisor)?;
            let c = want.shape[1];
            let wd = want.to_f32();
            let worst = (0..want.shape[0])
                .map(|l| cosine(got.row(l), &wd[l * c..(l + 1) * c]))
                .fold(f64::INFINITY, f64::min);
            report.push(format!("class-tokens:{}", f.name), worst);
        }
    }
    for f in &archive.index.texts {
        let seq = text.tokenizer().tokenize(&f.phrase)?;
        report.push(format!("ids:{}", f.phrase), if seq.ids == f.ids { 1.0 } else { 0.0 });
        let got = text.encode_tokens(&seq)?;
        report.push(format!("text:{}", f.phrase), cosine(&got.values, &archive.array(&f.embedding)?.to_f32()));
    }
    Ok(report)
}

/// Record the engine's own activations as an archive. Used to produce
/// self-consistent fixtures and to exercise the format.
pub fn write_fixture_archive(
    dir: impl AsRef<Path>,
    model_id: &str,
    bundle: &WeightsBundle,
    images: &[(String, Tensor, usize)],
    phrases: &[String],
) -> Result<FixtureArchive> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let visual = VisualModel::from_bundle(bundle)?;
    let text = TextEncoder::from_bundle(bundle)?;
    let mut index = FixtureIndex {
        model_id: model_id.to_string(),
        arch: bundle.arch,
        embed_dim: bundle.dims.embed_dim,
        images: Vec::new(),
        texts: Vec::new(),
    };
    let dump = |name: &str, shape: Vec<usize>, data: Vec<f32>| -> Result<String> {
        write_raw(dir.join(name), &RawArray::f32(shape, data))?;
        Ok(name.to_string())
    };
    for (name, input, div) in images {
        let e = visual.image_embedding(input, *div)?;
        let class_tokens = match &visual {
            VisualModel::Vit(v) => {
                let t = v.class_token_trace(input, *div)?;
                Some(dump(&format!("{name}.class_tokens.raw"), t.shape().to_vec(), t.into_data())?)
            }
            VisualModel::Resnet(_) => None,
        };
        index.images.push(ImageFixture {
            name: name.clone(),
            stride_divisor: *div,
            input: dump(&format!("{name}.input.raw"), input.shape().to_vec(), input.data().to_vec())?,
            embedding: dump(&format!("{name}.image_embedding.raw"), vec![e.dim()], e.values)?,
            class_tokens,
        });
    }
    for (i, phrase) in phrases.iter().enumerate() {
        let seq = text.tokenizer().tokenize(phrase)?;
        let e = text.encode_tokens(&seq)?;
        index.texts.push(TextFixture {
            phrase: phrase.clone(),
            embedding: dump(&format!("text{i}.embedding.raw"), vec![e.dim()], e.values)?,
            ids: seq.ids,
        });
    }
    std::fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(FixtureArchive {
        dir: dir.to_path_buf(),
        index,
    })
}
