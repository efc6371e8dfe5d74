//! The CGB1 weights bundle.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CGB1" | u64 header_len | header_len bytes of UTF-8 JSON | f32 tensor payloads
//! ```
//!
//! The JSON header carries the architecture, dimensions, preprocessing
//! constants, default score temperature, inline tokenizer data and a tensor
//! manifest (`name`, `shape`, byte `offset` into the payload section).
//! Payloads follow in manifest order with no gaps.
//!
//! Tensor names follow the reference checkpoint layout (`visual.*`,
//! `transformer.*`, `token_embedding.weight`, ...), so an exporter can copy
//! the state dict through without renaming.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CGB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vit,
    Resnet,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Vit => "vit",
            Arch::Resnet => "resnet",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    QuickGelu,
    Gelu,
}

/// Architecture dimensions.
///
/// For ResNet bundles `width` is the stem width, the attention-pool width is
/// `32 * width`, `layers` is unused (the pool is a single attention layer) and
/// `patch_size` is the total downsampling factor (32).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input_resolution: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resnet_blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub activation: Activation,
}

impl Dims {
    pub fn grid(&self) -> usize {
        self.input_resolution / self.patch_size
    }

    /// Width of the image-side attention layers.
    pub fn attention_width(&self, arch: Arch) -> usize {
        match arch {
            Arch::Vit => self.width,
            Arch::Resnet => self.width * 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
        }
    }
}

/// Tokenizer tables stored inline: `vocab` has one token per line (line
/// number = id), `merges` one space-separated pair per line in rank order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerData {
    pub vocab: String,
    pub merges: String,
    pub context_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsBundle {
    pub arch: Arch,
    pub dims: Dims,
    pub tensors: BTreeMap<String, Tensor>,
    pub sigma_default: f32,
    pub preprocess: Preprocess,
    pub tokenizer: TokenizerData,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: String,
    dims: Dims,
    preprocess: Preprocess,
    sigma_default: f32,
    tensors: Vec<TensorEntry>,
    tokenizer: TokenizerData,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

impl WeightsBundle {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Bundle(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    offset,
                    shape: t.shape().to_vec(),
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            arch: self.arch.to_string(),
            dims: self.dims.clone(),
            preprocess: self.preprocess.clone(),
            sigma_default: self.sigma_default,
            tensors: entries,
            tokenizer: self.tokenizer.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse a bundle without validating it against its architecture.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
            return Err(Error::Format(format!("expected magic \"CGB1\", found {got:?}")));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length runs past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("header json: {e}")))?;
        let arch = match header.arch.as_str() {
            "vit" => Arch::Vit,
            "resnet" => Arch::Resnet,
            other => return Err(Error::Unsupported(format!("architecture `{other}`"))),
        };

        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if e.offset != expected_offset {
                return Err(Error::Corrupt {
                    tensor: e.name,
                    reason: format!("offset {} but previous tensors end at {expected_offset}", e.offset),
                });
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Corrupt {
                    tensor: e.name,
                    reason: format!("needs bytes {start}..{end}, payload has {}", payload.len()),
                });
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset = end as u64;
            let t = Tensor::new(e.shape, data)?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                payload.len() - expected_offset as usize
            )));
        }
        Ok(Self {
            arch,
            dims: header.dims,
            tensors,
            sigma_default: header.sigma_default,
            preprocess: header.preprocess,
            tokenizer: header.tokenizer,
        })
    }
}

pub fn save_bundle(bundle: &WeightsBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bundle.to_bytes()?)?;
    Ok(())
}

/// Read, parse and validate a bundle.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<WeightsBundle> {
    let bytes = fs::read(path)?;
    let bundle = WeightsBundle::from_bytes(&bytes)?;
    let report = validate_bundle(&bundle);
    if !report.is_valid() {
        return Err(Error::Bundle(report.violations.join("; ")));
    }
    Ok(bundle)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Names and shapes every bundle of this architecture must carry.
pub fn expected_tensors(arch: Arch, d: &Dims) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    match arch {
        Arch::Vit => {
            let (c, g) = (d.width, d.grid());
            push("visual.conv1.weight".into(), vec![c, 3, d.patch_size, d.patch_size]);
            push("visual.class_embedding".into(), vec![c]);
            push("visual.positional_embedding".into(), vec![g * g + 1, c]);
            push("visual.ln_pre.weight".into(), vec![c]);
            push("visual.ln_pre.bias".into(), vec![c]);
            for i in 0..d.layers {
                for (n, s) in block_tensors(c) {
                    push(format!("visual.transformer.resblocks.{i}.{n}"), s);
                }
            }
            push("visual.ln_post.weight".into(), vec![c]);
            push("visual.ln_post.bias".into(), vec![c]);
            push("visual.proj".into(), vec![c, d.embed_dim]);
        }
        Arch::Resnet => {
            let w = d.width;
            let bn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str, c: usize| {
                for s in ["weight", "bias", "running_mean", "running_var"] {
                    push(format!("{p}.{s}"), vec![c]);
                }
            };
            push("visual.conv1.weight".into(), vec![w / 2, 3, 3, 3]);
            bn(&mut push, "visual.bn1", w / 2);
            push("visual.conv2.weight".into(), vec![w / 2, w / 2, 3, 3]);
            bn(&mut push, "visual.bn2", w / 2);
            push("visual.conv3.weight".into(), vec![w, w / 2, 3, 3]);
            bn(&mut push, "visual.bn3", w);
            let blocks = d.resnet_blocks.clone().unwrap_or_default();
            let mut inplanes = w;
            for (s, &n) in blocks.iter().enumerate() {
                let planes = w << s;
                for b in 0..n {
                    let stride = if b == 0 && s > 0 { 2 } else { 1 };
                    let p = format!("visual.layer{}.{b}", s + 1);
                    push(format!("{p}.conv1.weight"), vec![planes, inplanes, 1, 1]);
                    bn(&mut push, &format!("{p}.bn1"), planes);
                    push(format!("{p}.conv2.weight"), vec![planes, planes, 3, 3]);
                    bn(&mut push, &format!("{p}.bn2"), planes);
                    push(format!("{p}.conv3.weight"), vec![planes * 4, planes, 1, 1]);
                    bn(&mut push, &format!("{p}.bn3"), planes * 4);
                    if stride > 1 || inplanes != planes * 4 {
                        push(format!("{p}.downsample.0.weight"), vec![planes * 4, inplanes, 1, 1]);
                        bn(&mut push, &format!("{p}.downsample.1"), planes * 4);
                    }
                    inplanes = planes * 4;
                }
            }
            let e = w * 32;
            let g = d.grid();
            push("visual.attnpool.positional_embedding".into(), vec![g * g + 1, e]);
            for p in ["q_proj", "k_proj", "v_proj"] {
                push(format!("visual.attnpool.{p}.weight"), vec![e, e]);
                push(format!("visual.attnpool.{p}.bias"), vec![e]);
            }
            push("visual.attnpool.c_proj.weight".into(), vec![d.embed_dim, e]);
            push("visual.attnpool.c_proj.bias".into(), vec![d.embed_dim]);
        }
    }
    let tw = d.text_width;
    push("token_embedding.weight".into(), vec![d.vocab_size, tw]);
    push("positional_embedding".into(), vec![d.context_length, tw]);
    for i in 0..d.text_layers {
        for (n, s) in block_tensors(tw) {
            push(format!("transformer.resblocks.{i}.{n}"), s);
        }
    }
    push("ln_final.weight".into(), vec![tw]);
    push("ln_final.bias".into(), vec![tw]);
    push("text_projection".into(), vec![tw, d.embed_dim]);
    out
}

fn block_tensors(c: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("ln_1.weight", vec![c]),
        ("ln_1.bias", vec![c]),
        ("attn.in_proj_weight", vec![3 * c, c]),
        ("attn.in_proj_bias", vec![3 * c]),
        ("attn.out_proj.weight", vec![c, c]),
        ("attn.out_proj.bias", vec![c]),
        ("ln_2.weight", vec![c]),
        ("ln_2.bias", vec![c]),
        ("mlp.c_fc.weight", vec![4 * c, c]),
        ("mlp.c_fc.bias", vec![4 * c]),
        ("mlp.c_proj.weight", vec![c, 4 * c]),
        ("mlp.c_proj.bias", vec![c]),
    ]
}

pub fn validate_bundle(b: &WeightsBundle) -> ValidationReport {
    let mut v = Vec::new();
    let d = &b.dims;

    for (value, name) in [
        (d.embed_dim, "embed_dim"),
        (d.width, "width"),
        (d.heads, "heads"),
        (d.patch_size, "patch_size"),
        (d.input_resolution, "input_resolution"),
        (d.text_width, "text_width"),
        (d.text_heads, "text_heads"),
        (d.context_length, "context_length"),
    ] {
        if value == 0 {
            v.push(format!("dims.{name} must be positive"));
        }
    }
    if !v.is_empty() {
        return ValidationReport { violations: v };
    }

    let attn_width = d.attention_width(b.arch);
    if !attn_width.is_multiple_of(d.heads) {
        v.push(format!("heads {} does not divide attention width {attn_width}", d.heads));
    }
    if !d.text_width.is_multiple_of(d.text_heads) {
        v.push(format!("text_heads {} does not divide text width {}", d.text_heads, d.text_width));
    }
    if !d.input_resolution.is_multiple_of(d.patch_size) {
        v.push(format!(
            "input_resolution {} is not a multiple of patch_size {}",
            d.input_resolution, d.patch_size
        ));
    }
    match b.arch {
        Arch::Vit if d.layers == 0 => v.push("ViT bundle needs at least one layer".into()),
        Arch::Resnet => match &d.resnet_blocks {
            Some(blocks) if blocks.len() == 4 && d.width.is_multiple_of(2) => {}
            _ => v.push("ResNet bundle needs resnet_blocks with 4 stage counts and an even width".into()),
        },
        _ => {}
    }

    let pos_name = match b.arch {
        Arch::Vit => "visual.positional_embedding",
        Arch::Resnet => "visual.attnpool.positional_embedding",
    };
    if let Some(pos) = b.tensors.get(pos_name) {
        let g = d.grid();
        if pos.rank() != 2 || pos.dim(0) != g * g + 1 {
            v.push(format!(
                "positional embedding length {} does not match grid {g}x{g} + 1 class slot",
                pos.shape().first().copied().unwrap_or(0)
            ));
        }
    }

    for (name, shape) in expected_tensors(b.arch, d) {
        match b.tensors.get(&name) {
            None => v.push(format!("missing tensor `{name}`")),
            Some(t) if t.shape() != shape.as_slice() && name != pos_name => v.push(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )),
            _ => {}
        }
    }
    for (name, t) in &b.tensors {
        if !t.is_finite() {
            v.push(format!("tensor `{name}` contains non-finite values"));
        }
    }

    if !(b.sigma_default > 0.0 && b.sigma_default.is_finite()) {
        v.push(format!("sigma_default must be positive, got {}", b.sigma_default));
    }
    if b.preprocess.std.iter().any(|s| !(*s > 0.0)) {
        v.push("preprocess std entries must be positive".into());
    }
    let vocab_len = b.tokenizer.vocab.lines().count();
    if vocab_len != d.vocab_size {
        v.push(format!("tokenizer vocab has {vocab_len} entries, dims.vocab_size is {}", d.vocab_size));
    }
    if b.tokenizer.context_length != d.context_length {
        v.push(format!(
            "tokenizer context_length {} differs from dims.context_length {}",
            b.tokenizer.context_length, d.context_length
        ));
    }
    ValidationReport { violations: v }
}

/// Companion manifest written next to an exported bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub model_id: String,
    pub preprocess: Preprocess,
    pub sigma: f32,
    pub tensors: Vec<ManifestRow>,
    pub tokenizer_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub name: String,
    pub sha256: String,
    pub shape: Vec<usize>,
}

/// SHA-256 over the tensor's little-endian `f32` payload, lowercase hex.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// SHA-256 over `vocab`, a NUL byte, then `merges`.
pub fn tokenizer_digest(t: &TokenizerData) -> String {
    let mut h = Sha256::new();
    h.update(t.vocab.as_bytes());
    h.update([0u8]);
    h.update(t.merges.as_bytes());
    format!("{:x}", h.finalize())
}

impl ExportManifest {
    pub fn for_bundle(model_id: &str, b: &WeightsBundle) -> Self {
        Self {
            model_id: model_id.to_string(),
            preprocess: b.preprocess.clone(),
            sigma: b.sigma_default,
            tensors: b
                .tensors
                .iter()
                .map(|(name, t)| ManifestRow {
                    name: name.clone(),
                    sha256: tensor_checksum(t),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            tokenizer_sha256: tokenizer_digest(&b.tokenizer),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Cross-check a loaded bundle against this manifest.
    pub fn check(&self, b: &WeightsBundle) -> ValidationReport {
        let mut v = Vec::new();
        if self.tensors.len() != b.tensors.len() {
            v.push(format!(
                "manifest lists {} tensors, bundle has {}",
                self.tensors.len(),
                b.tensors.len()
            ));
        }
        for row in &self.tensors {
            match b.tensors.get(&row.name) {
                None => v.push(format!("manifest tensor `{}` missing from bundle", row.name)),
                Some(t) if t.shape() != row.shape.as_slice() => {
                    v.push(format!("`{}` shape {:?} vs manifest {:?}", row.name, t.shape(), row.shape))
                }
                Some(t) if tensor_checksum(t) != row.sha256 => {
                    v.push(format!("`{}` checksum mismatch", row.name))
                }
                _ => {}
            }
        }
        if (self.sigma - b.sigma_default).abs() > 0.0 {
            v.push(format!("sigma {} vs manifest {}", b.sigma_default, self.sigma));
        }
        if self.preprocess != b.preprocess {
            v.push("preprocess constants differ from manifest".into());
        }
        if tokenizer_digest(&b.tokenizer) != self.tokenizer_sha256 {
            v.push("tokenizer digest differs from manifest".into());
        }
        ValidationReport { violations: v }
    }
}
