//! Causal transformer text encoder.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, Block, LN_EPS};
use crate::bundle::WeightsBundle;
use crate::error::{Error, Result};
use crate::score::normalize_embedding;
use crate::tensor::{layer_norm_row, linear, Tensor};
use crate::tokenizer::{TokenSequence, Tokenizer};

/// A `D`-dimensional embedding; `normalized` marks unit L2 norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| *a as f64 * *b as f64).sum();
        let na: f64 = self.values.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

/// Wrap a phrase in the optional caption template.
pub fn apply_template(phrase: &str) -> String {
    format!("A photo of a {phrase}.")
}

#[derive(Debug)]
pub struct TextEncoder {
    token_embedding: Tensor,
    positional: Tensor,
    blocks: Vec<Block>,
    ln_final: (Tensor, Tensor),
    /// `[D, text_width]`
    projection: Tensor,
    tokenizer: Tokenizer,
}

impl TextEncoder {
    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        let t = |n: &str| b.tensor(n).cloned();
        let blocks = (0..b.dims.text_layers)
            .map(|i| Block::from_bundle(b, &format!("transformer.resblocks.{i}"), b.dims.text_heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding: t("token_embedding.weight")?,
            positional: t("positional_embedding")?,
            blocks,
            ln_final: (t("ln_final.weight")?, t("ln_final.bias")?),
            projection: t("text_projection")?.transpose()?,
            tokenizer: Tokenizer::from_data(&b.tokenizer)?,
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Tokenize and encode a phrase.
    pub fn encode(&self, text: &str) -> Result<Embedding> {
        self.encode_tokens(&self.tokenizer.tokenize(text)?)
    }

    /// Embedding at the end-of-text position after the final norm and
    /// projection, L2-normalized.
    pub fn encode_tokens(&self, tokens: &TokenSequence) -> Result<Embedding> {
        let n = tokens.ids.len();
        if n > self.positional.rows() {
            return Err(Error::Tokenizer(format!(
                "{n} tokens exceed the context length {}",
                self.positional.rows()
            )));
        }
        let eot = tokens
            .eot_position()
            .ok_or_else(|| Error::Tokenizer("token sequence has no end-of-text token".into()))?;
        let width = self.token_embedding.dim(1);
        let mut x = Tensor::zeros([n, width]);
        for (i, &id) in tokens.ids.iter().enumerate() {
            if id as usize >= self.token_embedding.rows() {
                return Err(Error::Bundle(format!("token id {id} outside the embedding table")));
            }
            let (e, p) = (self.token_embedding.row(id as usize), self.positional.row(i));
            for (o, (a, b)) in x.row_mut(i).iter_mut().zip(e.iter().zip(p)) {
                *o = a + b;
            }
        }
        let mask = AttentionMask::causal(n);
        for block in &self.blocks {
            x = block.forward(&x, &mask)?;
        }
        let mut feat = x.row(eot).to_vec();
        layer_norm_row(&mut feat, self.ln_final.0.data(), self.ln_final.1.data(), LN_EPS);
        let projected = linear(&Tensor::new([1, width], feat)?, &self.projection, None)?;
        normalize_embedding(&Embedding {
            values: projected.into_data(),
            normalized: false,
        })
    }
}

/// Encode a token sequence with the text tower of `bundle`.
pub fn encode_text(tokens: &TokenSequence, bundle: &WeightsBundle) -> Result<Embedding> {
    TextEncoder::from_bundle(bundle)?.encode_tokens(tokens)
}
