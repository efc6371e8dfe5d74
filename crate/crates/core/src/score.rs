//! Text-similarity score maps and their export.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::SpatialFeatureMap;
use crate::rawio::{RawArray, RawData};
use crate::text::Embedding;

/// Strictly positive `H x W` scores, row-major. Stored in `f64` because
/// `exp(1 / sigma)` exceeds the `f32` range for typical temperatures.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    values: Vec<f64>,
    height: usize,
    width: usize,
    sigma: Option<f32>,
}

impl ScoreMap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::dim("score map", &[height, width], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Degenerate(format!("score map values must be finite and positive, found {v}")));
        }
        Ok(Self {
            values,
            height,
            width,
            sigma: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sigma(&self) -> Option<f32> {
        self.sigma
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Align-corners bilinear resample to `out_h x out_w`.
    pub fn resized(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Parameter("resize target must be non-empty".into()));
        }
        if (out_h, out_w) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (s.floor() as usize).min(n_in - 1);
            (lo, (lo + 1).min(n_in - 1), s - lo as f64)
        };
        let mut out = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let (y0, y1, ty) = coord(y, out_h, self.height);
            for x in 0..out_w {
                let (x0, x1, tx) = coord(x, out_w, self.width);
                let top = lerp(self.get(y0, x0), self.get(y0, x1), tx);
                let bottom = lerp(self.get(y1, x0), self.get(y1, x1), tx);
                out.push(lerp(top, bottom, ty));
            }
        }
        let mut m = Self::from_values(out_h, out_w, out)?;
        m.sigma = self.sigma;
        Ok(m)
    }

    /// Raw dump payload (`f64`).
    pub fn to_raw(&self) -> RawArray {
        RawArray::f64(vec![self.height, self.width], self.values.clone())
    }

    pub fn from_raw(raw: &RawArray) -> Result<Self> {
        if raw.shape.len() != 2 {
            return Err(Error::Format(format!("score map dump has rank {}", raw.shape.len())));
        }
        let values = match &raw.data {
            RawData::F64(v) => v.clone(),
            RawData::F32(_) => raw.to_f64(),
        };
        Self::from_values(raw.shape[0], raw.shape[1], values)
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Scale to unit L2 norm.
pub fn normalize_embedding(v: &Embedding) -> Result<Embedding> {
    let norm = v.values.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(Embedding {
        values: v.values.iter().map(|x| (*x as f64 / norm) as f32).collect(),
        normalized: true,
    })
}

/// `phi_ij = exp(<e_txt, E_ij> / sigma)` over unit-norm inputs.
pub fn compute_score_map(features: &SpatialFeatureMap, text: &Embedding, sigma: f32) -> Result<ScoreMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    if !features.normalized || !text.normalized {
        return Err(Error::Parameter("score map inputs must be unit-normalized".into()));
    }
    let (h, w, d) = (features.height(), features.width(), features.dim());
    if text.values.len() != d {
        return Err(Error::dim("score map", &[d], &[text.values.len()]));
    }
    let e = features.embeddings.data();
    let values: Vec<f64> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let cos: f64 = e[p * d..(p + 1) * d]
                .iter()
                .zip(&text.values)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            (cos / sigma as f64).exp()
        })
        .collect();
    let mut map = ScoreMap::from_values(h, w, values)?;
    map.sigma = Some(sigma);
    Ok(map)
}

/// 16-bit binary PGM after min-max scaling; a constant map becomes all zeros.
pub fn pgm16_bytes(map: &ScoreMap) -> Vec<u8> {
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        let q = if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: impl AsRef<Path>, map: &ScoreMap) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&pgm16_bytes(map))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f32>) -> Embedding {
        normalize_embedding(&Embedding {
            values: v,
            normalized: false,
        })
        .unwrap()
    }

    fn feature_map(pixels: &[Vec<f32>], h: usize, w: usize) -> SpatialFeatureMap {
        let d = pixels[0].len();
        let data: Vec<f32> = pixels.iter().flat_map(|p| unit(p.clone()).values).collect();
        SpatialFeatureMap {
            embeddings: Tensor::new([h, w, d], data).unwrap(),
            grid_h: h,
            grid_w: w,
            normalized: true,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(unit(vec![3.0, 4.0]).values, vec![0.6, 0.8]);
        let u = unit(vec![0.6, 0.8]);
        let again = normalize_embedding(&u).unwrap();
        for (a, b) in u.values.iter().zip(&again.values) {
            assert!((a - b).abs() <= 1e-7);
        }
        assert!(matches!(
            normalize_embedding(&Embedding {
                values: vec![0.0; 3],
                normalized: false
            }),
            Err(Error::Degenerate(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let v: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let n = unit(v).values.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn score_map_examples() {
        let sigma = 0.07f32;
        let fm = feature_map(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![-1.0, 0.0]], 2, 2);
        let t = unit(vec![1.0, 0.0]);
        let m = compute_score_map(&fm, &t, sigma).unwrap();
        assert_eq!(m.get(0, 0), (1.0f64 / sigma as f64).exp());
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.min_max().1, m.get(0, 0));
        let flat = compute_score_map(&fm, &t, 1e9).unwrap();
        assert!(flat.values().iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(matches!(compute_score_map(&fm, &t, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn scaling_the_text_vector_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px: Vec<Vec<f32>> = (0..12).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let fm = feature_map(&px, 3, 4);
        let raw: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = compute_score_map(&fm, &unit(raw.clone()), 0.1).unwrap();
        let b = compute_score_map(&fm, &unit(raw.iter().map(|x| x * 7.5).collect()), 0.1).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() / x < 1e-6);
        }
        // ordering of cosine similarities is preserved
        let t = unit(raw);
        let cos: Vec<f64> = px
            .iter()
            .map(|p| unit(p.clone()).values.iter().zip(&t.values).map(|(a, b)| *a as f64 * *b as f64).sum())
            .collect();
        for i in 0..12 {
            for j in 0..12 {
                if cos[i] < cos[j] {
                    assert!(a.values()[i] < a.values()[j]);
                }
            }
        }
    }

    #[test]
    fn pgm_and_raw_exports() {
        let m = ScoreMap::from_values(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = pgm16_bytes(&m);
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
        assert_eq!(&bytes[header.len()..header.len() + 2], &[0, 0]);
        assert_eq!(&bytes[bytes.len() - 2..], &[255, 255]);
        let constant = ScoreMap::from_values(2, 2, vec![3.0; 4]).unwrap();
        assert!(pgm16_bytes(&constant)[13..].iter().all(|&b| b == 0));
        let raw = RawArray::from_bytes(&m.to_raw().to_bytes()).unwrap();
        assert_eq!(ScoreMap::from_raw(&raw).unwrap(), m);
    }

    #[test]
    fn resize_keeps_corners_and_constants() {
        let m = ScoreMap::from_values(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let r = m.resized(3, 3).unwrap();
        assert_eq!(r.get(1, 1), 4.0);
        assert_eq!((r.get(0, 0), r.get(2, 2)), (1.0, 7.0));
        let c = ScoreMap::from_values(3, 4, vec![2.5; 12]).unwrap().resized(9, 7).unwrap();
        assert!(c.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn rejects_nonpositive_values() {
        assert!(ScoreMap::from_values(1, 2, vec![1.0, 0.0]).is_err());
        assert!(ScoreMap::from_values(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(ScoreMap::from_values(2, 2, vec![1.0; 3]).is_err());
    }
}
