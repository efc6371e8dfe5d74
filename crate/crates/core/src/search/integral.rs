use crate::error::{Error, Result};
use crate::score::ScoreMap;

use super::BoundingBox;

/// Summed-area table with a zero first row and column, `(H+1) x (W+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralImage {
    height: usize,
    width: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim("integral image", &[height, width], &[values.len()]));
        }
        let stride = width + 1;
        let mut sums = vec![0.0f64; (height + 1) * stride];
        for y in 0..height {
            let mut row = 0.0f64;
            for x in 0..width {
                row += values[y * width + x];
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Ok(Self { height, width, sums })
    }

    pub fn new(map: &ScoreMap) -> Self {
        Self::from_values(map.height(), map.width(), map.values()).expect("score map shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Cumulative sum over rows `< y` and columns `< x`.
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.sums[y * (self.width + 1) + x]
    }

    /// Sum over the inclusive rectangle; corners are not checked.
    #[inline]
    pub fn rect_sum(&self, y1: usize, y2: usize, y3: usize, y4: usize) -> f64 {
        let s = self.width + 1;
        let d = &self.sums;
        d[(y3 + 1) * s + y4 + 1] - d[y1 * s + y4 + 1] - d[(y3 + 1) * s + y2] + d[y1 * s + y2]
    }

    /// Inclusive-box sum minus `lambda` times its area; corners are not checked.
    #[inline]
    pub fn score(&self, y1: usize, y2: usize, y3: usize, y4: usize, lambda: f64) -> f64 {
        let area = ((y3 - y1 + 1) * (y4 - y2 + 1)) as f64;
        self.rect_sum(y1, y2, y3, y4) - lambda * area
    }
}

/// Box score with coordinate checks.
pub fn box_score(ii: &IntegralImage, b: &BoundingBox, lambda: f64) -> Result<f64> {
    b.check_within(ii.height, ii.width)?;
    Ok(ii.score(b.y1, b.y2, b.y3, b.y4, lambda))
}
