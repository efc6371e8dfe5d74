//! Box search over a positive score map: maximize `sum(phi over box) -
//! lambda * area` over all axis-aligned boxes.
//!
//! Every method shares the same integral image and the same tie-break
//! (highest score, then smallest area, then lexicographically smallest
//! `(y1, y2, y3, y4)`), so exact methods return identical boxes.

mod brute;
mod ess;
mod hierarchical;
mod integral;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::ScoreMap;

pub use brute::{brute_force_search, BRUTE_FORCE_LIMIT};
pub use ess::{ess_bound, ess_search, CornerSet};
pub use hierarchical::{hierarchical_search, sum_pool, HierarchicalParams};
pub use integral::{box_score, IntegralImage};

/// Inclusive corners: `(y1, y2)` top-left row/column, `(y3, y4)` bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[i64; 4]")]
pub struct BoundingBox {
    pub y1: usize,
    pub y2: usize,
    pub y3: usize,
    pub y4: usize,
}

impl BoundingBox {
    pub fn new(y1: usize, y2: usize, y3: usize, y4: usize) -> Result<Self> {
        if y1 > y3 || y2 > y4 {
            return Err(Error::Coordinate(format!("box ({y1},{y2},{y3},{y4}) has inverted corners")));
        }
        Ok(Self { y1, y2, y3, y4 })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            y1: 0,
            y2: 0,
            y3: height - 1,
            y4: width - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.y3 - self.y1 + 1
    }

    pub fn width(&self) -> usize {
        self.y4 - self.y2 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.y1, self.y2, self.y3, self.y4]
    }

    /// Check the box fits an `h x w` grid.
    pub fn check_within(&self, h: usize, w: usize) -> Result<()> {
        if self.y3 >= h || self.y4 >= w {
            return Err(Error::Coordinate(format!("box {self} outside a {h}x{w} map")));
        }
        Ok(())
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.y1, self.y2, self.y3, self.y4)
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        b.as_array()
    }
}

impl TryFrom<[i64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [i64; 4]) -> Result<Self> {
        if v.iter().any(|&c| c < 0) {
            return Err(Error::Coordinate(format!("negative box coordinate in {v:?}")));
        }
        Self::new(v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize)
    }
}

/// `Greater` when `a` beats `b` under the shared tie-break.
pub fn compare_candidates(a: (f64, &BoundingBox), b: (f64, &BoundingBox)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| b.1.area().cmp(&a.1.area()))
        .then_with(|| b.1.as_array().cmp(&a.1.as_array()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Brute,
    Ess,
    Hier,
}

impl fmt::Display for SearchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMethod::Brute => "brute",
            SearchMethod::Ess => "ess",
            SearchMethod::Hier => "hier",
        })
    }
}

impl FromStr for SearchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brute" => Ok(Self::Brute),
            "ess" => Ok(Self::Ess),
            "hier" | "hierarchical" => Ok(Self::Hier),
            other => Err(Error::Config(format!("unknown search method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub bbox: BoundingBox,
    pub score: f64,
    pub method: SearchMethod,
    /// Boxes scored (brute force, hierarchical) or nodes expanded (ESS).
    pub evaluated: u64,
}

/// Area penalty: either absolute or relative to the map mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    Absolute(f64),
    Relative(f64),
}

impl Default for Lambda {
    fn default() -> Self {
        Lambda::Relative(1.0)
    }
}

impl Lambda {
    pub fn resolve(self, map: &ScoreMap) -> Result<f64> {
        let v = match self {
            Lambda::Absolute(v) => v,
            Lambda::Relative(r) => r * map.mean(),
        };
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Parameter(format!("lambda must be finite and nonnegative, got {v}")));
        }
        Ok(v)
    }
}

/// Run the named method.
pub fn search(map: &ScoreMap, lambda: f64, method: SearchMethod, hier: HierarchicalParams) -> Result<SearchResult> {
    match method {
        SearchMethod::Brute => brute_force_search(map, lambda),
        SearchMethod::Ess => ess_search(map, lambda),
        SearchMethod::Hier => hierarchical_search(map, lambda, hier.factor, hier.levels),
    }
}

/// `y1' = round(y1 * s)`, `y3' = round((y3 + 1) * s) - 1` with rounding half
/// up, per axis, clamped to `[0, bound)`.
pub fn map_box_to_image_coords(b: &BoundingBox, scale_h: f64, scale_w: f64, height: usize, width: usize) -> Result<BoundingBox> {
    if !(scale_h > 0.0 && scale_w > 0.0) || height == 0 || width == 0 {
        return Err(Error::Parameter(format!(
            "box mapping needs positive scales and bounds, got {scale_h}x{scale_w} into {height}x{width}"
        )));
    }
    let round = |v: f64| (v + 0.5).floor().max(0.0) as usize;
    let axis = |lo: usize, hi: usize, s: f64, bound: usize| {
        let a = round(lo as f64 * s).min(bound - 1);
        let b = round((hi + 1) as f64 * s).saturating_sub(1).clamp(a, bound - 1);
        (a, b)
    };
    let (y1, y3) = axis(b.y1, b.y3, scale_h, height);
    let (y2, y4) = axis(b.y2, b.y4, scale_w, width);
    BoundingBox::new(y1, y2, y3, y4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_geometry() {
        let b = BoundingBox::new(1, 2, 3, 5).unwrap();
        assert_eq!((b.height(), b.width(), b.area()), (3, 4, 12));
        assert!(BoundingBox::new(3, 0, 1, 0).is_err());
        assert!(b.check_within(4, 6).is_ok());
        assert!(b.check_within(3, 6).is_err());
    }

    #[test]
    fn box_serializes_as_array() {
        let b = BoundingBox::new(0, 1, 2, 3).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0,1,2,3]");
        assert_eq!(serde_json::from_str::<BoundingBox>("[0,1,2,3]").unwrap(), b);
        assert!(serde_json::from_str::<BoundingBox>("[2,1,0,3]").is_err());
        assert!(serde_json::from_str::<BoundingBox>("[-1,1,0,3]").is_err());
    }

    #[test]
    fn tie_break_prefers_score_then_area_then_lex() {
        let a = BoundingBox::new(0, 0, 1, 1).unwrap();
        let b = BoundingBox::new(0, 0, 0, 1).unwrap();
        let c = BoundingBox::new(1, 0, 1, 1).unwrap();
        assert_eq!(compare_candidates((2.0, &a), (1.0, &b)), Ordering::Greater);
        assert_eq!(compare_candidates((1.0, &a), (1.0, &b)), Ordering::Less);
        assert_eq!(compare_candidates((1.0, &b), (1.0, &c)), Ordering::Greater);
    }

    #[test]
    fn map_box_examples() {
        let b = BoundingBox::new(0, 0, 6, 6).unwrap();
        assert_eq!(map_box_to_image_coords(&b, 1.0, 1.0, 7, 7).unwrap(), b);
        assert_eq!(
            map_box_to_image_coords(&b, 2.0, 2.0, 14, 14).unwrap(),
            BoundingBox::new(0, 0, 13, 13).unwrap()
        );
        let c = BoundingBox::new(2, 3, 5, 6).unwrap();
        assert_eq!(map_box_to_image_coords(&c, 1.0, 1.0, 7, 7).unwrap(), c);
        // clamping
        assert_eq!(
            map_box_to_image_coords(&b, 3.0, 3.0, 10, 10).unwrap(),
            BoundingBox::new(0, 0, 9, 9).unwrap()
        );
        assert!(map_box_to_image_coords(&b, 0.0, 1.0, 7, 7).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [SearchMethod::Brute, SearchMethod::Ess, SearchMethod::Hier] {
            assert_eq!(m.to_string().parse::<SearchMethod>().unwrap(), m);
        }
        assert!("greedy".parse::<SearchMethod>().is_err());
    }

    proptest! {
        #[test]
        fn map_box_round_trip_within_one_pixel(
            y1 in 0usize..50, h in 1usize..50, y2 in 0usize..50, w in 1usize..50,
            s in 1.0f64..4.0,
        ) {
            let (big_h, big_w) = (((y1 + h) as f64 * s).ceil() as usize + 1, ((y2 + w) as f64 * s).ceil() as usize + 1);
            let small_h = y1 + h;
            let small_w = y2 + w;
            let b = BoundingBox::new(y1, y2, y1 + h - 1, y2 + w - 1).unwrap();
            let up = map_box_to_image_coords(&b, s, s, big_h, big_w).unwrap();
            let back = map_box_to_image_coords(&up, 1.0 / s, 1.0 / s, small_h, small_w).unwrap();
            for (a, z) in b.as_array().iter().zip(back.as_array()) {
                prop_assert!((*a as i64 - z as i64).abs() <= 1, "{b} -> {up} -> {back}");
            }
        }
    }
}
