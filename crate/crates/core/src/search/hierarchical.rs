use crate::error::{Error, Result};
use crate::score::ScoreMap;

use super::brute::{best_in, brute_on_integral};
use super::{brute_force_search, IntegralImage, SearchMethod, SearchResult, BRUTE_FORCE_LIMIT};

/// Downsampling factor per level and number of downsampling steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HierarchicalParams {
    pub factor: usize,
    pub levels: usize,
}

impl Default for HierarchicalParams {
    fn default() -> Self {
        Self { factor: 4, levels: 2 }
    }
}

/// Sum over `f x f` blocks; edge blocks may be partial.
pub fn sum_pool(values: &[f64], h: usize, w: usize, f: usize) -> (Vec<f64>, usize, usize) {
    let (ch, cw) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = vec![0.0f64; ch * cw];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * cw + x / f] += values[y * w + x];
        }
    }
    (out, ch, cw)
}

struct Level {
    ii: IntegralImage,
    /// pixels per cell side at this level
    cell: usize,
}

/// Coarse-to-fine greedy search: exhaustive search on the coarsest
/// sum-pooled map, then at each finer level every corner moves within a
/// band of one coarse cell around its previous position. The penalty always
/// uses the box's true pixel area, so scores are comparable across levels.
pub fn hierarchical_search(map: &ScoreMap, lambda: f64, factor: usize, levels: usize) -> Result<SearchResult> {
    if factor == 0 {
        return Err(Error::Parameter("hierarchical factor must be at least 1".into()));
    }
    if factor == 1 || levels == 0 {
        let mut r = brute_force_search(map, lambda)?;
        r.method = SearchMethod::Hier;
        return Ok(r);
    }
    let (h, w) = (map.height(), map.width());
    let mut pyramid = vec![Level {
        ii: IntegralImage::new(map),
        cell: 1,
    }];
    let (mut vals, mut lh, mut lw) = (map.values().to_vec(), h, w);
    for l in 1..=levels {
        let (v, ch, cw) = sum_pool(&vals, lh, lw, factor);
        pyramid.push(Level {
            ii: IntegralImage::from_values(ch, cw, &v)?,
            cell: factor.pow(l as u32),
        });
        (vals, lh, lw) = (v, ch, cw);
    }
    if lh > BRUTE_FORCE_LIMIT || lw > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            h: lh,
            w: lw,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let area_at = |cell: usize| {
        move |y1: usize, y2: usize, y3: usize, y4: usize| {
            let rows = ((y3 + 1) * cell).min(h) - y1 * cell;
            let cols = ((y4 + 1) * cell).min(w) - y2 * cell;
            (rows * cols) as f64
        }
    };
    let top = pyramid.last().unwrap();
    let coarse = brute_on_integral(&top.ii, lambda, area_at(top.cell))?;
    let mut bbox = coarse.bbox;
    let mut score = coarse.score;
    let mut evaluated = coarse.evaluated;

    for level in pyramid[..levels].iter().rev() {
        let (nh, nw) = (level.ii.height(), level.ii.width());
        let band = |c: usize, n: usize| {
            let lo = c.saturating_sub(1) * factor;
            let hi = ((c + 2) * factor).min(n) - 1;
            (lo, hi)
        };
        let (r1, c1, r3, c3) = (band(bbox.y1, nh), band(bbox.y2, nw), band(bbox.y3, nh), band(bbox.y4, nw));
        let (s, b, n) = best_in(
            &level.ii,
            lambda,
            r1.0..=r1.1,
            || c1.0..c1.1 + 1,
            |y1| r3.0.max(y1)..r3.1 + 1,
            |y2| c3.0.max(y2)..c3.1 + 1,
            area_at(level.cell),
        )
        .ok_or_else(|| Error::Degenerate("empty refinement band".into()))?;
        bbox = b;
        score = s;
        evaluated += n;
    }
    Ok(SearchResult {
        bbox,
        score,
        method: SearchMethod::Hier,
        evaluated,
    })
}
