use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::score::ScoreMap;

use super::{compare_candidates, BoundingBox, IntegralImage, SearchMethod, SearchResult};

/// Largest side length the exhaustive search accepts.
pub const BRUTE_FORCE_LIMIT: usize = 128;

/// Best box among those with `y1 in rows` on an integral image, scanning in
/// lexicographic order and replacing only on a strict tie-break win.
pub(crate) fn best_in(
    ii: &IntegralImage,
    lambda: f64,
    rows1: impl Iterator<Item = usize>,
    cols1: impl Fn() -> std::ops::Range<usize>,
    rows3: impl Fn(usize) -> std::ops::Range<usize>,
    cols3: impl Fn(usize) -> std::ops::Range<usize>,
    area: impl Fn(usize, usize, usize, usize) -> f64,
) -> Option<(f64, BoundingBox, u64)> {
    let mut best: Option<(f64, BoundingBox)> = None;
    let mut count = 0u64;
    for y1 in rows1 {
        for y2 in cols1() {
            for y3 in rows3(y1) {
                for y4 in cols3(y2) {
                    count += 1;
                    let s = ii.rect_sum(y1, y2, y3, y4) - lambda * area(y1, y2, y3, y4);
                    let b = BoundingBox { y1, y2, y3, y4 };
                    let better = match &best {
                        None => true,
                        Some((bs, bb)) => compare_candidates((s, &b), (*bs, bb)).is_gt(),
                    };
                    if better {
                        best = Some((s, b));
                    }
                }
            }
        }
    }
    best.map(|(s, b)| (s, b, count))
}

/// Exhaustive search over every box of a map no larger than
/// [`BRUTE_FORCE_LIMIT`] on each side.
pub fn brute_force_search(map: &ScoreMap, lambda: f64) -> Result<SearchResult> {
    let (h, w) = (map.height(), map.width());
    if h > BRUTE_FORCE_LIMIT || w > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            h,
            w,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let ii = IntegralImage::new(map);
    brute_on_integral(&ii, lambda, |y1, y2, y3, y4| ((y3 - y1 + 1) * (y4 - y2 + 1)) as f64)
}

/// Exhaustive search on an integral image with a caller-defined area.
pub(crate) fn brute_on_integral(
    ii: &IntegralImage,
    lambda: f64,
    area: impl Fn(usize, usize, usize, usize) -> f64 + Sync,
) -> Result<SearchResult> {
    let (h, w) = (ii.height(), ii.width());
    let per_row: Vec<(f64, BoundingBox, u64)> = (0..h)
        .into_par_iter()
        .filter_map(|y1| best_in(ii, lambda, std::iter::once(y1), || 0..w, |a| a..h, |b| b..w, &area))
        .collect();
    let evaluated = per_row.iter().map(|r| r.2).sum();
    let (score, bbox, _) = per_row
        .into_iter()
        .reduce(|a, b| if compare_candidates((b.0, &b.1), (a.0, &a.1)).is_gt() { b } else { a })
        .ok_or_else(|| Error::Degenerate("empty score map".into()))?;
    Ok(SearchResult {
        bbox,
        score,
        method: SearchMethod::Brute,
        evaluated,
    })
}
