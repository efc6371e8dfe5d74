use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::score::ScoreMap;

use super::{compare_candidates, BoundingBox, IntegralImage, SearchMethod, SearchResult};

/// A set of boxes given by one inclusive interval per corner coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CornerSet {
    pub y1: (usize, usize),
    pub y2: (usize, usize),
    pub y3: (usize, usize),
    pub y4: (usize, usize),
}

impl CornerSet {
    pub fn all(h: usize, w: usize) -> Self {
        Self {
            y1: (0, h - 1),
            y2: (0, w - 1),
            y3: (0, h - 1),
            y4: (0, w - 1),
        }
    }

    /// True when at least one valid box lies in the set.
    pub fn is_feasible(&self) -> bool {
        self.y1.0 <= self.y3.1 && self.y2.0 <= self.y4.1
    }

    fn is_single(&self) -> bool {
        self.y1.0 == self.y1.1 && self.y2.0 == self.y2.1 && self.y3.0 == self.y3.1 && self.y4.0 == self.y4.1
    }

    /// Halve the widest interval (first of y1, y2, y3, y4 on ties).
    fn split(&self) -> [CornerSet; 2] {
        let widths = [
            self.y1.1 - self.y1.0,
            self.y2.1 - self.y2.0,
            self.y3.1 - self.y3.0,
            self.y4.1 - self.y4.0,
        ];
        let axis = (0..4).fold(0, |best, i| if widths[i] > widths[best] { i } else { best });
        let (mut a, mut b) = (*self, *self);
        fn pick(s: &mut CornerSet, axis: usize) -> &mut (usize, usize) {
            match axis {
                0 => &mut s.y1,
                1 => &mut s.y2,
                2 => &mut s.y3,
                _ => &mut s.y4,
            }
        }
        let (lo, hi) = *pick(&mut a, axis);
        let mid = lo + (hi - lo) / 2;
        pick(&mut a, axis).1 = mid;
        pick(&mut b, axis).0 = mid + 1;
        [a, b]
    }

    /// Every valid box in the set, for exhaustive checks.
    pub fn boxes(&self) -> Vec<BoundingBox> {
        let mut out = Vec::new();
        for y1 in self.y1.0..=self.y1.1 {
            for y2 in self.y2.0..=self.y2.1 {
                for y3 in self.y3.0.max(y1)..=self.y3.1 {
                    for y4 in self.y4.0.max(y2)..=self.y4.1 {
                        out.push(BoundingBox { y1, y2, y3, y4 });
                    }
                }
            }
        }
        out
    }
}

/// Upper bound on the score of any box in a feasible set: the sum over the
/// largest box minus the penalty of the smallest.
pub fn ess_bound(ii: &IntegralImage, set: &CornerSet, lambda: f64) -> f64 {
    let sum = ii.rect_sum(set.y1.0, set.y2.0, set.y3.1, set.y4.1);
    let rows = (set.y3.0 + 1).saturating_sub(set.y1.1).max(1);
    let cols = (set.y4.0 + 1).saturating_sub(set.y2.1).max(1);
    sum - lambda * (rows * cols) as f64
}

struct Node {
    bound: f64,
    seq: u64,
    set: CornerSet,
}

impl PartialEq for Node {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Node {
    fn cmp(&self, o: &Self) -> Ordering {
        self.bound.total_cmp(&o.bound).then_with(|| o.seq.cmp(&self.seq))
    }
}

/// Exact best-first branch-and-bound over corner intervals.
pub fn ess_search(map: &ScoreMap, lambda: f64) -> Result<SearchResult> {
    let (h, w) = (map.height(), map.width());
    if h == 0 || w == 0 {
        return Err(Error::Degenerate("empty score map".into()));
    }
    let ii = IntegralImage::new(map);
    ess_on_integral(&ii, lambda)
}

pub(crate) fn ess_on_integral(ii: &IntegralImage, lambda: f64) -> Result<SearchResult> {
    let (h, w) = (ii.height(), ii.width());
    // slack so that float rounding in the bound never prunes a tied optimum
    let eps = 1e-10 * (ii.rect_sum(0, 0, h - 1, w - 1).abs() + lambda * (h * w) as f64).max(1e-300);
    let mut heap = BinaryHeap::new();
    let root = CornerSet::all(h, w);
    heap.push(Node {
        bound: ess_bound(ii, &root, lambda),
        seq: 0,
        set: root,
    });
    let mut seq = 1u64;
    let mut best: Option<(f64, BoundingBox)> = None;
    let mut expanded = 0u64;
    while let Some(node) = heap.pop() {
        if let Some((bs, _)) = best {
            if node.bound < bs - eps {
                break;
            }
        }
        expanded += 1;
        if node.set.is_single() {
            let s = node.set;
            let b = BoundingBox {
                y1: s.y1.0,
                y2: s.y2.0,
                y3: s.y3.0,
                y4: s.y4.0,
            };
            let score = ii.score(b.y1, b.y2, b.y3, b.y4, lambda);
            let better = match &best {
                None => true,
                Some((bs, bb)) => compare_candidates((score, &b), (*bs, bb)).is_gt(),
            };
            if better {
                best = Some((score, b));
            }
            continue;
        }
        for child in node.set.split() {
            if !child.is_feasible() {
                continue;
            }
            let bound = ess_bound(ii, &child, lambda);
            if best.is_some_and(|(bs, _)| bound < bs - eps) {
                continue;
            }
            heap.push(Node { bound, seq, set: child });
            seq += 1;
        }
    }
    let (score, bbox) = best.ok_or_else(|| Error::Degenerate("search found no box".into()))?;
    Ok(SearchResult {
        bbox,
        score,
        method: SearchMethod::Ess,
        evaluated: expanded,
    })
}
