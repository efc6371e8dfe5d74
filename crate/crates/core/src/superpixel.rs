//! SLIC superpixels and the mapping from pixel regions to patch sets.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_COMPACTNESS: f32 = 10.0;
pub const DEFAULT_ITERATIONS: usize = 10;

/// Dense per-pixel region labels in `[0, region_count)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub region_count: usize,
}

impl SuperpixelMap {
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.region_count];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }

    /// A single region covering the whole image.
    pub fn whole(height: usize, width: usize) -> Self {
        Self {
            labels: vec![0; height * width],
            height,
            width,
            region_count: 1,
        }
    }
}

/// sRGB in `[0, 1]` to CIELAB under D65.
pub fn srgb_to_lab(r: f32, g: f32, b: f32) -> [f32; 3] {
    let lin = |c: f32| {
        let c = c as f64;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(r), lin(g), lin(b));
    let x = (0.412453 * r + 0.357580 * g + 0.180423 * b) / 0.950456;
    let y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
    let z = (0.019334 * r + 0.119193 * g + 0.950227 * b) / 1.088754;
    let f = |t: f64| {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [
        (116.0 * fy - 16.0) as f32,
        (500.0 * (fx - fy)) as f32,
        (200.0 * (fy - fz)) as f32,
    ]
}

/// SLIC over an RGB image `[3, H, W]` with values in `[0, 1]`.
pub fn slic_segment(image: &Tensor, k: usize, compactness: f32, iters: usize, seed: u64) -> Result<SuperpixelMap> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::dim("slic image", image.shape(), &[3]));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    if k == 0 || iters == 0 {
        return Err(Error::Parameter("superpixel count and iterations must be at least 1".into()));
    }
    if k > h * w {
        return Err(Error::Parameter(format!("{k} superpixels requested for a {h}x{w} image")));
    }
    if !(compactness > 0.0) {
        return Err(Error::Parameter(format!("compactness must be positive, got {compactness}")));
    }
    let n = h * w;
    let d = image.data();
    let lab: Vec<[f32; 3]> = (0..n).map(|i| srgb_to_lab(d[i], d[n + i], d[2 * n + i])).collect();

    let step = ((n as f64) / k as f64).sqrt();
    let ny = ((h as f64 / step).round() as usize).max(1);
    let nx = ((w as f64 / step).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // centre = [l, a, b, y, x]
    let mut centres: Vec<[f64; 5]> = Vec::with_capacity(ny * nx);
    for gy in 0..ny {
        for gx in 0..nx {
            let cy = (((gy as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let cx = (((gx as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let (py, px) = lowest_gradient(&lab, h, w, cy, cx, &mut rng);
            let c = lab[py * w + px];
            centres.push([c[0] as f64, c[1] as f64, c[2] as f64, py as f64, px as f64]);
        }
    }

    let spatial = (compactness as f64 / step).powi(2);
    let reach = (2.0 * step).ceil() as isize;
    let mut labels = vec![0u32; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..iters {
        dist.iter_mut().for_each(|v| *v = f64::INFINITY);
        for (ci, c) in centres.iter().enumerate() {
            let (cy, cx) = (c[3].round() as isize, c[4].round() as isize);
            let y0 = (cy - reach).max(0) as usize;
            let y1 = ((cy + reach) as usize).min(h - 1);
            let x0 = (cx - reach).max(0) as usize;
            let x1 = ((cx + reach) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = lab[y * w + x];
                    let dc = (p[0] as f64 - c[0]).powi(2) + (p[1] as f64 - c[1]).powi(2) + (p[2] as f64 - c[2]).powi(2);
                    let ds = (y as f64 - c[3]).powi(2) + (x as f64 - c[4]).powi(2);
                    let dd = dc + spatial * ds;
                    if dd < dist[y * w + x] {
                        dist[y * w + x] = dd;
                        labels[y * w + x] = ci as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centres.len()];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if dist[i].is_infinite() {
                    continue;
                }
                let s = &mut sums[labels[i] as usize];
                let p = lab[i];
                s[0] += p[0] as f64;
                s[1] += p[1] as f64;
                s[2] += p[2] as f64;
                s[3] += y as f64;
                s[4] += x as f64;
                s[5] += 1.0;
            }
        }
        for (c, s) in centres.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for j in 0..5 {
                    c[j] = s[j] / s[5];
                }
            }
        }
    }
    // pixels no window reached join the nearest centre in space
    for y in 0..h {
        for x in 0..w {
            if dist[y * w + x].is_infinite() {
                let nearest = centres
                    .iter()
                    .enumerate()
                    .map(|(ci, c)| ((y as f64 - c[3]).powi(2) + (x as f64 - c[4]).powi(2), ci))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map_or(0, |(_, ci)| ci);
                labels[y * w + x] = nearest as u32;
            }
        }
    }
    Ok(enforce_connectivity(&labels, h, w))
}

/// Lowest-gradient pixel in the 3x3 neighbourhood. The start pixel wins any
/// tie it is part of; other ties are broken by a seeded shuffle.
fn lowest_gradient(lab: &[[f32; 3]], h: usize, w: usize, cy: usize, cx: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let grad = |y: usize, x: usize| {
        let at = |yy: usize, xx: usize| lab[yy * w + xx];
        let (l, r) = (at(y, x.saturating_sub(1)), at(y, (x + 1).min(w - 1)));
        let (u, d) = (at(y.saturating_sub(1), x), at((y + 1).min(h - 1), x));
        (0..3)
            .map(|c| ((r[c] - l[c]) as f64).powi(2) + ((d[c] - u[c]) as f64).powi(2))
            .sum::<f64>()
    };
    let mut cands: Vec<(usize, usize)> = Vec::with_capacity(9);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let (y, x) = (cy as isize + dy, cx as isize + dx);
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && (dy, dx) != (0, 0) {
                cands.push((y as usize, x as usize));
            }
        }
    }
    cands.shuffle(rng);
    let mut best = (cy, cx);
    let mut best_g = grad(cy, cx);
    for (y, x) in cands {
        let g = grad(y, x);
        if g < best_g {
            best = (y, x);
            best_g = g;
        }
    }
    best
}

/// 4-connected components of an `h x w` label grid, as a component id per
/// pixel (raster order of discovery) and the label and size of each.
fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, Vec<(u32, usize)>) {
    let mut comp = vec![usize::MAX; h * w];
    let mut info = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = info.len();
        let label = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in neighbours(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == label {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        info.push((label, size));
    }
    (comp, info)
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

/// Keep the largest 4-connected piece of every label, merge the other
/// fragments into their largest adjacent region, and relabel densely in
/// raster order of first appearance.
pub fn enforce_connectivity(labels: &[u32], h: usize, w: usize) -> SuperpixelMap {
    assert_eq!(labels.len(), h * w, "label grid size");
    let (comp, info) = components(labels, h, w);
    let ncomp = info.len();

    // the largest component per label (first discovered on ties) is kept
    let mut keeper: std::collections::HashMap<u32, usize> = Default::default();
    for (id, &(label, size)) in info.iter().enumerate() {
        let e = keeper.entry(label).or_insert(id);
        if info[*e].1 < size {
            *e = id;
        }
    }
    // group[id] = kept component the fragment is merged into
    let mut group: Vec<Option<usize>> = (0..ncomp).map(|id| (keeper[&info[id].0] == id).then_some(id)).collect();
    let mut group_size: Vec<usize> = info.iter().map(|&(_, s)| s).collect();

    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); ncomp];
    for p in 0..h * w {
        for q in neighbours(p, h, w) {
            if comp[p] != comp[q] {
                adjacent[comp[p]].push(comp[q]);
            }
        }
    }
    for a in adjacent.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    loop {
        let mut progressed = false;
        let mut pending = false;
        for id in 0..ncomp {
            if group[id].is_some() {
                continue;
            }
            let target = adjacent[id]
                .iter()
                .filter_map(|&n| group[n])
                .max_by(|&a, &b| group_size[a].cmp(&group_size[b]).then(b.cmp(&a)));
            match target {
                Some(g) => {
                    group[id] = Some(g);
                    group_size[g] += info[id].1;
                    progressed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        assert!(progressed, "fragments with no resolved neighbour");
    }

    let mut dense = vec![u32::MAX; ncomp];
    let mut next = 0u32;
    let mut out = vec![0u32; h * w];
    for p in 0..h * w {
        let g = group[comp[p]].expect("resolved");
        if dense[g] == u32::MAX {
            dense[g] = next;
            next += 1;
        }
        out[p] = dense[g];
    }
    SuperpixelMap {
        labels: out,
        height: h,
        width: w,
        region_count: next as usize,
    }
}

/// Pixel row (or column) span of grid cell `i` out of `n` over `len` pixels.
pub fn cell_span(i: usize, n: usize, len: usize) -> std::ops::Range<usize> {
    let edge = |k: usize| ((k * len) as f64 / n as f64).round() as usize;
    let start = edge(i).min(len - 1);
    start..edge(i + 1).max(start + 1).min(len)
}

/// Patch indices (row-major over the grid) belonging to each region. A patch
/// belongs to the region holding the most of its pixels, lowest label on
/// ties; a region that wins no patch gets the patch it overlaps most.
pub fn regions_to_patch_sets(map: &SuperpixelMap, grid_h: usize, grid_w: usize) -> Vec<Vec<usize>> {
    let m = map.region_count;
    let mut sets = vec![Vec::new(); m];
    let mut best_overlap = vec![(0usize, 0usize); m]; // (count, patch)
    let mut counts = vec![0usize; m];
    for gi in 0..grid_h {
        let rows = cell_span(gi, grid_h, map.height);
        for gj in 0..grid_w {
            let cols = cell_span(gj, grid_w, map.width);
            counts.iter_mut().for_each(|c| *c = 0);
            for y in rows.clone() {
                for x in cols.clone() {
                    counts[map.label(y, x) as usize] += 1;
                }
            }
            let patch = gi * grid_w + gj;
            let mut winner = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[winner] {
                    winner = l;
                }
                if c > best_overlap[l].0 {
                    best_overlap[l] = (c, patch);
                }
            }
            sets[winner].push(patch);
        }
    }
    for (l, set) in sets.iter_mut().enumerate() {
        if set.is_empty() {
            set.push(best_overlap[l].1);
        }
    }
    sets
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn constant_image(h: usize, w: usize) -> Tensor {
        Tensor::full([3, h, w], 0.4)
    }

    fn noisy_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // two colour halves plus noise
        Tensor::from_fn([3, h, w], |i| {
            let x = i % w;
            let base = if x < w / 2 { 0.2 } else { 0.8 };
            (base + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)
        })
    }

    fn component_count_per_label(map: &SuperpixelMap) -> Vec<usize> {
        let (_, info) = components(&map.labels, map.height, map.width);
        let mut per = vec![0; map.region_count];
        for (l, _) in info {
            per[l as usize] += 1;
        }
        per
    }

    #[test]
    fn lab_reference_values() {
        let white = srgb_to_lab(1.0, 1.0, 1.0);
        assert!((white[0] - 100.0).abs() < 1e-2 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(srgb_to_lab(0.0, 0.0, 0.0), [0.0, 0.0, 0.0]);
        let red = srgb_to_lab(1.0, 0.0, 0.0);
        assert!((red[0] - 53.24).abs() < 0.1 && (red[1] - 80.09).abs() < 0.2 && (red[2] - 67.20).abs() < 0.2);
    }

    #[test]
    fn single_superpixel_labels_everything_zero() {
        let map = slic_segment(&noisy_image(20, 30, 1), 1, 10.0, 10, 0).unwrap();
        assert_eq!(map.region_count, 1);
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn constant_image_gives_equal_quadrants() {
        for seed in 0..5 {
            let map = slic_segment(&constant_image(64, 64), 4, 10.0, 10, seed).unwrap();
            assert_eq!(map.region_count, 4);
            for a in map.areas() {
                assert!((a as f64 - 1024.0).abs() <= 102.4, "area {a}");
            }
        }
    }

    #[test]
    fn too_many_superpixels_is_a_parameter_error() {
        assert!(matches!(slic_segment(&constant_image(4, 4), 17, 10.0, 10, 0), Err(Error::Parameter(_))));
        assert!(matches!(slic_segment(&constant_image(4, 4), 0, 10.0, 10, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn slic_output_is_a_connected_dense_partition() {
        for k in [5, 20, 60] {
            let map = slic_segment(&noisy_image(48, 40, k as u64), k, 10.0, 10, 3).unwrap();
            assert_eq!(map.areas().iter().sum::<usize>(), 48 * 40);
            assert!(map.areas().iter().all(|&a| a > 0));
            assert!(component_count_per_label(&map).iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn slic_is_deterministic_for_a_seed() {
        let img = noisy_image(40, 40, 9);
        let a = slic_segment(&img, 16, 10.0, 10, 7).unwrap();
        assert_eq!(a, slic_segment(&img, 16, 10.0, 10, 7).unwrap());
    }

    #[test]
    fn connected_map_only_renumbers() {
        let labels = vec![2, 2, 0, 2, 2, 0, 1, 1, 1];
        let map = enforce_connectivity(&labels, 3, 3);
        assert_eq!(map.labels, vec![0, 0, 1, 0, 0, 1, 2, 2, 2]);
        assert_eq!(map.region_count, 3);
    }

    #[test]
    fn checkerboard_merges_to_single_components() {
        let (h, w) = (6, 7);
        let labels: Vec<u32> = (0..h * w).map(|p| ((p / w + p % w) % 2) as u32).collect();
        let map = enforce_connectivity(&labels, h, w);
        assert!(component_count_per_label(&map).iter().all(|&c| c == 1));
        assert_eq!(map.areas().iter().sum::<usize>(), h * w);
    }

    #[test]
    fn fragment_joins_largest_neighbour() {
        // label 0's second piece (bottom-right) touches label 1 (3 px) and label 2 (5 px)
        #[rustfmt::skip]
        let labels = vec![
            0, 0, 1, 1,
            2, 2, 2, 1,
            2, 2, 0, 1,
        ];
        let map = enforce_connectivity(&labels, 3, 4);
        assert_eq!(map.region_count, 3);
        assert_eq!(map.label(2, 2), map.label(1, 0));
    }

    #[test]
    fn whole_image_region_owns_all_patches() {
        let map = SuperpixelMap::whole(32, 32);
        assert_eq!(regions_to_patch_sets(&map, 4, 4), vec![(0..16).collect::<Vec<_>>()]);
    }

    #[test]
    fn small_region_gets_its_patch() {
        let mut map = SuperpixelMap::whole(32, 32);
        // 2x2 blob inside patch (1, 2) of a 4x4 grid
        for y in 10..12 {
            for x in 18..20 {
                map.labels[y * 32 + x] = 1;
            }
        }
        map.region_count = 2;
        let sets = regions_to_patch_sets(&map, 4, 4);
        assert_eq!(sets[1], vec![6]);
        assert_eq!(sets[0].len(), 16);
    }

    proptest! {
        #[test]
        fn patch_sets_match_counting_oracle(
            seed in 0u64..1000, h in 4usize..24, w in 4usize..24, m in 1usize..6,
            gh in 1usize..5, gw in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..m as u32)).collect();
            let map = enforce_connectivity(&raw, h, w);
            let sets = regions_to_patch_sets(&map, gh, gw);
            // oracle: count per (patch, label) with explicit pixel membership tests
            let patch_of = |y: usize, x: usize| -> usize {
                let gi = (0..gh).find(|&i| cell_span(i, gh, h).contains(&y)).unwrap();
                let gj = (0..gw).find(|&j| cell_span(j, gw, w).contains(&x)).unwrap();
                gi * gw + gj
            };
            let mut count = vec![vec![0usize; map.region_count]; gh * gw];
            for y in 0..h {
                for x in 0..w {
                    count[patch_of(y, x)][map.label(y, x) as usize] += 1;
                }
            }
            for l in 0..map.region_count {
                let mut want: Vec<usize> = (0..gh * gw)
                    .filter(|&p| {
                        let c = &count[p];
                        let top = *c.iter().max().unwrap();
                        c.iter().position(|&v| v == top) == Some(l)
                    })
                    .collect();
                if want.is_empty() {
                    let top = (0..gh * gw).map(|p| count[p][l]).max().unwrap();
                    want.push((0..gh * gw).find(|&p| count[p][l] == top).unwrap());
                }
                prop_assert_eq!(&sets[l], &want);
            }
        }

        #[test]
        fn connectivity_yields_one_component_per_label(seed in 0u64..1000, h in 1usize..20, w in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
            let map = enforce_connectivity(&raw, h, w);
            prop_assert!(component_count_per_label(&map).iter().all(|&c| c == 1));
            prop_assert!(map.areas().iter().all(|&a| a > 0));
        }
    }
}
