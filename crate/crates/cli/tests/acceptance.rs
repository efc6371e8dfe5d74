//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use groundkit::attention::{
    attention_weights, class_token_update, forward_with_regions, joint_update, masked_attention,
    resnet_per_patch_pool, AttentionMask, AttentionWeights, Block, KeySet, RegionTokenSet, TokenGrid,
};
use groundkit::bundle::save_bundle;
use groundkit::eval::{evaluate, iou, parse_dataset, GroundingRecord, Prediction};
use groundkit::score::ScoreMap;
use groundkit::search::{
    brute_force_search, ess_search, hierarchical_search, BoundingBox, HierarchicalParams,
};
use groundkit::superpixel::{regions_to_patch_sets, slic_segment, SuperpixelMap};
use groundkit::synthetic::{
    gaussian_blob_map, smooth_random_map, toy_bundle, toy_layer_plan, uniform_random_map, ToyConfig,
};
use groundkit::tensor::Tensor;
use groundkit::vit::VisionTransformer;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn rand_attention(rng: &mut ChaCha8Rng, c: usize, d: usize, heads: usize) -> AttentionWeights {
    let s = (1.0 / c as f32).sqrt() * 1.7;
    let mut pair = |rows: usize, cols: usize| (rand_tensor(rng, &[rows, cols], s), rand_tensor(rng, &[rows], 0.1));
    let q = pair(c, c);
    let k = pair(c, c);
    let v = pair(c, c);
    let o = pair(d, c);
    AttentionWeights::new(q, k, v, o, heads).unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

fn image(res: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, res, res], |_| rng.random_range(-1.5..1.5))
}

fn vit_blocks(v: &VisionTransformer) -> Vec<Block> {
    (0..v.layers()).map(|l| v.block(l).clone()).collect()
}

/// Straight-line evaluation of one query attending to two copies of `f`:
/// per head, scores against both keys, softmax in f64, weighted values,
/// concatenation, output projection.
fn duplicate_set_oracle(f: &[f32], w: &AttentionWeights) -> Vec<f64> {
    let proj = |wt: &Tensor, b: &Tensor| -> Vec<f64> {
        (0..wt.dim(0))
            .map(|o| b.data()[o] as f64 + (0..f.len()).map(|i| wt.row(o)[i] as f64 * f[i] as f64).sum::<f64>())
            .collect()
    };
    let q = proj(&w.wq, &w.bq);
    let keys = [proj(&w.wk, &w.bk), proj(&w.wk, &w.bk)];
    let values = [proj(&w.wv, &w.bv), proj(&w.wv, &w.bv)];
    let hd = q.len() / w.heads;
    let mut concat = vec![0.0; q.len()];
    for h in 0..w.heads {
        let r = h * hd..(h + 1) * hd;
        let s: Vec<f64> = keys.iter().map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (hd as f64).sqrt()).collect();
        let top = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|x| (x - top).exp()).collect();
        let z = e[0] + e[1];
        for i in r {
            concat[i] = e[0] / z * values[0][i] + e[1] / z * values[1][i];
        }
    }
    (0..w.out_w.dim(0))
        .map(|o| w.out_b.data()[o] as f64 + (0..concat.len()).map(|i| w.out_w.row(o)[i] as f64 * concat[i]).sum::<f64>())
        .collect()
}

fn eq12_identity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut draws = 0;
    for heads in [1, 4] {
        for draw in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * heads as u64 + draw);
            let (m, c, d) = (6, 32, 16);
            let w = rand_attention(&mut rng, c, d, heads);
            let f = rand_tensor(&mut rng, &[m, c], 2.0);
            let closed = resnet_per_patch_pool(&f, &w).map_err(|e| e.to_string())?;
            // rows 0..m are the queries, rows m..2m their duplicates
            let mut rows: Vec<&[f32]> = (0..m).map(|i| f.row(i)).collect();
            rows.extend((0..m).map(|i| f.row(i)));
            let seq = Tensor::from_rows(&rows).unwrap();
            let mut keys: Vec<KeySet> = (0..m).map(|i| KeySet::Indices(vec![i, i + m])).collect();
            keys.extend((0..m).map(|i| KeySet::Indices(vec![i, i + m])));
            let masked = masked_attention(&seq, &AttentionMask::new(keys), &w).map_err(|e| e.to_string())?;
            for i in 0..m {
                worst = worst.max(max_diff(closed.row(i), masked.row(i)));
                let oracle: Vec<f32> = duplicate_set_oracle(f.row(i), &w).into_iter().map(|v| v as f32).collect();
                worst = worst.max(max_diff(closed.row(i), &oracle));
            }
            draws += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max |diff| {worst:.2e} over {draws} draws (1 and 4 heads), {secs:.2} s");
    if worst < 1e-6 && secs < 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn half_weight_lemma() -> Outcome {
    let mut worst: f64 = 0.0;
    for heads in [1, 2, 4, 8] {
        for draw in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(77 + 100 * heads as u64 + draw);
            let w = rand_attention(&mut rng, 32, 16, heads);
            let q = rand_tensor(&mut rng, &[32], 3.0);
            let k = rand_tensor(&mut rng, &[32], 3.0);
            let pool = Tensor::from_rows(&[k.data(), k.data()]).unwrap();
            for head in attention_weights(q.data(), &pool, &w).map_err(|e| e.to_string())? {
                for a in head {
                    worst = worst.max((a as f64 - 0.5).abs());
                }
            }
        }
    }
    let detail = format!("max |weight - 0.5| {worst:.2e} over 200 draws");
    if worst <= 1e-7 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn full_region_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let cfg = ToyConfig::vit().with_seed(seed);
        if (cfg.layers, cfg.width, cfg.input_resolution / cfg.patch_size) != (3, 32, 4) {
            return Err("toy ViT is not 3 layers, width 32, 4x4 grid".into());
        }
        let vit = VisionTransformer::from_bundle(&toy_bundle(&cfg)).unwrap();
        let grid = vit.embed(&image(32, seed + 10), 1).unwrap();
        let regions = RegionTokenSet::from_class_token(&grid, vec![(0..16).collect()]).unwrap();
        let (g, r) = forward_with_regions(grid, regions, &vit_blocks(&vit)).unwrap();
        worst = worst.max(max_diff(r.tokens.row(0), g.class_token()));
    }
    let detail = format!("max |region - class| {worst:.2e} over 5 toy ViTs");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn region_isolation() -> Outcome {
    let mut checks = 0;
    for seed in 0..5 {
        let vit = VisionTransformer::from_bundle(&toy_bundle(&ToyConfig::vit().with_seed(seed))).unwrap();
        let img = image(32, seed + 20);
        let grid = vit.embed(&img, 1).unwrap();
        let mut rgb = img.clone();
        rgb.data_mut().iter_mut().for_each(|v| *v = (*v + 1.5) / 3.0);
        let map = slic_segment(&rgb, 6, 10.0, 10, seed).unwrap();
        let members = regions_to_patch_sets(&map, 4, 4);
        let regions = RegionTokenSet::from_class_token(&grid, members).unwrap();
        let mut plain = grid.clone();
        let mut joint = (grid, regions);
        for l in 0..vit.layers() {
            plain = class_token_update(&plain, vit.block(l)).unwrap();
            joint = joint_update(&joint.0, &joint.1, vit.block(l)).unwrap();
            if joint.0 != plain {
                return Err(format!("seed {seed} layer {l}: grid tokens changed by region rows"));
            }
            checks += 1;
        }
    }
    Ok(format!("class and patch tokens bit-identical at {checks} layer checks"))
}

fn permutation_invariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let vit = VisionTransformer::from_bundle(&toy_bundle(&ToyConfig::vit().with_seed(seed))).unwrap();
        let grid = vit.embed(&image(32, seed + 30), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members: Vec<Vec<usize>> = vec![(0..16).collect(), vec![0, 1, 4, 5], vec![10, 11, 14, 15, 3], vec![7]];
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        // new slot j holds old patch perm[j]
        let mut inv = [0; 16];
        for (j, &p) in perm.iter().enumerate() {
            inv[p] = j;
        }
        let mut rows: Vec<&[f32]> = vec![grid.class_token()];
        rows.extend(perm.iter().map(|&p| grid.tokens.row(1 + p)));
        let shuffled = TokenGrid::new(Tensor::from_rows(&rows).unwrap(), 4, 4).unwrap();
        let moved: Vec<Vec<usize>> = members.iter().map(|m| m.iter().map(|&p| inv[p]).collect()).collect();
        let blocks = vit_blocks(&vit);
        let (ga, ra) = forward_with_regions(grid.clone(), RegionTokenSet::from_class_token(&grid, members).unwrap(), &blocks).unwrap();
        let (gb, rb) =
            forward_with_regions(shuffled.clone(), RegionTokenSet::from_class_token(&shuffled, moved).unwrap(), &blocks).unwrap();
        worst = worst.max(max_diff(ga.class_token(), gb.class_token()));
        for m in 0..ra.len() {
            let (ea, eb) = (vit.head(ra.tokens.row(m)).unwrap(), vit.head(rb.tokens.row(m)).unwrap());
            worst = worst.max(max_diff(&ea.values, &eb.values));
            worst = worst.max(max_diff(ra.tokens.row(m), rb.tokens.row(m)));
        }
        worst = worst.max(max_diff(&vit.head(ga.class_token()).unwrap().values, &vit.head(gb.class_token()).unwrap().values));
    }
    let detail = format!("max |diff| {worst:.2e} over 5 shuffles (class, region tokens and embeddings)");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn atrous_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let plan = toy_layer_plan(seed, 6, &[(4, 1), (4, 2), (8, 2)]);
        if plan.blocks.len() != 3 || plan.block_stride() != 4 {
            return Err("toy plan is not 3 blocks with two stride-2 stages".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
        let x = rand_tensor(&mut rng, &[6, 16, 16], 1.5);
        let a = plan.forward_blocks(&x).unwrap();
        let b = plan.dilated().forward_blocks(&x).unwrap();
        let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
        if b.shape() != [c, 16, 16] {
            return Err(format!("dilated output has shape {:?}", b.shape()));
        }
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let va = a.data()[(k * h + i) * w + j] as f64;
                    let vb = b.data()[(k * 16 + 4 * i) * 16 + 4 * j] as f64;
                    worst = worst.max((va - vb).abs());
                }
            }
        }
    }
    let detail = format!("max |strided - dilated[4i, 4j]| {worst:.2e} over 5 random networks");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stride_identity() -> Outcome {
    let mut compared = 0;
    for seed in 0..5 {
        let vit = VisionTransformer::from_bundle(&toy_bundle(&ToyConfig::vit().with_seed(seed))).unwrap();
        let img = image(32, seed + 50);
        let one = vit.patchify(&img, 1).unwrap();
        for div in [2, 4] {
            let fine = vit.patchify(&img, div).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    if fine.tokens.row(1 + (i * div) * fine.grid_w + j * div) != one.tokens.row(1 + i * 4 + j) {
                        return Err(format!("seed {seed} divisor {div} token ({i},{j}) differs"));
                    }
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("{compared} tokens bit-identical at even offsets (divisors 2 and 4)"))
}

const LAMBDA_STEPS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];

fn random_map(h: usize, w: usize, seed: u64) -> ScoreMap {
    let v = if seed.is_multiple_of(2) { uniform_random_map(h, w, seed) } else { smooth_random_map(h, w, 3, seed) };
    ScoreMap::from_values(h, w, v).unwrap()
}

fn ess_exactness() -> Outcome {
    let start = Instant::now();
    let mut agree = 0;
    let mut total = 0;
    for seed in 0..100 {
        let map = random_map(32, 32, seed);
        for rel in LAMBDA_STEPS {
            let lambda = rel * map.mean();
            let a = ess_search(&map, lambda).unwrap();
            let b = brute_force_search(&map, lambda).unwrap();
            total += 1;
            if a.bbox == b.bbox && a.score == b.score {
                agree += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{agree}/{total} boxes identical, {secs:.2} s");
    if agree == total && secs < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn zero_lambda_full_box() -> Outcome {
    let mut ok = 0;
    for seed in 0..20u64 {
        let (h, w) = (12 + (seed as usize % 5) * 7, 40 - (seed as usize % 4) * 6);
        let map = random_map(h, w, seed);
        let full = BoundingBox::full(h, w);
        let found = [
            brute_force_search(&map, 0.0).unwrap().bbox,
            ess_search(&map, 0.0).unwrap().bbox,
            hierarchical_search(&map, 0.0, 4, 2).unwrap().bbox,
        ];
        if found.iter().all(|b| *b == full) {
            ok += 1;
        }
    }
    let detail = format!("{ok}/20 maps give the full box (brute, ESS, hierarchical)");
    if ok == 20 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lambda_monotonicity() -> Outcome {
    let mut ok = 0;
    for seed in 0..20 {
        let map = random_map(32, 32, seed + 500);
        let areas = |f: &dyn Fn(f64) -> BoundingBox| -> Vec<usize> {
            LAMBDA_STEPS.iter().map(|r| f(r * map.mean()).area()).collect()
        };
        let ess = areas(&|l| ess_search(&map, l).unwrap().bbox);
        let brute = areas(&|l| brute_force_search(&map, l).unwrap().bbox);
        if ess.windows(2).all(|p| p[0] >= p[1]) && ess == brute {
            ok += 1;
        }
    }
    let detail = format!("{ok}/20 maps with nonincreasing area over lambda in {{0, .5, 1, 2, 4}} x mean");
    if ok == 20 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn hierarchical_quality() -> Outcome {
    let mut good = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..50 {
        let map = ScoreMap::from_values(128, 128, gaussian_blob_map(128, 128, seed)).unwrap();
        let lambda = map.mean();
        let exact = ess_search(&map, lambda).unwrap().score;
        let hier = hierarchical_search(&map, lambda, 4, 2).unwrap().score;
        let ratio = hier / exact;
        worst = worst.min(ratio);
        if hier >= 0.99 * exact {
            good += 1;
        }
    }
    let detail = format!("{good}/50 blob maps within 0.99 of the exact score (worst ratio {worst:.4})");
    if good * 100 >= 95 * 50 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn search_speed_ordering() -> Outcome {
    let hier_params = HierarchicalParams::default();
    let (mut t_ess, mut t_hier) = (Duration::ZERO, Duration::ZERO);
    let trials = 100;
    for seed in 0..trials {
        let map = ScoreMap::from_values(256, 256, smooth_random_map(256, 256, 4, seed)).unwrap();
        let lambda = map.mean();
        let t = Instant::now();
        ess_search(&map, lambda).unwrap();
        t_ess += t.elapsed();
        let t = Instant::now();
        hierarchical_search(&map, lambda, hier_params.factor, hier_params.levels).unwrap();
        t_hier += t.elapsed();
    }
    let (me, mh) = (t_ess.as_secs_f64() * 1e3 / trials as f64, t_hier.as_secs_f64() * 1e3 / trials as f64);
    let detail = format!("256x256 mean: hierarchical {mh:.3} ms, ESS {me:.3} ms over {trials} trials");
    if mh < me {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Components per label by flood fill.
fn components(map: &SuperpixelMap) -> Vec<usize> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut per = vec![0; map.region_count];
    for s in 0..h * w {
        if seen[s] {
            continue;
        }
        per[map.labels[s] as usize] += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(p - w);
            }
            if y + 1 < h {
                nb.push(p + w);
            }
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if !seen[q] && map.labels[q] == map.labels[s] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    per
}

/// Sky, ground, a sun and a house with mild noise.
fn scene(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros([3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
            let mut c = if fy < 0.55 { [0.4 + 0.3 * fy, 0.6 + 0.2 * fy, 0.95] } else { [0.3, 0.5 - 0.2 * fy, 0.2] };
            if (fy - 0.2).powi(2) + (fx - 0.8).powi(2) < 0.01 {
                c = [1.0, 0.9, 0.3];
            }
            if (0.4..0.8).contains(&fy) && (0.2..0.5).contains(&fx) {
                c = [0.7, 0.25, 0.2];
            }
            for (k, v) in c.iter().enumerate() {
                t.data_mut()[(k * h + y) * w + x] = (v + rng.random_range(-0.03..0.03f32)).clamp(0.0, 1.0);
            }
        }
    }
    t
}

fn slic_and_iou_suites() -> Outcome {
    // superpixels
    let one = slic_segment(&scene(20, 30, 0), 1, 10.0, 10, 0).map_err(|e| e.to_string())?;
    if one.region_count != 1 || one.labels.iter().any(|&l| l != 0) {
        return Err("K=1 does not label everything 0".into());
    }
    let flat = Tensor::full([3, 64, 64], 0.5);
    let quads = slic_segment(&flat, 4, 10.0, 10, 0).unwrap();
    if quads.region_count != 4 || quads.areas().iter().any(|&a| (a as f64 - 1024.0).abs() > 102.4) {
        return Err(format!("constant 64x64, K=4 areas {:?}", quads.areas()));
    }
    let mut partitions = 0;
    for (k, seed) in [(10, 1), (50, 2), (120, 3), (300, 4)] {
        let img = scene(96, 128, seed);
        let map = slic_segment(&img, k, 10.0, 10, seed).unwrap();
        let areas = map.areas();
        if areas.iter().sum::<usize>() != 96 * 128 || areas.contains(&0) {
            return Err(format!("K={k}: labels are not a dense partition"));
        }
        if components(&map).iter().any(|&c| c != 1) {
            return Err(format!("K={k}: a label has several 4-connected components"));
        }
        let m = map.region_count as f64;
        if m < 0.5 * k as f64 || m > 1.5 * k as f64 {
            return Err(format!("K={k}: {m} regions outside [0.5K, 1.5K]"));
        }
        if slic_segment(&img, k, 10.0, 10, seed).unwrap() != map {
            return Err(format!("K={k}: repeated run differs"));
        }
        partitions += 1;
    }
    // IoU and accuracy
    let b = |y1, y2, y3, y4| BoundingBox::new(y1, y2, y3, y4).unwrap();
    if iou(&b(0, 0, 9, 9), &b(0, 0, 9, 9)) != 1.0 || iou(&b(0, 0, 4, 4), &b(6, 6, 9, 9)) != 0.0 {
        return Err("IoU identity/disjoint cases".into());
    }
    let third = iou(&b(0, 0, 9, 9), &b(0, 5, 9, 14));
    if (third - 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("IoU (0,0,9,9) vs (0,5,9,14) = {third}"));
    }
    let gt = b(0, 0, 9, 9);
    let recs: Vec<GroundingRecord> = (0..10)
        .map(|i| GroundingRecord {
            image_path: format!("{i}.ppm").into(),
            phrase: i.to_string(),
            gt_box: gt,
            split: None,
        })
        .collect();
    let rep = evaluate(
        &recs,
        |r| {
            let i: usize = r.phrase.parse().unwrap();
            Ok(Prediction {
                bbox: if i < 7 { b(0, 0, 5, 9) } else { b(0, 0, 1, 9) },
                score: None,
            })
        },
        0.5,
    )
    .unwrap();
    if (rep.accuracy - 0.7).abs() > 1e-12 {
        return Err(format!("7 of 10 at IoU 0.6 gave accuracy {}", rep.accuracy));
    }
    let at_half = evaluate(&recs[..1], |_| Ok(Prediction { bbox: b(0, 0, 4, 9), score: None }), 0.5).unwrap();
    if at_half.correct != 0 {
        return Err("IoU equal to the threshold counted as correct".into());
    }
    let mut lines: Vec<String> =
        (0..20).map(|i| format!(r#"{{"image":"{i}.ppm","phrase":"p","box":[0,0,{i},{i}]}}"#)).collect();
    lines[3] = r#"{"phrase":"p","box":[0,0,1,1]}"#.into();
    lines[17] = "not json".into();
    let ds = parse_dataset(&lines.join("\n"), Path::new("."));
    if ds.records.len() != 18 || ds.errors.iter().map(|e| e.line).collect::<Vec<_>>() != [4, 18] {
        return Err("20-line fixture with 2 malformed lines".into());
    }
    Ok(format!(
        "SLIC: K=1, quadrants, {partitions} partition/connectivity/determinism runs; IoU 1/3, Acc 0.7, strict threshold, 18+2 loader"
    ))
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bundle = dir.path().join("toy.cgb");
    save_bundle(&toy_bundle(&ToyConfig::vit().with_seed(5)), &bundle).map_err(|e| e.to_string())?;
    let img = dir.path().join("scene.ppm");
    let t = scene(48, 64, 9);
    let mut ppm = b"P6\n64 48\n255\n".to_vec();
    for p in 0..48 * 64 {
        for c in 0..3 {
            ppm.push((t.data()[c * 48 * 64 + p] * 255.0).round() as u8);
        }
    }
    std::fs::write(&img, ppm).map_err(|e| e.to_string())?;
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_groundkit"))
            .args(["ground", "--bundle"])
            .arg(&bundle)
            .arg("--image")
            .arg(&img)
            .args(["--query", "a red house", "--seed", "7", "--no-timings"])
            .output()
            .map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    if !a.status.success() {
        return Err(format!("ground failed: {}", String::from_utf8_lossy(&a.stderr)));
    }
    if a.stdout != b.stdout {
        return Err("two runs produced different JSON".into());
    }
    Ok(format!("two runs, {} identical bytes of JSON", a.stdout.len()))
}

fn main() {
    let criteria: [(&str, Check); 14] = [
        ("duplicate-set attention equals out_proj(W^V f)", eq12_identity),
        ("0.5-weight lemma", half_weight_lemma),
        ("full-region token equals class token", full_region_equivalence),
        ("region isolation", region_isolation),
        ("patch permutation invariance", permutation_invariance),
        ("a-trous identity", atrous_identity),
        ("stride-reduction identity", stride_identity),
        ("ESS exactness", ess_exactness),
        ("lambda=0 gives the full image", zero_lambda_full_box),
        ("lambda monotonicity", lambda_monotonicity),
        ("hierarchical quality", hierarchical_quality),
        ("search speed ordering", search_speed_ordering),
        ("SLIC and IoU/accuracy suites", slic_and_iou_suites),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name:<48} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<48} {detail}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
