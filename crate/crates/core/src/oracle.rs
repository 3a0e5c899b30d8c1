//! Slow reference implementations used only to check the production code.
//!
//! Each function here follows the plain definition of its operation with no
//! shared code paths, so agreement with the fast path is meaningful.

use crate::delineate::{DelineateParams, Treetop};

/// Canopy of Gaussian bumps `(row, col, peak, sigma_cells)`; overlapping
/// bumps combine by maximum so each apex keeps its peak height.
pub fn gaussian_bumps(w: usize, h: usize, bumps: &[(f64, f64, f64, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            for &(br, bc, peak, s) in bumps {
                let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                let v = peak * (-d2 / (2.0 * s * s)).exp();
                if v > out[r * w + c] {
                    out[r * w + c] = v;
                }
            }
        }
    }
    out
}

/// Exhaustive window scan: every cell compared against every cell of its
/// disc, then plateau components resolved by min-index propagation.
pub fn brute_force_maxima(
    values: &[f64],
    w: usize,
    h: usize,
    cell_size: f64,
    p: &DelineateParams,
) -> Vec<Treetop> {
    let mut is_max = vec![false; w * h];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let v = values[(r * w as i64 + c) as usize];
            if v < p.min_tree_height {
                continue;
            }
            let rad = ((p.win_a + p.win_b * v) / cell_size).ceil() as i64;
            let mut ok = true;
            for rr in (r - rad).max(0)..=(r + rad).min(h as i64 - 1) {
                for cc in (c - rad).max(0)..=(c + rad).min(w as i64 - 1) {
                    let d2 = (rr - r).pow(2) + (cc - c).pow(2);
                    if d2 <= rad * rad && values[(rr * w as i64 + cc) as usize] > v {
                        ok = false;
                    }
                }
            }
            is_max[(r * w as i64 + c) as usize] = ok;
        }
    }
    // Each candidate starts with its own index; repeatedly take the minimum
    // over equal-valued candidate 4-neighbors until nothing changes.
    let mut rep: Vec<usize> = (0..w * h).collect();
    loop {
        let mut changed = false;
        for i in 0..w * h {
            if !is_max[i] {
                continue;
            }
            let (r, c) = (i / w, i % w);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(i - w);
            }
            if r + 1 < h {
                nb.push(i + w);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if is_max[j] && values[j] == values[i] && rep[j] < rep[i] {
                    rep[i] = rep[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..w * h)
        .filter(|&i| is_max[i] && rep[i] == i)
        .map(|i| Treetop {
            row: (i / w) as u32,
            col: (i % w) as u32,
            height: values[i],
        })
        .collect()
}

/// Priority flood with a linear-scan frontier instead of a heap.
pub fn naive_flood(
    values: &[f64],
    w: usize,
    h: usize,
    markers: &[Treetop],
    min_height: f64,
) -> Vec<u32> {
    let mut sorted: Vec<(u32, u32)> = markers.iter().map(|t| (t.row, t.col)).collect();
    sorted.sort();
    let mut labels = vec![0u32; w * h];
    // (cell, sequence number)
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    let mut seq = 0;
    for (k, &(r, c)) in sorted.iter().enumerate() {
        let i = r as usize * w + c as usize;
        labels[i] = k as u32 + 1;
        frontier.push((i, seq));
        seq += 1;
    }
    while !frontier.is_empty() {
        let mut best = 0;
        for k in 1..frontier.len() {
            let (i, s) = frontier[k];
            let (bi, bs) = frontier[best];
            if values[i] > values[bi] || (values[i] == values[bi] && s < bs) {
                best = k;
            }
        }
        let (i, _) = frontier.remove(best);
        let (r, c) = (i / w, i % w);
        let mut nb = Vec::new();
        if r > 0 {
            nb.push(i - w);
        }
        if c > 0 {
            nb.push(i - 1);
        }
        if c + 1 < w {
            nb.push(i + 1);
        }
        if r + 1 < h {
            nb.push(i + w);
        }
        for j in nb {
            if labels[j] == 0 && values[j] >= min_height {
                labels[j] = labels[i];
                frontier.push((j, seq));
                seq += 1;
            }
        }
    }
    labels
}

fn pixel_set(m: &crate::labelset::InstanceMask) -> std::collections::HashSet<(u32, u32)> {
    let bits = crate::labelset::rle_decode(&m.rle, m.bbox.w, m.bbox.h).unwrap();
    (0..bits.len())
        .filter(|&i| bits[i])
        .map(|i| (m.bbox.x + i as u32 % m.bbox.w, m.bbox.y + i as u32 / m.bbox.w))
        .collect()
}

/// Mask IoU from explicit pixel sets.
pub fn set_iou(a: &crate::labelset::InstanceMask, b: &crate::labelset::InstanceMask) -> f64 {
    let (pa, pb) = (pixel_set(a), pixel_set(b));
    let inter = pa.intersection(&pb).count();
    let union = pa.union(&pb).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Textbook NMS: take the best remaining instance, discard everything that
/// overlaps it at or above the threshold, repeat.
pub fn reference_nms(
    set: &[crate::labelset::InstanceMask],
    iou_thr: f64,
) -> Vec<crate::labelset::InstanceMask> {
    let mut remaining: Vec<usize> = (0..set.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (a, b) = (&set[remaining[k]], &set[remaining[best]]);
            let (sa, sb) = (a.score.unwrap_or(1.0), b.score.unwrap_or(1.0));
            if sa > sb || (sa == sb && a.id < b.id) {
                best = k;
            }
        }
        let top = remaining.remove(best);
        keep.push(top);
        remaining.retain(|&i| set_iou(&set[i], &set[top]) < iou_thr);
    }
    keep.sort();
    keep.into_iter().map(|i| set[i].clone()).collect()
}

/// Containment rule replayed over all ordered pairs with pixel sets.
pub fn containment_replay(
    set: &[crate::labelset::InstanceMask],
    ios_thr: f64,
) -> Vec<crate::labelset::InstanceMask> {
    let pixels: Vec<_> = set.iter().map(pixel_set).collect();
    // `outranks(a, b)`: b is the one removed when the pair is too nested.
    let outranks = |a: usize, b: usize| {
        let (la, lb) = (pixels[a].len(), pixels[b].len());
        let (sa, sb) = (set[a].score.unwrap_or(1.0), set[b].score.unwrap_or(1.0));
        la > lb || (la == lb && (sa > sb || (sa == sb && set[a].id < set[b].id)))
    };
    let mut rank: Vec<usize> = (0..set.len()).collect();
    // Selection sort by the pairwise rule.
    for i in 0..rank.len() {
        for j in i + 1..rank.len() {
            if outranks(rank[j], rank[i]) {
                rank.swap(i, j);
            }
        }
    }
    let mut alive = vec![true; set.len()];
    for (pos, &a) in rank.iter().enumerate() {
        if !alive[a] {
            continue;
        }
        for &b in &rank[pos + 1..] {
            let inter = pixels[a].intersection(&pixels[b]).count() as f64;
            let smaller = pixels[a].len().min(pixels[b].len()) as f64;
            if alive[b] && smaller > 0.0 && inter / smaller >= ios_thr {
                alive[b] = false;
            }
        }
    }
    (0..set.len())
        .filter(|&i| alive[i])
        .map(|i| set[i].clone())
        .collect()
}

/// Largest number of one-to-one (pred, gt) pairs with IoU at or above the
/// threshold, by trying every assignment.
pub fn max_assignment(
    preds: &[crate::labelset::InstanceMask],
    gts: &[crate::labelset::InstanceMask],
    thr: f64,
) -> usize {
    let ok: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| preds.iter().map(|p| set_iou(p, g) >= thr).collect())
        .collect();
    fn go(ok: &[Vec<bool>], gi: usize, used: &mut Vec<bool>) -> usize {
        if gi == ok.len() {
            return 0;
        }
        let mut best = go(ok, gi + 1, used);
        for pi in 0..used.len() {
            if ok[gi][pi] && !used[pi] {
                used[pi] = true;
                best = best.max(1 + go(ok, gi + 1, used));
                used[pi] = false;
            }
        }
        best
    }
    go(&ok, 0, &mut vec![false; preds.len()])
}

/// Flood fill from `seed` (global pixels) over band-0 values at or above
/// `threshold`, restricted to `window`. Returns pixels in row-major order.
pub fn flood_region(
    guide: &crate::raster::Raster,
    seed: (u32, u32),
    threshold: f64,
    window: &crate::labelset::BBox,
) -> Vec<(u32, u32)> {
    let ok = |x: u32, y: u32| {
        window.contains_pixel(x, y) && guide.sample(y as i64, x as i64).is_some_and(|v| v >= threshold)
    };
    let mut region = std::collections::BTreeSet::new();
    if !ok(seed.0, seed.1) {
        return Vec::new();
    }
    let mut stack = vec![seed];
    while let Some((x, y)) = stack.pop() {
        if !region.insert((y, x)) {
            continue;
        }
        let mut nb = vec![(x + 1, y), (x, y + 1)];
        if x > 0 {
            nb.push((x - 1, y));
        }
        if y > 0 {
            nb.push((x, y - 1));
        }
        for (nx, ny) in nb {
            if ok(nx, ny) && !region.contains(&(ny, nx)) {
                stack.push((nx, ny));
            }
        }
    }
    region.into_iter().map(|(y, x)| (x, y)).collect()
}
