//! Segmentation quality metrics on discrete label maps: voxel Dice overlap
//! and surface Dice at a distance tolerance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stand-in for an infinite squared distance. Real squared distances in any
/// feasible volume stay far below this, so it survives the arithmetic of
/// the distance transform without producing NaNs.
const FAR: f64 = 1e20;

fn check_maps(pred: &[u8], target: &[u8], shape: Option<[usize; 3]>) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Usage(format!(
            "label maps differ in size: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if let Some(shape) = shape {
        let numel: usize = shape.iter().product();
        if pred.len() != numel {
            return Err(Error::Usage(format!(
                "label map has {} voxels, shape {shape:?} implies {numel}",
                pred.len()
            )));
        }
    }
    Ok(())
}

/// Dice similarity per foreground class: 2|A and B| / (|A| + |B|), with the
/// empty-versus-empty case defined as 1.
pub fn dsc_metric(pred: &[u8], target: &[u8], num_classes: usize) -> Result<Vec<f64>> {
    check_maps(pred, target, None)?;
    let mut scores = Vec::with_capacity(num_classes.saturating_sub(1));
    for class in 1..num_classes as u8 {
        let mut inter = 0usize;
        let mut total = 0usize;
        for (&p, &t) in pred.iter().zip(target) {
            let a = p == class;
            let b = t == class;
            inter += (a && b) as usize;
            total += a as usize + b as usize;
        }
        scores.push(if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        });
    }
    Ok(scores)
}

fn class_mask(labels: &[u8], class: u8) -> Vec<bool> {
    labels.iter().map(|&l| l == class).collect()
}

/// Boundary voxels of a mask: mask voxels with at least one of their six
/// face neighbors outside the mask. Voxels beyond the array count as
/// background, so the array border can be boundary.
fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [sd, sh, sw] = shape;
    let idx = |d: usize, h: usize, w: usize| (d * sh + h) * sw + w;
    let mut out = vec![false; mask.len()];
    for d in 0..sd {
        for h in 0..sh {
            for w in 0..sw {
                if !mask[idx(d, h, w)] {
                    continue;
                }
                let exposed = (d == 0 || !mask[idx(d - 1, h, w)])
                    || (d + 1 == sd || !mask[idx(d + 1, h, w)])
                    || (h == 0 || !mask[idx(d, h - 1, w)])
                    || (h + 1 == sh || !mask[idx(d, h + 1, w)])
                    || (w == 0 || !mask[idx(d, h, w - 1)])
                    || (w + 1 == sw || !mask[idx(d, h, w + 1)]);
                out[idx(d, h, w)] = exposed;
            }
        }
    }
    out
}

/// One-dimensional squared distance transform by the lower envelope of
/// parabolas, rewriting `row` in place. `f`, `v` and `z` are scratch
/// buffers at least as long as the row (`z` one element longer).
fn dt_row(f: &mut [f64], v: &mut [usize], z: &mut [f64], row: &mut [f64]) {
    let n = row.len();
    if n == 0 {
        return;
    }
    f[..n].copy_from_slice(row);
    let f: &[f64] = f;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -FAR;
    z[1] = FAR;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // z[0] sits below any finite intersection, so k never underflows.
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = FAR;
    }
    k = 0;
    for (q, slot) in row.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *slot = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest set
/// voxel, by separable one-dimensional transforms over the three axes.
fn squared_edt(set: &[bool], shape: [usize; 3]) -> Vec<f64> {
    let [sd, sh, sw] = shape;
    let mut dist: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let longest = sd.max(sh).max(sw);
    let mut f = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let mut row = vec![0.0; longest];

    // Along w: rows are contiguous.
    for chunk in dist.chunks_mut(sw) {
        dt_row(&mut f, &mut v, &mut z, chunk);
    }
    // Along h.
    for d in 0..sd {
        for w in 0..sw {
            for h in 0..sh {
                row[h] = dist[(d * sh + h) * sw + w];
            }
            dt_row(&mut f, &mut v, &mut z, &mut row[..sh]);
            for h in 0..sh {
                dist[(d * sh + h) * sw + w] = row[h];
            }
        }
    }
    // Along d.
    for h in 0..sh {
        for w in 0..sw {
            for d in 0..sd {
                row[d] = dist[(d * sh + h) * sw + w];
            }
            dt_row(&mut f, &mut v, &mut z, &mut row[..sd]);
            for d in 0..sd {
                dist[(d * sh + h) * sw + w] = row[d];
            }
        }
    }
    dist
}

/// Surface Dice per foreground class: the fraction of boundary voxels of
/// each mask lying within `tolerance` (Euclidean, in voxels) of the other
/// mask's boundary. Two empty masks score 1.
pub fn sdc_metric(
    pred: &[u8],
    target: &[u8],
    shape: [usize; 3],
    num_classes: usize,
    tolerance: f64,
) -> Result<Vec<f64>> {
    check_maps(pred, target, Some(shape))?;
    if tolerance < 0.0 {
        return Err(Error::Usage(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let tol_sq = tolerance * tolerance + 1e-9;
    let mut scores = Vec::with_capacity(num_classes.saturating_sub(1));
    for class in 1..num_classes as u8 {
        let surf_a = boundary(&class_mask(pred, class), shape);
        let surf_b = boundary(&class_mask(target, class), shape);
        let count_a = surf_a.iter().filter(|&&x| x).count();
        let count_b = surf_b.iter().filter(|&&x| x).count();
        if count_a == 0 && count_b == 0 {
            scores.push(1.0);
            continue;
        }
        if count_a == 0 || count_b == 0 {
            scores.push(0.0);
            continue;
        }
        let dist_to_b = squared_edt(&surf_b, shape);
        let dist_to_a = squared_edt(&surf_a, shape);
        let near_a = surf_a
            .iter()
            .zip(&dist_to_b)
            .filter(|(&on, &d)| on && d <= tol_sq)
            .count();
        let near_b = surf_b
            .iter()
            .zip(&dist_to_a)
            .filter(|(&on, &d)| on && d <= tol_sq)
            .count();
        scores.push((near_a + near_b) as f64 / (count_a + count_b) as f64);
    }
    Ok(scores)
}

/// Hard labels from logits of shape (N, C, D, H, W): the channel with the
/// highest activation per voxel, the lowest index winning ties.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let shape = logits.shape();
    if shape.len() != 5 {
        return Err(Error::Usage(format!(
            "argmax expects rank-5 logits, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if c > 256 {
        return Err(Error::Usage(format!("{c} classes exceed the u8 label range")));
    }
    let spatial: usize = shape[2..].iter().product();
    let values = logits.to_f64_vec();
    let mut labels = Vec::with_capacity(n * spatial);
    for batch in 0..n {
        for voxel in 0..spatial {
            let mut best = 0usize;
            let mut best_value = values[(batch * c) * spatial + voxel];
            for class in 1..c {
                let value = values[(batch * c + class) * spatial + voxel];
                if value > best_value {
                    best_value = value;
                    best = class;
                }
            }
            labels.push(best as u8);
        }
    }
    Ok(labels)
}
