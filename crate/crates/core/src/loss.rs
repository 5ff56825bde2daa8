//! Segmentation training loss: per-voxel cross-entropy plus soft Dice,
//! applied to the main output and every deep-supervision output with
//! decreasing weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabilizer added to the soft Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Loss weights for `n` outputs ordered full resolution first: each coarser
/// output gets half the weight of the previous one, normalized to sum 1.
/// For four outputs this is 8/15, 4/15, 2/15, 1/15.
pub fn default_ds_weights(n: usize) -> Vec<f64> {
    let denom = ((1usize << n) - 1) as f64;
    (0..n).map(|r| (1usize << (n - 1 - r)) as f64 / denom).collect()
}

/// Reduce a full-resolution label map to `target` extents by picking the
/// voxel at index i*factor along each axis.
pub fn downsample_labels(labels: &[u8], shape: [usize; 3], target: [usize; 3]) -> Result<Vec<u8>> {
    if labels.len() != shape.iter().product::<usize>() {
        return Err(Error::Usage(format!(
            "label map has {} voxels, shape {shape:?} implies {}",
            labels.len(),
            shape.iter().product::<usize>()
        )));
    }
    let mut factor = [0usize; 3];
    for axis in 0..3 {
        if target[axis] == 0 || shape[axis] % target[axis] != 0 {
            return Err(Error::Usage(format!(
                "target extent {} does not divide label extent {} on axis {axis}",
                target[axis], shape[axis]
            )));
        }
        factor[axis] = shape[axis] / target[axis];
    }
    let mut out = Vec::with_capacity(target.iter().product());
    for d in 0..target[0] {
        for h in 0..target[1] {
            for w in 0..target[2] {
                let src = ((d * factor[0]) * shape[1] + h * factor[1]) * shape[2] + w * factor[2];
                out.push(labels[src]);
            }
        }
    }
    Ok(out)
}

/// One-hot encode labels to match logits of shape (N, C, D, H, W).
fn one_hot_like(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    if labels.len() != n * spatial {
        return Err(Error::Usage(format!(
            "label count {} does not match logits shape {shape:?}",
            labels.len()
        )));
    }
    let mut data = vec![0.0f64; n * c * spatial];
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= c {
            return Err(Error::Usage(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let (batch, voxel) = (i / spatial, i % spatial);
        data[(batch * c + label as usize) * spatial + voxel] = 1.0;
    }
    Ok(Tensor::from_vec_f64(shape, data)?.cast(logits.dtype()))
}

/// Mean negative log-likelihood of the labeled class per voxel.
pub fn cross_entropy_mean(logits: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    let voxels: usize = logits.numel() / logits.shape()[1];
    let log_probs = logits.log_softmax(1)?;
    Ok(log_probs.mul(one_hot)?.sum().mul_scalar(-1.0 / voxels as f64))
}

/// One minus the mean per-class soft Dice between class probabilities and a
/// one-hot target, background included, with a smooth term on both sides of
/// the ratio.
pub fn soft_dice_loss(probs: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    if probs.shape() != one_hot.shape() {
        return Err(Error::Usage(format!(
            "probability shape {:?} does not match target shape {:?}",
            probs.shape(),
            one_hot.shape()
        )));
    }
    let reduce: Vec<usize> = (0..probs.shape().len()).filter(|&d| d != 1).collect();
    let intersection = probs.mul(one_hot)?.sum_axes(&reduce)?;
    let mass = probs.sum_axes(&reduce)?.add(&one_hot.sum_axes(&reduce)?)?;
    let dice = intersection
        .mul_scalar(2.0)
        .add_scalar(DICE_SMOOTH)
        .div(&mass.add_scalar(DICE_SMOOTH))?;
    Ok(dice.mean().mul_scalar(-1.0).add_scalar(1.0))
}

/// Combined loss of one output: cross-entropy plus soft Dice.
fn single_output_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let one_hot = one_hot_like(logits, labels)?;
    let ce = cross_entropy_mean(logits, &one_hot)?;
    let dice = soft_dice_loss(&logits.softmax(1)?, &one_hot)?;
    ce.add(&dice)
}

/// Weighted Dice plus cross-entropy over the main output and any
/// deep-supervision outputs. `outputs` is ordered full resolution first;
/// coarser targets come from nearest-neighbor downsampling of `labels`.
pub fn dice_ce_loss(
    outputs: &[Tensor],
    labels: &[u8],
    label_shape: [usize; 3],
    ds_weights: &[f64],
) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(Error::Usage("loss needs at least one output".into()));
    }
    if outputs.len() != ds_weights.len() {
        return Err(Error::Usage(format!(
            "{} outputs but {} loss weights",
            outputs.len(),
            ds_weights.len()
        )));
    }
    if ds_weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Usage(format!("loss weights must be non-negative, got {ds_weights:?}")));
    }
    let total_weight: f64 = ds_weights.iter().sum();
    if (total_weight - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "loss weights must sum to 1, got {ds_weights:?} (sum {total_weight})"
        )));
    }

    let per_item: usize = label_shape.iter().product();
    let mut total: Option<Tensor> = None;
    for (logits, &weight) in outputs.iter().zip(ds_weights) {
        let shape = logits.shape();
        if shape.len() != 5 {
            return Err(Error::Usage(format!(
                "every output must be rank 5, got {shape:?}"
            )));
        }
        let batch = shape[0];
        if labels.len() != batch * per_item {
            return Err(Error::Usage(format!(
                "{} labels cannot cover {batch} batch items of shape {label_shape:?}",
                labels.len()
            )));
        }
        let target_extents = [shape[2], shape[3], shape[4]];
        let mut target = Vec::with_capacity(batch * target_extents.iter().product::<usize>());
        for item in labels.chunks_exact(per_item) {
            target.extend(downsample_labels(item, label_shape, target_extents)?);
        }
        let term = single_output_loss(logits, &target)?.mul_scalar(weight);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn default_weights_halve_and_sum_to_one() {
        let w = default_ds_weights(4);
        let expected = [8.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0, 1.0 / 15.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for n in 1..6 {
            let w = default_ds_weights(n);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for pair in w.windows(2) {
                assert!((pair[0] - 2.0 * pair[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_downsampling_picks_strided_voxels() {
        // 4x4x4 ramp labels: value = d (the leading axis index).
        let mut labels = vec![0u8; 64];
        for d in 0..4 {
            for i in 0..16 {
                labels[d * 16 + i] = d as u8;
            }
        }
        let down = downsample_labels(&labels, [4, 4, 4], [2, 2, 2]).unwrap();
        assert_eq!(down, vec![0, 0, 0, 0, 2, 2, 2, 2]);
        let same = downsample_labels(&labels, [4, 4, 4], [4, 4, 4]).unwrap();
        assert_eq!(same, labels);
        assert!(downsample_labels(&labels, [4, 4, 4], [3, 2, 2]).is_err());
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let logits = Tensor::zeros(&[1, 2, 2, 2, 2], DType::F64);
        let labels = vec![0u8, 1, 0, 1, 1, 0, 1, 0];
        let one_hot = one_hot_like(&logits, &labels).unwrap();
        let ce = cross_entropy_mean(&logits, &one_hot).unwrap();
        assert!((ce.item_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn strong_correct_logits_give_small_loss() {
        let labels = vec![0u8, 1, 1, 0, 1, 0, 0, 1];
        let mut data = vec![0.0f64; 16];
        for (i, &l) in labels.iter().enumerate() {
            data[l as usize * 8 + i] = 12.0; // (1, 2, 2, 2, 2) layout
        }
        let logits = Tensor::from_vec_f64(&[1, 2, 2, 2, 2], data).unwrap();
        let loss = dice_ce_loss(&[logits], &labels, [2, 2, 2], &[1.0]).unwrap();
        let v = loss.item_f64().unwrap();
        assert!((0.0..0.05).contains(&v), "loss {v}");
    }

    /// Half-overlapping constant one-hot prediction: class 1 occupies 8
    /// voxels in both maps with 4 shared, so its Dice is 2*4/(8+8).
    #[test]
    fn soft_dice_matches_set_arithmetic() {
        let size = 16usize; // 1 x 2 x 16 voxels flattened as rank 5
        let mut probs = vec![0.0f64; 2 * size];
        let mut target = vec![0.0f64; 2 * size];
        for v in 0..size {
            let pred_fg = (0..8).contains(&v);
            let true_fg = (4..12).contains(&v);
            probs[if pred_fg { size + v } else { v }] = 1.0;
            target[if true_fg { size + v } else { v }] = 1.0;
        }
        let probs = Tensor::from_vec_f64(&[1, 2, 16, 1, 1], probs).unwrap();
        let target = Tensor::from_vec_f64(&[1, 2, 16, 1, 1], target).unwrap();
        let loss = soft_dice_loss(&probs, &target).unwrap().item_f64().unwrap();

        let dice_fg = (2.0 * 4.0 + DICE_SMOOTH) / (8.0 + 8.0 + DICE_SMOOTH);
        let dice_bg = (2.0 * 4.0 + DICE_SMOOTH) / (8.0 + 8.0 + DICE_SMOOTH);
        let expected = 1.0 - 0.5 * (dice_fg + dice_bg);
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn weight_validation_errors() {
        let logits = Tensor::zeros(&[1, 2, 2, 2, 2], DType::F64);
        let labels = vec![0u8; 8];
        let one = std::slice::from_ref(&logits);
        assert!(dice_ce_loss(one, &labels, [2, 2, 2], &[0.5, 0.5]).is_err());
        assert!(dice_ce_loss(one, &labels, [2, 2, 2], &[0.9]).is_err());
        assert!(dice_ce_loss(one, &labels, [2, 2, 2], &[-1.0]).is_err());
        assert!(dice_ce_loss(&[], &labels, [2, 2, 2], &[]).is_err());
    }

    #[test]
    fn deep_supervision_combines_weighted_terms() {
        let full = Tensor::zeros(&[1, 2, 4, 4, 4], DType::F64);
        let half = Tensor::zeros(&[1, 2, 2, 2, 2], DType::F64);
        let labels = vec![0u8; 64];
        let w = default_ds_weights(2);
        let combined = dice_ce_loss(&[full.clone(), half.clone()], &labels, [4, 4, 4], &w)
            .unwrap()
            .item_f64()
            .unwrap();
        let l_full = dice_ce_loss(&[full], &labels, [4, 4, 4], &[1.0])
            .unwrap()
            .item_f64()
            .unwrap();
        let l_half = dice_ce_loss(&[half], &[0u8; 8], [2, 2, 2], &[1.0])
            .unwrap()
            .item_f64()
            .unwrap();
        let expected = w[0] * l_full + w[1] * l_half;
        assert!((combined - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..2 * 2 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Tensor::from_vec_f64(&[2, 2, 2, 2, 2], data.clone()).unwrap();
        logits.set_requires_grad(true);
        let labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2u8)).collect();

        let loss = dice_ce_loss(std::slice::from_ref(&logits), &labels, [2, 2, 2], &[1.0]).unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads.get_f64(&logits).unwrap();

        let h = 1e-6;
        for i in 0..data.len() {
            let eval = |delta: f64| {
                let mut pert = data.clone();
                pert[i] += delta;
                let t = Tensor::from_vec_f64(&[2, 2, 2, 2, 2], pert).unwrap();
                crate::tensor::no_grad(|| {
                    dice_ce_loss(&[t], &labels, [2, 2, 2], &[1.0])
                        .unwrap()
                        .item_f64()
                        .unwrap()
                })
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (analytic[i] - numeric).abs() <= 1e-4 * (1.0 + numeric.abs()),
                "logit {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
}
