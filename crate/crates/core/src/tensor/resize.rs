//! Trilinear resizing of the spatial axes of an N×C×D×H×W tensor.
//!
//! Implemented as three separable one-axis linear interpolation passes; an
//! axis whose target extent equals its source extent is skipped entirely, so
//! resizing to the same extents is a bitwise copy.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dispatch_dtype, Element, Tensor};

/// Resize the three trailing spatial axes to `target_spatial` by separable
/// linear interpolation. With `align_corners` the first and last samples map
/// exactly onto each other; otherwise samples align at pixel centers.
pub fn trilinear_resize(
    input: &Tensor,
    target_spatial: [usize; 3],
    align_corners: bool,
) -> Result<Tensor> {
    if input.shape().len() != 5 {
        return Err(Error::Config(format!(
            "trilinear_resize: input must be rank 5 (N x C x D x H x W), got {:?}",
            input.shape()
        )));
    }
    if target_spatial.contains(&0) {
        return Err(Error::Config(format!(
            "trilinear_resize: target extents must be >= 1, got {target_spatial:?}"
        )));
    }
    let mut current = input.clone();
    for (axis, &target) in (2..5).zip(target_spatial.iter()) {
        current = resize_axis(&current, axis, target, align_corners)?;
    }
    if current.id() == input.id() {
        // No axis changed; return a graph-preserving copy so the caller owns
        // distinct storage.
        return Ok(identity_copy(input));
    }
    Ok(current)
}

fn identity_copy(input: &Tensor) -> Tensor {
    Tensor::from_op(
        input.shape().to_vec(),
        input.data_clone(),
        vec![input.clone()],
        Box::new(|up, _parents, needs| vec![needs[0].then(|| up.clone())]),
    )
}

/// Source taps for one output position: two indices and their weights.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn build_taps(source: usize, target: usize, align_corners: bool) -> Vec<Tap> {
    (0..target)
        .map(|t| {
            let src = if align_corners {
                if target == 1 {
                    (source as f64 - 1.0) / 2.0
                } else {
                    t as f64 * (source as f64 - 1.0) / (target as f64 - 1.0)
                }
            } else {
                ((t as f64 + 0.5) * source as f64 / target as f64 - 0.5)
                    .clamp(0.0, source as f64 - 1.0)
            };
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(source - 1);
            let frac = src - lo as f64;
            Tap { lo, hi, w_lo: 1.0 - frac, w_hi: frac }
        })
        .collect()
}

fn resize_axis(input: &Tensor, axis: usize, target: usize, align_corners: bool) -> Result<Tensor> {
    let shape = input.shape().to_vec();
    let source = shape[axis];
    if source == target {
        return Ok(input.clone());
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = build_taps(source, target, align_corners);

    let out = input.with_data(|buf| {
        dispatch_dtype!(input.dtype(), E, {
            let x = E::slice(buf);
            let taps_e: Vec<(usize, usize, E, E)> = taps
                .iter()
                .map(|t| (t.lo, t.hi, E::from_f64(t.w_lo), E::from_f64(t.w_hi)))
                .collect();
            let mut out = vec![E::ZERO; outer * target * inner];
            out.par_chunks_mut(target * inner).enumerate().for_each(|(o, out_slab)| {
                let in_base = o * source * inner;
                for (t, &(lo, hi, w_lo, w_hi)) in taps_e.iter().enumerate() {
                    let lo_row = &x[in_base + lo * inner..][..inner];
                    let hi_row = &x[in_base + hi * inner..][..inner];
                    let dst = &mut out_slab[t * inner..][..inner];
                    for ((d, &a), &b) in dst.iter_mut().zip(lo_row).zip(hi_row) {
                        *d = w_lo * a + w_hi * b;
                    }
                }
            });
            E::into_buffer(out)
        })
    });

    let mut out_shape = shape.clone();
    out_shape[axis] = target;
    let taps_back = taps;
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![input.clone()],
        Box::new(move |up, _parents, needs| {
            // Adjoint scatter: each output position sends its weighted
            // gradient back to its two source taps, in output order.
            let g = needs[0].then(|| {
                dispatch_dtype!(up.dtype(), E, {
                    let u = E::slice(up);
                    let mut grad = vec![E::ZERO; outer * source * inner];
                    grad.par_chunks_mut(source * inner).enumerate().for_each(|(o, grad_slab)| {
                        let up_base = o * target * inner;
                        for (t, tap) in taps_back.iter().enumerate() {
                            let w_lo = E::from_f64(tap.w_lo);
                            let w_hi = E::from_f64(tap.w_hi);
                            for i in 0..inner {
                                let uv = u[up_base + t * inner + i];
                                grad_slab[tap.lo * inner + i] += w_lo * uv;
                                grad_slab[tap.hi * inner + i] += w_hi * uv;
                            }
                        }
                    });
                    E::into_buffer(grad)
                })
            });
            vec![g]
        }),
    ))
}
