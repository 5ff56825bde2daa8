//! Group normalization with per-channel affine parameters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dispatch_dtype, Buffer, Element, Tensor};

/// Normalize each (sample, channel group) of an N×C×... tensor to zero mean
/// and unit variance (biased, stabilized by `eps`), then apply the
/// per-channel affine `gamma * x + beta`.
pub fn group_norm(
    input: &Tensor,
    num_groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if input.shape().len() < 2 {
        return Err(Error::Config(format!(
            "group_norm: input must be at least rank 2 (N x C x ...), got {:?}",
            input.shape()
        )));
    }
    let batch = input.shape()[0];
    let channels = input.shape()[1];
    if num_groups == 0 || channels % num_groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: num_groups {num_groups} must divide channel count {channels}"
        )));
    }
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::Config(format!(
            "group_norm: gamma/beta must have shape [{channels}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if gamma.dtype() != input.dtype() || beta.dtype() != input.dtype() {
        return Err(Error::Config(format!(
            "group_norm: dtype mismatch, input {} vs gamma {} / beta {}",
            input.dtype(),
            gamma.dtype(),
            beta.dtype()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("group_norm: eps must be positive, got {eps}")));
    }

    let spatial: usize = input.shape()[2..].iter().product();
    let ch_per_group = channels / num_groups;
    let group_len = ch_per_group * spatial;

    // Forward, saving per-(sample, group) mean and inverse stddev for backward.
    let gamma_buf = gamma.data_clone();
    let beta_buf = beta.data_clone();
    let (out, mean_buf, invstd_buf) = input.with_data(|x| {
        dispatch_dtype!(input.dtype(), E, {
            let x = E::slice(x);
            let g = E::slice(&gamma_buf);
            let b = E::slice(&beta_buf);
            let eps = E::from_f64(eps);
            let mut out = vec![E::ZERO; x.len()];
            let mut mean = vec![E::ZERO; batch * num_groups];
            let mut invstd = vec![E::ZERO; batch * num_groups];
            out.par_chunks_mut(group_len)
                .zip(mean.par_iter_mut())
                .zip(invstd.par_iter_mut())
                .enumerate()
                .for_each(|(idx, ((out_g, mean_g), invstd_g))| {
                    let n = idx / num_groups;
                    let grp = idx % num_groups;
                    let base = (n * channels + grp * ch_per_group) * spatial;
                    let xg = &x[base..base + group_len];
                    let inv_len = E::from_f64(1.0 / group_len as f64);
                    let mut sum = E::ZERO;
                    for &v in xg {
                        sum += v;
                    }
                    let m = sum * inv_len;
                    let mut var = E::ZERO;
                    for &v in xg {
                        let d = v - m;
                        var += d * d;
                    }
                    var *= inv_len;
                    let is = E::ONE / (var + eps).sqrt();
                    *mean_g = m;
                    *invstd_g = is;
                    for (i, (o, &v)) in out_g.iter_mut().zip(xg).enumerate() {
                        let c = grp * ch_per_group + i / spatial;
                        *o = g[c] * ((v - m) * is) + b[c];
                    }
                });
            (E::into_buffer(out), E::into_buffer(mean), E::into_buffer(invstd))
        })
    });

    let shape = input.shape().to_vec();
    let saved_mean = mean_buf;
    let saved_invstd = invstd_buf;
    Ok(Tensor::from_op(
        shape,
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |up, parents, needs| {
            backward_group_norm(
                up,
                parents,
                needs,
                &saved_mean,
                &saved_invstd,
                batch,
                channels,
                num_groups,
                spatial,
            )
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn backward_group_norm(
    up: &Buffer,
    parents: &[Tensor],
    needs: &[bool],
    saved_mean: &Buffer,
    saved_invstd: &Buffer,
    batch: usize,
    channels: usize,
    num_groups: usize,
    spatial: usize,
) -> Vec<Option<Buffer>> {
    let ch_per_group = channels / num_groups;
    let group_len = ch_per_group * spatial;
    let x_buf = parents[0].data_clone();
    let gamma_buf = parents[1].data_clone();

    dispatch_dtype!(up.dtype(), E, {
        let u = E::slice(up);
        let x = E::slice(&x_buf);
        let gamma = E::slice(&gamma_buf);
        let mean = E::slice(saved_mean);
        let invstd = E::slice(saved_invstd);

        // dgamma[c] = sum over (n, spatial) of up * xhat; dbeta[c] = sum of up.
        let (dgamma, dbeta) = if needs[1] || needs[2] {
            let pairs: Vec<(E, E)> = (0..channels)
                .into_par_iter()
                .map(|c| {
                    let grp = c / ch_per_group;
                    let mut dg = E::ZERO;
                    let mut db = E::ZERO;
                    for n in 0..batch {
                        let m = mean[n * num_groups + grp];
                        let is = invstd[n * num_groups + grp];
                        let base = (n * channels + c) * spatial;
                        for i in 0..spatial {
                            let xhat = (x[base + i] - m) * is;
                            dg += u[base + i] * xhat;
                            db += u[base + i];
                        }
                    }
                    (dg, db)
                })
                .collect();
            let dg: Vec<E> = pairs.iter().map(|p| p.0).collect();
            let db: Vec<E> = pairs.iter().map(|p| p.1).collect();
            (Some(E::into_buffer(dg)), Some(E::into_buffer(db)))
        } else {
            (None, None)
        };

        // dx = invstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        // with dxhat = up * gamma and means over the group.
        let dx = needs[0].then(|| {
            let mut dx = vec![E::ZERO; u.len()];
            dx.par_chunks_mut(group_len).enumerate().for_each(|(idx, dx_g)| {
                let n = idx / num_groups;
                let grp = idx % num_groups;
                let m = mean[idx];
                let is = invstd[idx];
                let base = (n * channels + grp * ch_per_group) * spatial;
                let inv_len = E::from_f64(1.0 / group_len as f64);
                let mut sum_dxhat = E::ZERO;
                let mut sum_dxhat_xhat = E::ZERO;
                for i in 0..group_len {
                    let c = grp * ch_per_group + i / spatial;
                    let dxhat = u[base + i] * gamma[c];
                    let xhat = (x[base + i] - m) * is;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let mean_dxhat = sum_dxhat * inv_len;
                let mean_dxhat_xhat = sum_dxhat_xhat * inv_len;
                for (i, slot) in dx_g.iter_mut().enumerate() {
                    let c = grp * ch_per_group + i / spatial;
                    let dxhat = u[base + i] * gamma[c];
                    let xhat = (x[base + i] - m) * is;
                    *slot = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            });
            E::into_buffer(dx)
        });

        vec![dx, dgamma, dbeta]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, numerical_grad, seeded_vec_f64};
    use crate::tensor::DType;

    fn unit_affine(channels: usize, dtype: DType) -> (Tensor, Tensor) {
        (Tensor::ones(&[channels], dtype), Tensor::zeros(&[channels], dtype))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[1, 2, 2, 2, 2], DType::F32, 7.5);
        let (g, b) = unit_affine(2, DType::F32);
        let y = group_norm(&x, 2, &g, &b, 1e-5).unwrap();
        assert_eq!(y.to_f64_vec(), vec![0.0; 16]);
    }

    #[test]
    fn two_point_distribution_hits_affine_values() {
        // Within one channel the values {-1, +1} have mean 0, variance 1, so
        // the normalized values are {-1, +1} and gamma=2, beta=3 maps them
        // to {1, 5} (up to the eps in the denominator).
        let x = Tensor::from_vec_f64(&[1, 1, 1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let g = Tensor::from_vec_f64(&[1], vec![2.0]).unwrap();
        let b = Tensor::from_vec_f64(&[1], vec![3.0]).unwrap();
        let y = group_norm(&x, 1, &g, &b, 1e-5).unwrap().to_f64_vec();
        assert_close(y[0], 1.0, 1e-4);
        assert_close(y[1], 5.0, 1e-4);
        assert_close(y[2], 1.0, 1e-4);
        assert_close(y[3], 5.0, 1e-4);
    }

    #[test]
    fn normalized_groups_have_tiny_mean() {
        let x = Tensor::from_vec_f64(&[2, 4, 3, 2, 2], seeded_vec_f64(5, 2 * 4 * 12)).unwrap();
        let (g, b) = unit_affine(4, DType::F64);
        let y = group_norm(&x, 4, &g, &b, 1e-5).unwrap().to_f64_vec();
        let spatial = 12;
        for n in 0..2 {
            for c in 0..4 {
                let base = (n * 4 + c) * spatial;
                let mean: f64 = y[base..base + spatial].iter().sum::<f64>() / spatial as f64;
                assert!(mean.abs() <= 1e-6, "group ({n},{c}) mean {mean}");
            }
        }
    }

    #[test]
    fn invariant_to_per_group_shift_and_scale() {
        // Variance well above eps so the stabilizer does not mask the
        // invariance being tested.
        let data: Vec<f64> = seeded_vec_f64(9, 16).into_iter().map(|v| v * 5.0).collect();
        let x = Tensor::from_vec_f64(&[1, 2, 2, 2, 2], data).unwrap();
        let (g, b) = unit_affine(2, DType::F64);
        let y0 = group_norm(&x, 2, &g, &b, 1e-5).unwrap().to_f64_vec();
        let shifted = x.mul_scalar(3.7).add_scalar(-2.25);
        let y1 = group_norm(&shifted, 2, &g, &b, 1e-5).unwrap().to_f64_vec();
        for (a, c) in y0.iter().zip(&y1) {
            assert_close(*a, *c, 1e-5);
        }
    }

    #[test]
    fn rejects_bad_group_count_and_affine_shape() {
        let x = Tensor::zeros(&[1, 4, 2, 2, 2], DType::F32);
        let (g, b) = unit_affine(4, DType::F32);
        assert!(matches!(group_norm(&x, 3, &g, &b, 1e-5), Err(Error::Config(_))));
        let (g2, b2) = unit_affine(2, DType::F32);
        assert!(matches!(group_norm(&x, 2, &g2, &b2, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = [2usize, 4, 2, 2, 2];
        let n: usize = shape.iter().product();
        let x = Tensor::from_vec_f64(&shape, seeded_vec_f64(21, n)).unwrap().requiring_grad();
        let g = Tensor::from_vec_f64(&[4], vec![1.5, -0.5, 2.0, 0.75]).unwrap().requiring_grad();
        let b = Tensor::from_vec_f64(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap().requiring_grad();
        let w = Tensor::from_vec_f64(&shape, seeded_vec_f64(23, n)).unwrap();
        // channel-wise groups, the network's configuration
        let loss = |_: &Tensor| {
            group_norm(&x, 4, &g, &b, 1e-5).unwrap().mul(&w).unwrap().sum()
        };
        let grads = loss(&x).backward().unwrap();
        for tensor in [&x, &g, &b] {
            let numeric = numerical_grad(tensor, &loss);
            let analytic = grads.get_f64(tensor).unwrap();
            for (a, nn) in analytic.iter().zip(&numeric) {
                assert_close(*a, *nn, 1e-6);
            }
        }
    }
}
