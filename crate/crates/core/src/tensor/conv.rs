//! Grouped 3D convolution and its transpose, forward and backward.
//!
//! The direct nested-loop algorithm is the reference. Every output element
//! accumulates its products in one canonical order (input channel within the
//! group, then kd, kh, kw, with the bias added last), and the faster
//! pointwise path reproduces that order exactly, so results are bitwise
//! independent of which path ran and of the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dispatch_dtype, Element, Tensor};

/// Stride, padding, and group count of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3], groups: usize) -> ConvSpec {
        ConvSpec { stride, padding, groups }
    }

    /// Same stride and padding on every axis.
    pub fn uniform(stride: usize, padding: usize, groups: usize) -> ConvSpec {
        ConvSpec::new([stride; 3], [padding; 3], groups)
    }

    /// 1×1×1 convolution over channels, stride 1, no padding.
    pub fn pointwise() -> ConvSpec {
        ConvSpec::uniform(1, 0, 1)
    }
}

/// How a transposed convolution picks its output extents, which the stride
/// alone leaves ambiguous.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputAlignment {
    /// Exactly 2× the input extents: zero-insertion with symmetric padding
    /// plus a single trailing output pad. Requires 0 ≤ 2·(1+pad)−k < stride.
    Double,
    /// Explicit output extents; convolving them with the same spec must
    /// reproduce the input extents.
    Shape([usize; 3]),
}

/// Resolved extents of one convolution, shared by all kernels.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    in_sp: [usize; 3],
    out_sp: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvDims {
    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }
    fn in_spatial(&self) -> usize {
        self.in_sp.iter().product()
    }
    fn out_spatial(&self) -> usize {
        self.out_sp.iter().product()
    }
    fn k_volume(&self) -> usize {
        self.k.iter().product()
    }
}

fn validate_common(
    op: &str,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<()> {
    if input.shape().len() != 5 {
        return Err(Error::Config(format!(
            "{op}: input must be rank 5 (N x C x D x H x W), got {:?}",
            input.shape()
        )));
    }
    if weight.shape().len() != 5 {
        return Err(Error::Config(format!(
            "{op}: weight must be rank 5, got {:?}",
            weight.shape()
        )));
    }
    if weight.dtype() != input.dtype() {
        return Err(Error::Config(format!(
            "{op}: dtype mismatch, input {} vs weight {}",
            input.dtype(),
            weight.dtype()
        )));
    }
    for &k in &weight.shape()[2..] {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "{op}: kernel extents must be odd, got {:?}",
                &weight.shape()[2..]
            )));
        }
    }
    if spec.groups == 0 {
        return Err(Error::Config(format!("{op}: groups must be >= 1")));
    }
    if spec.stride.contains(&0) {
        return Err(Error::Config(format!(
            "{op}: stride must be >= 1 per axis, got {:?}",
            spec.stride
        )));
    }
    if let Some(b) = bias {
        if b.dtype() != input.dtype() {
            return Err(Error::Config(format!(
                "{op}: dtype mismatch, input {} vs bias {}",
                input.dtype(),
                b.dtype()
            )));
        }
    }
    Ok(())
}

fn check_bias_len(op: &str, bias: Option<&Tensor>, expected: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [expected] {
            return Err(Error::Config(format!(
                "{op}: bias must have shape [{expected}], got {:?}",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Grouped 3D convolution.
///
/// `input` is N×Cin×D×H×W, `weight` is Cout×(Cin/groups)×kd×kh×kw with odd
/// kernel extents, `bias` has length Cout. Output spatial extent per axis is
/// `(in + 2·pad − k)/stride + 1` (floor).
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    validate_common("conv3d", input, weight, bias, spec)?;
    let cin = input.shape()[1];
    let cout = weight.shape()[0];
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::Config(format!(
            "conv3d: groups {} must divide input channels {} and output channels {}",
            spec.groups, cin, cout
        )));
    }
    if weight.shape()[1] != cin / spec.groups {
        return Err(Error::Config(format!(
            "conv3d: weight expects {} input channels per group, input provides {}",
            weight.shape()[1],
            cin / spec.groups
        )));
    }
    check_bias_len("conv3d", bias, cout)?;

    let in_sp = [input.shape()[2], input.shape()[3], input.shape()[4]];
    let k = [weight.shape()[2], weight.shape()[3], weight.shape()[4]];
    let mut out_sp = [0usize; 3];
    for a in 0..3 {
        let padded = in_sp[a] + 2 * spec.padding[a];
        if padded < k[a] {
            return Err(Error::Config(format!(
                "conv3d: axis {a} extent {} with padding {} is smaller than kernel {}",
                in_sp[a], spec.padding[a], k[a]
            )));
        }
        out_sp[a] = (padded - k[a]) / spec.stride[a] + 1;
    }
    let dims = ConvDims {
        batch: input.shape()[0],
        cin,
        cout,
        groups: spec.groups,
        in_sp,
        out_sp,
        k,
        stride: spec.stride,
        pad: spec.padding,
    };

    let bias_buf = bias.map(|b| b.data_clone());
    let out = input.with_data(|x| {
        weight.with_data(|w| {
            dispatch_dtype!(input.dtype(), E, {
                let b = bias_buf.as_ref().map(E::slice);
                E::into_buffer(conv_forward_raw::<E>(E::slice(x), E::slice(w), b, &dims))
            })
        })
    });

    let out_shape = vec![dims.batch, dims.cout, out_sp[0], out_sp[1], out_sp[2]];
    let mut parents = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |up, parents, needs| {
            let gx = needs[0].then(|| {
                // Adjoint: gather-form transposed convolution with the same
                // weight, producing exactly the input extents.
                let td = ConvDims {
                    batch: dims.batch,
                    cin: dims.cout,
                    cout: dims.cin,
                    groups: dims.groups,
                    in_sp: dims.out_sp,
                    out_sp: dims.in_sp,
                    k: dims.k,
                    stride: dims.stride,
                    pad: dims.pad,
                };
                parents[1].with_data(|w| {
                    dispatch_dtype!(up.dtype(), E, {
                        E::into_buffer(convt_forward_raw::<E>(E::slice(up), E::slice(w), None, &td))
                    })
                })
            });
            let gw = needs[1].then(|| {
                parents[0].with_data(|x| {
                    dispatch_dtype!(up.dtype(), E, {
                        E::into_buffer(conv_grad_weight_raw::<E>(E::slice(x), E::slice(up), &dims))
                    })
                })
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let gb = needs[2].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        E::into_buffer(grad_bias_raw::<E>(
                            E::slice(up),
                            dims.batch,
                            dims.cout,
                            dims.out_spatial(),
                        ))
                    })
                });
                grads.push(gb);
            }
            grads
        }),
    ))
}

/// Grouped transposed 3D convolution (gather form).
///
/// `input` is N×Cin×D×H×W, `weight` is Cin×(Cout/groups)×kd×kh×kw. Output
/// element `j` sums `input[q]·weight[k]` over kernel offsets with
/// `q = (j + pad − k)/stride` integral and in range, which makes this op the
/// exact adjoint of [`conv3d`] with the same weight and spec.
pub fn conv3d_transposed(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    alignment: OutputAlignment,
) -> Result<Tensor> {
    validate_common("conv3d_transposed", input, weight, bias, spec)?;
    let cin = input.shape()[1];
    if weight.shape()[0] != cin {
        return Err(Error::Config(format!(
            "conv3d_transposed: weight expects {} input channels, input provides {}",
            weight.shape()[0],
            cin
        )));
    }
    if cin % spec.groups != 0 {
        return Err(Error::Config(format!(
            "conv3d_transposed: groups {} must divide input channels {}",
            spec.groups, cin
        )));
    }
    let cout = weight.shape()[1] * spec.groups;
    check_bias_len("conv3d_transposed", bias, cout)?;

    let in_sp = [input.shape()[2], input.shape()[3], input.shape()[4]];
    let k = [weight.shape()[2], weight.shape()[3], weight.shape()[4]];
    let mut out_sp = [0usize; 3];
    for a in 0..3 {
        let (i, s, p, ka) = (in_sp[a] as i64, spec.stride[a] as i64, spec.padding[a] as i64, k[a] as i64);
        // Fully covered extent before any trailing output pad.
        let natural = (i - 1) * s - 2 * p + ka;
        let target = match alignment {
            OutputAlignment::Double => 2 * i,
            OutputAlignment::Shape(sp) => sp[a] as i64,
        };
        if target < 1 {
            return Err(Error::Config(format!(
                "conv3d_transposed: axis {a} target extent {target} must be >= 1"
            )));
        }
        match alignment {
            OutputAlignment::Double => {
                let extra = target - natural;
                if extra < 0 || extra >= s {
                    return Err(Error::Config(format!(
                        "conv3d_transposed: cannot double axis {a} (extent {i}) with stride {s}, \
                         padding {p}, kernel {ka}: trailing pad {extra} outside [0, {s})"
                    )));
                }
            }
            OutputAlignment::Shape(_) => {
                let padded = target + 2 * p;
                if padded < ka || (padded - ka) / s + 1 != i {
                    return Err(Error::Config(format!(
                        "conv3d_transposed: axis {a} target extent {target} is not consistent \
                         with input extent {i} under stride {s}, padding {p}, kernel {ka}"
                    )));
                }
            }
        }
        out_sp[a] = target as usize;
    }
    let dims = ConvDims {
        batch: input.shape()[0],
        cin,
        cout,
        groups: spec.groups,
        in_sp,
        out_sp,
        k,
        stride: spec.stride,
        pad: spec.padding,
    };

    let bias_buf = bias.map(|b| b.data_clone());
    let out = input.with_data(|x| {
        weight.with_data(|w| {
            dispatch_dtype!(input.dtype(), E, {
                let b = bias_buf.as_ref().map(E::slice);
                E::into_buffer(convt_forward_raw::<E>(E::slice(x), E::slice(w), b, &dims))
            })
        })
    });

    let out_shape = vec![dims.batch, dims.cout, out_sp[0], out_sp[1], out_sp[2]];
    let mut parents = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |up, parents, needs| {
            let gx = needs[0].then(|| {
                // Adjoint of the gather form is the direct convolution with
                // the same weight read in Cout-major order.
                let cd = ConvDims {
                    batch: dims.batch,
                    cin: dims.cout,
                    cout: dims.cin,
                    groups: dims.groups,
                    in_sp: dims.out_sp,
                    out_sp: dims.in_sp,
                    k: dims.k,
                    stride: dims.stride,
                    pad: dims.pad,
                };
                parents[1].with_data(|w| {
                    dispatch_dtype!(up.dtype(), E, {
                        E::into_buffer(conv_forward_raw::<E>(E::slice(up), E::slice(w), None, &cd))
                    })
                })
            });
            let gw = needs[1].then(|| {
                parents[0].with_data(|x| {
                    dispatch_dtype!(up.dtype(), E, {
                        E::into_buffer(convt_grad_weight_raw::<E>(E::slice(x), E::slice(up), &dims))
                    })
                })
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let gb = needs[2].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        E::into_buffer(grad_bias_raw::<E>(
                            E::slice(up),
                            dims.batch,
                            dims.cout,
                            dims.out_spatial(),
                        ))
                    })
                });
                grads.push(gb);
            }
            grads
        }),
    ))
}

/// Direct convolution over one (sample, output-channel) slab, canonical
/// accumulation order.
fn conv_slab_direct<E: Element>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    d: &ConvDims,
    n: usize,
    co: usize,
    out_slab: &mut [E],
) {
    let [ind, inh, inw] = d.in_sp;
    let [od, oh, ow] = d.out_sp;
    let [kd, kh, kw] = d.k;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let cinpg = d.cin_per_group();
    let in_spatial = d.in_spatial();
    let k_vol = d.k_volume();
    let ci0 = (co / d.cout_per_group()) * cinpg;

    let mut idx = 0;
    for odi in 0..od {
        let zb = (odi * sd) as isize - pd as isize;
        for ohi in 0..oh {
            let yb = (ohi * sh) as isize - ph as isize;
            for owi in 0..ow {
                let xb = (owi * sw) as isize - pw as isize;
                let mut acc = E::ZERO;
                for ci in 0..cinpg {
                    let x_ch = (n * d.cin + ci0 + ci) * in_spatial;
                    let w_ch = (co * cinpg + ci) * k_vol;
                    for kz in 0..kd {
                        let z = zb + kz as isize;
                        if z < 0 || z >= ind as isize {
                            continue;
                        }
                        for ky in 0..kh {
                            let y = yb + ky as isize;
                            if y < 0 || y >= inh as isize {
                                continue;
                            }
                            let x_row = x_ch + (z as usize * inh + y as usize) * inw;
                            let w_row = w_ch + (kz * kh + ky) * kw;
                            for kx in 0..kw {
                                let xc = xb + kx as isize;
                                if xc < 0 || xc >= inw as isize {
                                    continue;
                                }
                                acc += x[x_row + xc as usize] * w[w_row + kx];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    acc += b[co];
                }
                out_slab[idx] = acc;
                idx += 1;
            }
        }
    }
}

fn conv_forward_raw<E: Element>(x: &[E], w: &[E], b: Option<&[E]>, d: &ConvDims) -> Vec<E> {
    let out_spatial = d.out_spatial();
    let in_spatial = d.in_spatial();
    let cinpg = d.cin_per_group();
    let pointwise = d.k == [1, 1, 1] && d.stride == [1, 1, 1] && d.pad == [0, 0, 0];
    let mut out = vec![E::ZERO; d.batch * d.cout * out_spatial];
    out.par_chunks_mut(out_spatial)
        .enumerate()
        .for_each(|(slab, out_slab)| {
            let n = slab / d.cout;
            let co = slab % d.cout;
            if pointwise {
                // Streaming axpy over input channels; per output element the
                // additions land in the same (channel, then bias) order as
                // the direct loop, so the result is bitwise identical.
                let ci0 = (co / d.cout_per_group()) * cinpg;
                for ci in 0..cinpg {
                    let wv = w[co * cinpg + ci];
                    let xs = &x[(n * d.cin + ci0 + ci) * in_spatial..][..in_spatial];
                    for (o, &xv) in out_slab.iter_mut().zip(xs) {
                        *o += wv * xv;
                    }
                }
                if let Some(b) = b {
                    let bv = b[co];
                    for o in out_slab.iter_mut() {
                        *o += bv;
                    }
                }
            } else {
                conv_slab_direct(x, w, b, d, n, co, out_slab);
            }
        });
    out
}

/// Gather-form transposed convolution, canonical accumulation order.
fn convt_forward_raw<E: Element>(x: &[E], w: &[E], b: Option<&[E]>, d: &ConvDims) -> Vec<E> {
    let [ind, inh, inw] = d.in_sp;
    let [jd, jh, jw] = d.out_sp;
    let [kd, kh, kw] = d.k;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let cinpg = d.cin_per_group();
    let coutpg = d.cout_per_group();
    let in_spatial = d.in_spatial();
    let out_spatial = d.out_spatial();
    let k_vol = d.k_volume();

    let mut out = vec![E::ZERO; d.batch * d.cout * out_spatial];
    out.par_chunks_mut(out_spatial)
        .enumerate()
        .for_each(|(slab, out_slab)| {
            let n = slab / d.cout;
            let co = slab % d.cout;
            let g = co / coutpg;
            let co_in_group = co % coutpg;
            let ci0 = g * cinpg;
            let mut idx = 0;
            for jdi in 0..jd {
                for jhi in 0..jh {
                    for jwi in 0..jw {
                        let mut acc = E::ZERO;
                        for ci in 0..cinpg {
                            let x_ch = (n * d.cin + ci0 + ci) * in_spatial;
                            let w_ch = ((ci0 + ci) * coutpg + co_in_group) * k_vol;
                            for kz in 0..kd {
                                let t = jdi as isize + pd as isize - kz as isize;
                                if t < 0 || t % sd as isize != 0 {
                                    continue;
                                }
                                let qd = (t / sd as isize) as usize;
                                if qd >= ind {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let u = jhi as isize + ph as isize - ky as isize;
                                    if u < 0 || u % sh as isize != 0 {
                                        continue;
                                    }
                                    let qh = (u / sh as isize) as usize;
                                    if qh >= inh {
                                        continue;
                                    }
                                    let x_row = x_ch + (qd * inh + qh) * inw;
                                    let w_row = w_ch + (kz * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let v = jwi as isize + pw as isize - kx as isize;
                                        if v < 0 || v % sw as isize != 0 {
                                            continue;
                                        }
                                        let qw = (v / sw as isize) as usize;
                                        if qw >= inw {
                                            continue;
                                        }
                                        acc += x[x_row + qw] * w[w_row + kx];
                                    }
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc += b[co];
                        }
                        out_slab[idx] = acc;
                        idx += 1;
                    }
                }
            }
        });
    out
}

/// Weight gradient of [`conv3d`]: for each (Cout, Cin/g) plane, one pass over
/// the output in canonical (n, od, oh, ow) order feeding k³ accumulators.
fn conv_grad_weight_raw<E: Element>(x: &[E], up: &[E], d: &ConvDims) -> Vec<E> {
    let [ind, inh, inw] = d.in_sp;
    let [od, oh, ow] = d.out_sp;
    let [kd, kh, kw] = d.k;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let cinpg = d.cin_per_group();
    let coutpg = d.cout_per_group();
    let in_spatial = d.in_spatial();
    let out_spatial = d.out_spatial();
    let k_vol = d.k_volume();

    let mut gw = vec![E::ZERO; d.cout * cinpg * k_vol];
    gw.par_chunks_mut(k_vol).enumerate().for_each(|(plane, acc)| {
        let co = plane / cinpg;
        let ci = plane % cinpg;
        let ci_glob = (co / coutpg) * cinpg + ci;
        for n in 0..d.batch {
            let up_ch = (n * d.cout + co) * out_spatial;
            let x_ch = (n * d.cin + ci_glob) * in_spatial;
            let mut idx = 0;
            for odi in 0..od {
                let zb = (odi * sd) as isize - pd as isize;
                for ohi in 0..oh {
                    let yb = (ohi * sh) as isize - ph as isize;
                    for owi in 0..ow {
                        let xb = (owi * sw) as isize - pw as isize;
                        let u = up[up_ch + idx];
                        idx += 1;
                        for kz in 0..kd {
                            let z = zb + kz as isize;
                            if z < 0 || z >= ind as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let y = yb + ky as isize;
                                if y < 0 || y >= inh as isize {
                                    continue;
                                }
                                let x_row = x_ch + (z as usize * inh + y as usize) * inw;
                                let a_row = (kz * kh + ky) * kw;
                                for kx in 0..kw {
                                    let xc = xb + kx as isize;
                                    if xc < 0 || xc >= inw as isize {
                                        continue;
                                    }
                                    acc[a_row + kx] += u * x[x_row + xc as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Weight gradient of [`conv3d_transposed`]: per (Cin, Cout/g) plane, one
/// pass over the op's input in canonical (n, qd, qh, qw) order.
fn convt_grad_weight_raw<E: Element>(x: &[E], up: &[E], d: &ConvDims) -> Vec<E> {
    let [ind, inh, inw] = d.in_sp;
    let [jd, jh, jw] = d.out_sp;
    let [kd, kh, kw] = d.k;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let cinpg = d.cin_per_group();
    let coutpg = d.cout_per_group();
    let in_spatial = d.in_spatial();
    let out_spatial = d.out_spatial();
    let k_vol = d.k_volume();

    let mut gw = vec![E::ZERO; d.cin * coutpg * k_vol];
    gw.par_chunks_mut(k_vol).enumerate().for_each(|(plane, acc)| {
        let ci = plane / coutpg;
        let co_in_group = plane % coutpg;
        let co_glob = (ci / cinpg) * coutpg + co_in_group;
        for n in 0..d.batch {
            let x_ch = (n * d.cin + ci) * in_spatial;
            let up_ch = (n * d.cout + co_glob) * out_spatial;
            let mut idx = 0;
            for qd in 0..ind {
                let zb = (qd * sd) as isize - pd as isize;
                for qh in 0..inh {
                    let yb = (qh * sh) as isize - ph as isize;
                    for qw in 0..inw {
                        let xb = (qw * sw) as isize - pw as isize;
                        let xv = x[x_ch + idx];
                        idx += 1;
                        for kz in 0..kd {
                            let z = zb + kz as isize;
                            if z < 0 || z >= jd as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let y = yb + ky as isize;
                                if y < 0 || y >= jh as isize {
                                    continue;
                                }
                                let up_row = up_ch + (z as usize * jh + y as usize) * jw;
                                let a_row = (kz * kh + ky) * kw;
                                for kx in 0..kw {
                                    let xc = xb + kx as isize;
                                    if xc < 0 || xc >= jw as isize {
                                        continue;
                                    }
                                    acc[a_row + kx] += xv * up[up_row + xc as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Bias gradient: per-channel sum of the upstream gradient in canonical
/// (n, spatial) order.
fn grad_bias_raw<E: Element>(up: &[E], batch: usize, channels: usize, spatial: usize) -> Vec<E> {
    (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut acc = E::ZERO;
            for n in 0..batch {
                let base = (n * channels + c) * spatial;
                for &u in &up[base..base + spatial] {
                    acc += u;
                }
            }
            acc
        })
        .collect()
}
