//! Elementwise arithmetic, reductions, softmax, and GELU.

use crate::error::{Error, Result};
use crate::tensor::{dispatch_dtype, strides_of, Element, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF, evaluated in f64.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Usage(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::Usage(format!(
            "{op}: dtype mismatch {} vs {}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Usage(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let out = self.with_data(|a| {
            other.with_data(|b| {
                dispatch_dtype!(self.dtype(), E, {
                    let a = E::slice(a);
                    let b = E::slice(b);
                    let v: Vec<E> = a.iter().zip(b).map(|(&x, &y)| x + y).collect();
                    E::into_buffer(v)
                })
            })
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|up, _parents, needs| {
                let ga = needs[0].then(|| up.clone());
                let gb = needs[1].then(|| up.clone());
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let out = self.with_data(|a| {
            other.with_data(|b| {
                dispatch_dtype!(self.dtype(), E, {
                    let a = E::slice(a);
                    let b = E::slice(b);
                    let v: Vec<E> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
                    E::into_buffer(v)
                })
            })
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|up, _parents, needs| {
                let ga = needs[0].then(|| up.clone());
                let gb = needs[1].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        let u = E::slice(up);
                        E::into_buffer(u.iter().map(|&x| -x).collect())
                    })
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise `self * other`.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let out = self.with_data(|a| {
            other.with_data(|b| {
                dispatch_dtype!(self.dtype(), E, {
                    let a = E::slice(a);
                    let b = E::slice(b);
                    let v: Vec<E> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
                    E::into_buffer(v)
                })
            })
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|up, parents, needs| {
                let mul_with = |src: &Tensor| {
                    src.with_data(|s| {
                        dispatch_dtype!(up.dtype(), E, {
                            let u = E::slice(up);
                            let s = E::slice(s);
                            E::into_buffer(u.iter().zip(s).map(|(&x, &y)| x * y).collect())
                        })
                    })
                };
                let ga = needs[0].then(|| mul_with(&parents[1]));
                let gb = needs[1].then(|| mul_with(&parents[0]));
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise `self / other`.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("div", self, other)?;
        let out = self.with_data(|a| {
            other.with_data(|b| {
                dispatch_dtype!(self.dtype(), E, {
                    let a = E::slice(a);
                    let b = E::slice(b);
                    let v: Vec<E> = a.iter().zip(b).map(|(&x, &y)| x / y).collect();
                    E::into_buffer(v)
                })
            })
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|up, parents, needs| {
                let ga = needs[0].then(|| {
                    parents[1].with_data(|b| {
                        dispatch_dtype!(up.dtype(), E, {
                            let u = E::slice(up);
                            let b = E::slice(b);
                            E::into_buffer(u.iter().zip(b).map(|(&x, &y)| x / y).collect())
                        })
                    })
                });
                let gb = needs[1].then(|| {
                    parents[0].with_data(|a| {
                        parents[1].with_data(|b| {
                            dispatch_dtype!(up.dtype(), E, {
                                let u = E::slice(up);
                                let a = E::slice(a);
                                let b = E::slice(b);
                                let v: Vec<E> = u
                                    .iter()
                                    .zip(a.iter().zip(b))
                                    .map(|(&ui, (&ai, &bi))| -ui * ai / (bi * bi))
                                    .collect();
                                E::into_buffer(v)
                            })
                        })
                    })
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise `self + c`.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.with_data(|a| {
            dispatch_dtype!(self.dtype(), E, {
                let c = E::from_f64(c);
                let a = E::slice(a);
                E::into_buffer(a.iter().map(|&x| x + c).collect())
            })
        });
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|up, _parents, needs| vec![needs[0].then(|| up.clone())]),
        )
    }

    /// Elementwise `self * c`.
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out = self.with_data(|a| {
            dispatch_dtype!(self.dtype(), E, {
                let s = E::from_f64(c);
                let a = E::slice(a);
                E::into_buffer(a.iter().map(|&x| x * s).collect())
            })
        });
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up, _parents, needs| {
                let g = needs[0].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        let s = E::from_f64(c);
                        let u = E::slice(up);
                        E::into_buffer(u.iter().map(|&x| x * s).collect())
                    })
                });
                vec![g]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Sum of all elements, in buffer order, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let out = self.with_data(|a| {
            dispatch_dtype!(self.dtype(), E, {
                let a = E::slice(a);
                let mut acc = E::ZERO;
                for &x in a {
                    acc += x;
                }
                E::into_buffer(vec![acc])
            })
        });
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            out,
            vec![self.clone()],
            Box::new(move |up, _parents, needs| {
                let g = needs[0].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        let u = E::slice(up)[0];
                        E::into_buffer(vec![u; n])
                    })
                });
                vec![g]
            }),
        )
    }

    /// Arithmetic mean of all elements as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Sum over the given axes (strictly increasing), dropping them from the
    /// shape. Summing every axis yields a scalar of shape `[1]`.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        for window in axes.windows(2) {
            if window[0] >= window[1] {
                return Err(Error::Usage(format!(
                    "sum_axes: axes must be strictly increasing, got {axes:?}"
                )));
            }
        }
        for &axis in axes {
            check_axis("sum_axes", &shape, axis)?;
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&d| shape[d]).collect()
        };
        let out_numel: usize = out_shape.iter().product();
        let in_strides = strides_of(&shape);
        let keep_for_closure = keep.clone();
        let shape_for_closure = shape.clone();

        // Map each input flat index to its output flat index once.
        let out_index = move |flat: usize| -> usize {
            let mut idx = 0usize;
            for &d in &keep_for_closure {
                let coord = (flat / in_strides[d]) % shape_for_closure[d];
                idx = idx * shape_for_closure[d] + coord;
            }
            idx
        };
        let out_index = std::sync::Arc::new(out_index);

        let fwd_map = out_index.clone();
        let out = self.with_data(|a| {
            dispatch_dtype!(self.dtype(), E, {
                let a = E::slice(a);
                let mut acc = vec![E::ZERO; out_numel];
                for (flat, &x) in a.iter().enumerate() {
                    acc[fwd_map(flat)] += x;
                }
                E::into_buffer(acc)
            })
        });

        let n = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |up, _parents, needs| {
                let g = needs[0].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        let u = E::slice(up);
                        let mut grad = vec![E::ZERO; n];
                        for (flat, slot) in grad.iter_mut().enumerate() {
                            *slot = u[out_index(flat)];
                        }
                        E::into_buffer(grad)
                    })
                });
                vec![g]
            }),
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let out = self.with_data(|a| {
            dispatch_dtype!(self.dtype(), E, {
                let a = E::slice(a);
                let mut y = vec![E::ZERO; a.len()];
                softmax_slices::<E>(a, &mut y, outer, len, inner);
                E::into_buffer(y)
            })
        });
        let out_data = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up, _parents, needs| {
                // dx = y * (dy - sum_axis(dy * y))
                let g = needs[0].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        let u = E::slice(up);
                        let y = E::slice(&out_data);
                        let mut grad = vec![E::ZERO; u.len()];
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = E::ZERO;
                                for a in 0..len {
                                    let idx = base + a * inner;
                                    dot += u[idx] * y[idx];
                                }
                                for a in 0..len {
                                    let idx = base + a * inner;
                                    grad[idx] = y[idx] * (u[idx] - dot);
                                }
                            }
                        }
                        E::into_buffer(grad)
                    })
                });
                vec![g]
            }),
        ))
    }

    /// Log-softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let out = self.with_data(|a| {
            dispatch_dtype!(self.dtype(), E, {
                let a = E::slice(a);
                let mut y = vec![E::ZERO; a.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut max = a[base];
                        for k in 1..len {
                            let v = a[base + k * inner];
                            if v > max {
                                max = v;
                            }
                        }
                        let mut denom = E::ZERO;
                        for k in 0..len {
                            denom += (a[base + k * inner] - max).exp();
                        }
                        let log_denom = denom.ln();
                        for k in 0..len {
                            let idx = base + k * inner;
                            y[idx] = a[idx] - max - log_denom;
                        }
                    }
                }
                E::into_buffer(y)
            })
        });
        let out_data = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up, _parents, needs| {
                // dx = dy - softmax(x) * sum_axis(dy)
                let g = needs[0].then(|| {
                    dispatch_dtype!(up.dtype(), E, {
                        let u = E::slice(up);
                        let logy = E::slice(&out_data);
                        let mut grad = vec![E::ZERO; u.len()];
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut total = E::ZERO;
                                for a in 0..len {
                                    total += u[base + a * inner];
                                }
                                for a in 0..len {
                                    let idx = base + a * inner;
                                    grad[idx] = u[idx] - logy[idx].exp() * total;
                                }
                            }
                        }
                        E::into_buffer(grad)
                    })
                });
                vec![g]
            }),
        ))
    }

    /// Exact GELU, `x * Phi(x)`, evaluated through the error function in
    /// f64 and cast back to the tensor dtype.
    pub fn gelu(&self) -> Tensor {
        let dtype = self.dtype();
        let out = self.with_data(|a| {
            dispatch_dtype!(dtype, E, {
                let a = E::slice(a);
                let v: Vec<E> = a
                    .iter()
                    .map(|&x| {
                        let xf = x.to_f64();
                        E::from_f64(xf * phi(xf))
                    })
                    .collect();
                E::into_buffer(v)
            })
        });
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|up, parents, needs| {
                // d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
                let g = needs[0].then(|| {
                    parents[0].with_data(|x| {
                        dispatch_dtype!(up.dtype(), E, {
                            let u = E::slice(up);
                            let x = E::slice(x);
                            let v: Vec<E> = u
                                .iter()
                                .zip(x)
                                .map(|(&ui, &xi)| {
                                    let xf = xi.to_f64();
                                    let pdf = INV_SQRT_2PI * (-0.5 * xf * xf).exp();
                                    ui * E::from_f64(phi(xf) + xf * pdf)
                                })
                                .collect();
                            E::into_buffer(v)
                        })
                    })
                });
                vec![g]
            }),
        )
    }
}

/// Decompose a shape around `axis` into (outer, axis length, inner) extents.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_slices<E: Element>(a: &[E], y: &mut [E], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = a[base];
            for k in 1..len {
                let v = a[base + k * inner];
                if v > max {
                    max = v;
                }
            }
            let mut denom = E::ZERO;
            for k in 0..len {
                let e = (a[base + k * inner] - max).exp();
                y[base + k * inner] = e;
                denom += e;
            }
            for k in 0..len {
                y[base + k * inner] = y[base + k * inner] / denom;
            }
        }
    }
}
