//! The three MedNeXt block types: standard, 2× downsampling, 2× upsampling.
//!
//! Every block is an inverted bottleneck: a depthwise convolution with
//! kernel k, channel-wise group normalization, a 1×1×1 expansion to C·R
//! channels, GELU, and a 1×1×1 compression to the output width, with an
//! additive residual. Resampling blocks make the depthwise layer strided
//! (down) or transposed (up) and project the residual through a strided
//! 1×1×1 convolution so both branches change resolution identically.

use crate::error::{Error, Result};
use crate::tensor::{
    conv3d, conv3d_transposed, group_norm, ConvSpec, OutputAlignment, Tensor,
};

/// Epsilon used by every normalization layer in the architecture.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Which resampling behavior a block has.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Shape-preserving block, C -> C.
    Standard,
    /// Stride-2 block, C -> 2C at half resolution.
    Down,
    /// Transposed stride-2 block, C -> C/2 at double resolution.
    Up,
}

/// What a parameter tensor is, for initializers that treat weights and
/// affine/bias terms differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    ConvWeight,
    Bias,
    Gamma,
    Beta,
}

/// Initializer callback: produces a tensor for the given shape and role.
pub type InitFn<'a> = &'a mut dyn FnMut(&[usize], ParamClass) -> Tensor;

/// Named weights of one block.
///
/// `dw_weight` is the depthwise kernel (C_in × 1 × k×k×k for all kinds; up
/// blocks read it in transposed-kernel order). `exp_weight` expands to
/// C_in·R channels, `comp_weight` compresses to the output width.
/// `res_weight` exists only on resampling blocks: (C_out × C_in × 1×1×1)
/// for down, (C_in × C_out × 1×1×1) for up, both with their stride-2 bias.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub kind: BlockKind,
    pub dw_weight: Tensor,
    pub dw_bias: Tensor,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub exp_weight: Tensor,
    pub exp_bias: Tensor,
    pub comp_weight: Tensor,
    pub comp_bias: Tensor,
    pub res_weight: Option<Tensor>,
    pub res_bias: Option<Tensor>,
}

fn check_block_dims(kind: BlockKind, c_in: usize, r: usize, k: usize) -> Result<()> {
    if c_in == 0 {
        return Err(Error::Config("block: input channels must be >= 1".into()));
    }
    if r == 0 {
        return Err(Error::Config("block: expansion ratio must be >= 1".into()));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("block: kernel size must be odd, got {k}")));
    }
    if kind == BlockKind::Up && (c_in < 2 || c_in % 2 != 0) {
        return Err(Error::Config(format!(
            "up block: input channels must be even and >= 2, got {c_in}"
        )));
    }
    Ok(())
}

impl BlockParams {
    /// Build a block of the given kind with freshly initialized parameters.
    pub fn build(kind: BlockKind, c_in: usize, r: usize, k: usize, init: InitFn) -> Result<BlockParams> {
        check_block_dims(kind, c_in, r, k)?;
        let c_out = match kind {
            BlockKind::Standard => c_in,
            BlockKind::Down => 2 * c_in,
            BlockKind::Up => c_in / 2,
        };
        let hidden = c_in * r;
        let (res_weight, res_bias) = match kind {
            BlockKind::Standard => (None, None),
            BlockKind::Down => (
                Some(init(&[c_out, c_in, 1, 1, 1], ParamClass::ConvWeight)),
                Some(init(&[c_out], ParamClass::Bias)),
            ),
            BlockKind::Up => (
                Some(init(&[c_in, c_out, 1, 1, 1], ParamClass::ConvWeight)),
                Some(init(&[c_out], ParamClass::Bias)),
            ),
        };
        Ok(BlockParams {
            kind,
            dw_weight: init(&[c_in, 1, k, k, k], ParamClass::ConvWeight),
            dw_bias: init(&[c_in], ParamClass::Bias),
            norm_gamma: init(&[c_in], ParamClass::Gamma),
            norm_beta: init(&[c_in], ParamClass::Beta),
            exp_weight: init(&[hidden, c_in, 1, 1, 1], ParamClass::ConvWeight),
            exp_bias: init(&[hidden], ParamClass::Bias),
            comp_weight: init(&[c_out, hidden, 1, 1, 1], ParamClass::ConvWeight),
            comp_bias: init(&[c_out], ParamClass::Bias),
            res_weight,
            res_bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.dw_weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.comp_weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.dw_weight.shape()[2]
    }

    pub fn expansion_ratio(&self) -> usize {
        self.exp_weight.shape()[0] / self.in_channels()
    }

    /// All parameters of this block as (name, tensor) pairs under `prefix`,
    /// in layer order.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.dw.weight"), self.dw_weight.clone()),
            (format!("{prefix}.dw.bias"), self.dw_bias.clone()),
            (format!("{prefix}.norm.weight"), self.norm_gamma.clone()),
            (format!("{prefix}.norm.bias"), self.norm_beta.clone()),
            (format!("{prefix}.exp.weight"), self.exp_weight.clone()),
            (format!("{prefix}.exp.bias"), self.exp_bias.clone()),
            (format!("{prefix}.comp.weight"), self.comp_weight.clone()),
            (format!("{prefix}.comp.bias"), self.comp_bias.clone()),
        ];
        if let (Some(w), Some(b)) = (&self.res_weight, &self.res_bias) {
            out.push((format!("{prefix}.res.weight"), w.clone()));
            out.push((format!("{prefix}.res.bias"), b.clone()));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named("p").iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_input(&self, x: &Tensor, expected_kind: BlockKind) -> Result<()> {
        if self.kind != expected_kind {
            return Err(Error::Usage(format!(
                "block forward called for {:?} on a {:?} block",
                expected_kind, self.kind
            )));
        }
        if x.shape().len() != 5 {
            return Err(Error::Config(format!(
                "block: input must be rank 5, got {:?}",
                x.shape()
            )));
        }
        if x.shape()[1] != self.in_channels() {
            return Err(Error::Config(format!(
                "block: expected {} input channels, got {}",
                self.in_channels(),
                x.shape()[1]
            )));
        }
        Ok(())
    }

    /// Shared tail of every block: norm at the depthwise width, 1×1×1
    /// expansion, GELU, 1×1×1 compression.
    fn norm_exp_comp(&self, h: &Tensor) -> Result<Tensor> {
        let c_in = self.in_channels();
        let h = group_norm(h, c_in, &self.norm_gamma, &self.norm_beta, GROUP_NORM_EPS)?;
        let h = conv3d(&h, &self.exp_weight, Some(&self.exp_bias), &ConvSpec::pointwise())?;
        let h = h.gelu();
        conv3d(&h, &self.comp_weight, Some(&self.comp_bias), &ConvSpec::pointwise())
    }
}

/// Standard block: `y = x + comp(gelu(exp(norm(dwconv(x)))))`.
pub fn mednext_block_forward(x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    p.check_input(x, BlockKind::Standard)?;
    let c_in = p.in_channels();
    let k = p.kernel();
    let dw = ConvSpec::uniform(1, k / 2, c_in);
    let h = conv3d(x, &p.dw_weight, Some(&p.dw_bias), &dw)?;
    let h = p.norm_exp_comp(&h)?;
    x.add(&h)
}

/// Downsampling block: both branches use stride 2, halving the spatial
/// extents while doubling channels.
pub fn down_block_forward(x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    p.check_input(x, BlockKind::Down)?;
    for (axis, &e) in x.shape()[2..].iter().enumerate() {
        if e % 2 != 0 {
            return Err(Error::Config(format!(
                "down block: spatial axis {axis} extent {e} is odd"
            )));
        }
    }
    let c_in = p.in_channels();
    let k = p.kernel();
    let dw = ConvSpec::uniform(2, k / 2, c_in);
    let h = conv3d(x, &p.dw_weight, Some(&p.dw_bias), &dw)?;
    let main = p.norm_exp_comp(&h)?;
    let res = conv3d(
        x,
        p.res_weight.as_ref().expect("down block has a residual projection"),
        p.res_bias.as_ref(),
        &ConvSpec::uniform(2, 0, 1),
    )?;
    res.add(&main)
}

/// Upsampling block: both branches use a transposed stride-2 convolution
/// aligned to exactly 2× the input extents.
pub fn up_block_forward(x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    p.check_input(x, BlockKind::Up)?;
    let c_in = p.in_channels();
    let k = p.kernel();
    let dw = ConvSpec::uniform(2, k / 2, c_in);
    let h = conv3d_transposed(x, &p.dw_weight, Some(&p.dw_bias), &dw, OutputAlignment::Double)?;
    let main = p.norm_exp_comp(&h)?;
    let res = conv3d_transposed(
        x,
        p.res_weight.as_ref().expect("up block has a residual projection"),
        p.res_bias.as_ref(),
        &ConvSpec::uniform(2, 0, 1),
        OutputAlignment::Double,
    )?;
    res.add(&main)
}

/// Dispatch on the block's kind.
pub fn block_forward(x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    match p.kind {
        BlockKind::Standard => mednext_block_forward(x, p),
        BlockKind::Down => down_block_forward(x, p),
        BlockKind::Up => up_block_forward(x, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, numerical_grad, seeded_vec_f64};
    use crate::tensor::DType;

    fn zero_init(dtype: DType) -> impl FnMut(&[usize], ParamClass) -> Tensor {
        move |shape, _| Tensor::zeros(shape, dtype)
    }

    fn seeded_init(seed: u64, dtype: DType) -> impl FnMut(&[usize], ParamClass) -> Tensor {
        let mut counter = seed;
        move |shape, class| {
            counter += 1;
            let n: usize = shape.iter().product();
            match class {
                ParamClass::Gamma => Tensor::ones(shape, dtype),
                ParamClass::Beta => Tensor::zeros(shape, dtype),
                _ => {
                    let v: Vec<f64> =
                        seeded_vec_f64(counter, n).into_iter().map(|x| x * 0.5).collect();
                    match dtype {
                        DType::F64 => Tensor::from_vec_f64(shape, v).unwrap(),
                        DType::F32 => {
                            Tensor::from_vec_f32(shape, v.into_iter().map(|x| x as f32).collect())
                                .unwrap()
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_standard_block_is_identity() {
        let p =
            BlockParams::build(BlockKind::Standard, 2, 2, 3, &mut zero_init(DType::F32)).unwrap();
        let x =
            Tensor::from_vec_f32(&[1, 2, 2, 2, 2], (0..16).map(|i| i as f32 - 7.5).collect())
                .unwrap();
        let y = mednext_block_forward(&x, &p).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn hand_composed_scalar_block() {
        // C=1, R=2, k=1, constant input v. The norm maps any constant volume
        // to beta, so y = v + comp(gelu(exp(beta))); with beta=0.5,
        // exp=([2,-1], [0.1,0.3]), comp=([1.5,-2], 0.25) the offset is
        // 1.5*gelu(1.1) - 2*gelu(-0.2) + 0.25 = 1.8444471156628275.
        let p = BlockParams {
            kind: BlockKind::Standard,
            dw_weight: Tensor::from_vec_f64(&[1, 1, 1, 1, 1], vec![0.7]).unwrap(),
            dw_bias: Tensor::from_vec_f64(&[1], vec![-0.3]).unwrap(),
            norm_gamma: Tensor::from_vec_f64(&[1], vec![4.0]).unwrap(),
            norm_beta: Tensor::from_vec_f64(&[1], vec![0.5]).unwrap(),
            exp_weight: Tensor::from_vec_f64(&[2, 1, 1, 1, 1], vec![2.0, -1.0]).unwrap(),
            exp_bias: Tensor::from_vec_f64(&[2], vec![0.1, 0.3]).unwrap(),
            comp_weight: Tensor::from_vec_f64(&[1, 2, 1, 1, 1], vec![1.5, -2.0]).unwrap(),
            comp_bias: Tensor::from_vec_f64(&[1], vec![0.25]).unwrap(),
            res_weight: None,
            res_bias: None,
        };
        for v in [0.0, 1.25, -3.5] {
            let x = Tensor::full(&[1, 1, 2, 2, 2], DType::F64, v);
            let y = mednext_block_forward(&x, &p).unwrap().to_f64_vec();
            for got in y {
                assert_close(got, v + 1.8444471156628275, 1e-12);
            }
        }
    }

    #[test]
    fn standard_block_parameter_count() {
        // C=2, R=2, k=3: depthwise 2*27+2 = 56, norm 2+2 = 4,
        // expansion 4*2+4 = 12, compression 2*4+2 = 10; total 82.
        let p =
            BlockParams::build(BlockKind::Standard, 2, 2, 3, &mut zero_init(DType::F32)).unwrap();
        assert_eq!(p.parameter_count(), 82);
    }

    #[test]
    fn down_block_shape() {
        let p = BlockParams::build(BlockKind::Down, 2, 2, 3, &mut seeded_init(1, DType::F32)).unwrap();
        let x = Tensor::ones(&[1, 2, 8, 8, 8], DType::F32);
        let y = down_block_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4, 4]);
    }

    #[test]
    fn down_block_rejects_odd_extent() {
        let p = BlockParams::build(BlockKind::Down, 2, 2, 3, &mut zero_init(DType::F32)).unwrap();
        let x = Tensor::ones(&[1, 2, 8, 7, 8], DType::F32);
        assert!(matches!(down_block_forward(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn down_block_zero_main_is_residual_projection() {
        let mut p =
            BlockParams::build(BlockKind::Down, 2, 2, 3, &mut zero_init(DType::F32)).unwrap();
        let mut init = seeded_init(7, DType::F32);
        p.res_weight = Some(init(&[4, 2, 1, 1, 1], ParamClass::ConvWeight));
        p.res_bias = Some(init(&[4], ParamClass::Bias));
        let x = Tensor::from_vec_f32(
            &[1, 2, 4, 4, 4],
            seeded_vec_f64(9, 128).into_iter().map(|v| v as f32).collect(),
        )
        .unwrap();
        let y = down_block_forward(&x, &p).unwrap();
        let expected = conv3d(
            &x,
            p.res_weight.as_ref().unwrap(),
            p.res_bias.as_ref(),
            &ConvSpec::uniform(2, 0, 1),
        )
        .unwrap();
        assert_eq!(y.to_f64_vec(), expected.to_f64_vec());
    }

    #[test]
    fn down_block_matches_naive_reimplementation() {
        let p = BlockParams::build(BlockKind::Down, 2, 2, 3, &mut seeded_init(21, DType::F64)).unwrap();
        let x = Tensor::from_vec_f64(&[1, 2, 4, 4, 4], seeded_vec_f64(23, 128)).unwrap();
        let y = down_block_forward(&x, &p).unwrap();
        let expected = naive_down_block(&x, &p);
        assert_eq!(y.shape(), &[1, 4, 2, 2, 2]);
        for (a, b) in y.to_f64_vec().iter().zip(&expected) {
            assert_close(*a, *b, 1e-12);
        }
    }

    /// Loop-level re-implementation of the down block for one sample.
    fn naive_down_block(x: &Tensor, p: &BlockParams) -> Vec<f64> {
        let (c_in, s) = (x.shape()[1], x.shape()[2]);
        let o = s / 2;
        let xv = x.to_f64_vec();
        let k = p.kernel();
        let pad = k / 2;
        let dw_w = p.dw_weight.to_f64_vec();
        let dw_b = p.dw_bias.to_f64_vec();
        let at = |v: &[f64], c: usize, d: usize, h: usize, w: usize, s: usize| {
            v[((c * s + d) * s + h) * s + w]
        };
        // depthwise stride-2 conv
        let mut dw = vec![0.0; c_in * o * o * o];
        for c in 0..c_in {
            for od in 0..o {
                for oh in 0..o {
                    for ow in 0..o {
                        let mut acc = 0.0;
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let z = (od * 2 + kz) as isize - pad as isize;
                                    let yy = (oh * 2 + ky) as isize - pad as isize;
                                    let xx = (ow * 2 + kx) as isize - pad as isize;
                                    if z < 0 || yy < 0 || xx < 0 {
                                        continue;
                                    }
                                    let (z, yy, xx) = (z as usize, yy as usize, xx as usize);
                                    if z >= s || yy >= s || xx >= s {
                                        continue;
                                    }
                                    acc += at(&xv, c, z, yy, xx, s)
                                        * dw_w[((c * k + kz) * k + ky) * k + kx];
                                }
                            }
                        }
                        dw[((c * o + od) * o + oh) * o + ow] = acc + dw_b[c];
                    }
                }
            }
        }
        // channel-wise norm
        let gamma = p.norm_gamma.to_f64_vec();
        let beta = p.norm_beta.to_f64_vec();
        let vol = o * o * o;
        let mut normed = vec![0.0; dw.len()];
        for c in 0..c_in {
            let xs = &dw[c * vol..(c + 1) * vol];
            let mean: f64 = xs.iter().sum::<f64>() / vol as f64;
            let var: f64 = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vol as f64;
            let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            for (i, &v) in xs.iter().enumerate() {
                normed[c * vol + i] = gamma[c] * ((v - mean) * inv) + beta[c];
            }
        }
        // expansion, gelu, compression
        let hidden = c_in * p.expansion_ratio();
        let c_out = p.out_channels();
        let exp_w = p.exp_weight.to_f64_vec();
        let exp_b = p.exp_bias.to_f64_vec();
        let comp_w = p.comp_weight.to_f64_vec();
        let comp_b = p.comp_bias.to_f64_vec();
        let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let mut expanded = vec![0.0; hidden * vol];
        for h in 0..hidden {
            for i in 0..vol {
                let mut acc = 0.0;
                for c in 0..c_in {
                    acc += exp_w[h * c_in + c] * normed[c * vol + i];
                }
                let v = acc + exp_b[h];
                expanded[h * vol + i] = v * phi(v);
            }
        }
        let mut main = vec![0.0; c_out * vol];
        for co in 0..c_out {
            for i in 0..vol {
                let mut acc = 0.0;
                for h in 0..hidden {
                    acc += comp_w[co * hidden + h] * expanded[h * vol + i];
                }
                main[co * vol + i] = acc + comp_b[co];
            }
        }
        // strided residual projection
        let res_w = p.res_weight.as_ref().unwrap().to_f64_vec();
        let res_b = p.res_bias.as_ref().unwrap().to_f64_vec();
        let mut out = vec![0.0; c_out * vol];
        for co in 0..c_out {
            for od in 0..o {
                for oh in 0..o {
                    for ow in 0..o {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            acc += res_w[co * c_in + c] * at(&xv, c, od * 2, oh * 2, ow * 2, s);
                        }
                        let i = ((co * o + od) * o + oh) * o + ow;
                        out[i] = acc + res_b[co] + main[i];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn up_block_shape_and_zero_weights() {
        let p = BlockParams::build(BlockKind::Up, 4, 2, 3, &mut seeded_init(31, DType::F32)).unwrap();
        let x = Tensor::ones(&[1, 4, 4, 4, 4], DType::F32);
        let y = up_block_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 8, 8]);

        let pz = BlockParams::build(BlockKind::Up, 4, 2, 3, &mut zero_init(DType::F32)).unwrap();
        let yz = up_block_forward(&x, &pz).unwrap();
        assert!(yz.to_f64_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn up_block_rejects_channel_count_one() {
        let err = BlockParams::build(BlockKind::Up, 1, 2, 3, &mut zero_init(DType::F32)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn up_residual_is_zero_insertion_then_projection() {
        // With the main branch zeroed, the up block reduces to its residual:
        // zero-insertion upsampling followed by a pointwise projection.
        let mut p = BlockParams::build(BlockKind::Up, 2, 2, 1, &mut zero_init(DType::F64)).unwrap();
        let mut init = seeded_init(41, DType::F64);
        p.res_weight = Some(init(&[2, 1, 1, 1, 1], ParamClass::ConvWeight));
        p.res_bias = Some(init(&[1], ParamClass::Bias));
        let x = Tensor::from_vec_f64(&[1, 2, 2, 2, 2], seeded_vec_f64(43, 16)).unwrap();
        let y = up_block_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        let xv = x.to_f64_vec();
        let rw = p.res_weight.as_ref().unwrap().to_f64_vec();
        let rb = p.res_bias.as_ref().unwrap().to_f64_vec();
        let got = y.to_f64_vec();
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    let expected = if d % 2 == 0 && h % 2 == 0 && w % 2 == 0 {
                        let q = ((d / 2) * 2 + h / 2) * 2 + w / 2;
                        rw[0] * xv[q] + rw[1] * xv[8 + q] + rb[0]
                    } else {
                        rb[0]
                    };
                    assert_close(got[(d * 4 + h) * 4 + w], expected, 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_contract_over_kernels() {
        for k in [3usize, 5, 7] {
            let mut init = seeded_init(100 + k as u64, DType::F32);
            let std = BlockParams::build(BlockKind::Standard, 4, 2, k, &mut init).unwrap();
            let down = BlockParams::build(BlockKind::Down, 4, 3, k, &mut init).unwrap();
            let up = BlockParams::build(BlockKind::Up, 4, 2, k, &mut init).unwrap();
            let x = Tensor::ones(&[1, 4, 8, 8, 8], DType::F32);
            assert_eq!(mednext_block_forward(&x, &std).unwrap().shape(), x.shape());
            assert_eq!(down_block_forward(&x, &down).unwrap().shape(), &[1, 8, 4, 4, 4]);
            assert_eq!(up_block_forward(&x, &up).unwrap().shape(), &[1, 2, 16, 16, 16]);
        }
    }

    #[test]
    fn down_then_up_restores_shape() {
        let mut init = seeded_init(55, DType::F32);
        let down = BlockParams::build(BlockKind::Down, 2, 2, 3, &mut init).unwrap();
        let up = BlockParams::build(BlockKind::Up, 4, 2, 3, &mut init).unwrap();
        let x = Tensor::ones(&[2, 2, 8, 8, 8], DType::F32);
        let y = up_block_forward(&down_block_forward(&x, &down).unwrap(), &up).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cases: Vec<(BlockKind, [usize; 5])> = vec![
            (BlockKind::Standard, [1, 2, 4, 4, 4]),
            (BlockKind::Down, [1, 2, 4, 4, 4]),
            (BlockKind::Up, [1, 2, 2, 2, 2]),
        ];
        for (kind, xs) in cases {
            let mut init = seeded_init(200, DType::F64);
            let p = BlockParams::build(kind, 2, 2, 3, &mut init).unwrap();
            let n: usize = xs.iter().product();
            let x = Tensor::from_vec_f64(&xs, seeded_vec_f64(77, n)).unwrap().requiring_grad();
            for (_, t) in p.named("p") {
                t.set_requires_grad(true);
            }
            let loss = |_: &Tensor| {
                let y = block_forward(&x, &p).unwrap();
                y.mul(&y).unwrap().sum().mul_scalar(0.5)
            };
            let grads = loss(&x).backward().unwrap();
            let mut targets = vec![("x".to_string(), x.clone())];
            targets.extend(p.named("p"));
            for (name, t) in targets {
                let numeric = numerical_grad(&t, &loss);
                let analytic = grads.get_f64(&t).unwrap();
                for (i, (a, nn)) in analytic.iter().zip(&numeric).enumerate() {
                    assert!(
                        (a - nn).abs() <= 1e-6 * (1.0 + a.abs().max(nn.abs())),
                        "{kind:?} {name}[{i}]: {a} vs {nn}"
                    );
                }
            }
        }
    }
}
