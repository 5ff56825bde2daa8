//! The full 9-stage MedNeXt: 4 encoder stages, a bottleneck, and 4 decoder
//! stages joined by additive skip connections, with a 1×1×1 stem and
//! deep-supervision heads at every decoder resolution.
//!
//! Stage widths follow `C·2^depth`: encoder stages sit at depths 0..3, the
//! bottleneck at depth 4, and decoder stages mirror depths 3..0. Each
//! resampling block uses the expansion ratio of the stage it feeds.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{
    block_forward, up_block_forward, BlockKind, BlockParams, ParamClass,
};
use crate::error::{Error, Result};
use crate::tensor::{conv3d, ConvSpec, DType, Tensor};

/// Number of stages (4 encoder + bottleneck + 4 decoder).
pub const NUM_STAGES: usize = 9;
/// Number of resampling steps on each side.
pub const NUM_RESAMPLES: usize = 4;
/// Total spatial reduction between full resolution and the bottleneck.
pub const TOTAL_DOWNSCALE: usize = 1 << NUM_RESAMPLES;

/// The published model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    S,
    B,
    M,
    L,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::S, Preset::B, Preset::M, Preset::L];

    /// Block count per stage, stages 1..9.
    pub fn blocks(self) -> [usize; NUM_STAGES] {
        match self {
            Preset::S => [2; 9],
            Preset::B => [2; 9],
            Preset::M => [3, 4, 4, 4, 4, 4, 4, 4, 3],
            Preset::L => [3, 4, 8, 8, 8, 8, 8, 4, 3],
        }
    }

    /// Expansion ratio per stage, stages 1..9.
    pub fn expansions(self) -> [usize; NUM_STAGES] {
        match self {
            Preset::S => [2; 9],
            Preset::B => [2, 3, 4, 4, 4, 4, 4, 3, 2],
            Preset::M => [2, 3, 4, 4, 4, 4, 4, 3, 2],
            Preset::L => [3, 4, 8, 8, 8, 8, 8, 4, 3],
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "S" | "s" => Ok(Preset::S),
            "B" | "b" => Ok(Preset::B),
            "M" | "m" => Ok(Preset::M),
            "L" | "l" => Ok(Preset::L),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}, expected one of S, B, M, L"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preset::S => write!(f, "S"),
            Preset::B => write!(f, "B"),
            Preset::M => write!(f, "M"),
            Preset::L => write!(f, "L"),
        }
    }
}

/// Full architecture hyperparameter record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub blocks_per_stage: [usize; NUM_STAGES],
    pub expansion_per_stage: [usize; NUM_STAGES],
    pub kernel: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub deep_supervision: bool,
}

impl ModelConfig {
    /// Configuration of a published preset with default stem width 32,
    /// kernel 3, one input channel, two classes, deep supervision on.
    pub fn preset(preset: Preset) -> ModelConfig {
        ModelConfig {
            blocks_per_stage: preset.blocks(),
            expansion_per_stage: preset.expansions(),
            kernel: 3,
            base_channels: 32,
            in_channels: 1,
            num_classes: 2,
            deep_supervision: true,
        }
    }

    pub fn with_kernel(mut self, kernel: usize) -> ModelConfig {
        self.kernel = kernel;
        self
    }

    pub fn with_base_channels(mut self, channels: usize) -> ModelConfig {
        self.base_channels = channels;
        self
    }

    pub fn with_in_channels(mut self, in_channels: usize) -> ModelConfig {
        self.in_channels = in_channels;
        self
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> ModelConfig {
        self.num_classes = num_classes;
        self
    }

    pub fn with_deep_supervision(mut self, on: bool) -> ModelConfig {
        self.deep_supervision = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return Err(Error::Config(format!(
                "kernel size must be odd and >= 3, got {}",
                self.kernel
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base channel count must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "segmentation needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(format!(
                "every stage needs at least one block, got {:?}",
                self.blocks_per_stage
            )));
        }
        if self.expansion_per_stage.contains(&0) {
            return Err(Error::Config(format!(
                "every expansion ratio must be >= 1, got {:?}",
                self.expansion_per_stage
            )));
        }
        Ok(())
    }

    /// Downsampling depth of each stage.
    pub fn stage_depths() -> [usize; NUM_STAGES] {
        [0, 1, 2, 3, 4, 3, 2, 1, 0]
    }

    /// Channel width of each stage, `C·2^depth`.
    pub fn stage_channels(&self) -> [usize; NUM_STAGES] {
        let mut out = [0; NUM_STAGES];
        for (i, d) in Self::stage_depths().iter().enumerate() {
            out[i] = self.base_channels << d;
        }
        out
    }

    /// The preset whose block/expansion tables match this config, if any.
    pub fn matching_preset(&self) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| {
            p.blocks() == self.blocks_per_stage && p.expansions() == self.expansion_per_stage
        })
    }

    /// Serialize as a UTF-8 `key=value` block (one pair per line).
    pub fn format(&self) -> String {
        let mut out = String::new();
        if let Some(p) = self.matching_preset() {
            out.push_str(&format!("preset={p}\n"));
        }
        let join = |xs: &[usize]| {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        out.push_str(&format!("blocks={}\n", join(&self.blocks_per_stage)));
        out.push_str(&format!("expansions={}\n", join(&self.expansion_per_stage)));
        out.push_str(&format!("kernel={}\n", self.kernel));
        out.push_str(&format!("channels={}\n", self.base_channels));
        out.push_str(&format!("in_channels={}\n", self.in_channels));
        out.push_str(&format!("num_classes={}\n", self.num_classes));
        out.push_str(&format!("deep_supervision={}\n", self.deep_supervision));
        out
    }

    /// Parse the `key=value` block produced by [`format`](Self::format).
    /// A `preset=` line seeds the block/expansion tables; explicit keys
    /// override it. Unknown or duplicate keys are configuration errors.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut preset: Option<Preset> = None;
        let mut blocks: Option<[usize; NUM_STAGES]> = None;
        let mut expansions: Option<[usize; NUM_STAGES]> = None;
        let mut kernel: Option<usize> = None;
        let mut channels: Option<usize> = None;
        let mut in_channels: Option<usize> = None;
        let mut num_classes: Option<usize> = None;
        let mut deep_supervision: Option<bool> = None;
        let mut seen = std::collections::HashSet::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {} is not key=value: {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key {key:?}")));
            }
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| {
                    Error::Config(format!("config key {key:?}: invalid number {v:?}"))
                })
            };
            match key {
                "preset" => preset = Some(value.parse()?),
                "blocks" => blocks = Some(parse_stage_list(key, value)?),
                "expansions" => expansions = Some(parse_stage_list(key, value)?),
                "kernel" => kernel = Some(parse_usize(value)?),
                "channels" => channels = Some(parse_usize(value)?),
                "in_channels" => in_channels = Some(parse_usize(value)?),
                "num_classes" => num_classes = Some(parse_usize(value)?),
                "deep_supervision" => {
                    deep_supervision = Some(match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        other => {
                            return Err(Error::Config(format!(
                                "config key deep_supervision: expected true or false, got {other:?}"
                            )))
                        }
                    })
                }
                other => {
                    return Err(Error::Config(format!("unknown config key {other:?}")));
                }
            }
        }

        let base = preset.map(ModelConfig::preset);
        let (table_b, table_r) = match (&base, blocks, expansions) {
            (_, Some(b), Some(r)) => (b, r),
            (Some(base), b, r) => (
                b.unwrap_or(base.blocks_per_stage),
                r.unwrap_or(base.expansion_per_stage),
            ),
            (None, _, _) => {
                return Err(Error::Config(
                    "config needs either preset= or both blocks= and expansions=".into(),
                ))
            }
        };
        let defaults = base.unwrap_or_else(|| ModelConfig::preset(Preset::S));
        let config = ModelConfig {
            blocks_per_stage: table_b,
            expansion_per_stage: table_r,
            kernel: kernel.unwrap_or(defaults.kernel),
            base_channels: channels.unwrap_or(defaults.base_channels),
            in_channels: in_channels.unwrap_or(defaults.in_channels),
            num_classes: num_classes.unwrap_or(defaults.num_classes),
            deep_supervision: deep_supervision.unwrap_or(defaults.deep_supervision),
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_stage_list(key: &str, value: &str) -> Result<[usize; NUM_STAGES]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != NUM_STAGES {
        return Err(Error::Config(format!(
            "config key {key:?}: expected {NUM_STAGES} comma-separated values, got {}",
            parts.len()
        )));
    }
    let mut out = [0; NUM_STAGES];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::Config(format!("config key {key:?}: invalid number {part:?}")))?;
    }
    Ok(out)
}

/// A built network: stem, stage blocks, resampling blocks, and heads.
pub struct MedNeXtModel {
    pub config: ModelConfig,
    pub stem_weight: Tensor,
    pub stem_bias: Tensor,
    /// Stage blocks, `stages[i]` holding stage i+1.
    pub stages: Vec<Vec<BlockParams>>,
    /// Down blocks; `downs[i]` sits between stages i+1 and i+2.
    pub downs: Vec<BlockParams>,
    /// Up blocks; `ups[i]` feeds decoder stage 6+i.
    pub ups: Vec<BlockParams>,
    /// Segmentation heads as (weight, bias), full resolution first, then
    /// 1/2, 1/4, 1/8 when deep supervision is on.
    pub heads: Vec<(Tensor, Tensor)>,
    dtype: DType,
}

struct Initializer {
    rng: ChaCha20Rng,
    dtype: DType,
    std: f64,
}

impl Initializer {
    fn new(seed: u64, dtype: DType) -> Initializer {
        Initializer { rng: ChaCha20Rng::seed_from_u64(seed), dtype, std: 0.02 }
    }

    /// Truncated normal: redraw any sample beyond two standard deviations.
    fn trunc_normal(&mut self) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                return z * self.std;
            }
        }
    }

    fn init(&mut self, shape: &[usize], class: ParamClass) -> Tensor {
        let n: usize = shape.iter().product();
        match class {
            ParamClass::ConvWeight => {
                let values: Vec<f64> = (0..n).map(|_| self.trunc_normal()).collect();
                match self.dtype {
                    DType::F32 => Tensor::from_vec_f32(
                        shape,
                        values.into_iter().map(|v| v as f32).collect(),
                    )
                    .expect("initializer shape"),
                    DType::F64 => {
                        Tensor::from_vec_f64(shape, values).expect("initializer shape")
                    }
                }
            }
            ParamClass::Bias | ParamClass::Beta => Tensor::zeros(shape, self.dtype),
            ParamClass::Gamma => Tensor::ones(shape, self.dtype),
        }
    }
}

/// Build a model in the training dtype (float32) with deterministic
/// seed-derived initialization.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<MedNeXtModel> {
    build_model_with_dtype(config, seed, DType::F32)
}

/// [`build_model`] with an explicit element type (float64 is used by
/// gradient checks and bit-reproducibility tests).
pub fn build_model_with_dtype(
    config: &ModelConfig,
    seed: u64,
    dtype: DType,
) -> Result<MedNeXtModel> {
    config.validate()?;
    let mut init = Initializer::new(seed, dtype);
    let channels = config.stage_channels();
    let k = config.kernel;

    let stem_weight = init.init(
        &[config.base_channels, config.in_channels, 1, 1, 1],
        ParamClass::ConvWeight,
    );
    let stem_bias = init.init(&[config.base_channels], ParamClass::Bias);

    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut downs = Vec::with_capacity(NUM_RESAMPLES);
    let mut ups = Vec::with_capacity(NUM_RESAMPLES);
    for stage in 0..NUM_STAGES {
        // Resampling block feeding this stage, built in forward order. Its
        // expansion ratio is the fed stage's R.
        if (1..=4).contains(&stage) {
            downs.push(BlockParams::build(
                BlockKind::Down,
                channels[stage - 1],
                config.expansion_per_stage[stage],
                k,
                &mut |shape, class| init.init(shape, class),
            )?);
        }
        if stage >= 5 {
            ups.push(BlockParams::build(
                BlockKind::Up,
                2 * channels[stage],
                config.expansion_per_stage[stage],
                k,
                &mut |shape, class| init.init(shape, class),
            )?);
        }
        let mut blocks = Vec::with_capacity(config.blocks_per_stage[stage]);
        for _ in 0..config.blocks_per_stage[stage] {
            blocks.push(BlockParams::build(
                BlockKind::Standard,
                channels[stage],
                config.expansion_per_stage[stage],
                k,
                &mut |shape, class| init.init(shape, class),
            )?);
        }
        stages.push(blocks);
    }

    // Heads: full resolution first, then each coarser decoder resolution.
    let head_widths: Vec<usize> = if config.deep_supervision {
        vec![channels[8], channels[7], channels[6], channels[5]]
    } else {
        vec![channels[8]]
    };
    let heads = head_widths
        .into_iter()
        .map(|w| {
            (
                init.init(&[config.num_classes, w, 1, 1, 1], ParamClass::ConvWeight),
                init.init(&[config.num_classes], ParamClass::Bias),
            )
        })
        .collect();

    Ok(MedNeXtModel { config: config.clone(), stem_weight, stem_bias, stages, downs, ups, heads, dtype })
}

impl std::fmt::Debug for MedNeXtModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MedNeXtModel")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl MedNeXtModel {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// All trainable parameters as (name, tensor) pairs, sorted by name.
    ///
    /// Names follow `stem.{weight|bias}`,
    /// `stage{i}.block{j}.{dw|norm|exp|comp}.{weight|bias}`,
    /// the same pattern under `down{i}.`/`up{i}.` (which add
    /// `res.{weight|bias}`), and
    /// `head{r}.{weight|bias}`, all indices 1-based.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("stem.weight".to_string(), self.stem_weight.clone()));
        out.push(("stem.bias".to_string(), self.stem_bias.clone()));
        for (i, blocks) in self.stages.iter().enumerate() {
            for (j, block) in blocks.iter().enumerate() {
                out.extend(block.named(&format!("stage{}.block{}", i + 1, j + 1)));
            }
        }
        for (i, block) in self.downs.iter().enumerate() {
            out.extend(block.named(&format!("down{}", i + 1)));
        }
        for (i, block) in self.ups.iter().enumerate() {
            out.extend(block.named(&format!("up{}", i + 1)));
        }
        for (r, (w, b)) in self.heads.iter().enumerate() {
            out.push((format!("head{}.weight", r + 1), w.clone()));
            out.push((format!("head{}.bias", r + 1), b.clone()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for (_, t) in self.named_parameters() {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_parameters() {
            t.zero_grad();
        }
    }

    /// Forward pass; see [`model_forward`].
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        model_forward(self, x)
    }
}

/// Run the network. Returns the full-resolution logits and, with deep
/// supervision, the auxiliary logits at 1/2, 1/4, and 1/8 resolution.
pub fn model_forward(model: &MedNeXtModel, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    if x.shape().len() != 5 {
        return Err(Error::Config(format!(
            "model input must be rank 5 (N x C x D x H x W), got {:?}",
            x.shape()
        )));
    }
    if x.shape()[1] != model.config.in_channels {
        return Err(Error::Config(format!(
            "model expects {} input channels, got {}",
            model.config.in_channels,
            x.shape()[1]
        )));
    }
    for (axis, &e) in x.shape()[2..].iter().enumerate() {
        if e % TOTAL_DOWNSCALE != 0 {
            return Err(Error::Config(format!(
                "input spatial axis {axis} has extent {e}, which is not divisible by {TOTAL_DOWNSCALE}"
            )));
        }
    }
    if x.dtype() != model.dtype {
        return Err(Error::Config(format!(
            "model is {}, input is {}",
            model.dtype,
            x.dtype()
        )));
    }

    let run_stage = |mut h: Tensor, stage: usize| -> Result<Tensor> {
        for block in &model.stages[stage] {
            h = block_forward(&h, block)?;
        }
        Ok(h)
    };

    let stem = conv3d(x, &model.stem_weight, Some(&model.stem_bias), &ConvSpec::pointwise())?;
    let e1 = run_stage(stem, 0)?;
    let e2 = run_stage(block_forward(&e1, &model.downs[0])?, 1)?;
    let e3 = run_stage(block_forward(&e2, &model.downs[1])?, 2)?;
    let e4 = run_stage(block_forward(&e3, &model.downs[2])?, 3)?;
    let bottleneck = run_stage(block_forward(&e4, &model.downs[3])?, 4)?;

    let d6 = run_stage(up_block_forward(&bottleneck, &model.ups[0])?.add(&e4)?, 5)?;
    let d7 = run_stage(up_block_forward(&d6, &model.ups[1])?.add(&e3)?, 6)?;
    let d8 = run_stage(up_block_forward(&d7, &model.ups[2])?.add(&e2)?, 7)?;
    let d9 = run_stage(up_block_forward(&d8, &model.ups[3])?.add(&e1)?, 8)?;

    let head = |r: usize, h: &Tensor| -> Result<Tensor> {
        let (w, b) = &model.heads[r];
        conv3d(h, w, Some(b), &ConvSpec::pointwise())
    };
    let main = head(0, &d9)?;
    let ds = if model.config.deep_supervision {
        vec![head(1, &d8)?, head(2, &d7)?, head(3, &d6)?]
    } else {
        Vec::new()
    };
    Ok((main, ds))
}
