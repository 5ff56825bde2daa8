//! Supervised training on synthetic cases: forward, Dice plus
//! cross-entropy with deep supervision, AdamW updates, and periodic Dice
//! evaluation with optional early stopping.

use crate::error::{Error, Result};
use crate::loss::{default_ds_weights, dice_ce_loss};
use crate::metrics::{argmax_labels, dsc_metric};
use crate::network::{build_model_with_dtype, MedNeXtModel, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::synth::{generate_synthetic_case, SegmentationCase};
use crate::tensor::{no_grad, DType, Tensor};

#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub config: ModelConfig,
    pub num_cases: usize,
    pub case_size: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Evaluate mean foreground Dice on the training cases every this many
    /// steps (0 disables evaluation entirely).
    pub eval_every: usize,
    /// Stop as soon as an evaluation reaches this mean Dice.
    pub target_dsc: Option<f64>,
    pub dtype: DType,
}

impl TrainSpec {
    pub fn new(config: ModelConfig) -> TrainSpec {
        TrainSpec {
            config,
            num_cases: 4,
            case_size: 32,
            steps: 300,
            optimizer: AdamWConfig::default(),
            seed: 0,
            eval_every: 10,
            target_dsc: None,
            dtype: DType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    /// Mean foreground Dice over the training cases, present on
    /// evaluation steps.
    pub dsc_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    /// Comma-separated rows `step,loss,dsc_mean` with a header line; the
    /// Dice field is empty on steps without an evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,dsc_mean\n");
        for row in &self.rows {
            match row.dsc_mean {
                Some(dsc) => out.push_str(&format!("{},{:.6},{:.6}\n", row.step, row.loss, dsc)),
                None => out.push_str(&format!("{},{:.6},\n", row.step, row.loss)),
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MedNeXtModel,
    pub history: TrainHistory,
    /// Dice of the last evaluation, if any ran.
    pub final_dsc: Option<f64>,
    pub steps_run: usize,
}

/// Mean foreground Dice of the model over the given cases.
pub fn evaluate_dsc(model: &MedNeXtModel, cases: &[SegmentationCase]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for case in cases {
        let input = case.volume.cast(model.dtype());
        let (main, _) = no_grad(|| model.forward(&input))?;
        let pred = argmax_labels(&main)?;
        for score in dsc_metric(&pred, &case.labels, case.num_classes)? {
            total += score;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("evaluation needs at least one case".into()));
    }
    Ok(total / count as f64)
}

/// Generate the deterministic training cases a spec describes.
pub fn training_cases(spec: &TrainSpec) -> Result<Vec<SegmentationCase>> {
    if spec.num_cases == 0 {
        return Err(Error::Config("training needs at least one case".into()));
    }
    (0..spec.num_cases)
        .map(|i| {
            generate_synthetic_case(
                spec.seed.wrapping_add(1000 + i as u64),
                spec.case_size,
                spec.config.num_classes,
            )
        })
        .collect()
}

/// Run the loop: cycle through the cases one per step, abort on a
/// non-finite loss, and stop early when the Dice target is reached.
pub fn train_loop(spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.config.validate()?;
    let model = build_model_with_dtype(&spec.config, spec.seed, spec.dtype)?;
    train_model(model, spec)
}

/// Trains an existing model on the synthetic cases `spec` describes.
///
/// The model decides architecture and dtype; `spec` contributes the data
/// plan, optimizer settings, and stopping rules. The model must agree with
/// `spec.config` on input channels and class count so the generated cases
/// fit. This entry point continues training after a weight transfer, where
/// the model was not built from `spec` itself.
pub fn train_model(model: MedNeXtModel, spec: &TrainSpec) -> Result<TrainOutcome> {
    if spec.config.in_channels != 1 {
        return Err(Error::Config(
            "synthetic training cases have a single input channel".into(),
        ));
    }
    if model.config.in_channels != spec.config.in_channels
        || model.config.num_classes != spec.config.num_classes
    {
        return Err(Error::Config(format!(
            "model io ({} in, {} classes) does not match the case plan ({} in, {} classes)",
            model.config.in_channels,
            model.config.num_classes,
            spec.config.in_channels,
            spec.config.num_classes,
        )));
    }
    if spec.steps == 0 {
        return Err(Error::Config("training needs at least one step".into()));
    }
    let cases = training_cases(spec)?;
    let inputs: Vec<Tensor> = cases.iter().map(|c| c.volume.cast(model.dtype())).collect();

    model.set_requires_grad(true);
    let params = model.named_parameters();
    let mut optimizer = AdamW::new(spec.optimizer);
    let n_outputs = if model.config.deep_supervision { 4 } else { 1 };
    let weights = default_ds_weights(n_outputs);

    let mut history = TrainHistory::default();
    let mut final_dsc = None;
    let mut steps_run = 0;
    for step in 1..=spec.steps {
        steps_run = step;
        let case = &cases[(step - 1) % cases.len()];
        let input = &inputs[(step - 1) % cases.len()];

        let (main, ds) = model.forward(input)?;
        let mut outputs = vec![main];
        outputs.extend(ds);
        let loss = dice_ce_loss(&outputs, &case.labels, case.shape, &weights)?;
        let loss_value = loss.item_f64()?;
        if !loss_value.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss {loss_value} at step {step}"
            )));
        }
        model.zero_grads();
        loss.backward()?;
        optimizer.step(&params)?;

        let evaluate_now = spec.eval_every > 0
            && (step % spec.eval_every == 0 || step == spec.steps);
        let mut dsc = None;
        if evaluate_now {
            let value = evaluate_dsc(&model, &cases)?;
            final_dsc = Some(value);
            dsc = Some(value);
        }
        history.rows.push(HistoryRow { step, loss: loss_value, dsc_mean: dsc });
        if let (Some(target), Some(value)) = (spec.target_dsc, dsc) {
            if value >= target {
                break;
            }
        }
    }

    Ok(TrainOutcome { model, history, final_dsc, steps_run })
}
