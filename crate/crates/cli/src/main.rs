//! Command-line front end: inspect architectures, train on synthetic
//! cases, transfer weights across kernel sizes, predict, and evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mednext_core::analysis::{count_flops, format_table_csv, format_table_text, layer_table};
use mednext_core::checkpoint::{
    load_checkpoint, load_volume, save_checkpoint, save_volume, Volume, VolumeData,
};
use mednext_core::error::{Error, Result};
use mednext_core::metrics::{argmax_labels, dsc_metric, sdc_metric};
use mednext_core::network::{build_model, ModelConfig};
use mednext_core::optim::AdamWConfig;
use mednext_core::tensor::{no_grad, Tensor};
use mednext_core::train::{train_loop, TrainSpec};
use mednext_core::upkern::upkern_transfer;

#[derive(Parser)]
#[command(
    name = "mednext",
    about = "3D segmentation networks with compound scaling and kernel-upsampled initialization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that select or override a model configuration.
#[derive(Args)]
struct ConfigFlags {
    /// Preset name: S, B, M, or L.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Depthwise kernel size (odd, 3 or larger).
    #[arg(long)]
    kernel: Option<usize>,
    /// Stem width (channels of the first stage).
    #[arg(long)]
    channels: Option<usize>,
    /// Input channels.
    #[arg(long)]
    in_channels: Option<usize>,
    /// Segmentation classes, background included.
    #[arg(long)]
    classes: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut config = match (&self.preset, &self.config) {
            (Some(name), None) => ModelConfig::preset(name.parse()?),
            (None, Some(path)) => ModelConfig::parse(&std::fs::read_to_string(path)?)?,
            (None, None) => {
                return Err(Error::Config(
                    "select a model with --preset or --config".into(),
                ))
            }
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        };
        if let Some(k) = self.kernel {
            config.kernel = k;
        }
        if let Some(c) = self.channels {
            config.base_channels = c;
        }
        if let Some(c) = self.in_channels {
            config.in_channels = c;
        }
        if let Some(c) = self.classes {
            config.num_classes = c;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-layer parameter and FLOP table of a configuration.
    Inspect {
        #[command(flatten)]
        config: ConfigFlags,
        /// Cube edge of the analyzed input volume.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Emit comma-separated values instead of aligned text.
        #[arg(long)]
        csv: bool,
    },
    /// Train on synthetic ellipsoid cases and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        /// Optimizer steps.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Learning rate.
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Seed for initialization and data generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthetic cases to cycle through.
        #[arg(long, default_value_t = 4)]
        cases: usize,
        /// Cube edge of each synthetic case (multiple of 16).
        #[arg(long, default_value_t = 32)]
        case_size: usize,
        /// Checkpoint output path.
        #[arg(long)]
        output: PathBuf,
        /// Also write the per-step history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Initialize a larger-kernel model from a trained checkpoint.
    Upkern {
        /// Source checkpoint path.
        #[arg(long)]
        source: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        target: PathBuf,
        /// Kernel size of the new model.
        #[arg(long)]
        kernel: usize,
    },
    /// Segment a volume with a trained checkpoint.
    Predict {
        /// Checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input volume file.
        #[arg(long)]
        input: PathBuf,
        /// Output label map file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare a predicted label map against a reference.
    Eval {
        /// Predicted label map file.
        #[arg(long)]
        input: PathBuf,
        /// Reference label map file.
        #[arg(long)]
        target: PathBuf,
        /// Class count; inferred from the maps when omitted.
        #[arg(long)]
        classes: Option<usize>,
        /// Surface Dice tolerance in voxels.
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Keep help and version on stdout with exit 0; everything else
            // becomes a single-line error.
            use clap::error::ErrorKind;
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            let first_line = err.to_string();
            let first_line = first_line.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first_line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Inspect { config, size, csv } => inspect(config, size, csv),
        Command::Train {
            config,
            steps,
            lr,
            seed,
            cases,
            case_size,
            output,
            history,
        } => train(config, steps, lr, seed, cases, case_size, output, history),
        Command::Upkern { source, target, kernel } => upkern(source, target, kernel),
        Command::Predict { ckpt, input, output } => predict(ckpt, input, output),
        Command::Eval { input, target, classes, tolerance } => {
            eval(input, target, classes, tolerance)
        }
    }
}

fn inspect(flags: ConfigFlags, size: usize, csv: bool) -> Result<()> {
    let config = flags.resolve()?;
    let spatial = [size, size, size];
    let rows = layer_table(&config, spatial)?;
    if csv {
        print!("{}", format_table_csv(&rows));
    } else {
        print!("{}", config.format());
        print!("{}", format_table_text(&rows));
        let gflops = count_flops(&config, spatial)? / 1e9;
        println!("forward pass at {size}x{size}x{size}: {gflops:.1} GFLOPs");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    flags: ConfigFlags,
    steps: usize,
    lr: f64,
    seed: u64,
    cases: usize,
    case_size: usize,
    output: PathBuf,
    history: Option<PathBuf>,
) -> Result<()> {
    let config = flags.resolve()?;
    let spec = TrainSpec {
        num_cases: cases,
        case_size,
        steps,
        optimizer: AdamWConfig { lr, ..AdamWConfig::default() },
        seed,
        ..TrainSpec::new(config)
    };
    let outcome = train_loop(&spec)?;
    save_checkpoint(&outcome.model, &output)?;
    if let Some(path) = history {
        std::fs::write(&path, outcome.history.to_csv())?;
    }
    let last = outcome.history.rows.last().expect("at least one step ran");
    match outcome.final_dsc {
        Some(dsc) => println!(
            "trained {} steps, final loss {:.4}, mean dice {:.4}, saved {}",
            outcome.steps_run,
            last.loss,
            dsc,
            output.display()
        ),
        None => println!(
            "trained {} steps, final loss {:.4}, saved {}",
            outcome.steps_run,
            last.loss,
            output.display()
        ),
    }
    Ok(())
}

fn upkern(source: PathBuf, target: PathBuf, kernel: usize) -> Result<()> {
    let ckpt = load_checkpoint(&source)?;
    let mut config = ckpt.config.clone();
    config.kernel = kernel;
    config.validate()?;
    let model = build_model(&config, 0)?;
    let report = upkern_transfer(&ckpt.entries, &model)?;
    save_checkpoint(&model, &target)?;
    println!("{}", report.summary());
    println!("saved {}", target.display());
    Ok(())
}

fn predict(ckpt: PathBuf, input: PathBuf, output: PathBuf) -> Result<()> {
    let model = load_checkpoint(&ckpt)?.into_model()?;
    let volume = load_volume(&input)?;
    let data = match volume.data {
        VolumeData::F32(v) => v,
        VolumeData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        VolumeData::U8(_) => {
            return Err(Error::Usage(
                "prediction input must be a float volume, not a label map".into(),
            ))
        }
    };
    let shape: Vec<usize> = match volume.shape.len() {
        3 => {
            let mut s = vec![1, 1];
            s.extend(&volume.shape);
            s
        }
        5 => volume.shape.clone(),
        r => {
            return Err(Error::Usage(format!(
                "prediction input must have rank 3 or 5, got rank {r}"
            )))
        }
    };
    let input_tensor = Tensor::from_vec_f32(&shape, data)?.cast(model.dtype());
    let (main, _) = no_grad(|| model.forward(&input_tensor))?;
    let labels = argmax_labels(&main)?;
    let out_shape = vec![shape[0], shape[2], shape[3], shape[4]];
    let out_shape = if shape[0] == 1 { out_shape[1..].to_vec() } else { out_shape };
    save_volume(
        &Volume { shape: out_shape, data: VolumeData::U8(labels) },
        &output,
    )?;
    println!("saved {}", output.display());
    Ok(())
}

fn eval(input: PathBuf, target: PathBuf, classes: Option<usize>, tolerance: f64) -> Result<()> {
    let pred = load_volume(&input)?;
    let truth = load_volume(&target)?;
    let (VolumeData::U8(pred_labels), VolumeData::U8(true_labels)) = (&pred.data, &truth.data)
    else {
        return Err(Error::Usage("evaluation expects uint8 label maps".into()));
    };
    if pred.shape != truth.shape {
        return Err(Error::Usage(format!(
            "label map shapes differ: {:?} vs {:?}",
            pred.shape, truth.shape
        )));
    }
    if pred.shape.len() != 3 {
        return Err(Error::Usage(format!(
            "evaluation expects rank-3 label maps, got {:?}",
            pred.shape
        )));
    }
    let shape = [pred.shape[0], pred.shape[1], pred.shape[2]];
    let num_classes = classes.unwrap_or_else(|| {
        let highest = pred_labels
            .iter()
            .chain(true_labels)
            .copied()
            .max()
            .unwrap_or(0);
        (highest as usize + 1).max(2)
    });
    let dsc = dsc_metric(pred_labels, true_labels, num_classes)?;
    let sdc = sdc_metric(pred_labels, true_labels, shape, num_classes, tolerance)?;
    for (i, (d, s)) in dsc.iter().zip(&sdc).enumerate() {
        println!("class {}: DSC {:.4} SDC {:.4}", i + 1, d, s);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    println!("mean: DSC {:.4} SDC {:.4}", mean(&dsc), mean(&sdc));
    Ok(())
}
