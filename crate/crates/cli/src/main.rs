//! `mrlb` - desk-scale momentum-contrast pretraining lab for person Re-ID.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mrlb_cli::commands::{
    self, CurateArgs, EvalArgs, SampleArgs, SweepAxis, TEMPERATURE_GRID,
};
use mrlb_cli::config::{load_config, save_config, RunConfig};
use mrlb_core::error::Error;
use mrlb_core::protocol::SamplerMode;
use mrlb_core::synthgen::{IdentitySignal, SynthSpec};

#[derive(Parser)]
#[command(name = "mrlb", about = "Momentum-contrast Re-ID pretraining lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pretraining loop from a JSON run config.
    Pretrain {
        /// Path to the run config JSON.
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest's query/gallery splits.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Directory holding the referenced images.
        #[arg(long)]
        data_dir: PathBuf,
        /// Output path of the JSON report.
        #[arg(long, default_value = "eval_report.json")]
        out: PathBuf,
        /// Disable same-id/same-camera gallery filtering.
        #[arg(long)]
        no_cam_filter: bool,
    },
    /// Train + evaluate over a grid of one hyperparameter axis.
    Sweep {
        config: PathBuf,
        /// Axis: temperature, erasing, or jitter.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the temperature grid for the
        /// temperature axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f32>,
    },
    /// Filter detection/keypoint records into a training manifest.
    Curate {
        detections: PathBuf,
        videos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rejections.jsonl")]
        rejections: PathBuf,
        #[arg(long, default_value_t = 100)]
        stride: u64,
    },
    /// Subsample a manifest's train split.
    Sample {
        /// small-scale (of ids) or few-shot (of images per id).
        #[arg(long)]
        mode: String,
        #[arg(long)]
        pct: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        images_per_id: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x32")]
        size: String,
        /// color, texture, or both.
        #[arg(long, default_value = "color")]
        signal: String,
        #[arg(long, default_value_t = 0.04)]
        view_noise: f32,
        #[arg(long, default_value_t = 0.0)]
        occlusion_prob: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the gradient-check battery.
    Gradcheck,
    /// Write a default run config for the given paths.
    InitConfig {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Where to write the config JSON.
        #[arg(long, default_value = "run_config.json")]
        out: PathBuf,
    },
}

fn is_usage_error(err: &Error) -> bool {
    matches!(
        err,
        Error::InvalidArgument { .. }
            | Error::Checkpoint(_)
            | Error::Manifest(_)
            | Error::ManifestLine { .. }
            | Error::QueueDivisibility { .. }
    )
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { config } => {
            let config = load_config(&config)?;
            let checkpoint = commands::run_pretrain(&config)?;
            println!("checkpoint written to {}", checkpoint.display());
        }
        Command::Eval { checkpoint, manifest, data_dir, out, no_cam_filter } => {
            let report = commands::run_eval(&EvalArgs {
                checkpoint,
                manifest,
                data_dir,
                report_out: out.clone(),
                cam_filter: !no_cam_filter,
            })?;
            println!(
                "mAP {:.4}  cmc1 {:.4}  valid queries {}  report {}",
                report.map,
                report.cmc1(),
                report.num_valid_queries,
                out.display()
            );
        }
        Command::Sweep { config, axis, values } => {
            let config = load_config(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let values = if values.is_empty() {
                match axis {
                    SweepAxis::Temperature => TEMPERATURE_GRID.to_vec(),
                    _ => {
                        return Err(Error::invalid(
                            "sweep",
                            "--values required for this axis".to_string(),
                        ))
                    }
                }
            } else {
                values
            };
            let reports = commands::run_sweep(&config, axis, &values)?;
            for (value, report) in values.iter().zip(&reports) {
                println!("value {value}: mAP {:.4} cmc1 {:.4}", report.map, report.cmc1());
            }
        }
        Command::Curate { detections, videos, out, rejections, stride } => {
            let summary = commands::run_curate(&CurateArgs {
                detections,
                videos,
                out_manifest: out,
                rejection_log: rejections,
                stride,
            })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sample { mode, pct, seed, input, out } => {
            let mode = match mode.as_str() {
                "small-scale" => SamplerMode::SmallScale,
                "few-shot" => SamplerMode::FewShot,
                other => {
                    return Err(Error::invalid("sample", format!("unknown mode `{other}`")))
                }
            };
            commands::run_sample(&SampleArgs { mode, percentage: pct, seed, input, output: out })?;
        }
        Command::Synth { out, ids, images_per_id, size, signal, view_noise, occlusion_prob, seed } => {
            let (h, w) = size
                .split_once('x')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| Error::invalid("synth", format!("bad --size `{size}`")))?;
            let identity_signal = match signal.as_str() {
                "color" => IdentitySignal::Color,
                "texture" => IdentitySignal::Texture,
                "both" => IdentitySignal::Both,
                other => return Err(Error::invalid("synth", format!("unknown signal `{other}`"))),
            };
            let spec = SynthSpec {
                num_ids: ids,
                images_per_id,
                image_size: (h, w),
                identity_signal,
                view_noise,
                occlusion_prob,
                seed,
            };
            let manifest = commands::run_synth(&spec, &out)?;
            println!("wrote {} images to {}", manifest.entries.len(), out.display());
        }
        Command::Gradcheck => {
            let (lines, all_pass) = commands::run_gradcheck()?;
            for line in lines {
                println!("{line}");
            }
            if !all_pass {
                return Err(Error::invalid("gradcheck", "at least one check failed".to_string()));
            }
        }
        Command::InitConfig { manifest, data_dir, out_dir, out } => {
            let config = RunConfig::desk_default(manifest, data_dir, out_dir);
            save_config(&config, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
