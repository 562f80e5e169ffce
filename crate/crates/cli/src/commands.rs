//! Command implementations behind the CLI surface. Each returns a typed
//! error; `main` maps config/usage errors to exit 2 and runtime failures to
//! exit 3.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mrlb_core::augment::{eval_transform, AugmentationConfig};
use mrlb_core::autodiff::Mode;
use mrlb_core::checkpoint::{load_eval_encoder, save_moco_state};
use mrlb_core::curation::{read_detection_inputs, read_video_records, run_curation};
use mrlb_core::encoder::{encode, EncoderConfig, EncoderParams};
use mrlb_core::error::{Error, Result};
use mrlb_core::mococore::{init_state, train_step, SgdHyper};
use mrlb_core::ppm::load_image_tensor;
use mrlb_core::protocol::{
    hex_string, read_manifest, sample_few_shot, sample_small_scale, write_manifest,
    DatasetManifest, ManifestEntry, ManifestMeta, SamplerMode, SamplerSpec, Split,
};
use mrlb_core::reideval::{evaluate, EvalOptions, EvalReport, EvalSet};
use mrlb_core::synthgen::{generate_corpus, SynthSpec};
use mrlb_core::tensor::Tensor;

use crate::config::{resolve_workers, RunConfig};
use crate::loader::{build_batch, ImageStore, SampleScheduler};

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Full pretraining loop: deterministic batches, metrics CSV, periodic and
/// final checkpoints. Returns the final checkpoint path.
pub fn run_pretrain(config: &RunConfig) -> Result<PathBuf> {
    run_pretrain_with_workers(config, None)
}

/// [`run_pretrain`] with an explicit view-generation worker count
/// (overrides `MRLB_THREADS`). The checkpoint bytes are identical for any
/// worker count.
pub fn run_pretrain_with_workers(config: &RunConfig, workers: Option<usize>) -> Result<PathBuf> {
    config.validate()?;
    let digest = config.digest();
    create_dir(&config.paths.out_dir)?;

    let manifest = read_manifest(&config.paths.manifest)?;
    let store = ImageStore::load(&manifest, &config.paths.data_dir, Split::Train)?;
    let workers = resolve_workers(workers);

    let m = &config.moco;
    let mut state = init_state(&config.encoder, m.k, m.m, m.tau, m.batch_size, m.seed)?;
    let sgd = SgdHyper { momentum: m.sgd_momentum, weight_decay: m.weight_decay };
    let mut scheduler = SampleScheduler::new(store.len(), m.seed);

    let metrics_path = config.paths.out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).map_err(|e| Error::io(metrics_path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error| Error::io(metrics_path.display().to_string(), e);
    writeln!(metrics, "# config_digest={}", hex_string(&digest)).map_err(io_err)?;
    writeln!(metrics, "step,loss,pos_logit,neg_logit").map_err(io_err)?;

    let checkpoint_path = config.paths.out_dir.join("checkpoint.mrlb");
    for step in 0..m.steps {
        let slots = scheduler.next_batch(m.batch_size);
        let positions: Vec<u64> =
            (0..m.batch_size as u64).map(|i| step * m.batch_size as u64 + i).collect();
        let batch = build_batch(&store, &config.augmentation, &slots, &positions, m.seed, workers)?;
        let lr = config.moco.lr_schedule.lr_at(m.lr, step, m.steps);
        let out = train_step(&mut state, &batch, lr, &sgd)?;
        writeln!(
            metrics,
            "{},{},{},{}",
            step, out.loss, out.positive_logit_mean, out.negative_logit_mean
        )
        .map_err(io_err)?;
        if m.checkpoint_every > 0 && (step + 1) % m.checkpoint_every == 0 && step + 1 < m.steps {
            save_moco_state(
                &config.paths.out_dir.join(format!("checkpoint_step{:06}.mrlb", step + 1)),
                &state,
                digest,
            )?;
        }
    }
    metrics.flush().map_err(io_err)?;
    save_moco_state(&checkpoint_path, &state, digest)?;
    Ok(checkpoint_path)
}

/// Embed every entry of `split` in eval mode.
fn embed_split(
    config: &EncoderConfig,
    params: &mut EncoderParams<f32>,
    augmentation: &AugmentationConfig,
    manifest: &DatasetManifest,
    data_dir: &Path,
    split: Split,
) -> Result<(Tensor<f32>, Vec<i64>, Vec<i64>)> {
    let entries: Vec<&ManifestEntry> = manifest.entries_in(split).collect();
    if entries.is_empty() {
        return Err(Error::Manifest(format!("no entries in split {split:?}")));
    }
    let mut labels = Vec::with_capacity(entries.len());
    let mut cams = Vec::with_capacity(entries.len());
    let mut rows: Vec<f32> = Vec::new();
    let mut dim = 0usize;
    const EVAL_BATCH: usize = 64;
    for chunk in entries.chunks(EVAL_BATCH) {
        let mut data = Vec::new();
        for entry in chunk {
            let image = load_image_tensor(&data_dir.join(&entry.image_ref))?;
            let view = eval_transform(&image, augmentation)?;
            data.extend_from_slice(view.data());
            labels.push(entry.person_id.ok_or_else(|| {
                Error::Manifest(format!("entry `{}` missing person_id", entry.image_ref))
            })?);
            cams.push(entry.camera_id.ok_or_else(|| {
                Error::Manifest(format!("entry `{}` missing camera_id", entry.image_ref))
            })?);
        }
        let (oh, ow) = augmentation.output_size;
        let batch = Tensor::new(vec![chunk.len(), 3, oh, ow], data)?;
        let embeddings = encode(config, params, &batch, Mode::Eval, None)?;
        dim = embeddings.shape()[1];
        rows.extend_from_slice(embeddings.data());
    }
    Ok((Tensor::new(vec![labels.len(), dim], rows)?, labels, cams))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub data_dir: PathBuf,
    pub report_out: PathBuf,
    pub cam_filter: bool,
}

/// Evaluate a checkpoint: embed query/gallery in eval mode, rank, write the
/// JSON report.
pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (config, mut params, digest) = load_eval_encoder(&args.checkpoint)?;
    let manifest = read_manifest(&args.manifest)?;
    // Eval-time transform: full-image resize + corpus normalization.
    let (h, w, _) = config.input_size;
    let augmentation = AugmentationConfig::reid_default((h, w));

    let (q_emb, q_labels, q_cams) =
        embed_split(&config, &mut params, &augmentation, &manifest, &args.data_dir, Split::Query)?;
    let (g_emb, g_labels, g_cams) = embed_split(
        &config,
        &mut params,
        &augmentation,
        &manifest,
        &args.data_dir,
        Split::Gallery,
    )?;
    let set = EvalSet {
        query_embeddings: q_emb,
        query_labels: q_labels,
        query_cams: q_cams,
        gallery_embeddings: g_emb,
        gallery_labels: g_labels,
        gallery_cams: g_cams,
    };
    let report = evaluate(&set, &EvalOptions { cam_filter: args.cam_filter })?;
    if let Some(parent) = args.report_out.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    let json = report.to_json(&hex_string(&digest));
    std::fs::write(&args.report_out, serde_json::to_string_pretty(&json)?)
        .map_err(|e| Error::io(args.report_out.display().to_string(), e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Temperature,
    Erasing,
    Jitter,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(SweepAxis::Temperature),
            "erasing" => Ok(SweepAxis::Erasing),
            "jitter" => Ok(SweepAxis::Jitter),
            other => Err(Error::invalid("sweep axis", format!("unknown axis `{other}`"))),
        }
    }
}

/// Default temperature grid exposed by the sweep command.
pub const TEMPERATURE_GRID: [f32; 6] = [0.03, 0.05, 0.07, 0.1, 0.2, 0.3];

/// Apply one sweep value to a copy of the base config.
pub fn apply_sweep_value(base: &RunConfig, axis: SweepAxis, value: f32) -> RunConfig {
    let mut config = base.clone();
    match axis {
        SweepAxis::Temperature => config.moco.tau = value,
        SweepAxis::Erasing => {
            if value <= 0.0 {
                config.augmentation.erasing.prob = 0.0;
            } else {
                config.augmentation.erasing.prob = 0.5;
                config.augmentation.erasing.area_range.1 = value;
            }
        }
        SweepAxis::Jitter => config.augmentation.color_jitter.enabled = value != 0.0,
    }
    config
}

/// Train + evaluate once per value; one report per value plus a consolidated
/// CSV in the base out_dir.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[f32]) -> Result<Vec<EvalReport>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep", "at least one value required"));
    }
    base.validate()?;
    create_dir(&base.paths.out_dir)?;
    let axis_name = match axis {
        SweepAxis::Temperature => "temperature",
        SweepAxis::Erasing => "erasing",
        SweepAxis::Jitter => "jitter",
    };
    let csv_path = base.paths.out_dir.join(format!("sweep_{axis_name}.csv"));
    let mut csv = BufWriter::new(
        File::create(&csv_path).map_err(|e| Error::io(csv_path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error| Error::io(csv_path.display().to_string(), e);
    writeln!(csv, "# config_digest={}", base.digest_hex()).map_err(io_err)?;
    writeln!(csv, "axis,value,map,cmc1,num_valid_queries").map_err(io_err)?;

    let mut reports = Vec::new();
    for &value in values {
        let mut config = apply_sweep_value(base, axis, value);
        config.paths.out_dir = base.paths.out_dir.join(format!("run_{axis_name}_{value}"));
        let checkpoint = run_pretrain(&config)?;
        let report = run_eval(&EvalArgs {
            checkpoint,
            manifest: config.paths.manifest.clone(),
            data_dir: config.paths.data_dir.clone(),
            report_out: config.paths.out_dir.join("eval_report.json"),
            cam_filter: config.eval.cam_filter,
        })?;
        writeln!(
            csv,
            "{axis_name},{value},{},{},{}",
            report.map,
            report.cmc1(),
            report.num_valid_queries
        )
        .map_err(io_err)?;
        reports.push(report);
    }
    csv.flush().map_err(io_err)?;
    Ok(reports)
}

pub struct CurateArgs {
    pub detections: PathBuf,
    pub videos: PathBuf,
    pub out_manifest: PathBuf,
    pub rejection_log: PathBuf,
    pub stride: u64,
}

#[derive(serde::Serialize)]
pub struct CurateSummary {
    pub kept_videos: usize,
    pub rejected_videos: usize,
    pub accepted_crops: usize,
    pub rejected_crops: usize,
    pub identity_estimate: u64,
}

/// Curate detection/keypoint records into a training manifest plus a
/// rejection log. Accepted crops get sequential instance ids (unlabeled
/// data: every crop is its own identity for contrastive training).
pub fn run_curate(args: &CurateArgs) -> Result<CurateSummary> {
    if args.stride == 0 {
        return Err(Error::invalid("curate", "stride must be >= 1"));
    }
    let videos = read_video_records(&args.videos)?;
    let detections = read_detection_inputs(&args.detections)?;
    let outcome = run_curation(&videos, &detections, args.stride);

    let entries: Vec<ManifestEntry> = outcome
        .accepted
        .iter()
        .enumerate()
        .map(|(i, det)| ManifestEntry {
            // Symbolic handle: crop extraction is external, the ref only
            // needs to be unique and traceable to its source detection.
            image_ref: format!(
                "{}:{}:{}:{}:{}:{}#{}",
                det.video_key,
                det.frame_index,
                det.bbox[0],
                det.bbox[1],
                det.bbox[2],
                det.bbox[3],
                i
            ),
            person_id: Some(i as i64),
            camera_id: Some(0),
            split: Split::Train,
        })
        .collect();
    let manifest = DatasetManifest::new(
        entries,
        ManifestMeta { source: "curate".into(), seed: None, parent_digest: None },
    );
    if let Some(parent) = args.out_manifest.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    write_manifest(&manifest, &args.out_manifest)?;

    let log = File::create(&args.rejection_log)
        .map_err(|e| Error::io(args.rejection_log.display().to_string(), e))?;
    let mut log = BufWriter::new(log);
    let io_err = |e: std::io::Error| Error::io(args.rejection_log.display().to_string(), e);
    for (video, reason) in &outcome.rejected_videos {
        writeln!(
            log,
            "{}",
            serde_json::json!({ "video_key": video.key, "reasons": [reason] })
        )
        .map_err(io_err)?;
    }
    for rejection in &outcome.rejected {
        writeln!(log, "{}", serde_json::to_string(rejection)?).map_err(io_err)?;
    }
    log.flush().map_err(io_err)?;

    Ok(CurateSummary {
        kept_videos: outcome.kept_videos.len(),
        rejected_videos: outcome.rejected_videos.len(),
        accepted_crops: outcome.accepted.len(),
        rejected_crops: outcome.rejected.len(),
        identity_estimate: outcome.identity_estimate,
    })
}

pub struct SampleArgs {
    pub mode: SamplerMode,
    pub percentage: f64,
    pub seed: u64,
    pub input: PathBuf,
    pub output: PathBuf,
}

pub fn run_sample(args: &SampleArgs) -> Result<()> {
    let manifest = read_manifest(&args.input)?;
    let spec = SamplerSpec { mode: args.mode, percentage: args.percentage, seed: args.seed };
    let out = match args.mode {
        SamplerMode::SmallScale => sample_small_scale(&manifest, &spec)?,
        SamplerMode::FewShot => sample_few_shot(&manifest, &spec)?,
    };
    write_manifest(&out, &args.output)
}

pub fn run_synth(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    generate_corpus(spec, out_dir)
}

/// Gradient-check battery; returns pass/fail lines and the overall verdict.
pub fn run_gradcheck() -> Result<(Vec<String>, bool)> {
    let results = mrlb_core::diagnostics::run_gradcheck_suite()?;
    let mut lines = Vec::new();
    let mut all_pass = true;
    for (name, report) in results {
        all_pass &= report.pass;
        lines.push(format!(
            "{}: {} (max relative error {:.3e}, {} elements{})",
            name,
            if report.pass { "PASS" } else { "FAIL" },
            report.max_relative_error,
            report.num_elements_checked,
            report
                .worst_parameter
                .as_deref()
                .map(|p| format!(", worst {p}"))
                .unwrap_or_default(),
        ));
    }
    Ok((lines, all_pass))
}
