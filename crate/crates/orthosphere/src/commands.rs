//! Experiment drivers behind the `train`, `analyze`, `prune`, `gradcam` and
//! `synth` subcommands. Each one takes a resolved [`RunConfig`], writes its
//! outputs under `out_dir` and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use orthosphere_core::analysis::{
    apply_prune, calibration, channel_correlation, grad_cam, n_from_rate, prune_rank, split_halves, CalibrationReport,
    CorrelationStats, Heatmap, PruneRow,
};
use orthosphere_core::data::{normalize, split_semi, synth_dataset_with, Dataset, NormStats, SemiSplit};
use orthosphere_core::model::{Model, PruneMask};
use orthosphere_core::train::{evaluation_from_probs, EpochRecord, Evaluation, Trainer, INIT_STREAM};
use orthosphere_core::{Rng, Tensor};

use crate::checkpoint::Checkpoint;
use crate::cifar;
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::pnm;
use crate::tables;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const CORRELATION_CSV: &str = "correlation.csv";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const PRUNE_CSV: &str = "prune_sweep.csv";
pub const HEATMAP_PGM: &str = "gradcam.pgm";
pub const OVERLAY_PPM: &str = "gradcam_overlay.ppm";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig, resolved_name: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join(resolved_name), cfg.to_toml()?.as_bytes())
}

/// Name of the resolved-config file a command writes.
pub fn resolved_name(command: &str) -> String {
    if command == "train" {
        RESOLVED_CONFIG.to_string()
    } else {
        format!("resolved_config.{command}.toml")
    }
}

/// Raw (`[0, 1]`) training and test sets described by the data section.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let (tr, te) = (d.train_per_class.unwrap_or(0), d.test_per_class.unwrap_or(0));
            let all = synth_dataset_with(d.classes, tr + te, cfg.data_seed(), &d.synth)?;
            let idx: Vec<usize> = (0..all.len()).collect();
            let (a, b) = idx.split_at(d.classes * tr);
            Ok((all.subset(a), all.subset(b)))
        }
        DataSource::Cifar10 => {
            let dir = d.cifar_dir.as_ref().ok_or_else(|| Error::config("data.cifar_dir", "not set"))?;
            let (train, test) = cifar::read_dir(dir)?;
            let keep: Vec<usize> = (0..d.classes).collect();
            Ok((train.select_classes(&keep, d.train_per_class)?, test.select_classes(&keep, d.test_per_class)?))
        }
    }
}

/// Writes the configured synthetic data as CIFAR-format batches in `dir`.
pub fn write_synthetic_cifar(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::config("data.source", "must be \"synthetic\" to export synthetic data"));
    }
    let (train, test) = load_data(cfg)?;
    Ok(cifar::write_dir(dir, &train, &test)?)
}

/// Evaluation-mode class probabilities in chunks, computed in parallel;
/// identical to [`orthosphere_core::train::evaluate`] with the same chunk.
pub fn par_evaluate(model: &Model<f32>, data: &Dataset, chunk: usize) -> Result<Evaluation<f32>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .par_chunks(chunk.max(1))
        .map(|c| model.infer(&data.batch::<f32>(c)).map(|o| o.probs.into_data()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let probs = Tensor::new(&[data.len(), model.config().classes], parts.concat())?;
    Ok(evaluation_from_probs(probs, data.labels()))
}

/// Feature maps of `layer` for the first `count` images.
pub fn par_feature_maps(
    model: &Model<f32>,
    data: &Dataset,
    layer: &str,
    count: usize,
    chunk: usize,
) -> Result<Tensor<f32>> {
    let idx: Vec<usize> = (0..count.min(data.len())).collect();
    let parts = idx
        .par_chunks(chunk.max(1))
        .map(|c| {
            let mut out = model.infer(&data.batch::<f32>(c))?;
            Ok(out.feature_maps.remove(layer).expect("layer checked"))
        })
        .collect::<Result<Vec<Tensor<f32>>>>()?;
    let mut shape = parts[0].shape().to_vec();
    shape[0] = idx.len();
    let data: Vec<f32> = parts.into_iter().flat_map(|t| t.into_data()).collect();
    Ok(Tensor::new(&shape, data)?)
}

/// [`orthosphere_core::analysis::prune_sweep`] with the rates evaluated in
/// parallel; same rows.
pub fn par_prune_sweep(
    model: &Model<f32>,
    data: &Dataset,
    validation: &[usize],
    test: &[usize],
    layer: &str,
    rates: &[f64],
    chunk: usize,
) -> Result<Vec<PruneRow>> {
    let mut seen = vec![false; data.len()];
    validation.iter().for_each(|&i| seen[i] = true);
    if test.iter().any(|&i| seen[i]) {
        return Err(Error::Format("validation and test halves overlap".into()));
    }
    let ranking = prune_rank(model, data, validation, layer, chunk)?;
    let m = ranking.order.len();
    let test_set = data.subset(test);
    rates
        .par_iter()
        .map(|&rate| {
            let n = n_from_rate(rate, m)?;
            let mut pruned = model.clone();
            if n > 0 {
                pruned.set_prune_mask(&apply_prune(&ranking, n)?)?;
            }
            Ok(PruneRow { rate_pct: rate, n, accuracy: par_evaluate(&pruned, &test_set, chunk)?.accuracy })
        })
        .collect()
}

/// Result of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub norm: NormStats,
}

/// Trains from scratch, or from `resume`, writing the per-epoch log and a
/// checkpoint after every epoch.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainReport> {
    prepare_out(cfg, RESOLVED_CONFIG)?;
    let (train_raw, test_raw) = load_data(cfg)?;
    let (train, norm) = normalize(&train_raw)?;
    let test = norm.apply(&test_raw)?;
    let split = match cfg.data.labeled {
        Some(l) => split_semi(&train, l, cfg.seed)?,
        None => SemiSplit::all_labeled(train.len()),
    };
    log::info!(
        "{} training images ({} labeled), {} test images, {} classes",
        train.len(),
        split.labeled.len(),
        test.len(),
        train.classes()
    );

    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let ckpt_path = cfg.out_dir.join(CHECKPOINT);
    let (mut trainer, mut log_bytes) = match resume {
        None => {
            let model = Model::new(cfg.model.clone(), &mut Rng::derive(cfg.seed, &[INIT_STREAM]))?;
            (Trainer::new(model, cfg.train.clone())?, tables::training_log_csv(&[])?)
        }
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            if ck.model.config() != &cfg.model {
                return Err(Error::config("model", "checkpoint was trained with a different model configuration"));
            }
            let adam = ck.adam.ok_or_else(|| Error::Format(format!("{}: no optimizer state", path.display())))?;
            let existing = fs::read(&log_path).unwrap_or_default();
            let prefix = if existing.is_empty() { tables::training_log_csv(&[])? } else { existing };
            (Trainer::resume(ck.model, adam, cfg.train.clone(), ck.epoch)?, prefix)
        }
    };

    let mut log = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.train_epoch(&train, &split, Some(&test))?;
        log::info!(
            "epoch {} ce {:.4} cons {:.4} aux {:.4} os {:.4} acc {}",
            rec.epoch,
            rec.ce,
            rec.consistency,
            rec.aux,
            rec.os,
            rec.eval_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        log_bytes.extend(tables::training_log_rows(std::slice::from_ref(&rec))?);
        write_file(&log_path, &log_bytes)?;
        let ck = Checkpoint {
            model: trainer.model.clone(),
            adam: Some(trainer.adam.clone()),
            epoch: trainer.epoch,
            norm: Some(norm.clone()),
            train: Some(cfg.train.clone()),
        };
        ck.save(&ckpt_path)?;
        log.push(rec);
    }
    if log.is_empty() {
        write_file(&log_path, &log_bytes)?;
    }
    Ok(TrainReport { log, checkpoint: ckpt_path, norm })
}

/// Model from the configured checkpoint with the test set normalized by the
/// checkpoint's statistics; checks the two are compatible.
pub fn load_for_analysis(cfg: &RunConfig) -> Result<(Model<f32>, Dataset, Dataset)> {
    let ck = Checkpoint::<f32>::load(&cfg.checkpoint_path())?;
    let (_, test_raw) = load_data(cfg)?;
    let mc = ck.model.config();
    if mc.classes != test_raw.classes() {
        return Err(Error::config(
            "data.classes",
            format!("checkpoint predicts {} classes, dataset has {}", mc.classes, test_raw.classes()),
        ));
    }
    if mc.input != test_raw.shape() {
        return Err(Error::config(
            "model.input",
            format!("checkpoint expects {:?}, data is {:?}", mc.input, test_raw.shape()),
        ));
    }
    if test_raw.is_empty() {
        return Err(Error::config("data.test_per_class", "test set is empty"));
    }
    let norm = ck
        .norm
        .clone()
        .unwrap_or_else(|| NormStats { mean: vec![0.0; mc.input.channels], std: vec![1.0; mc.input.channels] });
    let test = norm.apply(&test_raw)?;
    Ok((ck.model, test, test_raw))
}

fn layer_or_final(model: &Model<f32>, layer: &Option<String>, key: &str) -> Result<String> {
    let name = layer.clone().unwrap_or_else(|| model.config().final_layer());
    if model.config().layer_channels(&name).is_none() {
        return Err(Error::config(key, format!("checkpoint model has no layer {name:?}")));
    }
    Ok(name)
}

/// Result of [`cmd_analyze`].
#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    pub correlation: Option<CorrelationStats>,
    pub calibration: CalibrationReport,
    pub accuracy: Option<f64>,
}

/// Correlation histogram and calibration of the checkpoint on the test set,
/// or calibration alone of `analysis.predictions`.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeReport> {
    prepare_out(cfg, &resolved_name("analyze"))?;
    let a = &cfg.analysis;
    if let Some(path) = &a.predictions {
        let (probs, labels) = tables::read_predictions(path)?;
        let report = calibration(&probs, &labels, a.calibration_bins)
            .map_err(|e| Error::config("analysis.predictions", e.to_string()))?;
        write_file(&cfg.out_dir.join(CALIBRATION_CSV), &tables::calibration_csv(&report)?)?;
        return Ok(AnalyzeReport { correlation: None, calibration: report, accuracy: None });
    }
    let (model, test, _) = load_for_analysis(cfg)?;
    let layer = layer_or_final(&model, &a.layer, "analysis.layer")?;
    let ev = par_evaluate(&model, &test, a.chunk)?;
    let report = calibration(&ev.probs, test.labels(), a.calibration_bins)?;
    let maps = par_feature_maps(&model, &test, &layer, a.correlation_images, a.chunk)?;
    let corr = channel_correlation(&maps, a.correlation_bins, a.correlation_mode, &layer)?;
    write_file(&cfg.out_dir.join(CORRELATION_CSV), &tables::correlation_csv(&corr)?)?;
    write_file(&cfg.out_dir.join(CALIBRATION_CSV), &tables::calibration_csv(&report)?)?;
    log::info!("accuracy {:.4}, ece {:.4}, mean |r| at {layer} {:.4}", ev.accuracy, report.ece, corr.mean_abs);
    Ok(AnalyzeReport { correlation: Some(corr), calibration: report, accuracy: Some(ev.accuracy) })
}

/// Prune sweep: channels ranked on a seeded validation half of the test set,
/// accuracy measured on the other half.
pub fn cmd_prune(cfg: &RunConfig) -> Result<Vec<PruneRow>> {
    prepare_out(cfg, &resolved_name("prune"))?;
    let a = &cfg.analysis;
    let (model, test, _) = load_for_analysis(cfg)?;
    let layer = layer_or_final(&model, &a.prune_layer, "analysis.prune_layer")?;
    let (validation, held_out) = split_halves(test.len(), cfg.seed);
    let rows = par_prune_sweep(&model, &test, &validation, &held_out, &layer, &a.prune_rates, a.chunk)?;
    write_file(&cfg.out_dir.join(PRUNE_CSV), &tables::prune_csv(&rows)?)?;
    Ok(rows)
}

/// Result of [`cmd_gradcam`].
#[derive(Debug, Clone)]
pub struct GradcamReport {
    /// Map at input resolution.
    pub heatmap: Heatmap,
    pub mask: Option<PruneMask>,
}

/// Grad-CAM of one test image (or image file), optionally after pruning.
pub fn cmd_gradcam(cfg: &RunConfig) -> Result<GradcamReport> {
    prepare_out(cfg, &resolved_name("gradcam"))?;
    let a = &cfg.analysis;
    let ck = Checkpoint::<f32>::load(&cfg.checkpoint_path())?;
    let mut model = ck.model;
    let input = model.config().input;
    let (raw, label) = match &a.gradcam_image_file {
        Some(path) => {
            let d = cifar::read(path)?;
            if d.is_empty() {
                return Err(Error::config("analysis.gradcam_image_file", "file holds no records"));
            }
            (d.image(0).to_vec(), d.label(0))
        }
        None => {
            let (_, test_raw) = load_data(cfg)?;
            if a.gradcam_image >= test_raw.len() {
                return Err(Error::config(
                    "analysis.gradcam_image",
                    format!("index {} exceeds the {}-image test set", a.gradcam_image, test_raw.len()),
                ));
            }
            (test_raw.image(a.gradcam_image).to_vec(), test_raw.label(a.gradcam_image))
        }
    };
    if raw.len() != input.len() {
        return Err(Error::config(
            "model.input",
            format!("image holds {} values, model expects {}", raw.len(), input.len()),
        ));
    }
    let class = a.gradcam_class.unwrap_or(label);
    if class >= model.config().classes {
        return Err(Error::config(
            "analysis.gradcam_class",
            format!("class {class} exceeds {} classes", model.config().classes),
        ));
    }
    let layer = layer_or_final(&model, &a.gradcam_layer, "analysis.gradcam_layer")?;
    let norm = ck.norm.unwrap_or_else(|| NormStats { mean: vec![0.0; input.channels], std: vec![1.0; input.channels] });

    let mask = match a.gradcam_prune_rate {
        Some(rate) => {
            let (_, test, _) = load_for_analysis(cfg)?;
            let prune_layer = layer_or_final(&model, &a.prune_layer, "analysis.prune_layer")?;
            let (validation, _) = split_halves(test.len(), cfg.seed);
            let ranking = prune_rank(&model, &test, &validation, &prune_layer, a.chunk)?;
            let n = n_from_rate(rate, ranking.order.len())
                .map_err(|e| Error::config("analysis.gradcam_prune_rate", e.to_string()))?;
            let mask = apply_prune(&ranking, n)?;
            if n > 0 {
                model.set_prune_mask(&mask)?;
            }
            Some(mask)
        }
        None => None,
    };

    let plane = input.plane();
    let image: Vec<f32> = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| ((v as f64 - norm.mean[i / plane]) / norm.std[i / plane]) as f32)
        .collect();
    let map = grad_cam(&model, &image, class, &layer)?.upsample(input.height, input.width);
    write_file(&cfg.out_dir.join(HEATMAP_PGM), &pnm::heatmap_pgm(&map))?;
    let rgb: Vec<f32> =
        if input.channels == 3 { raw } else { (0..3).flat_map(|_| raw[..plane].iter().copied()).collect() };
    write_file(&cfg.out_dir.join(OVERLAY_PPM), &pnm::overlay_ppm(&map, &rgb)?)?;
    Ok(GradcamReport { heatmap: map, mask })
}

/// Writes the configured synthetic dataset in CIFAR format under
/// `<out_dir>/cifar`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    prepare_out(cfg, &resolved_name("synth"))?;
    let dir = cfg.out_dir.join("cifar");
    write_synthetic_cifar(cfg, &dir)?;
    Ok(dir)
}
