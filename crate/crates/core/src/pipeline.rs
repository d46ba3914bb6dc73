//! Experiment orchestration: stage execution with hash-gated skipping, run
//! manifests, the OOD probe protocol, and report emission.

use crate::cluster::{cluster_and_report, pca_tokens, ClusterMetrics, ClusterReport, KmeansOptions};
use crate::config::{DataSource, DatasetSection, ExperimentConfig, Regime};
use crate::data::{augment, ingest, split_indices, subset, synthesize, AugmentMode, LabeledImageSet, SyntheticSpec};
use crate::denoiser::{ReadoutId, UNet, WeightKind};
use crate::error::{Error, Result};
use crate::features::{extract_grid, FeatureGrid};
use crate::imageio;
use crate::nn::load_checkpoint;
use crate::probe::{evaluate, fit_probe, sweep, sweep_csv, EvalMetrics};
use crate::rng;
use crate::schedule::{NoiseSchedule, TimestepSampler};
use crate::train::{train_loop, TrainResult};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub config_hash: String,
    pub skipped: bool,
    pub wall_ms: u128,
    pub outputs: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config_toml: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn artifact(&self, suffix: &str) -> Option<&ArtifactRecord> {
        self.stages
            .iter()
            .flat_map(|s| &s.outputs)
            .find(|a| a.path.ends_with(suffix))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("manifest encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("manifest parse: {e}"),
        })
    }
}

fn record_outputs(run_dir: &Path, outputs: &[PathBuf]) -> Result<Vec<ArtifactRecord>> {
    let mut records = Vec::with_capacity(outputs.len());
    for path in outputs {
        let rel = path
            .strip_prefix(run_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        records.push(ArtifactRecord {
            path: rel,
            sha256: sha256_file(path)?,
        });
    }
    Ok(records)
}

/// Runs (or skips) one pipeline stage. A stage is skipped when its recorded
/// config hash matches and every recorded output still exists with the same
/// content hash; otherwise the closure runs and the state file is rewritten.
fn run_stage(
    run_dir: &Path,
    name: &str,
    config_hash: &str,
    body: impl FnOnce() -> Result<Vec<PathBuf>>,
) -> Result<StageRecord> {
    let state_path = run_dir.join(format!(".stage_{name}.json"));
    if let Ok(text) = std::fs::read_to_string(&state_path) {
        if let Ok(prev) = serde_json::from_str::<StageRecord>(&text) {
            if prev.config_hash == config_hash {
                let all_present = prev.outputs.iter().all(|a| {
                    let p = run_dir.join(&a.path);
                    sha256_file(&p).map(|h| h == a.sha256).unwrap_or(false)
                });
                if all_present {
                    return Ok(StageRecord {
                        skipped: true,
                        ..prev
                    });
                }
            }
        }
    }
    let start = Instant::now();
    let outputs = body().map_err(|e| e.in_stage(name))?;
    let record = StageRecord {
        name: name.to_string(),
        config_hash: config_hash.to_string(),
        skipped: false,
        wall_ms: start.elapsed().as_millis(),
        outputs: record_outputs(run_dir, &outputs)?,
    };
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::contract(format!("stage record encode: {e}")))?;
    std::fs::write(&state_path, text).map_err(|e| Error::io(&state_path, e))?;
    Ok(record)
}

fn section_hash<T: Serialize>(label: &str, sections: &T, inputs: &[&str]) -> String {
    let body = serde_json::to_string(sections).expect("serializable config section");
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(body.as_bytes());
    for i in inputs {
        h.update([0xfe]);
        h.update(i.as_bytes());
    }
    format!("{:x}", h.finalize())
}

fn stage_output_hashes(record: &StageRecord) -> String {
    let mut h = Sha256::new();
    for a in &record.outputs {
        h.update(a.path.as_bytes());
        h.update(a.sha256.as_bytes());
    }
    format!("{:x}", h.finalize())
}

// ---------------------------------------------------------------------------
// Data stage
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: String,
    pub classes: usize,
    pub label_names: Vec<String>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub dropped_classes: Vec<usize>,
    pub ingest_skipped: usize,
}

/// Builds the dataset splits from a dataset section: source, stratified
/// split, class-drop rule, training-split augmentation, and dense relabeling
/// when classes were dropped.
pub fn build_dataset(
    section: &DatasetSection,
    image_size: usize,
) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet, DatasetMeta)> {
    let (full, ingest_skipped) = match section.source {
        DataSource::Synthetic => {
            let mut spec =
                SyntheticSpec::fine_grained(section.classes, image_size, section.noise_level);
            spec.jitter = section.jitter;
            (synthesize(&spec, section.per_class, section.seed)?, 0)
        }
        DataSource::Directory => {
            let path = section
                .path
                .as_ref()
                .ok_or_else(|| Error::config("directory source requires dataset.path"))?;
            let (set, report) = ingest(path, section.label_map.as_deref(), image_size)?;
            (set, report.skipped)
        }
    };
    let plan = section.split_plan();
    let splits = split_indices(&full, &plan)?;
    let mut train = subset(&full, &splits.train);
    let mut val = subset(&full, &splits.val);
    let mut test = subset(&full, &splits.test);

    // Dense relabeling when the long-tail rule dropped classes.
    if !splits.dropped_classes.is_empty() {
        let classes = full.class_count();
        let mut remap = vec![u32::MAX; classes];
        let mut names = Vec::new();
        let mut next = 0u32;
        for c in 0..classes {
            if !splits.dropped_classes.contains(&c) {
                remap[c] = next;
                names.push(full.label_names[c].clone());
                next += 1;
            }
        }
        for set in [&mut train, &mut val, &mut test] {
            for l in &mut set.labels {
                *l = remap[*l as usize];
            }
            set.label_names = names.clone();
            set.validate()?;
        }
    }

    if section.augment {
        match section.regime {
            Regime::Balanced => {
                let quota = if section.quota > 0 {
                    section.quota
                } else {
                    train.class_counts().into_iter().max().unwrap_or(0)
                };
                augment(&mut train, AugmentMode::Quota(quota), section.seed)?;
            }
            Regime::LongTail => {
                if section.multiplier > 0 {
                    augment(
                        &mut train,
                        AugmentMode::Multiplier(section.multiplier),
                        section.seed,
                    )?;
                }
            }
        }
    }

    let meta = DatasetMeta {
        id: String::new(), // filled after serialization
        classes: train.class_count(),
        label_names: train.label_names.clone(),
        train_count: train.len(),
        val_count: val.len(),
        test_count: test.len(),
        dropped_classes: splits.dropped_classes,
        ingest_skipped,
    };
    Ok((train, val, test, meta))
}

fn data_stage_outputs(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for stem in ["train", "val", "test"] {
        for ext in ["dpim", "labels", "labelmap", "provenance"] {
            out.push(dir.join(format!("{stem}.{ext}")));
        }
    }
    out.push(dir.join("dataset.json"));
    out
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

pub struct PipelineHandles {
    pub manifest: RunManifest,
    pub run_dir: PathBuf,
}

fn resolved_readouts(config: &ExperimentConfig) -> Vec<ReadoutId> {
    let blocks = config.model.decoder_blocks_per_stage;
    if config.sweep.readouts.is_empty() {
        config.model.readout_table().iter().map(|i| i.id).collect()
    } else {
        config
            .sweep
            .readouts
            .iter()
            .map(|&ell| ReadoutId::from_ell(ell, blocks).expect("validated"))
            .collect()
    }
}

/// Executes data -> train -> extract -> sweep -> cluster, skipping stages
/// whose recorded outputs are present with matching hashes.
pub fn run_pipeline(config: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_toml = config.to_toml_string()?;
    let config_hash = sha256_bytes(config_toml.as_bytes());
    let config_path = run_dir.join("config.toml");
    std::fs::write(&config_path, &config_toml).map_err(|e| Error::io(&config_path, e))?;

    let mut stages = Vec::new();

    // -- data ---------------------------------------------------------------
    let data_dir = run_dir.join("data");
    let data_hash = section_hash(
        "data",
        &(&config.dataset, config.model.image_size),
        &[],
    );
    let data_record = run_stage(run_dir, "data", &data_hash, || {
        std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        let (train, val, test, mut meta) = build_dataset(&config.dataset, config.model.image_size)?;
        train.save(&data_dir, "train")?;
        val.save(&data_dir, "val")?;
        test.save(&data_dir, "test")?;
        let mut id_hash = Sha256::new();
        for stem in ["train", "val", "test"] {
            let bytes = std::fs::read(data_dir.join(format!("{stem}.dpim")))
                .map_err(|e| Error::io(&data_dir, e))?;
            id_hash.update(&bytes);
        }
        meta.id = format!("{:x}", id_hash.finalize());
        let meta_path = data_dir.join("dataset.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta)
                .map_err(|e| Error::contract(format!("meta encode: {e}")))?,
        )
        .map_err(|e| Error::io(&meta_path, e))?;
        Ok(data_stage_outputs(&data_dir))
    })?;
    let data_outputs_hash = stage_output_hashes(&data_record);
    stages.push(data_record);

    // -- train --------------------------------------------------------------
    let train_dir = run_dir.join("train");
    let train_hash = section_hash(
        "train",
        &(
            &config.schedule,
            &config.weighting,
            &config.sampler,
            &config.model,
            &config.train,
            &config.fid,
        ),
        &[&data_outputs_hash],
    );
    let train_record = run_stage(run_dir, "train", &train_hash, || {
        let train_set = LabeledImageSet::load(&data_dir, "train")?;
        let val_set = LabeledImageSet::load(&data_dir, "val")?;
        let schedule = NoiseSchedule::build(config.schedule.kind, config.schedule.t, config.schedule.offset_s)?;
        let sampler = TimestepSampler::build(config.sampler.kind, config.schedule.t)?;
        let mut net = UNet::<f32>::build(config.model.clone(), config.train.seed)?;
        let ckpt_config = serde_json::json!({
            "model": &config.model,
            "schedule": &config.schedule,
            "weighting": &config.weighting,
            "sampler": &config.sampler,
            "train": &config.train,
        });
        let result: TrainResult = train_loop(
            &mut net,
            &schedule,
            &config.weighting,
            &sampler,
            &train_set,
            &val_set,
            &config.train,
            &config.fid,
            &ckpt_config,
            &train_dir,
        )?;
        let summary_path = train_dir.join("train_summary.json");
        std::fs::write(
            &summary_path,
            serde_json::to_string_pretty(&serde_json::json!({
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
                "epochs": config.train.epochs,
            }))
            .map_err(|e| Error::contract(format!("summary encode: {e}")))?,
        )
        .map_err(|e| Error::io(&summary_path, e))?;
        let mut outputs = vec![
            result.best_checkpoint,
            result.last_checkpoint,
            result.loss_csv,
            summary_path,
        ];
        if let Some(fid) = result.fid_csv {
            outputs.push(fid);
        }
        Ok(outputs)
    })?;
    let train_outputs_hash = stage_output_hashes(&train_record);
    stages.push(train_record);

    // -- extract ------------------------------------------------------------
    let ckpt_path = train_dir.join("ckpt_best.dprb");
    let features_dir = run_dir.join("features");
    let extract_hash = section_hash("extract", &config.sweep, &[&train_outputs_hash, &data_outputs_hash]);
    let extract_record = run_stage(run_dir, "extract", &extract_hash, || {
        let ckpt_hash_before = sha256_file(&ckpt_path)?;
        let ck = load_checkpoint(&ckpt_path)?;
        let net = UNet::<f32>::from_checkpoint(&ck, WeightKind::Ema)?;
        let readouts = resolved_readouts(config);
        let schedule = NoiseSchedule::build(config.schedule.kind, config.schedule.t, config.schedule.offset_s)?;
        let meta: DatasetMeta = serde_json::from_str(
            &std::fs::read_to_string(data_dir.join("dataset.json"))
                .map_err(|e| Error::io(&data_dir, e))?,
        )
        .map_err(|e| Error::contract(format!("dataset meta parse: {e}")))?;
        let mut outputs = Vec::new();
        for split in ["train", "val", "test"] {
            let images = LabeledImageSet::load(&data_dir, split)?;
            let grid = extract_grid(
                &net,
                &schedule,
                &images,
                &config.sweep.timesteps,
                &readouts,
                config.sweep.seed,
                &format!("{}:{split}", meta.id),
                &ckpt_hash_before,
            )?;
            outputs.extend(grid.save(&features_dir.join(split))?);
        }
        let ckpt_hash_after = sha256_file(&ckpt_path)?;
        if ckpt_hash_after != ckpt_hash_before {
            return Err(Error::contract(
                "feature extraction mutated the checkpoint file",
            ));
        }
        Ok(outputs)
    })?;
    let extract_outputs_hash = stage_output_hashes(&extract_record);
    stages.push(extract_record);

    // -- sweep --------------------------------------------------------------
    let sweep_dir = run_dir.join("sweep");
    let sweep_hash = section_hash("sweep", &(&config.probe, &config.sweep), &[&extract_outputs_hash]);
    let sweep_record = run_stage(run_dir, "sweep", &sweep_hash, || {
        std::fs::create_dir_all(&sweep_dir).map_err(|e| Error::io(&sweep_dir, e))?;
        let train_set = LabeledImageSet::load(&data_dir, "train")?;
        let val_set = LabeledImageSet::load(&data_dir, "val")?;
        let test_set = LabeledImageSet::load(&data_dir, "test")?;
        let train_grid = FeatureGrid::load(&features_dir.join("train"))?;
        let val_grid = FeatureGrid::load(&features_dir.join("val"))?;
        let test_grid = FeatureGrid::load(&features_dir.join("test"))?;
        let result = sweep(
            &train_grid,
            &val_grid,
            &test_grid,
            &train_set.labels,
            &val_set.labels,
            &test_set.labels,
            train_set.class_count(),
            &config.probe,
            config.sweep.full_test,
        )?;
        let model = config.model.clone();
        let n = model.n_stages();
        let csv = sweep_csv(&result, &|stage_r| model.resolution(n - stage_r));
        let csv_path = sweep_dir.join("sweep.csv");
        std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
        let sel_path = sweep_dir.join("selection.json");
        std::fs::write(
            &sel_path,
            serde_json::to_string_pretty(&result.selection())
                .map_err(|e| Error::contract(format!("selection encode: {e}")))?,
        )
        .map_err(|e| Error::io(&sel_path, e))?;
        Ok(vec![csv_path, sel_path])
    })?;
    let sweep_outputs_hash = stage_output_hashes(&sweep_record);
    stages.push(sweep_record);

    // -- cluster ------------------------------------------------------------
    if config.cluster.enabled {
        let cluster_dir = run_dir.join("cluster");
        let cluster_hash = section_hash("cluster", &config.cluster, &[&sweep_outputs_hash]);
        let cluster_record = run_stage(run_dir, "cluster", &cluster_hash, || {
            std::fs::create_dir_all(&cluster_dir).map_err(|e| Error::io(&cluster_dir, e))?;
            let selection: crate::probe::SelectionSummary = serde_json::from_str(
                &std::fs::read_to_string(sweep_dir.join("selection.json"))
                    .map_err(|e| Error::io(&sweep_dir, e))?,
            )
            .map_err(|e| Error::contract(format!("selection parse: {e}")))?;
            let test_set = LabeledImageSet::load(&data_dir, "test")?;
            let test_grid = FeatureGrid::load(&features_dir.join("test"))?;
            let cell = test_grid
                .cell(selection.t_star, selection.ell_star)
                .ok_or_else(|| {
                    Error::contract(format!(
                        "missing test cell (t={}, ell={})",
                        selection.t_star, selection.ell_star
                    ))
                })?;
            let normalized = crate::probe::l2_normalize_rows(cell);
            let k = if config.cluster.k > 0 {
                config.cluster.k
            } else {
                test_set.class_count()
            };
            let mut runs: Vec<ClusterReport> = Vec::new();
            for run in 0..config.cluster.runs.max(1) {
                let seed: u64 = rng::stream(config.cluster.seed, "cluster-run", &[run as u64]).gen();
                let opts = KmeansOptions {
                    restarts: config.cluster.restarts,
                    max_iter: config.cluster.max_iter,
                    tol: config.cluster.tol,
                    seed,
                };
                runs.push(cluster_and_report(&normalized, &test_set.labels, k, &opts)?);
            }
            let mean = ClusterMetrics {
                nmi: runs.iter().map(|r| r.metrics.nmi).sum::<f64>() / runs.len() as f64,
                ari: runs.iter().map(|r| r.metrics.ari).sum::<f64>() / runs.len() as f64,
                purity: runs.iter().map(|r| r.metrics.purity).sum::<f64>() / runs.len() as f64,
                v_measure: runs.iter().map(|r| r.metrics.v_measure).sum::<f64>() / runs.len() as f64,
                silhouette: runs.iter().map(|r| r.metrics.silhouette).sum::<f64>()
                    / runs.len() as f64,
            };
            let report = serde_json::json!({
                "k": k,
                "t_star": selection.t_star,
                "ell_star": selection.ell_star,
                "runs": runs,
                "mean": mean,
            });
            let report_path = cluster_dir.join("cluster_report.json");
            std::fs::write(
                &report_path,
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::contract(format!("cluster report encode: {e}")))?,
            )
            .map_err(|e| Error::io(&report_path, e))?;
            let mut outputs = vec![report_path];

            if config.cluster.overlay_images > 0 {
                outputs.extend(emit_pca_overlays(
                    config,
                    &ckpt_path,
                    &test_set,
                    selection.t_star,
                    selection.ell_star,
                    &cluster_dir.join("overlays"),
                )?);
            }
            Ok(outputs)
        })?;
        stages.push(cluster_record);
    }

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_hash,
        config_toml,
        stages,
    };
    manifest.save(&run_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// PCA token overlays for the first few test images at the selected cell.
fn emit_pca_overlays(
    config: &ExperimentConfig,
    ckpt_path: &Path,
    test_set: &LabeledImageSet,
    t_star: usize,
    ell_star: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ck = load_checkpoint(ckpt_path)?;
    let net = UNet::<f32>::from_checkpoint(&ck, WeightKind::Ema)?;
    let schedule = NoiseSchedule::build(config.schedule.kind, config.schedule.t, config.schedule.offset_s)?;
    let readout = ReadoutId::from_ell(ell_star, config.model.decoder_blocks_per_stage)?;
    let n = config.cluster.overlay_images.min(test_set.len());
    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let internal = crate::diffusion::to_internal(test_set.image(i));
        let mut x0 = crate::diffusion::Batch::zeros(1, 1, test_set.height, test_set.width);
        x0.data.copy_from_slice(&internal);
        let mut r = rng::stream(config.sweep.seed, "extract-eps", &[i as u64, t_star as u64]);
        let mut eps = crate::diffusion::Batch::zeros(1, 1, test_set.height, test_set.width);
        for v in &mut eps.data {
            *v = r.sample::<f64, _>(rand_distr::StandardNormal) as f32;
        }
        let noised = crate::diffusion::corrupt(&schedule, &x0, &[t_star], &eps)?;
        let (_, taps) = net.forward_with_readouts(&noised.xt.item_tensor(0), t_star, &[readout])?;
        maps.push(taps.into_iter().next().expect("requested readout").clone());
    }
    let overlay = pca_tokens(&maps, 3, 0.5)?;
    let mut outputs = Vec::new();
    let hw = overlay.height * overlay.width;
    for i in 0..overlay.n_images {
        let rgb = &overlay.rgb[i * hw * 3..(i + 1) * hw * 3];
        let rgb_path = out_dir.join(format!("img{i:02}_rgb.ppm"));
        imageio::write_ppm(overlay.height, overlay.width, rgb, &rgb_path)?;
        let mask: Vec<f32> = overlay.mask[i * hw..(i + 1) * hw]
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        let mask_path = out_dir.join(format!("img{i:02}_mask.pgm"));
        imageio::write_pgm(overlay.height, overlay.width, &mask, &mask_path)?;
        outputs.push(rgb_path);
        outputs.push(mask_path);
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// OOD probe protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct OodReport {
    pub checkpoint_hash: String,
    pub checkpoint_hash_unchanged: bool,
    pub t_star: usize,
    pub ell_star: usize,
    pub target_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Frozen-backbone transfer: extract target features at the source-selected
/// cell, fit the probe on the target training split, report target test
/// metrics. The source checkpoint receives zero parameter updates.
pub fn probe_ood(
    ckpt_path: &Path,
    target: &DatasetSection,
    t_star: usize,
    ell_star: usize,
    probe_hyper: &crate::probe::ProbeHyper,
    extraction_seed: u64,
) -> Result<OodReport> {
    let hash_before = sha256_file(ckpt_path)?;
    let ck = load_checkpoint(ckpt_path)?;
    let net = UNet::<f32>::from_checkpoint(&ck, WeightKind::Ema)?;
    let model_cfg = net.config.clone();
    let schedule_section: crate::config::ScheduleSection = serde_json::from_value(
        ck.config
            .get("schedule")
            .cloned()
            .ok_or_else(|| Error::contract("checkpoint config lacks a 'schedule' section"))?,
    )
    .map_err(|e| Error::contract(format!("checkpoint schedule config: {e}")))?;
    let schedule = NoiseSchedule::build(
        schedule_section.kind,
        schedule_section.t,
        schedule_section.offset_s,
    )?;
    if t_star == 0 || t_star > schedule.len() {
        return Err(Error::Index(format!(
            "t_star {t_star} outside 1..={}",
            schedule.len()
        )));
    }
    let readout = ReadoutId::from_ell(ell_star, model_cfg.decoder_blocks_per_stage)?;

    // 80/20 target split without a validation share.
    let mut section = target.clone();
    section.ratios = [0.8, 0.0, 0.2];
    section.augment = false;
    let (train_set, _, test_set, meta) = build_dataset(&section, model_cfg.image_size)?;

    let extract = |images: &LabeledImageSet, split: &str| -> Result<FeatureGrid> {
        extract_grid(
            &net,
            &schedule,
            images,
            &[t_star],
            &[readout],
            extraction_seed,
            &format!("ood:{split}"),
            &hash_before,
        )
    };
    let train_grid = extract(&train_set, "train")?;
    let test_grid = extract(&test_set, "test")?;
    let ell = readout.ell(model_cfg.decoder_blocks_per_stage);
    let train_cell = train_grid.cell(t_star, ell).expect("extracted cell");
    let test_cell = test_grid.cell(t_star, ell).expect("extracted cell");

    let probe = fit_probe(train_cell, &train_set.labels, meta.classes, probe_hyper)?;
    let metrics: EvalMetrics = evaluate(&probe, test_cell, &test_set.labels)?;
    let hash_after = sha256_file(ckpt_path)?;

    Ok(OodReport {
        checkpoint_hash: hash_before.clone(),
        checkpoint_hash_unchanged: hash_before == hash_after,
        t_star,
        ell_star,
        target_classes: meta.classes,
        train_size: train_set.len(),
        test_size: test_set.len(),
        accuracy: metrics.accuracy,
        macro_f1: metrics.macro_f1,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct LossRow {
    epoch: usize,
    split: String,
    loss: f64,
    bins: Vec<Option<f64>>,
}

fn parse_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 4 {
            continue;
        }
        let bins = parts[4..]
            .iter()
            .map(|p| {
                if p.is_empty() {
                    None
                } else {
                    p.parse::<f64>().ok()
                }
            })
            .collect();
        rows.push(LossRow {
            epoch: parts[0].parse().unwrap_or(0),
            split: parts[1].to_string(),
            loss: parts[2].parse().unwrap_or(f64::NAN),
            bins,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
struct SweepRow {
    resolution: usize,
    block: usize,
    ell: usize,
    t: usize,
    split: String,
    accuracy: f64,
    macro_f1: f64,
}

fn parse_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 7 {
            continue;
        }
        rows.push(SweepRow {
            resolution: p[0].parse().unwrap_or(0),
            block: p[1].parse().unwrap_or(0),
            ell: p[2].parse().unwrap_or(0),
            t: p[3].parse().unwrap_or(0),
            split: p[4].to_string(),
            accuracy: p[5].parse().unwrap_or(f64::NAN),
            macro_f1: p[6].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

fn require_artifacts(run_dir: &Path, names: &[&str]) -> Result<()> {
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !run_dir.join(n).exists())
        .map(|n| n.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "missing artifacts: {}",
            missing.join(", ")
        )))
    }
}

/// Emits the human-readable summary plus plot-data CSVs (probe accuracy vs
/// log SNR, per-bin loss vs SNR, and the overfitting panel). With `join`, a
/// second run joins into an ablation CSV keyed by log SNR.
pub fn report(run_dir: &Path, join: Option<&Path>) -> Result<Vec<PathBuf>> {
    require_artifacts(
        run_dir,
        &["config.toml", "sweep/sweep.csv", "sweep/selection.json", "train/loss.csv"],
    )?;
    let config = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let schedule = NoiseSchedule::build(config.schedule.kind, config.schedule.t, config.schedule.offset_s)?;
    let sweep_rows = parse_sweep_csv(&run_dir.join("sweep/sweep.csv"))?;
    let selection: crate::probe::SelectionSummary = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("sweep/selection.json"))
            .map_err(|e| Error::io(run_dir, e))?,
    )
    .map_err(|e| Error::contract(format!("selection parse: {e}")))?;
    let loss_rows = parse_loss_csv(&run_dir.join("train/loss.csv"))?;

    let out_dir = run_dir.join("report");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut outputs = Vec::new();

    // probe accuracy vs log SNR at the selected readout
    let mut curve = String::from("t,log_snr,split,accuracy,macro_f1\n");
    let mut at_star: Vec<&SweepRow> = sweep_rows
        .iter()
        .filter(|r| r.ell == selection.ell_star)
        .collect();
    at_star.sort_by_key(|r| (r.t, r.split.clone()));
    for row in &at_star {
        curve.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6}\n",
            row.t,
            schedule.snr(row.t).ln(),
            row.split,
            row.accuracy,
            row.macro_f1
        ));
    }
    let curve_path = out_dir.join("probe_vs_logsnr.csv");
    std::fs::write(&curve_path, curve).map_err(|e| Error::io(&curve_path, e))?;
    outputs.push(curve_path);

    // per-SNR-bin loss at the best epoch
    let best_epoch = loss_rows
        .iter()
        .filter(|r| r.split == "val")
        .min_by(|a, b| a.loss.partial_cmp(&b.loss).expect("finite losses"))
        .map(|r| r.epoch)
        .unwrap_or(1);
    let edges = crate::train::snr_bin_edges(&schedule, 20);
    let mut loss_curve = String::from("bin,log_snr_center,split,loss\n");
    for split in ["train", "val"] {
        if let Some(row) = loss_rows
            .iter()
            .find(|r| r.epoch == best_epoch && r.split == split)
        {
            for (b, v) in row.bins.iter().enumerate() {
                if let Some(v) = v {
                    let center = 0.5 * (edges[b] + edges[b + 1]);
                    loss_curve.push_str(&format!("{b},{center:.6},{split},{v:.9e}\n"));
                }
            }
        }
    }
    let loss_curve_path = out_dir.join("loss_vs_snr.csv");
    std::fs::write(&loss_curve_path, loss_curve).map_err(|e| Error::io(&loss_curve_path, e))?;
    outputs.push(loss_curve_path);

    // overfitting panel: train/val loss and the Fréchet curve per epoch
    let fid_path = run_dir.join("train/fid.csv");
    let fid_by_epoch: std::collections::BTreeMap<usize, f64> = if fid_path.exists() {
        std::fs::read_to_string(&fid_path)
            .map_err(|e| Error::io(&fid_path, e))?
            .lines()
            .skip(1)
            .filter_map(|l| {
                let (e, v) = l.split_once(',')?;
                Some((e.parse().ok()?, v.parse().ok()?))
            })
            .collect()
    } else {
        Default::default()
    };
    let mut panel = String::from("epoch,train_loss,val_loss,frechet,is_best\n");
    let epochs: Vec<usize> = {
        let mut e: Vec<usize> = loss_rows.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    };
    for epoch in epochs {
        let find = |split: &str| {
            loss_rows
                .iter()
                .find(|r| r.epoch == epoch && r.split == split)
                .map(|r| r.loss)
        };
        let frechet = fid_by_epoch
            .get(&epoch)
            .map(|v| format!("{v:.9e}"))
            .unwrap_or_default();
        panel.push_str(&format!(
            "{epoch},{},{},{},{}\n",
            find("train").map(|v| format!("{v:.9e}")).unwrap_or_default(),
            find("val").map(|v| format!("{v:.9e}")).unwrap_or_default(),
            frechet,
            if epoch == best_epoch { 1 } else { 0 },
        ));
    }
    let panel_path = out_dir.join("overfit_panel.csv");
    std::fs::write(&panel_path, panel).map_err(|e| Error::io(&panel_path, e))?;
    outputs.push(panel_path);

    // human-readable summary
    let mut text = String::new();
    text.push_str(&format!("run report (tool {TOOL_VERSION})\n"));
    text.push_str(&format!("run dir: {}\n\n", run_dir.display()));
    text.push_str(&format!(
        "selection: t*={}, ell*={} (val acc {:.4})\n",
        selection.t_star, selection.ell_star, selection.val_acc
    ));
    text.push_str(&format!(
        "held-out test at selection: accuracy {:.4}, macro F1 {:.4}\n",
        selection.test_acc, selection.test_macro_f1
    ));
    text.push_str(&format!("best validation epoch: {best_epoch}\n\n"));

    // grid table: rows resolution x block, columns timesteps (test split)
    let split_for_table = if sweep_rows.iter().any(|r| r.split == "test") {
        "test"
    } else {
        "val"
    };
    let mut ts: Vec<usize> = sweep_rows.iter().map(|r| r.t).collect();
    ts.sort_unstable();
    ts.dedup();
    let mut cells: Vec<(usize, usize, usize)> = sweep_rows
        .iter()
        .map(|r| (r.resolution, r.block, r.ell))
        .collect();
    cells.sort();
    cells.dedup();
    text.push_str(&format!(
        "probe grid ({split_for_table} accuracy / macro F1):\n"
    ));
    text.push_str(&format!("{:>12} {:>4}", "resolution", "RB"));
    for t in &ts {
        text.push_str(&format!(" {:>15}", format!("t={t}")));
    }
    text.push('\n');
    for (res, block, ell) in cells {
        text.push_str(&format!("{res:>12} {block:>4}"));
        for t in &ts {
            match sweep_rows.iter().find(|r| {
                r.ell == ell && r.t == *t && r.split == split_for_table
            }) {
                Some(r) => text.push_str(&format!(
                    " {:>15}",
                    format!("{:.4}/{:.4}", r.accuracy, r.macro_f1)
                )),
                None => text.push_str(&format!(" {:>15}", "-")),
            }
        }
        text.push('\n');
    }

    let cluster_path = run_dir.join("cluster/cluster_report.json");
    if cluster_path.exists() {
        let cluster: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(&cluster_path).map_err(|e| Error::io(&cluster_path, e))?,
        )
        .map_err(|e| Error::contract(format!("cluster report parse: {e}")))?;
        text.push_str(&format!(
            "\nclustering (mean over runs): nmi {:.4}, ari {:.4}, purity {:.4}, v {:.4}, silhouette {:.4}\n",
            cluster["mean"]["nmi"].as_f64().unwrap_or(f64::NAN),
            cluster["mean"]["ari"].as_f64().unwrap_or(f64::NAN),
            cluster["mean"]["purity"].as_f64().unwrap_or(f64::NAN),
            cluster["mean"]["v_measure"].as_f64().unwrap_or(f64::NAN),
            cluster["mean"]["silhouette"].as_f64().unwrap_or(f64::NAN),
        ));
    } else {
        text.push_str("\nclustering: stage not run\n");
    }

    let text_path = out_dir.join("report.txt");
    std::fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))?;
    outputs.push(text_path);

    // ablation join keyed by log SNR
    if let Some(other_dir) = join {
        require_artifacts(other_dir, &["config.toml", "sweep/sweep.csv", "sweep/selection.json"])?;
        let other_cfg = ExperimentConfig::load(&other_dir.join("config.toml"))?;
        let other_rows = parse_sweep_csv(&other_dir.join("sweep/sweep.csv"))?;
        let other_sel: crate::probe::SelectionSummary = serde_json::from_str(
            &std::fs::read_to_string(other_dir.join("sweep/selection.json"))
                .map_err(|e| Error::io(other_dir, e))?,
        )
        .map_err(|e| Error::contract(format!("selection parse: {e}")))?;
        let label = |w: &crate::schedule::WeightingPolicy| match w {
            crate::schedule::WeightingPolicy::Mse => "mse".to_string(),
            crate::schedule::WeightingPolicy::MinSnr { .. } => "minsnr".to_string(),
        };
        let (la, lb) = (label(&config.weighting), label(&other_cfg.weighting));
        let mut joined = format!("t,log_snr,acc_{la},acc_{lb}\n");
        for t in &ts {
            let a = sweep_rows
                .iter()
                .find(|r| r.t == *t && r.ell == selection.ell_star && r.split == "val")
                .map(|r| r.accuracy);
            let b = other_rows
                .iter()
                .find(|r| r.t == *t && r.ell == other_sel.ell_star && r.split == "val")
                .map(|r| r.accuracy);
            if let (Some(a), Some(b)) = (a, b) {
                joined.push_str(&format!(
                    "{t},{:.6},{a:.6},{b:.6}\n",
                    schedule.snr(*t).ln()
                ));
            }
        }
        let joined_path = out_dir.join("ablation.csv");
        std::fs::write(&joined_path, joined).map_err(|e| Error::io(&joined_path, e))?;
        outputs.push(joined_path);
    }

    Ok(outputs)
}
