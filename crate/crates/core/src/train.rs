//! The denoiser training loop: weighted noise-prediction objective, AdamW
//! with warmup + cosine decay, EMA tracking, per-epoch validation with
//! per-SNR-bin losses, best-checkpoint selection, and an optional per-epoch
//! Fréchet curve against the validation images.

use crate::cluster::frechet_diagnostic;
use crate::data::LabeledImageSet;
use crate::denoiser::UNet;
use crate::diffusion::{
    corrupt, ddim_sample, per_item_losses, to_internal, training_step_loss, Batch,
};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::imageio;
use crate::nn::{cosine_lr, save_checkpoint, AdamW};
use crate::rng;
use crate::schedule::{NoiseSchedule, TimestepSampler, WeightingPolicy};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub save_interval: usize,
    pub snr_bins: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 250,
            batch: 256,
            lr: 5e-4,
            warmup_frac: 0.05,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            ema_decay: 0.999,
            seed: 0,
            save_interval: 10,
            snr_bins: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidParams {
    pub enabled: bool,
    pub samples: usize,
    pub steps: usize,
    /// Side length of the downsampled pixel features fed to the Fréchet
    /// diagnostic.
    pub feature_size: usize,
}

impl Default for FidParams {
    fn default() -> Self {
        FidParams {
            enabled: false,
            samples: 32,
            steps: 20,
            feature_size: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ema_loss: f64,
    pub lr: f64,
    pub train_bins: Vec<Option<f64>>,
    pub val_bins: Vec<Option<f64>>,
    pub frechet: Option<f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub fid_csv: Option<PathBuf>,
}

/// Edges of `bins` equal-width bins in log SNR spanning [snr(T), snr(1)].
pub fn snr_bin_edges(schedule: &NoiseSchedule, bins: usize) -> Vec<f64> {
    let lo = schedule.snr(schedule.len()).ln();
    let hi = schedule.snr(1).ln();
    (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect()
}

pub fn snr_bin_of(schedule: &NoiseSchedule, edges: &[f64], t: usize) -> usize {
    let bins = edges.len() - 1;
    let v = schedule.snr(t).ln();
    let mut b = 0;
    while b + 1 < bins && v > edges[b + 1] {
        b += 1;
    }
    b
}

fn bin_means(samples: &[(usize, f64)], bins: usize) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for &(b, v) in samples {
        sums[b] += v;
        counts[b] += 1;
    }
    (0..bins)
        .map(|b| {
            if counts[b] > 0 {
                Some(sums[b] / counts[b] as f64)
            } else {
                None
            }
        })
        .collect()
}

fn gather_internal_batch(set: &LabeledImageSet, indices: &[usize]) -> Batch<f32> {
    let mut batch = Batch::zeros(indices.len(), 1, set.height, set.width);
    for (slot, &i) in indices.iter().enumerate() {
        let internal = to_internal(set.image(i));
        batch.item_mut(slot).copy_from_slice(&internal);
    }
    batch
}

/// Downsampled pixel features for the Fréchet diagnostic.
pub fn pixel_features(images: &[Vec<f32>], h: usize, w: usize, side: usize) -> FeatureMatrix {
    let mut m = FeatureMatrix::zeros(images.len(), side * side);
    for (i, img) in images.iter().enumerate() {
        let small = imageio::resize(img, h, w, side, side);
        m.row_mut(i).copy_from_slice(&small);
    }
    m
}

fn loss_csv_header(bins: usize) -> String {
    let mut s = String::from("epoch,split,loss,lr");
    for b in 0..bins {
        s.push_str(&format!(",snr_bin_{b:02}"));
    }
    s.push('\n');
    s
}

fn loss_csv_row(epoch: usize, split: &str, loss: f64, lr: f64, bins: &[Option<f64>]) -> String {
    let mut s = format!("{epoch},{split},{loss:.9e},{lr:.9e}");
    for b in bins {
        match b {
            Some(v) => s.push_str(&format!(",{v:.9e}")),
            None => s.push(','),
        }
    }
    s.push('\n');
    s
}

/// Runs the full training loop and writes loss curves plus checkpoints under
/// `out_dir`. The best (lowest live validation loss) checkpoint is kept
/// separately from the rolling last checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    net: &mut UNet<f32>,
    schedule: &NoiseSchedule,
    policy: &WeightingPolicy,
    sampler: &TimestepSampler,
    train_set: &LabeledImageSet,
    val_set: &LabeledImageSet,
    params: &TrainParams,
    fid: &FidParams,
    checkpoint_config: &serde_json::Value,
    out_dir: &Path,
) -> Result<TrainResult> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training and validation splits must be nonempty"));
    }
    if params.epochs == 0 || params.batch == 0 {
        return Err(Error::config("epochs and batch size must be positive"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(params.batch);
    let total_steps = params.epochs * steps_per_epoch;
    let edges = snr_bin_edges(schedule, params.snr_bins);
    let mut opt = AdamW::new(&net.params, 0.9, 0.999);

    // Fixed per-item validation (t, eps) so the curve is comparable across
    // epochs.
    let val_draws: Vec<(usize, Vec<f32>)> = (0..val_set.len())
        .map(|i| {
            let mut r = rng::stream(params.seed, "val-item", &[i as u64]);
            let t = sampler.sample(&mut r);
            let eps: Vec<f32> = (0..val_set.image_len())
                .map(|_| r.sample::<f64, _>(StandardNormal) as f32)
                .collect();
            (t, eps)
        })
        .collect();
    let val_x0 = gather_internal_batch(val_set, &(0..val_set.len()).collect::<Vec<_>>());
    let mut val_eps = Batch::zeros(val_set.len(), 1, val_set.height, val_set.width);
    let mut val_t = Vec::with_capacity(val_set.len());
    for (i, (t, eps)) in val_draws.iter().enumerate() {
        val_t.push(*t);
        val_eps.item_mut(i).copy_from_slice(eps);
    }
    let val_noised = corrupt(schedule, &val_x0, &val_t, &val_eps)?;
    let val_pixel_features = if fid.enabled {
        let imgs: Vec<Vec<f32>> = (0..val_set.len())
            .map(|i| val_set.image(i).to_vec())
            .collect();
        Some(pixel_features(&imgs, val_set.height, val_set.width, fid.feature_size))
    } else {
        None
    };

    let best_path = out_dir.join("ckpt_best.dprb");
    let last_path = out_dir.join("ckpt_last.dprb");
    let loss_csv_path = out_dir.join("loss.csv");
    let fid_csv_path = out_dir.join("fid.csv");
    let mut loss_csv = loss_csv_header(params.snr_bins);
    let mut fid_csv = String::from("epoch,frechet\n");

    let mut history: Vec<EpochRecord> = Vec::with_capacity(params.epochs);
    let mut best = (usize::MAX, f64::INFINITY);
    let mut global_step = 0usize;
    let mut last_lr = 0.0;

    for epoch in 1..=params.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(params.seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut train_samples: Vec<(usize, f64)> = Vec::with_capacity(n);
        for (step, chunk) in order.chunks(params.batch).enumerate() {
            let mut t_rng = rng::stream(params.seed, "timestep", &[epoch as u64, step as u64]);
            let t: Vec<usize> = chunk.iter().map(|_| sampler.sample(&mut t_rng)).collect();
            let mut eps_rng = rng::stream(params.seed, "eps", &[epoch as u64, step as u64]);
            let x0 = gather_internal_batch(train_set, chunk);
            let mut eps = Batch::zeros(chunk.len(), 1, train_set.height, train_set.width);
            for v in &mut eps.data {
                *v = eps_rng.sample::<f64, _>(StandardNormal) as f32;
            }
            let noised = corrupt(schedule, &x0, &t, &eps)?;

            net.params.zero_grads();
            let item_losses = training_step_loss(net, schedule, policy, &noised, global_step)?;
            let mean: f64 = item_losses.iter().sum::<f64>() / item_losses.len() as f64;
            epoch_loss += mean * chunk.len() as f64;
            for (i, &l) in item_losses.iter().enumerate() {
                train_samples.push((snr_bin_of(schedule, &edges, t[i]), l));
            }

            last_lr = cosine_lr(global_step, total_steps, params.lr, params.warmup_frac);
            opt.step(&mut net.params, last_lr, params.weight_decay, Some(params.grad_clip))?;
            net.params.ema_update(params.ema_decay)?;
            global_step += 1;
        }
        epoch_loss /= n as f64;

        // validation with gradients disabled, on live and EMA weights
        let val_losses = per_item_losses(net, schedule, policy, &val_noised)?;
        let val_loss: f64 = val_losses.iter().sum::<f64>() / val_losses.len() as f64;
        let ema_net = net.ema_snapshot();
        let ema_losses = per_item_losses(&ema_net, schedule, policy, &val_noised)?;
        let val_ema_loss: f64 = ema_losses.iter().sum::<f64>() / ema_losses.len() as f64;
        let val_samples: Vec<(usize, f64)> = val_losses
            .iter()
            .enumerate()
            .map(|(i, &l)| (snr_bin_of(schedule, &edges, val_t[i]), l))
            .collect();
        let val_ema_samples: Vec<(usize, f64)> = ema_losses
            .iter()
            .enumerate()
            .map(|(i, &l)| (snr_bin_of(schedule, &edges, val_t[i]), l))
            .collect();

        let frechet = match (&val_pixel_features, fid.enabled) {
            (Some(val_features), true) => {
                let samples = ddim_sample(
                    &ema_net,
                    schedule,
                    fid.samples,
                    fid.steps,
                    0.0,
                    (1, train_set.height, train_set.width),
                    rng::stream(params.seed, "fid-epoch", &[epoch as u64]).gen(),
                )?;
                let imgs: Vec<Vec<f32>> =
                    (0..samples.n).map(|i| samples.item(i).to_vec()).collect();
                let gen_features =
                    pixel_features(&imgs, train_set.height, train_set.width, fid.feature_size);
                let d = frechet_diagnostic(&gen_features, val_features)?;
                fid_csv.push_str(&format!("{epoch},{d:.9e}\n"));
                Some(d)
            }
            _ => None,
        };

        let train_bins = bin_means(&train_samples, params.snr_bins);
        let val_bins = bin_means(&val_samples, params.snr_bins);
        let val_ema_bins = bin_means(&val_ema_samples, params.snr_bins);
        loss_csv.push_str(&loss_csv_row(epoch, "train", epoch_loss, last_lr, &train_bins));
        loss_csv.push_str(&loss_csv_row(epoch, "val", val_loss, last_lr, &val_bins));
        loss_csv.push_str(&loss_csv_row(epoch, "val_ema", val_ema_loss, last_lr, &val_ema_bins));

        if val_loss < best.1 {
            best = (epoch, val_loss);
            save_checkpoint(&net.params, checkpoint_config, &best_path)?;
        }
        if epoch % params.save_interval.max(1) == 0 || epoch == params.epochs {
            save_checkpoint(&net.params, checkpoint_config, &last_path)?;
        }

        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            val_ema_loss,
            lr: last_lr,
            train_bins,
            val_bins,
            frechet,
        });
    }

    std::fs::write(&loss_csv_path, loss_csv).map_err(|e| Error::io(&loss_csv_path, e))?;
    let fid_out = if fid.enabled {
        std::fs::write(&fid_csv_path, fid_csv).map_err(|e| Error::io(&fid_csv_path, e))?;
        Some(fid_csv_path)
    } else {
        None
    };

    Ok(TrainResult {
        history,
        best_epoch: best.0,
        best_val_loss: best.1,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        loss_csv: loss_csv_path,
        fid_csv: fid_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::{NoiseSchedule, SamplerKind, ScheduleKind, TimestepSampler};

    fn micro_setup() -> (UNet<f32>, NoiseSchedule, TimestepSampler, LabeledImageSet, LabeledImageSet) {
        let cfg = DenoiserConfig {
            image_size: 16,
            in_channels: 1,
            stage_channels: vec![8, 12],
            encoder_blocks_per_stage: 2,
            bottleneck_blocks: 2,
            decoder_blocks_per_stage: 3,
            attention_stages: vec![8],
            groups: 4,
            time_embed_dim: 16,
            attention_heads: 1,
        };
        let net = UNet::<f32>::build(cfg, 7).unwrap();
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 100, 0.008).unwrap();
        let sampler = TimestepSampler::build(SamplerKind::SquaredCosine, 100).unwrap();
        let spec = SyntheticSpec::fine_grained(2, 16, 0.02);
        let train = synthesize(&spec, 4, 1).unwrap();
        let val = synthesize(&spec, 2, 2).unwrap();
        (net, schedule, sampler, train, val)
    }

    #[test]
    fn one_epoch_smoke_run_emits_finite_history() {
        let (mut net, schedule, sampler, train, val) = micro_setup();
        let dir = tempfile::tempdir().unwrap();
        let params = TrainParams {
            epochs: 1,
            batch: 4,
            lr: 1e-4,
            ema_decay: 0.9,
            save_interval: 1,
            ..Default::default()
        };
        let result = train_loop(
            &mut net,
            &schedule,
            &WeightingPolicy::MinSnr { gamma: 5.0 },
            &sampler,
            &train,
            &val,
            &params,
            &FidParams::default(),
            &serde_json::json!({}),
            dir.path(),
        )
        .unwrap();
        assert_eq!(result.history.len(), 1);
        let rec = &result.history[0];
        assert!(rec.train_loss.is_finite() && rec.val_loss.is_finite());
        assert!(result.best_checkpoint.exists());
        assert!(result.last_checkpoint.exists());
        let csv = std::fs::read_to_string(&result.loss_csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4); // header + train + val + val_ema
        assert!(lines[0].starts_with("epoch,split,loss,lr,snr_bin_00"));
        assert!(lines[0].ends_with("snr_bin_19"));
    }

    #[test]
    fn best_checkpoint_tracks_argmin_val_loss() {
        let (mut net, schedule, sampler, train, val) = micro_setup();
        let dir = tempfile::tempdir().unwrap();
        let params = TrainParams {
            epochs: 3,
            batch: 4,
            lr: 2e-3,
            ema_decay: 0.8,
            save_interval: 10,
            ..Default::default()
        };
        let result = train_loop(
            &mut net,
            &schedule,
            &WeightingPolicy::Mse,
            &sampler,
            &train,
            &val,
            &params,
            &FidParams::default(),
            &serde_json::json!({}),
            dir.path(),
        )
        .unwrap();
        let argmin = result
            .history
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap()
            .epoch;
        assert_eq!(result.best_epoch, argmin);
        assert!((result.best_val_loss
            - result.history[argmin - 1].val_loss)
            .abs()
            < 1e-15);
    }

    #[test]
    fn validation_does_not_mutate_parameters() {
        let (mut net, schedule, sampler, _train, val) = micro_setup();
        let _ = sampler;
        let val_x0 = gather_internal_batch(&val, &(0..val.len()).collect::<Vec<_>>());
        let t = vec![10; val.len()];
        let mut r = rng::stream(3, "val-test", &[]);
        let noised = crate::diffusion::corrupt_with_rng(&schedule, &val_x0, &t, &mut r).unwrap();
        let before: Vec<Vec<f32>> = net
            .params
            .ids()
            .map(|id| net.params.value(id).data().to_vec())
            .collect();
        let _ = per_item_losses(&net, &schedule, &WeightingPolicy::Mse, &noised).unwrap();
        for (id, prev) in net.params.ids().zip(&before) {
            assert_eq!(net.params.value(id).data(), prev.as_slice());
        }
        let _ = &mut net;
    }

    #[test]
    fn fid_curve_is_emitted_when_enabled() {
        let (mut net, schedule, sampler, train, val) = micro_setup();
        let dir = tempfile::tempdir().unwrap();
        let params = TrainParams {
            epochs: 1,
            batch: 8,
            ema_decay: 0.5,
            ..Default::default()
        };
        let fid = FidParams {
            enabled: true,
            samples: 4,
            steps: 5,
            feature_size: 4,
        };
        let result = train_loop(
            &mut net,
            &schedule,
            &WeightingPolicy::Mse,
            &sampler,
            &train,
            &val,
            &params,
            &fid,
            &serde_json::json!({}),
            dir.path(),
        )
        .unwrap();
        let path = result.fid_csv.unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.lines().count() == 2);
        assert!(result.history[0].frechet.unwrap().is_finite());
    }

    #[test]
    fn snr_bins_cover_the_schedule() {
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 500, 0.008).unwrap();
        let edges = snr_bin_edges(&schedule, 20);
        assert_eq!(edges.len(), 21);
        for t in 1..=500 {
            let b = snr_bin_of(&schedule, &edges, t);
            assert!(b < 20);
        }
        assert_eq!(snr_bin_of(&schedule, &edges, 500), 0);
        assert_eq!(snr_bin_of(&schedule, &edges, 1), 19);
    }
}
