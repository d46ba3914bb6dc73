//! Frozen-backbone descriptor extraction over the (timestep x readout) grid,
//! with a persistent per-cell cache.
//!
//! One noise draw and one forward pass per (image, t) serves every requested
//! readout; descriptors are global-average-pooled decoder activations.

use crate::data::LabeledImageSet;
use crate::denoiser::{FeatureTensor, Mode, ReadoutId, UNet};
use crate::diffusion::{corrupt, to_internal, Batch};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CACHE_MAGIC: &[u8; 5] = b"DPFC1";

/// Row-major (n x dim) f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(n: usize, dim: usize) -> Self {
        FeatureMatrix {
            n,
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Spatial mean per channel.
pub fn gap<S: Scalar>(z: &FeatureTensor<S>) -> Vec<f32> {
    let [c, h, w] = *z.values.shape() else {
        unreachable!("feature tensors are (C, H, W)")
    };
    let hw = (h * w) as f64;
    (0..c)
        .map(|ch| {
            let sum: f64 = z.values.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|v| v.to_f64())
                .sum();
            (sum / hw) as f32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPolicy {
    pub master: u64,
    /// One Gaussian draw per (image, t), shared by every readout and
    /// downstream consumer.
    pub scheme: String,
}

impl SeedPolicy {
    pub fn shared_eps(master: u64) -> Self {
        SeedPolicy {
            master,
            scheme: "shared-eps-per-image-t".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellHeader {
    pub checkpoint_hash: String,
    pub dataset_id: String,
    pub t: usize,
    pub r: usize,
    pub b: usize,
    pub ell: usize,
    pub n: usize,
    pub dim: usize,
    pub seed_policy: SeedPolicy,
}

#[derive(Debug)]
pub struct FeatureGrid {
    pub dataset_id: String,
    pub checkpoint_hash: String,
    pub timesteps: Vec<usize>,
    pub readouts: Vec<ReadoutId>,
    pub blocks_per_stage: usize,
    pub seed_policy: SeedPolicy,
    /// (t, ell) -> per-image descriptor rows in dataset order.
    pub cells: BTreeMap<(usize, usize), FeatureMatrix>,
}

impl FeatureGrid {
    pub fn cell(&self, t: usize, ell: usize) -> Option<&FeatureMatrix> {
        self.cells.get(&(t, ell))
    }
}

/// Extracts GAP descriptors for every (t, readout) cell. The denoiser must be
/// frozen; pass an EMA snapshot for extraction after training.
pub fn extract_grid<S: Scalar>(
    net: &UNet<S>,
    schedule: &NoiseSchedule,
    images: &LabeledImageSet,
    timesteps: &[usize],
    readouts: &[ReadoutId],
    seed: u64,
    dataset_id: &str,
    checkpoint_hash: &str,
) -> Result<FeatureGrid> {
    if net.mode() != Mode::Frozen {
        return Err(Error::contract(
            "feature extraction requires a frozen denoiser",
        ));
    }
    if images.height != net.config.image_size || images.width != net.config.image_size {
        return Err(Error::Shape {
            context: "extract_grid".into(),
            expected: format!("{0}x{0} images", net.config.image_size),
            got: format!("{}x{}", images.height, images.width),
        });
    }
    for &t in timesteps {
        if t == 0 || t > schedule.len() {
            return Err(Error::Index(format!(
                "timestep {t} outside 1..={}",
                schedule.len()
            )));
        }
    }
    let table = net.config.readout_table();
    let blocks_per_stage = net.config.decoder_blocks_per_stage;
    let mut cells: BTreeMap<(usize, usize), FeatureMatrix> = BTreeMap::new();
    for &t in timesteps {
        for r in readouts {
            let info = table
                .iter()
                .find(|i| i.id == *r)
                .ok_or_else(|| Error::Index(format!("invalid readout {r:?}")))?;
            cells.insert((t, info.ell), FeatureMatrix::zeros(images.len(), info.channels));
        }
    }

    let n_pixels = images.image_len();
    for i in 0..images.len() {
        let internal = to_internal(
            &images
                .image(i)
                .iter()
                .map(|&v| S::from_f64(v as f64))
                .collect::<Vec<S>>(),
        );
        let mut x0 = Batch::zeros(1, 1, images.height, images.width);
        x0.data.copy_from_slice(&internal);
        for &t in timesteps {
            let mut r = rng::stream(seed, "extract-eps", &[i as u64, t as u64]);
            let mut eps = Batch::zeros(1, 1, images.height, images.width);
            for v in &mut eps.data {
                *v = S::from_f64(r.sample::<f64, _>(StandardNormal));
            }
            debug_assert_eq!(eps.data.len(), n_pixels);
            let noised = corrupt(schedule, &x0, &[t], &eps)?;
            let xt = noised.xt.item_tensor(0);
            let (_, taps) = net.forward_with_readouts(&xt, t, readouts)?;
            for tap in &taps {
                let ell = tap.readout.ell(blocks_per_stage);
                let descriptor = gap(tap);
                let cell = cells.get_mut(&(t, ell)).expect("cell preallocated");
                cell.row_mut(i).copy_from_slice(&descriptor);
            }
        }
    }

    Ok(FeatureGrid {
        dataset_id: dataset_id.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
        timesteps: timesteps.to_vec(),
        readouts: readouts.to_vec(),
        blocks_per_stage,
        seed_policy: SeedPolicy::shared_eps(seed),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Cache files: one DPFC1 file per (t, ell) cell.
// ---------------------------------------------------------------------------

pub fn cell_file_name(t: usize, ell: usize) -> String {
    format!("t{t:04}_l{ell:02}.dpfc")
}

pub fn write_cell(header: &CellHeader, matrix: &FeatureMatrix, path: &Path) -> Result<()> {
    if header.n != matrix.n || header.dim != matrix.dim {
        return Err(Error::contract("cell header does not match matrix shape"));
    }
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| Error::contract(format!("cell header serialization: {e}")))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(9 + header_bytes.len() + matrix.data.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for &v in &matrix.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_cell(path: &Path) -> Result<(CellHeader, FeatureMatrix)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic, expected DPFC1".into(),
        });
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let hlen = u32::from_le_bytes(len) as usize;
    let mut hbytes = vec![0u8; hlen];
    file.read_exact(&mut hbytes).map_err(|e| Error::io(path, e))?;
    let header: CellHeader = serde_json::from_slice(&hbytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("cell header parse: {e}"),
    })?;
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let want = header.n * header.dim * 4;
    if body.len() != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {want} payload bytes, found {}", body.len()),
        });
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        header.clone(),
        FeatureMatrix {
            n: header.n,
            dim: header.dim,
            data,
        },
    ))
}

impl FeatureGrid {
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for ((t, ell), matrix) in &self.cells {
            let id = ReadoutId::from_ell(*ell, self.blocks_per_stage)?;
            let header = CellHeader {
                checkpoint_hash: self.checkpoint_hash.clone(),
                dataset_id: self.dataset_id.clone(),
                t: *t,
                r: id.stage,
                b: id.block,
                ell: *ell,
                n: matrix.n,
                dim: matrix.dim,
                seed_policy: self.seed_policy.clone(),
            };
            let path = dir.join(cell_file_name(*t, *ell));
            write_cell(&header, matrix, &path)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Loads every cell file in a directory; all headers must agree on the
    /// checkpoint hash and dataset id.
    pub fn load(dir: &Path) -> Result<FeatureGrid> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "dpfc").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::contract(format!(
                "no feature cache files under {}",
                dir.display()
            )));
        }
        let mut cells = BTreeMap::new();
        let mut meta: Option<(String, String, SeedPolicy)> = None;
        let mut timesteps = Vec::new();
        let mut readouts = Vec::new();
        let mut max_block = 0usize;
        let mut stride_from_header = None;
        for path in files {
            let (header, matrix) = read_cell(&path)?;
            max_block = max_block.max(header.b);
            if header.r > 1 && stride_from_header.is_none() {
                // ell = stride * (r - 1) + b
                stride_from_header = Some((header.ell - header.b) / (header.r - 1));
            }
            match &meta {
                None => {
                    meta = Some((
                        header.checkpoint_hash.clone(),
                        header.dataset_id.clone(),
                        header.seed_policy.clone(),
                    ))
                }
                Some((ck, ds, sp)) => {
                    if *ck != header.checkpoint_hash {
                        return Err(Error::contract(format!(
                            "cache checkpoint hash mismatch in {}: {} vs {}",
                            path.display(),
                            header.checkpoint_hash,
                            ck
                        )));
                    }
                    if *ds != header.dataset_id || *sp != header.seed_policy {
                        return Err(Error::contract(format!(
                            "cache metadata mismatch in {}",
                            path.display()
                        )));
                    }
                }
            }
            if !timesteps.contains(&header.t) {
                timesteps.push(header.t);
            }
            let id = ReadoutId::new(header.r, header.b);
            if !readouts.contains(&id) {
                readouts.push(id);
            }
            cells.insert((header.t, header.ell), matrix);
        }
        timesteps.sort_unstable();
        readouts.sort();
        let (checkpoint_hash, dataset_id, seed_policy) = meta.expect("at least one file");
        let stride = stride_from_header.unwrap_or(max_block.max(1));
        Ok(FeatureGrid {
            dataset_id,
            checkpoint_hash,
            timesteps,
            readouts,
            blocks_per_stage: stride,
            seed_policy,
            cells,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::ScheduleKind;
    use crate::tensor::Tensor;

    fn tiny_net() -> UNet<f32> {
        let cfg = DenoiserConfig {
            image_size: 8,
            in_channels: 1,
            stage_channels: vec![4, 6],
            encoder_blocks_per_stage: 2,
            bottleneck_blocks: 2,
            decoder_blocks_per_stage: 3,
            attention_stages: vec![4],
            groups: 2,
            time_embed_dim: 8,
            attention_heads: 1,
        };
        let mut net = UNet::<f32>::build(cfg, 5).unwrap();
        // give the network nonzero outputs everywhere
        for id in net.params.ids().collect::<Vec<_>>() {
            if net.params.name(id).contains("head.conv.w") {
                for v in net.params.value_mut(id).data_mut() {
                    *v = 0.01;
                }
            }
        }
        net.set_mode(Mode::Frozen);
        net
    }

    fn tiny_images(n: usize) -> LabeledImageSet {
        let mut set = LabeledImageSet::empty(8, 8, vec!["a".into(), "b".into()]);
        for i in 0..n {
            let img: Vec<f32> = (0..64).map(|p| ((i * 31 + p) % 17) as f32 / 16.0).collect();
            set.push(&img, (i % 2) as u32, crate::data::Provenance::Synthetic);
        }
        set
    }

    #[test]
    fn gap_of_constant_map_is_the_constant() {
        let values = Tensor::<f32>::filled(&[3, 4, 4], 0.625);
        let ft = FeatureTensor {
            readout: ReadoutId::new(1, 1),
            values,
        };
        let v = gap(&ft);
        assert_eq!(v, vec![0.625; 3]);
    }

    #[test]
    fn gap_of_single_pixel_is_identity() {
        let values = Tensor::<f32>::from_vec(&[3, 1, 1], vec![0.1, 0.2, 0.3]).unwrap();
        let ft = FeatureTensor {
            readout: ReadoutId::new(1, 1),
            values,
        };
        assert_eq!(gap(&ft), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn gap_matches_direct_mean() {
        let values =
            Tensor::<f32>::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 0.25])
                .unwrap();
        let ft = FeatureTensor {
            readout: ReadoutId::new(1, 1),
            values,
        };
        let v = gap(&ft);
        assert!((v[0] - 2.5).abs() < 1e-7);
        assert!((v[1] - 0.0).abs() < 1e-7);
    }

    #[test]
    fn extraction_is_deterministic_and_counts_one_pass_per_image_t() {
        let net = tiny_net();
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 50, 0.008).unwrap();
        let images = tiny_images(6);
        let readouts: Vec<ReadoutId> = net.config.readout_table().iter().map(|i| i.id).collect();
        let before = net.forward_pass_count();
        let a = extract_grid(&net, &schedule, &images, &[5, 20], &readouts, 9, "ds", "ck").unwrap();
        let passes = net.forward_pass_count() - before;
        assert_eq!(passes, 12, "one forward per (image, t) serves all readouts");
        let b = extract_grid(&net, &schedule, &images, &[5, 20], &readouts, 9, "ds", "ck").unwrap();
        for (k, m) in &a.cells {
            assert_eq!(m.data, b.cells[k].data, "cell {k:?} not reproducible");
        }
        assert_eq!(a.cells.len(), 12);

        // requesting a subset gives identical rows for that cell
        let only = extract_grid(
            &net,
            &schedule,
            &images,
            &[5, 20],
            &[ReadoutId::new(1, 3)],
            9,
            "ds",
            "ck",
        )
        .unwrap();
        let ell = ReadoutId::new(1, 3).ell(3);
        assert_eq!(only.cells[&(5, ell)].data, a.cells[&(5, ell)].data);
    }

    #[test]
    fn extraction_requires_frozen_mode() {
        let mut net = tiny_net();
        net.set_mode(Mode::Trainable);
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 50, 0.008).unwrap();
        let images = tiny_images(2);
        assert!(extract_grid(
            &net,
            &schedule,
            &images,
            &[5],
            &[ReadoutId::new(1, 1)],
            0,
            "ds",
            "ck"
        )
        .is_err());
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny_net();
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 50, 0.008).unwrap();
        let images = tiny_images(4);
        let readouts: Vec<ReadoutId> = net.config.readout_table().iter().map(|i| i.id).collect();
        let grid =
            extract_grid(&net, &schedule, &images, &[3, 7], &readouts, 1, "ds-1", "ck-1").unwrap();
        grid.save(dir.path()).unwrap();
        let back = FeatureGrid::load(dir.path()).unwrap();
        assert_eq!(back.checkpoint_hash, "ck-1");
        assert_eq!(back.dataset_id, "ds-1");
        assert_eq!(back.timesteps, vec![3, 7]);
        for (k, m) in &grid.cells {
            assert_eq!(m.data, back.cells[k].data);
        }
    }

    #[test]
    fn cache_hash_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header_a = CellHeader {
            checkpoint_hash: "ck-a".into(),
            dataset_id: "ds".into(),
            t: 1,
            r: 1,
            b: 1,
            ell: 1,
            n: 1,
            dim: 2,
            seed_policy: SeedPolicy::shared_eps(0),
        };
        let mut header_b = header_a.clone();
        header_b.checkpoint_hash = "ck-b".into();
        header_b.t = 2;
        let m = FeatureMatrix {
            n: 1,
            dim: 2,
            data: vec![1.0, 2.0],
        };
        write_cell(&header_a, &m, &dir.path().join(cell_file_name(1, 1))).unwrap();
        write_cell(&header_b, &m, &dir.path().join(cell_file_name(2, 1))).unwrap();
        let err = FeatureGrid::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("checkpoint hash mismatch"), "{err}");
    }
}
