//! Dataset pipeline: ingestion from directory-per-class layouts, label-
//! preserving augmentation, stratified split construction, and a synthetic
//! fine-grained generator that stands in for instrument imagery at desk
//! scale.

use crate::error::{Error, Result};
use crate::imageio::{self, GrayStack};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "parent")]
pub enum Provenance {
    Real,
    Synthetic,
    Augmented(usize),
}

/// Grayscale images with integer labels, a label map, and per-item
/// provenance. Pixels are in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u32>,
    pub label_names: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl LabeledImageSet {
    pub fn empty(height: usize, width: usize, label_names: Vec<String>) -> Self {
        LabeledImageSet {
            height,
            width,
            pixels: Vec::new(),
            labels: Vec::new(),
            label_names,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    pub fn push(&mut self, pixels: &[f32], label: u32, provenance: Provenance) {
        debug_assert_eq!(pixels.len(), self.image_len());
        self.pixels.extend_from_slice(pixels);
        self.labels.push(label);
        self.provenance.push(provenance);
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(Error::contract("pixel buffer length mismatch"));
        }
        for &l in &self.labels {
            if l as usize >= self.class_count() {
                return Err(Error::contract(format!(
                    "label {l} outside class count {}",
                    self.class_count()
                )));
            }
        }
        for &p in &self.pixels {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("pixel {p} outside [0,1]")));
            }
        }
        for (i, pr) in self.provenance.iter().enumerate() {
            if let Provenance::Augmented(parent) = pr {
                if *parent >= self.len() {
                    return Err(Error::contract(format!(
                        "augmented item {i} references missing parent {parent}"
                    )));
                }
                if matches!(self.provenance[*parent], Provenance::Augmented(_)) {
                    return Err(Error::contract(format!(
                        "augmented item {i} has an augmented parent {parent}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Serializes to `<stem>.dpim` (images), `<stem>.labels` (index,class
    /// lines), `<stem>.labelmap` (name,class lines) and `<stem>.provenance`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stack = GrayStack {
            n: self.len(),
            height: self.height,
            width: self.width,
            pixels: self.pixels.clone(),
        };
        imageio::write_raw(&stack, &dir.join(format!("{stem}.dpim")))?;
        let mut labels = String::new();
        for (i, l) in self.labels.iter().enumerate() {
            labels.push_str(&format!("{i},{l}\n"));
        }
        let lpath = dir.join(format!("{stem}.labels"));
        std::fs::write(&lpath, labels).map_err(|e| Error::io(&lpath, e))?;
        let mut map = String::new();
        for (id, name) in self.label_names.iter().enumerate() {
            map.push_str(&format!("{name},{id}\n"));
        }
        let mpath = dir.join(format!("{stem}.labelmap"));
        std::fs::write(&mpath, map).map_err(|e| Error::io(&mpath, e))?;
        let mut prov = String::new();
        for (i, p) in self.provenance.iter().enumerate() {
            match p {
                Provenance::Real => prov.push_str(&format!("{i},real,\n")),
                Provenance::Synthetic => prov.push_str(&format!("{i},synthetic,\n")),
                Provenance::Augmented(parent) => {
                    prov.push_str(&format!("{i},augmented,{parent}\n"))
                }
            }
        }
        let ppath = dir.join(format!("{stem}.provenance"));
        std::fs::write(&ppath, prov).map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let stack = imageio::read_raw(&dir.join(format!("{stem}.dpim")))?;
        let lpath = dir.join(format!("{stem}.labels"));
        let labels_text = std::fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
        let mut labels = vec![0u32; stack.n];
        for line in labels_text.lines().filter(|l| !l.trim().is_empty()) {
            let (idx, lab) = line.split_once(',').ok_or_else(|| Error::Format {
                path: lpath.clone(),
                reason: format!("bad label line '{line}'"),
            })?;
            let idx: usize = idx.trim().parse().map_err(|_| Error::Format {
                path: lpath.clone(),
                reason: format!("bad index '{idx}'"),
            })?;
            labels[idx] = lab.trim().parse().map_err(|_| Error::Format {
                path: lpath.clone(),
                reason: format!("bad class '{lab}'"),
            })?;
        }
        let mpath = dir.join(format!("{stem}.labelmap"));
        let map_text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut pairs: Vec<(String, usize)> = Vec::new();
        for line in map_text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, id) = line.rsplit_once(',').ok_or_else(|| Error::Format {
                path: mpath.clone(),
                reason: format!("bad label map line '{line}'"),
            })?;
            pairs.push((
                name.trim().to_string(),
                id.trim().parse().map_err(|_| Error::Format {
                    path: mpath.clone(),
                    reason: format!("bad class id '{id}'"),
                })?,
            ));
        }
        let classes = pairs.iter().map(|(_, id)| id + 1).max().unwrap_or(0);
        let mut label_names = vec![String::new(); classes];
        for (name, id) in pairs {
            if label_names[id].is_empty() {
                label_names[id] = name;
            }
        }
        let ppath = dir.join(format!("{stem}.provenance"));
        let prov_text = std::fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let mut provenance = vec![Provenance::Real; stack.n];
        for line in prov_text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.splitn(3, ',').collect();
            let idx: usize = parts[0].trim().parse().map_err(|_| Error::Format {
                path: ppath.clone(),
                reason: format!("bad provenance line '{line}'"),
            })?;
            provenance[idx] = match parts[1] {
                "real" => Provenance::Real,
                "synthetic" => Provenance::Synthetic,
                "augmented" => Provenance::Augmented(parts[2].trim().parse().map_err(|_| {
                    Error::Format {
                        path: ppath.clone(),
                        reason: format!("bad parent '{line}'"),
                    }
                })?),
                other => {
                    return Err(Error::Format {
                        path: ppath.clone(),
                        reason: format!("bad provenance kind '{other}'"),
                    })
                }
            };
        }
        let set = LabeledImageSet {
            height: stack.height,
            width: stack.width,
            pixels: stack.pixels,
            labels,
            label_names,
            provenance,
        };
        set.validate()?;
        Ok(set)
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct IngestReport {
    pub skipped: usize,
}

/// Reads a directory-per-class layout of PGM/PPM/DPIM files, converting to
/// single-channel [0, 1] images at `target_size` (pure resize, no padding).
/// `label_map` merges directory names into class ids; when absent, ids are
/// assigned by sorted directory name. Corrupt and zero-sized files are
/// skipped and counted.
pub fn ingest(
    dir: &Path,
    label_map_file: Option<&Path>,
    target_size: usize,
) -> Result<(LabeledImageSet, IngestReport)> {
    let mut class_dirs: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            class_dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::config(format!(
            "no class directories under {}",
            dir.display()
        )));
    }

    // dir name -> class id
    let mut mapping: BTreeMap<String, u32> = BTreeMap::new();
    let mut label_names: Vec<String>;
    if let Some(map_path) = label_map_file {
        let text = std::fs::read_to_string(map_path).map_err(|e| Error::io(map_path, e))?;
        let mut max_id = 0u32;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, id) = line.rsplit_once(',').ok_or_else(|| Error::Format {
                path: map_path.to_path_buf(),
                reason: format!("bad label map line '{line}'"),
            })?;
            let id: u32 = id.trim().parse().map_err(|_| Error::Format {
                path: map_path.to_path_buf(),
                reason: format!("bad class id in '{line}'"),
            })?;
            mapping.insert(name.trim().to_string(), id);
            max_id = max_id.max(id);
        }
        label_names = vec![String::new(); max_id as usize + 1];
        for (name, id) in &mapping {
            let slot = &mut label_names[*id as usize];
            if slot.is_empty() {
                *slot = name.clone();
            }
        }
        for d in &class_dirs {
            if !mapping.contains_key(d) {
                return Err(Error::config(format!(
                    "class directory '{d}' missing from label map"
                )));
            }
        }
    } else {
        label_names = class_dirs.clone();
        for (i, d) in class_dirs.iter().enumerate() {
            mapping.insert(d.clone(), i as u32);
        }
    }

    let mut set = LabeledImageSet::empty(target_size, target_size, label_names);
    let mut skipped = 0usize;
    for class_dir in &class_dirs {
        let label = mapping[class_dir];
        let cpath = dir.join(class_dir);
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(&cpath)
            .map_err(|e| Error::io(&cpath, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = set.len();
        for file in files {
            let meta = std::fs::metadata(&file).map_err(|e| Error::io(&file, e))?;
            if meta.len() == 0 {
                skipped += 1;
                continue;
            }
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_lowercase())
                .unwrap_or_default();
            match ext.as_str() {
                "dpim" => match imageio::read_raw(&file) {
                    Ok(stack) => {
                        for i in 0..stack.n {
                            let img =
                                imageio::resize(stack.image(i), stack.height, stack.width, target_size, target_size);
                            let img: Vec<f32> = img.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                            set.push(&img, label, Provenance::Real);
                        }
                    }
                    Err(_) => skipped += 1,
                },
                "pgm" | "ppm" | "pnm" => match imageio::read_pnm(&file) {
                    Ok((h, w, px)) => {
                        let img = imageio::resize(&px, h, w, target_size, target_size);
                        let img: Vec<f32> = img.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                        set.push(&img, label, Provenance::Real);
                    }
                    Err(_) => skipped += 1,
                },
                _ => skipped += 1,
            }
        }
        if set.len() == before {
            return Err(Error::config(format!(
                "class directory '{class_dir}' contributed no readable images"
            )));
        }
    }
    set.validate()?;
    Ok((set, IngestReport { skipped }))
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    HFlip,
    VFlip,
    Rot180,
    Intensity(f32),
}

pub const TRANSFORMS: [Transform; 7] = [
    Transform::HFlip,
    Transform::VFlip,
    Transform::Rot180,
    Transform::Intensity(0.90),
    Transform::Intensity(0.95),
    Transform::Intensity(1.05),
    Transform::Intensity(1.10),
];

pub fn apply_transform(t: Transform, h: usize, w: usize, src: &[f32]) -> Vec<f32> {
    match t {
        Transform::HFlip => {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = src[y * w + (w - 1 - x)];
                }
            }
            out
        }
        Transform::VFlip => {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                out[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
            }
            out
        }
        Transform::Rot180 => src.iter().rev().copied().collect(),
        Transform::Intensity(f) => src.iter().map(|&v| (v * f).clamp(0.0, 1.0)).collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum AugmentMode {
    /// Fill every class up to this many items (balanced regime).
    Quota(usize),
    /// Add this many augmented copies per non-augmented item (long-tail
    /// regime).
    Multiplier(usize),
}

/// Adds augmented items (one transform, one non-augmented parent each) to the
/// set, in place. Returns warnings for classes whose quota was unreachable.
pub fn augment(set: &mut LabeledImageSet, mode: AugmentMode, seed: u64) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let classes = set.class_count();
    let mut parents_per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, pr) in set.provenance.iter().enumerate() {
        if !matches!(pr, Provenance::Augmented(_)) {
            parents_per_class[set.labels[i] as usize].push(i);
        }
    }
    match mode {
        AugmentMode::Quota(quota) => {
            let counts = set.class_counts();
            for (class, parents) in parents_per_class.iter().enumerate() {
                if parents.is_empty() {
                    continue;
                }
                let have = counts[class];
                if have >= quota {
                    continue;
                }
                let mut candidates: Vec<(usize, Transform)> = parents
                    .iter()
                    .flat_map(|&p| TRANSFORMS.iter().map(move |&t| (p, t)))
                    .collect();
                let mut r = rng::stream(seed, "augment-quota", &[class as u64]);
                candidates.shuffle(&mut r);
                let need = quota - have;
                if candidates.len() < need {
                    warnings.push(format!(
                        "class {class}: quota {quota} unreachable, producing {} of {} needed",
                        candidates.len(),
                        need
                    ));
                }
                for (parent, transform) in candidates.into_iter().take(need) {
                    let img = apply_transform(transform, set.height, set.width, set.image(parent));
                    let label = set.labels[parent];
                    set.push(&img, label, Provenance::Augmented(parent));
                }
            }
        }
        AugmentMode::Multiplier(m) => {
            if m > TRANSFORMS.len() {
                return Err(Error::config(format!(
                    "augmentation multiplier {m} exceeds the {} distinct transforms",
                    TRANSFORMS.len()
                )));
            }
            for parents in parents_per_class.iter() {
                for &parent in parents {
                    let mut order = TRANSFORMS.to_vec();
                    let mut r = rng::stream(seed, "augment-mult", &[parent as u64]);
                    order.shuffle(&mut r);
                    for &transform in order.iter().take(m) {
                        let img =
                            apply_transform(transform, set.height, set.width, set.image(parent));
                        let label = set.labels[parent];
                        set.push(&img, label, Provenance::Augmented(parent));
                    }
                }
            }
        }
    }
    set.validate()?;
    Ok(warnings)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub stratified: bool,
    pub seed: u64,
    /// Long-tail drop rule: classes with fewer items are removed entirely.
    pub min_class_count: Option<usize>,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            stratified: true,
            seed: 0,
            min_class_count: None,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios sum to {total}, not 1")));
        }
        if self.train <= 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::config("split ratios must be nonnegative, train > 0"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub dropped_classes: Vec<usize>,
}

/// Deterministic (seeded) membership lists; stratified per class when asked.
/// Items with augmented provenance are rejected: splits are drawn from real
/// items and augmentation is applied to the training split afterwards.
pub fn split_indices(set: &LabeledImageSet, plan: &SplitPlan) -> Result<SplitIndices> {
    plan.validate()?;
    if set
        .provenance
        .iter()
        .any(|p| matches!(p, Provenance::Augmented(_)))
    {
        return Err(Error::contract(
            "split input already contains augmented items; augment after splitting",
        ));
    }
    let mut dropped_classes = Vec::new();
    let counts = set.class_counts();
    if let Some(min) = plan.min_class_count {
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 && n < min {
                dropped_classes.push(c);
            }
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut assign = |indices: &mut Vec<usize>, scope_ids: &[u64]| {
        let mut r = rng::stream(plan.seed, "split", scope_ids);
        indices.shuffle(&mut r);
        let n = indices.len();
        let n_val = (n as f64 * plan.val).round() as usize;
        let n_test = (n as f64 * plan.test).round() as usize;
        let n_val = n_val.min(n);
        let n_test = n_test.min(n - n_val);
        for (i, &idx) in indices.iter().enumerate() {
            if i < n_val {
                val.push(idx);
            } else if i < n_val + n_test {
                test.push(idx);
            } else {
                train.push(idx);
            }
        }
    };

    if plan.stratified {
        for class in 0..set.class_count() {
            if dropped_classes.contains(&class) {
                continue;
            }
            let mut indices: Vec<usize> = (0..set.len())
                .filter(|&i| set.labels[i] as usize == class)
                .collect();
            if indices.is_empty() {
                continue;
            }
            assign(&mut indices, &[class as u64]);
        }
    } else {
        let mut indices: Vec<usize> = (0..set.len())
            .filter(|&i| !dropped_classes.contains(&(set.labels[i] as usize)))
            .collect();
        assign(&mut indices, &[]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices {
        train,
        val,
        test,
        dropped_classes,
    })
}

pub fn subset(set: &LabeledImageSet, indices: &[usize]) -> LabeledImageSet {
    let mut out = LabeledImageSet::empty(set.height, set.width, set.label_names.clone());
    for &i in indices {
        out.push(set.image(i), set.labels[i], set.provenance[i]);
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic fine-grained generator
// ---------------------------------------------------------------------------

/// Morphology of one synthetic class: an elliptical body with angular spines,
/// internal banding, and an optional flagellum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMorphology {
    pub eccentricity: f64,
    pub spine_count: usize,
    pub banding_freq: f64,
    pub flagellum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassMorphology>,
    pub image_size: usize,
    pub noise_level: f64,
    /// Scale of per-image pose variation (rotation, translation, size).
    pub jitter: f64,
}

impl SyntheticSpec {
    /// k classes over small parameter deltas: eccentricity, spine count and
    /// banding frequency each take two nearby values, cycled to fill k.
    pub fn fine_grained(k: usize, image_size: usize, noise_level: f64) -> Self {
        let ecc = [0.58, 0.74];
        let spines = [5usize, 7];
        let bands = [2.0, 3.5];
        let classes = (0..k)
            .map(|c| ClassMorphology {
                eccentricity: ecc[c & 1],
                spine_count: spines[(c >> 1) & 1],
                banding_freq: bands[(c >> 2) & 1],
                flagellum: (c >> 3) & 1 == 1,
            })
            .collect();
        SyntheticSpec {
            classes,
            image_size,
            noise_level,
            jitter: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("synthetic spec needs at least one class"));
        }
        if self.image_size < 8 {
            return Err(Error::config("synthetic image size must be >= 8"));
        }
        if self.noise_level < 0.0 || self.jitter < 0.0 {
            return Err(Error::config("noise level and jitter must be nonnegative"));
        }
        Ok(())
    }
}

/// Renders one organism-like image. Spine mass is held constant across spine
/// counts (longer spikes when there are fewer) so classes share first-order
/// intensity statistics and differ in arrangement.
fn render_organism(
    morph: &ClassMorphology,
    size: usize,
    noise_level: f64,
    jitter: f64,
    r: &mut impl Rng,
) -> Vec<f32> {
    let theta: f64 = r.gen::<f64>() * std::f64::consts::TAU * jitter.min(1.0);
    let cx = size as f64 / 2.0 + (r.gen::<f64>() - 0.5) * 0.12 * size as f64 * jitter;
    let cy = size as f64 / 2.0 + (r.gen::<f64>() - 0.5) * 0.12 * size as f64 * jitter;
    let scale = 1.0 + (r.gen::<f64>() - 0.5) * 0.22 * jitter;
    let brightness = 0.75 + (r.gen::<f64>() - 0.5) * 0.12 * jitter;
    let band_phase: f64 = r.gen::<f64>() * std::f64::consts::TAU * jitter.min(1.0);

    let a = 0.30 * size as f64 * scale;
    let b = a * morph.eccentricity;
    let spike_len = 1.6 / morph.spine_count as f64;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let background = 0.06;
    let band_amp = 0.28;

    let mut out = vec![0.0f32; size * size];
    for py in 0..size {
        for px in 0..size {
            // 2x2 supersampling
            let mut acc = 0.0f64;
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = px as f64 + 0.25 + 0.5 * sx as f64 - cx;
                    let y = py as f64 + 0.25 + 0.5 * sy as f64 - cy;
                    let u = x * cos_t + y * sin_t;
                    let v = -x * sin_t + y * cos_t;
                    let nu = u / a;
                    let nv = v / b;
                    let rr = (nu * nu + nv * nv).sqrt();
                    let phi = nv.atan2(nu);
                    let spike = (morph.spine_count as f64 * phi).cos().max(0.0).powi(6);
                    let boundary = 1.0 + spike_len * spike;
                    let mut val = background;
                    if rr < boundary {
                        let edge = ((boundary - rr) / 0.10).clamp(0.0, 1.0);
                        let banding = 1.0
                            + band_amp
                                * (std::f64::consts::TAU * morph.banding_freq * nu + band_phase)
                                    .cos();
                        let body = brightness * banding * (0.72 + 0.28 * (1.0 - rr).max(0.0));
                        val = background + body.max(0.0) * edge;
                    }
                    if morph.flagellum {
                        // thin wavy tail off the +u pole
                        let tail_u = nu - 1.0;
                        if tail_u > 0.0 && tail_u < 0.9 {
                            let wiggle = 0.10 * (tail_u * 9.0).sin();
                            if (nv - wiggle).abs() < 0.055 {
                                val = val.max(background + brightness * 0.5 * (1.0 - tail_u));
                            }
                        }
                    }
                    acc += val;
                }
            }
            out[py * size + px] = (acc / 4.0) as f32;
        }
    }
    if noise_level > 0.0 {
        for v in &mut out {
            *v += (r.sample::<f64, _>(StandardNormal) * noise_level) as f32;
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Deterministic synthetic set: n_per_class images per class, labeled in
/// class order.
pub fn synthesize(spec: &SyntheticSpec, n_per_class: usize, seed: u64) -> Result<LabeledImageSet> {
    spec.validate()?;
    let names: Vec<String> = (0..spec.classes.len())
        .map(|c| format!("class_{c:02}"))
        .collect();
    let mut set = LabeledImageSet::empty(spec.image_size, spec.image_size, names);
    for (class, morph) in spec.classes.iter().enumerate() {
        for idx in 0..n_per_class {
            let mut r = rng::stream(seed, "synthesize", &[class as u64, idx as u64]);
            let img = render_organism(morph, spec.image_size, spec.noise_level, spec.jitter, &mut r);
            set.push(&img, class as u32, Provenance::Synthetic);
        }
    }
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(per_class: &[usize], size: usize) -> LabeledImageSet {
        let names = (0..per_class.len()).map(|i| format!("c{i}")).collect();
        let mut set = LabeledImageSet::empty(size, size, names);
        for (class, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                let v = (class as f32 * 10.0 + i as f32) / 100.0;
                let img = vec![v.clamp(0.0, 1.0); size * size];
                set.push(&img, class as u32, Provenance::Real);
            }
        }
        set
    }

    #[test]
    fn flips_are_involutions() {
        let src: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        for t in [Transform::HFlip, Transform::VFlip, Transform::Rot180] {
            let once = apply_transform(t, 3, 4, &src);
            let twice = apply_transform(t, 3, 4, &once);
            assert_eq!(src, twice, "{t:?} should be an involution");
        }
    }

    #[test]
    fn intensity_clamps_at_one() {
        let src = vec![0.95f32];
        let out = apply_transform(Transform::Intensity(1.10), 1, 1, &src);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn quota_augmentation_counts() {
        // 3 real items, quota 12, 7 transforms: expect 3 + min(9, 21) = 12.
        let mut set = toy_set(&[3], 4);
        let warnings = augment(&mut set, AugmentMode::Quota(12), 5).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(set.len(), 12);
        let augmented = set
            .provenance
            .iter()
            .filter(|p| matches!(p, Provenance::Augmented(_)))
            .count();
        assert_eq!(augmented, 9);

        // unreachable quota warns and produces the max achievable: 3 + 21
        let mut set = toy_set(&[3], 4);
        let warnings = augment(&mut set, AugmentMode::Quota(40), 5).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(set.len(), 24);
    }

    #[test]
    fn multiplier_augmentation_counts() {
        let mut set = toy_set(&[2, 5], 4);
        augment(&mut set, AugmentMode::Multiplier(3), 7).unwrap();
        assert_eq!(set.len(), (2 + 5) * 4);
        assert!(augment(&mut set, AugmentMode::Multiplier(8), 7).is_err());
    }

    #[test]
    fn split_exact_for_round_numbers() {
        let set = toy_set(&[100], 4);
        let plan = SplitPlan::default();
        let s = split_indices(&set, &plan).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.test.len(), 10);
    }

    #[test]
    fn split_preserves_stratification() {
        let set = toy_set(&[90, 10], 4);
        let plan = SplitPlan {
            seed: 3,
            ..Default::default()
        };
        let s = split_indices(&set, &plan).unwrap();
        let count = |ids: &[usize], class: u32| {
            ids.iter().filter(|&&i| set.labels[i] == class).count()
        };
        assert_eq!(count(&s.train, 0), 72);
        assert_eq!(count(&s.train, 1), 8);
        assert_eq!(count(&s.val, 0), 9);
        assert_eq!(count(&s.val, 1), 1);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let set = toy_set(&[37, 16, 25], 4);
        let plan = SplitPlan {
            seed: 11,
            ..Default::default()
        };
        let a = split_indices(&set, &plan).unwrap();
        let b = split_indices(&set, &plan).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), set.len());
    }

    #[test]
    fn long_tail_drop_rule() {
        let set = toy_set(&[20, 3, 8], 4);
        let plan = SplitPlan {
            min_class_count: Some(5),
            seed: 2,
            ..Default::default()
        };
        let s = split_indices(&set, &plan).unwrap();
        assert_eq!(s.dropped_classes, vec![1]);
        for &i in s.train.iter().chain(&s.val).chain(&s.test) {
            assert_ne!(set.labels[i], 1);
        }
        // no real image of surviving classes is lost
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 28);
    }

    #[test]
    fn augmented_items_never_enter_split_input() {
        let mut set = toy_set(&[10], 4);
        augment(&mut set, AugmentMode::Quota(15), 1).unwrap();
        assert!(split_indices(&set, &SplitPlan::default()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = toy_set(&[4, 3], 6);
        augment(&mut set, AugmentMode::Quota(5), 9).unwrap();
        set.save(dir.path(), "train").unwrap();
        let back = LabeledImageSet::load(dir.path(), "train").unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn synthesize_is_deterministic() {
        let spec = SyntheticSpec::fine_grained(4, 16, 0.02);
        let a = synthesize(&spec, 3, 42).unwrap();
        let b = synthesize(&spec, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&spec, 3, 43).unwrap();
        assert_ne!(a.pixels, c.pixels);
        assert_eq!(a.len(), 12);
        assert_eq!(a.class_counts(), vec![3, 3, 3, 3]);
    }

    #[test]
    fn identical_morphologies_render_identically_per_stream() {
        // zero delta between two classes makes them indistinguishable by
        // construction: the same rng stream yields the same image.
        let m = ClassMorphology {
            eccentricity: 0.6,
            spine_count: 5,
            banding_freq: 2.0,
            flagellum: false,
        };
        let mut r1 = rng::stream(7, "synthesize", &[0, 0]);
        let mut r2 = rng::stream(7, "synthesize", &[0, 0]);
        let a = render_organism(&m, 16, 0.05, 1.0, &mut r1);
        let b = render_organism(&m, 16, 0.05, 1.0, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_large_delta_classes_are_nearest_centroid_separable() {
        // With zero noise and zero jitter every image is its class prototype,
        // so a pixel-space nearest-centroid classifier is exact.
        let spec = SyntheticSpec {
            classes: vec![
                ClassMorphology {
                    eccentricity: 0.35,
                    spine_count: 3,
                    banding_freq: 1.0,
                    flagellum: false,
                },
                ClassMorphology {
                    eccentricity: 0.95,
                    spine_count: 11,
                    banding_freq: 5.0,
                    flagellum: true,
                },
            ],
            image_size: 24,
            noise_level: 0.0,
            jitter: 0.0,
        };
        let train = synthesize(&spec, 5, 1).unwrap();
        let test = synthesize(&spec, 5, 2).unwrap();
        let dim = train.image_len();
        let mut centroids = vec![vec![0.0f64; dim]; 2];
        let counts = train.class_counts();
        for i in 0..train.len() {
            let c = train.labels[i] as usize;
            for (acc, &v) in centroids[c].iter_mut().zip(train.image(i)) {
                *acc += v as f64 / counts[c] as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, cent) in centroids.iter().enumerate() {
                let d: f64 = cent
                    .iter()
                    .zip(test.image(i))
                    .map(|(a, &b)| (a - b as f64) * (a - b as f64))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == test.labels[i] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, test.len());
    }

    #[test]
    fn ingest_reads_classes_and_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["alpha", "beta"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
        }
        // constant 0.5 image, larger than target: resize keeps it constant
        let big = vec![0.5f32; 64 * 64];
        imageio::write_pgm(64, 64, &big, &dir.path().join("alpha/a.pgm")).unwrap();
        imageio::write_pgm(64, 64, &big, &dir.path().join("beta/b.pgm")).unwrap();
        std::fs::write(dir.path().join("beta/empty.pgm"), b"").unwrap();
        std::fs::write(dir.path().join("beta/garbage.pgm"), b"not a pgm at all").unwrap();

        let (set, report) = ingest(dir.path(), None, 32).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(report.skipped, 2);
        assert_eq!(set.label_names, vec!["alpha", "beta"]);
        for &v in set.image(0) {
            assert!((v - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn ingest_label_map_merges_directories() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["genus_a", "genus_a_variant"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            let img = vec![0.3f32; 16];
            imageio::write_pgm(4, 4, &img, &dir.path().join(class).join("x.pgm")).unwrap();
        }
        let map = dir.path().join("map.csv");
        std::fs::write(&map, "genus_a,0\ngenus_a_variant,0\n").unwrap();
        let (set, _) = ingest(dir.path(), Some(&map), 8).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn ingest_empty_class_errors_with_name() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("lonely")).unwrap();
        let err = ingest(dir.path(), None, 8).unwrap_err().to_string();
        assert!(err.contains("lonely"), "error should name the class: {err}");
    }
}
