//! Linear softmax probes per (t, ell) cell, sweep selection of the best
//! cell by validation accuracy, and classification metrics.
//!
//! Probes train on l2-normalized descriptors with Adam and decoupled weight
//! decay. (The reference protocol names plain Adam alongside a weight decay;
//! we apply the decay decoupled from the adaptive step.)

use crate::denoiser::ReadoutId;
use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureMatrix};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Row-wise l2 normalization; zero rows map to zero.
pub fn l2_normalize_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let mut out = m.clone();
    for i in 0..m.n {
        let row = out.row_mut(i);
        let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v = (*v as f64 / norm) as f32;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub normalize: bool,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper {
            epochs: 10,
            batch: 512,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            label_smoothing: 0.0,
            seed: 0,
            shuffle: true,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// (classes x dim), row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub normalized: bool,
    pub cell: Option<(usize, usize)>,
}

impl LinearProbe {
    pub fn logits(&self, row: &[f32]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let w = &self.weights[k * self.dim..(k + 1) * self.dim];
                let mut acc = self.bias[k];
                for (&wv, &xv) in w.iter().zip(row) {
                    acc += wv * xv as f64;
                }
                acc
            })
            .collect()
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let logits = self.logits(row);
        let mut best = 0;
        for k in 1..self.classes {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best
    }
}

fn normalize_if(m: &FeatureMatrix, normalize: bool) -> FeatureMatrix {
    if normalize {
        l2_normalize_rows(m)
    } else {
        m.clone()
    }
}

/// Fits a softmax probe by minimizing mean cross-entropy for a fixed number
/// of epochs. Errors when a class has no training example.
pub fn fit_probe(
    features: &FeatureMatrix,
    labels: &[u32],
    classes: usize,
    hyper: &ProbeHyper,
) -> Result<LinearProbe> {
    if features.n != labels.len() {
        return Err(Error::Shape {
            context: "fit_probe".into(),
            expected: format!("{} labels", features.n),
            got: format!("{}", labels.len()),
        });
    }
    if features.n == 0 {
        return Err(Error::contract("empty training set"));
    }
    let mut seen = vec![false; classes];
    for &l in labels {
        if l as usize >= classes {
            return Err(Error::contract(format!(
                "label {l} outside {classes} classes"
            )));
        }
        seen[l as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::contract(format!(
            "class {missing} absent from the training split"
        )));
    }

    let x = normalize_if(features, hyper.normalize);
    let dim = x.dim;
    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let mut m_w = vec![0.0f64; classes * dim];
    let mut v_w = vec![0.0f64; classes * dim];
    let mut m_b = vec![0.0f64; classes];
    let mut v_b = vec![0.0f64; classes];
    let mut adam_step = 0u64;
    let eps = 1e-8;

    let smooth_on = hyper.label_smoothing / classes as f64;
    let smooth_target = 1.0 - hyper.label_smoothing + smooth_on;

    let mut order: Vec<usize> = (0..x.n).collect();
    for epoch in 0..hyper.epochs {
        if hyper.shuffle {
            let mut r = rng::stream(hyper.seed, "probe-shuffle", &[epoch as u64]);
            order.shuffle(&mut r);
        }
        for chunk in order.chunks(hyper.batch.max(1)) {
            let inv = 1.0 / chunk.len() as f64;
            let mut gw = vec![0.0f64; classes * dim];
            let mut gb = vec![0.0f64; classes];
            for &i in chunk {
                let row = x.row(i);
                let mut logits = vec![0.0f64; classes];
                for k in 0..classes {
                    let wr = &w[k * dim..(k + 1) * dim];
                    let mut acc = b[k];
                    for (&wv, &xv) in wr.iter().zip(row) {
                        acc += wv * xv as f64;
                    }
                    logits[k] = acc;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for l in &mut logits {
                    *l = (*l - max).exp();
                    denom += *l;
                }
                let y = labels[i] as usize;
                for k in 0..classes {
                    let p = logits[k] / denom;
                    let target = if k == y { smooth_target } else { smooth_on };
                    let d = (p - target) * inv;
                    gb[k] += d;
                    let gr = &mut gw[k * dim..(k + 1) * dim];
                    for (g, &xv) in gr.iter_mut().zip(row) {
                        *g += d * xv as f64;
                    }
                }
            }
            // Adam with decoupled weight decay (bias excluded from decay).
            adam_step += 1;
            let bc1 = 1.0 - hyper.beta1.powi(adam_step as i32);
            let bc2 = 1.0 - hyper.beta2.powi(adam_step as i32);
            for (idx, g) in gw.iter().enumerate() {
                m_w[idx] = hyper.beta1 * m_w[idx] + (1.0 - hyper.beta1) * g;
                v_w[idx] = hyper.beta2 * v_w[idx] + (1.0 - hyper.beta2) * g * g;
                let mhat = m_w[idx] / bc1;
                let vhat = v_w[idx] / bc2;
                w[idx] =
                    w[idx] * (1.0 - hyper.lr * hyper.weight_decay) - hyper.lr * mhat / (vhat.sqrt() + eps);
            }
            for (idx, g) in gb.iter().enumerate() {
                m_b[idx] = hyper.beta1 * m_b[idx] + (1.0 - hyper.beta1) * g;
                v_b[idx] = hyper.beta2 * v_b[idx] + (1.0 - hyper.beta2) * g * g;
                let mhat = m_b[idx] / bc1;
                let vhat = v_b[idx] / bc2;
                b[idx] -= hyper.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    Ok(LinearProbe {
        classes,
        dim,
        weights: w,
        bias: b,
        normalized: hyper.normalize,
        cell: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassPrf>,
}

/// Accuracy, Macro F1 (unweighted mean of per-class F1; classes with no
/// predicted and no true positives contribute 0), and per-class P/R/F1.
pub fn evaluate(probe: &LinearProbe, features: &FeatureMatrix, labels: &[u32]) -> Result<EvalMetrics> {
    if features.n == 0 {
        return Err(Error::contract("empty evaluation set"));
    }
    if features.n != labels.len() {
        return Err(Error::Shape {
            context: "evaluate".into(),
            expected: format!("{} labels", features.n),
            got: format!("{}", labels.len()),
        });
    }
    let x = normalize_if(features, probe.normalized);
    let k = probe.classes;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fnc = vec![0usize; k];
    let mut correct = 0usize;
    for i in 0..x.n {
        let pred = probe.predict(x.row(i));
        let truth = labels[i] as usize;
        if pred == truth {
            correct += 1;
            tp[truth] += 1;
        } else {
            fp[pred] += 1;
            fnc[truth] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut f1_sum = 0.0;
    for c in 0..k {
        let p_den = tp[c] + fp[c];
        let r_den = tp[c] + fnc[c];
        let precision = if p_den == 0 { 0.0 } else { tp[c] as f64 / p_den as f64 };
        let recall = if r_den == 0 { 0.0 } else { tp[c] as f64 / r_den as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.push(ClassPrf {
            precision,
            recall,
            f1,
        });
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / x.n as f64,
        macro_f1: f1_sum / k as f64,
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Sweep over the (t, ell) grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub t: usize,
    pub ell: usize,
    pub r: usize,
    pub b: usize,
    pub val: EvalMetrics,
    pub test: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
    pub t_star: usize,
    pub ell_star: usize,
    pub val_acc: f64,
    pub test: EvalMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub t_star: usize,
    pub ell_star: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub test_macro_f1: f64,
}

impl SweepResult {
    pub fn selection(&self) -> SelectionSummary {
        SelectionSummary {
            t_star: self.t_star,
            ell_star: self.ell_star,
            val_acc: self.val_acc,
            test_acc: self.test.accuracy,
            test_macro_f1: self.test.macro_f1,
        }
    }
}

/// Fits one probe per grid cell, selects argmax validation accuracy with
/// deterministic (t, ell) tie-breaking, and reports held-out test metrics at
/// the selection (plus the full grid when `full_test`).
pub fn sweep(
    train: &FeatureGrid,
    val: &FeatureGrid,
    test: &FeatureGrid,
    train_labels: &[u32],
    val_labels: &[u32],
    test_labels: &[u32],
    classes: usize,
    hyper: &ProbeHyper,
    full_test: bool,
) -> Result<SweepResult> {
    let mut keys: Vec<(usize, usize)> = train.cells.keys().copied().collect();
    keys.sort_unstable();
    if keys.is_empty() {
        return Err(Error::contract("sweep requires at least one grid cell"));
    }
    let mut cells: Vec<(CellResult, LinearProbe)> = Vec::with_capacity(keys.len());
    let mut best: Option<usize> = None;
    for &(t, ell) in &keys {
        let train_m = train
            .cell(t, ell)
            .ok_or_else(|| Error::contract(format!("missing train cell (t={t}, ell={ell})")))?;
        let val_m = val
            .cell(t, ell)
            .ok_or_else(|| Error::contract(format!("missing val cell (t={t}, ell={ell})")))?;
        let mut probe = fit_probe(train_m, train_labels, classes, hyper)?;
        probe.cell = Some((t, ell));
        let val_metrics = evaluate(&probe, val_m, val_labels)?;
        let id = ReadoutId::from_ell(ell, train.blocks_per_stage)?;
        let test_metrics = if full_test {
            let test_m = test
                .cell(t, ell)
                .ok_or_else(|| Error::contract(format!("missing test cell (t={t}, ell={ell})")))?;
            Some(evaluate(&probe, test_m, test_labels)?)
        } else {
            None
        };
        cells.push((
            CellResult {
                t,
                ell,
                r: id.stage,
                b: id.block,
                val: val_metrics,
                test: test_metrics,
            },
            probe,
        ));
        let idx = cells.len() - 1;
        // strictly-greater keeps the first (smallest t, then ell) on ties
        if best.map_or(true, |b| cells[idx].0.val.accuracy > cells[b].0.val.accuracy) {
            best = Some(idx);
        }
    }
    let best = best.expect("at least one cell");
    let (t_star, ell_star) = (cells[best].0.t, cells[best].0.ell);
    let test_at_star = match &cells[best].0.test {
        Some(m) => m.clone(),
        None => {
            let test_m = test.cell(t_star, ell_star).ok_or_else(|| {
                Error::contract(format!("missing test cell (t={t_star}, ell={ell_star})"))
            })?;
            evaluate(&cells[best].1, test_m, test_labels)?
        }
    };
    Ok(SweepResult {
        val_acc: cells[best].0.val.accuracy,
        t_star,
        ell_star,
        test: test_at_star,
        cells: cells.into_iter().map(|(c, _)| c).collect(),
    })
}

/// Sweep report rows: resolution, block, ell, t, split, accuracy, macro_f1.
pub fn sweep_csv(result: &SweepResult, resolution_of_stage: &dyn Fn(usize) -> usize) -> String {
    let mut out = String::from("resolution,block,ell,t,split,accuracy,macro_f1\n");
    for cell in &result.cells {
        let res = resolution_of_stage(cell.r);
        out.push_str(&format!(
            "{},{},{},{},val,{:.6},{:.6}\n",
            res, cell.b, cell.ell, cell.t, cell.val.accuracy, cell.val.macro_f1
        ));
        if let Some(test) = &cell.test {
            out.push_str(&format!(
                "{},{},{},{},test,{:.6},{:.6}\n",
                res, cell.b, cell.ell, cell.t, test.accuracy, test.macro_f1
            ));
        }
    }
    out
}
