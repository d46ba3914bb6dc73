//! Unsupervised diagnostics: k-means with restarts, cluster agreement
//! metrics, Hungarian cluster-to-label matching, PCA token overlays, and a
//! Fréchet distance between Gaussian feature fits.

use crate::denoiser::FeatureTensor;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::{jacobi_eigh, matmul_square, sqrtm_psd};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        KmeansOptions {
            restarts: 5,
            max_iter: 300,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KmeansRun {
    pub k: usize,
    pub assignments: Vec<usize>,
    /// (k x dim) centroid rows.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub restart_used: usize,
    pub seed: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(
    x: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    opts: &KmeansOptions,
    restart: usize,
) -> (Vec<usize>, Vec<f64>, f64, usize, Vec<f64>) {
    let mut r = rng::stream(opts.seed, "kmeans-init", &[restart as u64]);
    // k-means++ style distance-weighted seeding
    let mut centroids = vec![0.0f64; k * dim];
    let first = r.gen_range(0..n);
    centroids[..dim].copy_from_slice(&x[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&x[i * dim..(i + 1) * dim], &centroids[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            r.gen_range(0..n)
        } else {
            let mut target = r.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids[c * dim..(c + 1) * dim].copy_from_slice(&x[pick * dim..(pick + 1) * dim]);
        for i in 0..n {
            let d = sq_dist(&x[i * dim..(i + 1) * dim], &centroids[c * dim..(c + 1) * dim]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        // assign
        let mut inertia = 0.0;
        for i in 0..n {
            let row = &x[i * dim..(i + 1) * dim];
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = sq_dist(row, &centroids[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignments[i] = best.1;
            inertia += best.0;
        }
        trace.push(inertia);
        // update
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                *s += v;
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its previous centroid
            }
            let inv = 1.0 / counts[c] as f64;
            let mut shift = 0.0;
            for d in 0..dim {
                let new = sums[c * dim + d] * inv;
                let old = centroids[c * dim + d];
                shift += (new - old) * (new - old);
                centroids[c * dim + d] = new;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < opts.tol {
            break;
        }
    }
    // final inertia under the final centroids
    let mut inertia = 0.0;
    for i in 0..n {
        let row = &x[i * dim..(i + 1) * dim];
        let mut best = f64::INFINITY;
        for c in 0..k {
            best = best.min(sq_dist(row, &centroids[c * dim..(c + 1) * dim]));
        }
        inertia += best;
    }
    // re-assign once so assignments match the final centroids
    for i in 0..n {
        let row = &x[i * dim..(i + 1) * dim];
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..k {
            let d = sq_dist(row, &centroids[c * dim..(c + 1) * dim]);
            if d < best.0 {
                best = (d, c);
            }
        }
        assignments[i] = best.1;
    }
    (assignments, centroids, inertia, iterations, trace)
}

/// Lloyd iterations with distance-weighted seeding; the best-inertia restart
/// wins, ties broken by restart index. Deterministic given the seed.
pub fn kmeans(x: &FeatureMatrix, k: usize, opts: &KmeansOptions) -> Result<KmeansRun> {
    let n = x.n;
    let dim = x.dim;
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "k must be in 1..={n} (number of points), got {k}"
        )));
    }
    let xd: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let mut best: Option<KmeansRun> = None;
    for restart in 0..opts.restarts.max(1) {
        let (assignments, centroids, inertia, iterations, trace) =
            kmeans_once(&xd, n, dim, k, opts, restart);
        let better = match &best {
            None => true,
            Some(b) => inertia < b.inertia,
        };
        if better {
            best = Some(KmeansRun {
                k,
                assignments,
                centroids,
                inertia,
                iterations,
                inertia_trace: trace,
                restart_used: restart,
                seed: opts.seed,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

// ---------------------------------------------------------------------------
// Agreement metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub nmi: f64,
    pub ari: f64,
    pub purity: f64,
    pub v_measure: f64,
    pub silhouette: f64,
}

fn contingency(assignments: &[usize], labels: &[u32]) -> (Vec<Vec<usize>>, usize, usize) {
    let kc = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let kl = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut table = vec![vec![0usize; kl]; kc];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l as usize] += 1;
    }
    (table, kc, kl)
}

fn entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// NMI (arithmetic normalization), chance-corrected ARI, purity, V-measure,
/// and the exact mean silhouette (Euclidean). Metrics are invariant to
/// cluster relabeling.
pub fn cluster_metrics(
    assignments: &[usize],
    labels: &[u32],
    x: &FeatureMatrix,
) -> Result<ClusterMetrics> {
    let n = assignments.len();
    if n != labels.len() || n != x.n {
        return Err(Error::Shape {
            context: "cluster_metrics".into(),
            expected: format!("{n} labels and rows"),
            got: format!("{} labels, {} rows", labels.len(), x.n),
        });
    }
    if n == 0 {
        return Err(Error::contract("empty input"));
    }
    let (table, kc, kl) = contingency(assignments, labels);
    let total = n as f64;
    let a_sums: Vec<usize> = table.iter().map(|row| row.iter().sum()).collect();
    let mut b_sums = vec![0usize; kl];
    for row in &table {
        for (j, &c) in row.iter().enumerate() {
            b_sums[j] += c;
        }
    }

    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let pij = c as f64 / total;
                mi += pij * (pij / ((a_sums[i] as f64 / total) * (b_sums[j] as f64 / total))).ln();
            }
        }
    }
    let h_clusters = entropy(&a_sums, total);
    let h_classes = entropy(&b_sums, total);
    let nmi = if h_clusters == 0.0 && h_classes == 0.0 {
        1.0 // both partitions are single blocks, hence identical
    } else if h_clusters == 0.0 || h_classes == 0.0 {
        0.0
    } else {
        mi / ((h_clusters + h_classes) / 2.0)
    };
    let homogeneity = if h_classes == 0.0 { 1.0 } else { mi / h_classes };
    let completeness = if h_clusters == 0.0 { 1.0 } else { mi / h_clusters };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };

    let c2 = |v: usize| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| c2(c)).sum();
    let sum_a: f64 = a_sums.iter().map(|&c| c2(c)).sum();
    let sum_b: f64 = b_sums.iter().map(|&c| c2(c)).sum();
    let expected = sum_a * sum_b / c2(n);
    let max_index = (sum_a + sum_b) / 2.0;
    let ari = if (max_index - expected).abs() < 1e-300 {
        1.0
    } else {
        (index - expected) / (max_index - expected)
    };

    let purity: f64 = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0) as f64)
        .sum::<f64>()
        / total;

    let silhouette = mean_silhouette(assignments, x, kc)?;

    Ok(ClusterMetrics {
        nmi,
        ari,
        purity,
        v_measure,
        silhouette,
    })
}

/// Exact mean silhouette with Euclidean distance. Points in singleton
/// clusters score 0; a single-cluster partition scores 0.
pub fn mean_silhouette(assignments: &[usize], x: &FeatureMatrix, k: usize) -> Result<f64> {
    let n = x.n;
    if k <= 1 {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let mut total = 0.0;
    // accumulate sum of distances from each point to each cluster
    for i in 0..n {
        let mut dist_sum = vec![0.0f64; k];
        let row_i = x.row(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d: f64 = row_i
                .iter()
                .zip(x.row(j))
                .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                .sum::<f64>()
                .sqrt();
            dist_sum[assignments[j]] += d;
        }
        let own = assignments[i];
        if counts[own] <= 1 {
            continue; // singleton contributes 0
        }
        let a = dist_sum[own] / (counts[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && counts[c] > 0 {
                b = b.min(dist_sum[c] / counts[c] as f64);
            }
        }
        if b.is_finite() {
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// Hungarian matching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentMap {
    /// row (cluster) -> column (label)
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
    /// Agreement count when built from a contingency table.
    pub total_matched: usize,
}

/// Minimum-cost perfect matching on a square cost matrix, O(k^3)
/// shortest-augmenting-path with potentials.
pub fn hungarian(cost: &[f64], k: usize) -> Result<AssignmentMap> {
    if k == 0 {
        return Err(Error::contract("empty cost matrix"));
    }
    if cost.len() != k * k {
        return Err(Error::contract(format!(
            "cost matrix must be square: expected {} entries for k={k}, got {}",
            k * k,
            cost.len()
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite cost entry".into()));
    }
    let n = k;
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
        total += cost[(p[j] - 1) * n + (j - 1)];
    }
    Ok(AssignmentMap {
        row_to_col,
        total_cost: total,
        total_matched: 0,
    })
}

/// Maximum-agreement one-to-one matching between clusters and labels on the
/// padded square contingency table (cost = negated counts).
pub fn match_clusters_to_labels(assignments: &[usize], labels: &[u32]) -> Result<AssignmentMap> {
    let (table, kc, kl) = contingency(assignments, labels);
    let k = kc.max(kl).max(1);
    let mut cost = vec![0.0f64; k * k];
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost[i * k + j] = -(c as f64);
        }
    }
    let mut result = hungarian(&cost, k)?;
    let matched: usize = result
        .row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            if i < kc && j < kl {
                table[i][j]
            } else {
                0
            }
        })
        .sum();
    result.total_matched = matched;
    Ok(result)
}

// ---------------------------------------------------------------------------
// PCA token overlays
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PcaOverlay {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// n x h x w x 3 in [0, 1].
    pub rgb: Vec<f32>,
    /// n x h x w; true marks foreground (first component above threshold).
    pub mask: Vec<bool>,
    /// components x channels projection matrix.
    pub components: Vec<f64>,
    pub explained: Vec<f64>,
    pub warnings: Vec<String>,
}

/// PCA over all spatial tokens of a batch of feature maps; the first three
/// components map to RGB, and pixels whose first-component score falls below
/// the batch quantile are masked as background.
pub fn pca_tokens(
    maps: &[FeatureTensor<f32>],
    n_components: usize,
    mask_quantile: f64,
) -> Result<PcaOverlay> {
    if maps.is_empty() {
        return Err(Error::contract("no feature maps supplied"));
    }
    let [c, h, w] = *maps[0].values.shape() else {
        return Err(Error::contract("feature maps must be (C, H, W)"));
    };
    for m in maps {
        if m.values.shape() != [c, h, w] {
            return Err(Error::contract("feature maps must share one shape"));
        }
    }
    let n_tokens = maps.len() * h * w;
    if n_tokens < 3 {
        return Err(Error::contract("need at least 3 spatial tokens"));
    }
    if !(0.0..=1.0).contains(&mask_quantile) {
        return Err(Error::config("mask quantile must be in [0, 1]"));
    }
    let mut warnings = Vec::new();

    // tokens (n_tokens x c)
    let mut tokens = vec![0.0f64; n_tokens * c];
    for (mi, m) in maps.iter().enumerate() {
        for ch in 0..c {
            for pix in 0..h * w {
                tokens[(mi * h * w + pix) * c + ch] = m.values.data()[ch * h * w + pix] as f64;
            }
        }
    }
    let mut mean = vec![0.0f64; c];
    for i in 0..n_tokens {
        for ch in 0..c {
            mean[ch] += tokens[i * c + ch];
        }
    }
    for v in &mut mean {
        *v /= n_tokens as f64;
    }
    for i in 0..n_tokens {
        for ch in 0..c {
            tokens[i * c + ch] -= mean[ch];
        }
    }
    let mut cov = vec![0.0f64; c * c];
    for i in 0..n_tokens {
        let row = &tokens[i * c..(i + 1) * c];
        for a in 0..c {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..c {
                cov[a * c + b] += ra * row[b];
            }
        }
    }
    for a in 0..c {
        for b in a..c {
            cov[a * c + b] /= n_tokens as f64;
            cov[b * c + a] = cov[a * c + b];
        }
    }
    let total_var: f64 = (0..c).map(|a| cov[a * c + a]).sum();
    let (w_eig, v_eig) = jacobi_eigh(&cov, c)?;

    let tiny = 1e-12 * total_var.max(1e-300);
    let mut components = vec![0.0f64; n_components * c];
    let mut explained = vec![0.0f64; n_components];
    let mut rank = 0;
    for comp in 0..n_components {
        if comp >= c {
            break;
        }
        let j = c - 1 - comp; // descending eigenvalues
        if w_eig[j] > tiny {
            for i in 0..c {
                components[comp * c + i] = v_eig[i * c + j];
            }
            explained[comp] = if total_var > 0.0 {
                w_eig[j] / total_var
            } else {
                0.0
            };
            rank += 1;
        }
    }
    if rank < n_components {
        warnings.push(format!(
            "token covariance has rank {rank} < {n_components}; missing channels padded with zeros"
        ));
    }

    // project
    let mut scores = vec![0.0f64; n_tokens * n_components];
    for i in 0..n_tokens {
        for comp in 0..n_components {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += tokens[i * c + ch] * components[comp * c + ch];
            }
            scores[i * n_components + comp] = acc;
        }
    }

    // mask threshold: batch quantile of the first component
    let mut first: Vec<f64> = (0..n_tokens).map(|i| scores[i * n_components]).collect();
    first.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let q_idx = ((n_tokens as f64 - 1.0) * mask_quantile).round() as usize;
    let threshold = first[q_idx];
    let all_masked = rank == 0;
    if all_masked {
        warnings.push("all tokens identical: zero variance, masking everything".into());
    }
    let mut mask = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        mask.push(!all_masked && scores[i * n_components] > threshold);
    }

    // per-channel min-max scaling to [0, 1] over the batch
    let mut rgb = vec![0.0f32; n_tokens * 3];
    for comp in 0..3.min(n_components) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n_tokens {
            let s = scores[i * n_components + comp];
            lo = lo.min(s);
            hi = hi.max(s);
        }
        let range = (hi - lo).max(1e-300);
        for i in 0..n_tokens {
            rgb[i * 3 + comp] = if hi > lo {
                ((scores[i * n_components + comp] - lo) / range) as f32
            } else {
                0.0
            };
        }
    }

    Ok(PcaOverlay {
        n_images: maps.len(),
        height: h,
        width: w,
        rgb,
        mask,
        components,
        explained,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Fréchet diagnostic
// ---------------------------------------------------------------------------

pub const FRECHET_EPS: f64 = 1e-6;

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}) with epsilon-regularized
/// covariances; the matrix square root comes from the eigendecomposition of
/// the symmetrized product S_a^{1/2} S_b S_a^{1/2}.
pub fn frechet_diagnostic(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.n == 0 || b.n == 0 {
        return Err(Error::contract("empty feature set"));
    }
    if a.dim != b.dim {
        return Err(Error::Shape {
            context: "frechet_diagnostic".into(),
            expected: format!("{} dims", a.dim),
            got: format!("{}", b.dim),
        });
    }
    let dim = a.dim;
    let stats = |m: &FeatureMatrix| -> (Vec<f64>, Vec<f64>) {
        let n = m.n as f64;
        let mut mu = vec![0.0f64; dim];
        for i in 0..m.n {
            for (s, &v) in mu.iter_mut().zip(m.row(i)) {
                *s += v as f64;
            }
        }
        for v in &mut mu {
            *v /= n;
        }
        let mut cov = vec![0.0f64; dim * dim];
        for i in 0..m.n {
            let row = m.row(i);
            for p in 0..dim {
                let dp = row[p] as f64 - mu[p];
                for q in p..dim {
                    cov[p * dim + q] += dp * (row[q] as f64 - mu[q]);
                }
            }
        }
        let denom = (m.n.saturating_sub(1)).max(1) as f64;
        for p in 0..dim {
            for q in p..dim {
                cov[p * dim + q] /= denom;
                cov[q * dim + p] = cov[p * dim + q];
            }
            cov[p * dim + p] += FRECHET_EPS;
        }
        (mu, cov)
    };
    let (mu_a, cov_a) = stats(a);
    let (mu_b, cov_b) = stats(b);

    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..dim).map(|i| cov_a[i * dim + i]).sum();
    let tr_b: f64 = (0..dim).map(|i| cov_b[i * dim + i]).sum();

    let sqrt_a = sqrtm_psd(&cov_a, dim)?;
    let prod = matmul_square(&sqrt_a, &matmul_square(&cov_b, &sqrt_a, dim), dim);
    // symmetrize against rounding before the eigensolve
    let mut sym = prod.clone();
    for p in 0..dim {
        for q in 0..dim {
            sym[p * dim + q] = 0.5 * (prod[p * dim + q] + prod[q * dim + p]);
        }
    }
    let (eigs, _) = jacobi_eigh(&sym, dim)?;
    let tr_sqrt: f64 = eigs.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let result = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if !result.is_finite() {
        return Err(Error::Numerical(
            "Fréchet diagnostic is non-finite; covariance conditioning failed".into(),
        ));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Report assembly (one clustering run + metrics)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub assignments: Vec<usize>,
    pub metrics: ClusterMetrics,
    pub matched_fraction: f64,
    pub inertia: f64,
}

pub fn cluster_and_report(
    x: &FeatureMatrix,
    labels: &[u32],
    k: usize,
    opts: &KmeansOptions,
) -> Result<ClusterReport> {
    let run = kmeans(x, k, opts)?;
    let metrics = cluster_metrics(&run.assignments, labels, x)?;
    let matching = match_clusters_to_labels(&run.assignments, labels)?;
    Ok(ClusterReport {
        k,
        seed: opts.seed,
        restarts: opts.restarts,
        assignments: run.assignments,
        metrics,
        matched_fraction: matching.total_matched as f64 / labels.len() as f64,
        inertia: run.inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ReadoutId;
    use crate::tensor::Tensor;

    fn matrix(rows: &[&[f32]]) -> FeatureMatrix {
        let dim = rows[0].len();
        let mut m = FeatureMatrix::zeros(rows.len(), dim);
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        m
    }

    #[test]
    fn two_point_masses_recovered_exactly() {
        let m = matrix(&[
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[5.0, 5.0],
            &[5.0, 5.0],
        ]);
        let run = kmeans(&m, 2, &KmeansOptions::default()).unwrap();
        assert_eq!(run.inertia, 0.0);
        assert_eq!(run.assignments[0], run.assignments[1]);
        assert_eq!(run.assignments[2], run.assignments[3]);
        assert_ne!(run.assignments[0], run.assignments[2]);
    }

    #[test]
    fn k1_gives_the_mean_and_kn_gives_zero_inertia() {
        let m = matrix(&[&[1.0, 0.0], &[3.0, 2.0], &[5.0, 4.0]]);
        let run = kmeans(&m, 1, &KmeansOptions::default()).unwrap();
        assert!((run.centroids[0] - 3.0).abs() < 1e-9);
        assert!((run.centroids[1] - 2.0).abs() < 1e-9);

        let run = kmeans(&m, 3, &KmeansOptions::default()).unwrap();
        assert!(run.inertia < 1e-12);

        assert!(kmeans(&m, 4, &KmeansOptions::default()).is_err());
        assert!(kmeans(&m, 0, &KmeansOptions::default()).is_err());
    }

    #[test]
    fn inertia_never_increases_within_a_restart() {
        let mut r = rng::stream(5, "inertia", &[]);
        let mut m = FeatureMatrix::zeros(60, 4);
        for v in &mut m.data {
            *v = r.gen::<f32>();
        }
        let run = kmeans(&m, 5, &KmeansOptions::default()).unwrap();
        for w in run.inertia_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "inertia increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn kmeans_is_deterministic_given_seed() {
        let mut r = rng::stream(6, "det", &[]);
        let mut m = FeatureMatrix::zeros(40, 3);
        for v in &mut m.data {
            *v = r.gen::<f32>();
        }
        let opts = KmeansOptions {
            seed: 44,
            ..Default::default()
        };
        let a = kmeans(&m, 4, &opts).unwrap();
        let b = kmeans(&m, 4, &opts).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn perfect_agreement_up_to_relabeling_scores_one() {
        let labels: Vec<u32> = vec![0, 0, 1, 1, 2, 2];
        let assignments = vec![2, 2, 0, 0, 1, 1]; // a relabeling of labels
        let m = matrix(&[
            &[0.0, 0.0],
            &[0.1, 0.0],
            &[5.0, 0.0],
            &[5.1, 0.0],
            &[0.0, 5.0],
            &[0.1, 5.0],
        ]);
        let metrics = cluster_metrics(&assignments, &labels, &m).unwrap();
        assert!((metrics.nmi - 1.0).abs() < 1e-12);
        assert!((metrics.ari - 1.0).abs() < 1e-12);
        assert!((metrics.purity - 1.0).abs() < 1e-12);
        assert!((metrics.v_measure - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_point_fixtures_match_hand_enumeration() {
        let x = matrix(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let labels = vec![0u32, 0, 1, 1];

        // checkerboard assignment: all pair counts enumerated by hand
        let m = cluster_metrics(&[0, 1, 0, 1], &labels, &x).unwrap();
        assert!((m.purity - 0.5).abs() < 1e-12);
        assert!((m.ari - (-0.5)).abs() < 1e-12);
        assert!(m.nmi.abs() < 1e-12);
        assert!(m.v_measure.abs() < 1e-12);

        // contingency [[2,1],[0,1]]
        let m = cluster_metrics(&[0, 0, 0, 1], &labels, &x).unwrap();
        assert!((m.nmi - 0.343711018485).abs() < 1e-9);
        assert!((m.v_measure - 0.343711018485).abs() < 1e-9);
        assert!(m.ari.abs() < 1e-12);
        assert!((m.purity - 0.75).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_to_relabeling() {
        let mut r = rng::stream(7, "relabel", &[]);
        let n = 50;
        let mut m = FeatureMatrix::zeros(n, 3);
        for v in &mut m.data {
            *v = r.gen::<f32>();
        }
        let labels: Vec<u32> = (0..n).map(|_| r.gen_range(0..4u32)).collect();
        let assignments: Vec<usize> = (0..n).map(|_| r.gen_range(0..3usize)).collect();
        let base = cluster_metrics(&assignments, &labels, &m).unwrap();
        // permute cluster ids 0->2, 1->0, 2->1
        let perm = [2usize, 0, 1];
        let permuted: Vec<usize> = assignments.iter().map(|&a| perm[a]).collect();
        let p = cluster_metrics(&permuted, &labels, &m).unwrap();
        assert!((base.nmi - p.nmi).abs() < 1e-12);
        assert!((base.ari - p.ari).abs() < 1e-12);
        assert!((base.purity - p.purity).abs() < 1e-12);
        assert!((base.v_measure - p.v_measure).abs() < 1e-12);
        assert!((base.silhouette - p.silhouette).abs() < 1e-12);
    }

    #[test]
    fn silhouette_matches_naive_oracle_and_separated_blobs_score_high() {
        let mut r = rng::stream(8, "sil", &[]);
        let n = 60;
        let mut m = FeatureMatrix::zeros(n, 2);
        let mut assignments = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 3;
            let (cx, cy) = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)][c];
            m.row_mut(i)[0] = cx + (r.gen::<f32>() - 0.5) * 0.5;
            m.row_mut(i)[1] = cy + (r.gen::<f32>() - 0.5) * 0.5;
            assignments.push(c);
        }
        let fast = mean_silhouette(&assignments, &m, 3).unwrap();
        assert!(fast > 0.9, "separated blobs should score high: {fast}");

        // naive per-point oracle
        let dist = |i: usize, j: usize| -> f64 {
            m.row(i)
                .iter()
                .zip(m.row(j))
                .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                .sum::<f64>()
                .sqrt()
        };
        let mut total = 0.0;
        for i in 0..n {
            let own = assignments[i];
            let a: f64 = {
                let others: Vec<usize> =
                    (0..n).filter(|&j| j != i && assignments[j] == own).collect();
                others.iter().map(|&j| dist(i, j)).sum::<f64>() / others.len() as f64
            };
            let mut b = f64::INFINITY;
            for c in 0..3 {
                if c == own {
                    continue;
                }
                let members: Vec<usize> = (0..n).filter(|&j| assignments[j] == c).collect();
                b = b.min(members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64);
            }
            total += (b - a) / a.max(b);
        }
        let naive = total / n as f64;
        assert!((fast - naive).abs() < 1e-10);
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for sub in permutations(k - 1) {
            for pos in 0..k {
                let mut p = sub.clone();
                p.insert(pos, k - 1);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn hungarian_matches_brute_force_for_small_k() {
        for k in 1..=5 {
            for seed in 0..20u64 {
                let mut r = rng::stream(seed, "hungarian", &[k as u64]);
                let cost: Vec<f64> = (0..k * k).map(|_| r.gen::<f64>() * 10.0 - 5.0).collect();
                let got = hungarian(&cost, k).unwrap();
                let brute = permutations(k)
                    .into_iter()
                    .map(|p| (0..k).map(|i| cost[i * k + p[i]]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    (got.total_cost - brute).abs() < 1e-9,
                    "k={k} seed={seed}: {} vs {}",
                    got.total_cost,
                    brute
                );
            }
        }
    }

    #[test]
    fn hungarian_basic_fixtures() {
        let got = hungarian(&[1.0, 2.0, 2.0, 1.0], 2).unwrap();
        assert_eq!(got.row_to_col, vec![0, 1]);
        assert!((got.total_cost - 2.0).abs() < 1e-12);

        // diagonal-zero matrix favors the identity
        let cost = vec![0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0];
        let got = hungarian(&cost, 3).unwrap();
        assert_eq!(got.row_to_col, vec![0, 1, 2]);
        assert_eq!(got.total_cost, 0.0);

        let got = hungarian(&[3.0], 1).unwrap();
        assert_eq!(got.row_to_col, vec![0]);

        assert!(hungarian(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(hungarian(&[f64::NAN, 1.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn cluster_label_matching_counts_agreement() {
        let labels = vec![0u32, 0, 1, 1, 2, 2];
        let assignments = vec![1, 1, 2, 2, 0, 0];
        let m = match_clusters_to_labels(&assignments, &labels).unwrap();
        assert_eq!(m.total_matched, 6);
        assert_eq!(m.row_to_col, vec![2, 0, 1]);
    }

    fn map_from(values: Vec<f32>, c: usize, h: usize, w: usize) -> FeatureTensor<f32> {
        FeatureTensor {
            readout: ReadoutId::new(1, 1),
            values: Tensor::from_vec(&[c, h, w], values).unwrap(),
        }
    }

    #[test]
    fn pca_isotropic_tokens_have_equal_thirds() {
        let mut r = rng::stream(9, "pca", &[]);
        let (c, h, w) = (3usize, 16usize, 16usize);
        let maps: Vec<FeatureTensor<f32>> = (0..4)
            .map(|_| {
                let vals: Vec<f32> = (0..c * h * w)
                    .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal) as f32)
                    .collect();
                map_from(vals, c, h, w)
            })
            .collect();
        let overlay = pca_tokens(&maps, 3, 0.5).unwrap();
        assert!(overlay.warnings.is_empty());
        for comp in 0..3 {
            assert!(
                (overlay.explained[comp] - 1.0 / 3.0).abs() < 0.05,
                "explained {:?}",
                overlay.explained
            );
            // orthonormal rows
            for other in 0..3 {
                let dot: f64 = (0..c)
                    .map(|i| overlay.components[comp * c + i] * overlay.components[other * c + i])
                    .sum();
                let want = if comp == other { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
        // median mask splits the batch roughly in half
        let kept = overlay.mask.iter().filter(|&&m| m).count();
        let total = overlay.mask.len();
        assert!((kept as f64 / total as f64 - 0.5).abs() < 0.05);
    }

    #[test]
    fn pca_constant_tokens_mask_everything_with_warning() {
        let maps = vec![map_from(vec![0.7; 4 * 4 * 4], 4, 4, 4)];
        let overlay = pca_tokens(&maps, 3, 0.5).unwrap();
        assert!(!overlay.warnings.is_empty());
        assert!(overlay.mask.iter().all(|&m| !m));
    }

    #[test]
    fn pca_duplicated_batch_keeps_components_up_to_sign() {
        let mut r = rng::stream(10, "pca-dup", &[]);
        let vals: Vec<f32> = (0..6 * 8 * 8).map(|_| r.gen::<f32>()).collect();
        let single = vec![map_from(vals.clone(), 6, 8, 8)];
        let doubled = vec![
            map_from(vals.clone(), 6, 8, 8),
            map_from(vals, 6, 8, 8),
        ];
        let a = pca_tokens(&single, 3, 0.5).unwrap();
        let b = pca_tokens(&doubled, 3, 0.5).unwrap();
        for comp in 0..3 {
            let dot: f64 = (0..6)
                .map(|i| a.components[comp * 6 + i] * b.components[comp * 6 + i])
                .sum();
            assert!(
                (dot.abs() - 1.0).abs() < 1e-6,
                "component {comp} changed under duplication"
            );
        }
    }

    #[test]
    fn pca_rank_deficient_pads_and_warns() {
        // tokens vary along a single direction
        let mut vals = vec![0.0f32; 2 * 4 * 4];
        for (i, v) in vals.iter_mut().enumerate().take(16) {
            *v = i as f32;
        }
        for i in 0..16 {
            vals[16 + i] = 2.0 * i as f32;
        }
        let maps = vec![map_from(vals, 2, 4, 4)];
        let overlay = pca_tokens(&maps, 3, 0.5).unwrap();
        assert!(!overlay.warnings.is_empty());
        // third component row is zero padding
        assert!(overlay.components[2 * 2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frechet_zero_on_identical_sets_and_symmetric() {
        let mut r = rng::stream(11, "frechet", &[]);
        let mut a = FeatureMatrix::zeros(200, 6);
        for v in &mut a.data {
            *v = r.gen::<f32>();
        }
        let d = frechet_diagnostic(&a, &a).unwrap();
        assert!(d.abs() < 1e-6, "identical sets gave {d}");

        let mut b = FeatureMatrix::zeros(150, 6);
        for v in &mut b.data {
            *v = r.gen::<f32>() + 0.5;
        }
        let ab = frechet_diagnostic(&a, &b).unwrap();
        let ba = frechet_diagnostic(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab > 0.0);
    }

    #[test]
    fn frechet_mean_shift_matches_closed_form() {
        // unit-covariance Gaussians with mean offset d: distance ~ ||d||^2
        let mut r = rng::stream(12, "frechet-shift", &[]);
        let n = 4000;
        let dim = 8;
        let shift = 1.5f32;
        let mut a = FeatureMatrix::zeros(n, dim);
        let mut b = FeatureMatrix::zeros(n, dim);
        for v in &mut a.data {
            *v = r.sample::<f64, _>(rand_distr::StandardNormal) as f32;
        }
        for (i, v) in b.data.iter_mut().enumerate() {
            let offset = if i % dim == 0 { shift } else { 0.0 };
            *v = r.sample::<f64, _>(rand_distr::StandardNormal) as f32 + offset;
        }
        let want = (shift as f64) * (shift as f64);
        let got = frechet_diagnostic(&a, &b).unwrap();
        assert!(
            (got - want).abs() < 0.1 * want,
            "frechet {got} vs ||d||^2 = {want}"
        );
    }

    #[test]
    fn frechet_rejects_empty() {
        let a = FeatureMatrix::zeros(3, 2);
        let empty = FeatureMatrix::zeros(0, 2);
        assert!(frechet_diagnostic(&a, &empty).is_err());
    }
}
