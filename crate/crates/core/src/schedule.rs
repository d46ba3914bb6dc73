//! Forward-process coefficients, SNR, loss weightings, and the
//! timestep-sampling distribution.
//!
//! All tables are precomputed once in f64 at construction; nothing is
//! recomputed lazily, so invariant tests can be exact.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

pub const COSINE_BETA_CLIP: f64 = 0.999;
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Precomputed noise schedule for `T` diffusion steps, indexed `t in 1..=T`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub offset_s: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    snr: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine: f(u) = cos^2(((u + s)/(1 + s)) * pi/2), alpha_bar_t = f(t/T)/f(0),
    /// beta_t = 1 - alpha_bar_t/alpha_bar_{t-1} clipped to 0.999, then the stored
    /// alpha_bar is the cumulative product of the clipped alphas.
    /// Linear: beta interpolated affinely from 1e-4 at t=1 to 2e-2 at t=T.
    pub fn build(kind: ScheduleKind, t_count: usize, offset_s: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::config(format!(
                "schedule needs at least 2 steps, got {t_count}"
            )));
        }
        if offset_s < 0.0 {
            return Err(Error::config(format!(
                "cosine offset must be nonnegative, got {offset_s}"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..t_count)
                .map(|i| {
                    let frac = i as f64 / (t_count - 1) as f64;
                    LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * frac
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |u: f64| (((u + offset_s) / (1.0 + offset_s)) * PI / 2.0).cos().powi(2);
                let f0 = f(0.0);
                let mut prev = 1.0;
                (1..=t_count)
                    .map(|t| {
                        let cur = f(t as f64 / t_count as f64) / f0;
                        let b = (1.0 - cur / prev).min(COSINE_BETA_CLIP);
                        prev = cur;
                        b
                    })
                    .collect()
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_count);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let snr: Vec<f64> = alpha_bar.iter().map(|ab| ab / (1.0 - ab)).collect();
        Ok(NoiseSchedule {
            kind,
            offset_s,
            beta,
            alpha,
            alpha_bar,
            snr,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Index(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.snr[t - 1]
    }

    /// alpha_bar_{t-1}, with alpha_bar_0 = 1 by convention.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// Exact per-step reverse variance beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
    /// Defined for t >= 2; t = 1 is the sampler's terminal rule.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        if t < 2 {
            return Err(Error::contract(
                "posterior variance is defined for t >= 2; t = 1 uses the terminal rule",
            ));
        }
        Ok(self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)))
    }

    /// Coefficients (c_xt, c_x0) of the reverse posterior mean
    /// mu = c_xt * x_t + c_x0 * x_0.
    pub fn posterior_mean_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        if t < 2 {
            return Err(Error::contract(
                "posterior mean is defined for t >= 2; t = 1 uses the terminal rule",
            ));
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_prev(t);
        let c_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let c_x0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        Ok((c_xt, c_x0))
    }
}

/// Per-timestep loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingPolicy {
    Mse,
    MinSnr { gamma: f64 },
}

impl WeightingPolicy {
    pub fn validate(&self) -> Result<()> {
        if let WeightingPolicy::MinSnr { gamma } = self {
            if !(*gamma > 0.0) {
                return Err(Error::config(format!(
                    "minsnr gamma must be positive, got {gamma}"
                )));
            }
        }
        Ok(())
    }

    pub fn weight(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        schedule.check_t(t)?;
        Ok(match self {
            WeightingPolicy::Mse => 1.0,
            WeightingPolicy::MinSnr { gamma } => {
                let snr = schedule.snr(t);
                snr.min(*gamma) / snr
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    SquaredCosine,
}

/// Discrete distribution p(t) over 1..=T used to draw training timesteps.
///
/// The squared-cosine form puts its mass on mid-schedule steps:
/// pmf[t] proportional to sin^2(pi * (t - 1/2) / T). The half-step offset keeps
/// every pmf entry strictly positive and makes the endpoints symmetric
/// (pmf[1] = pmf[T]).
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    pub kind: SamplerKind,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl TimestepSampler {
    pub fn build(kind: SamplerKind, t_count: usize) -> Result<Self> {
        if t_count < 1 {
            return Err(Error::config("sampler needs at least 1 timestep"));
        }
        let raw: Vec<f64> = match kind {
            SamplerKind::Uniform => vec![1.0; t_count],
            SamplerKind::SquaredCosine => (1..=t_count)
                .map(|t| {
                    let arg = PI * (t as f64 - 0.5) / t_count as f64;
                    arg.sin().powi(2)
                })
                .collect(),
        };
        let total: f64 = raw.iter().sum();
        let pmf: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut cdf = Vec::with_capacity(t_count);
        let mut acc = 0.0;
        for p in &pmf {
            acc += p;
            cdf.push(acc);
        }
        // Guard against rounding in the final bucket.
        *cdf.last_mut().unwrap() = 1.0;
        Ok(TimestepSampler { kind, pmf, cdf })
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }

    pub fn pmf(&self, t: usize) -> f64 {
        self.pmf[t - 1]
    }

    /// Draws t in 1..=T by inverse CDF; deterministic given the rng state.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen::<f64>();
        // First index with cdf > u.
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.pmf.len() - 1) + 1
    }
}

/// Writes the schedule table as CSV:
/// t,beta,alpha,alpha_bar,snr,w_mse,w_minsnr,pmf
pub fn dump_csv<W: Write>(
    out: &mut W,
    schedule: &NoiseSchedule,
    minsnr_gamma: f64,
    sampler: &TimestepSampler,
) -> std::io::Result<()> {
    writeln!(out, "t,beta,alpha,alpha_bar,snr,w_mse,w_minsnr,pmf")?;
    let minsnr = WeightingPolicy::MinSnr {
        gamma: minsnr_gamma,
    };
    for t in 1..=schedule.len() {
        let w = minsnr.weight(schedule, t).expect("t in range");
        writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},1,{:.17e},{:.17e}",
            t,
            schedule.beta(t),
            schedule.alpha(t),
            schedule.alpha_bar(t),
            schedule.snr(t),
            w,
            sampler.pmf(t),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cosine_f(u: f64, s: f64) -> f64 {
        (((u + s) / (1.0 + s)) * PI / 2.0).cos().powi(2)
    }

    #[test]
    fn cosine_boundary_and_monotonicity() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000, 0.008).unwrap();
        assert!(s.alpha_bar(1) < 1.0);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not strictly decreasing at t={t}");
        }
        for t in 1..=1000 {
            assert!(s.beta(t) > 0.0 && s.beta(t) <= COSINE_BETA_CLIP);
        }
    }

    #[test]
    fn cosine_tiny_t_clips_final_beta() {
        // High-precision oracle: pre-clip alpha_bar at t=T is f(1)/f(0) which is
        // ~0 for s=0.008, so the final ratio forces the clip.
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 4, 0.008).unwrap();
        let pre_clip = cosine_f(1.0, 0.008) / cosine_f(0.0, 0.008);
        assert!(pre_clip < 1e-3);
        assert_eq!(s.beta(4), COSINE_BETA_CLIP);
    }

    #[test]
    fn linear_endpoints_and_affinity() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000, 0.0).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-18);
        let step = s.beta(2) - s.beta(1);
        for t in 2..=1000 {
            assert!((s.beta(t) - s.beta(t - 1) - step).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_bar_matches_product_to_1e12() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 1000, 0.008).unwrap();
            let mut prod = 1.0;
            for t in 1..=1000 {
                prod *= s.alpha(t);
                assert!((s.alpha_bar(t) - prod).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn snr_strictly_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 500, 0.008).unwrap();
            for t in 2..=500 {
                assert!(s.snr(t) < s.snr(t - 1));
            }
        }
    }

    #[test]
    fn posterior_variance_taylor_bound() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 1000, 0.008).unwrap();
            for t in 2..=1000 {
                let b = s.beta(t);
                if b >= 0.1 {
                    continue;
                }
                let tilde = s.posterior_variance(t).unwrap();
                let ab_prev = s.alpha_bar_prev(t);
                let bound = b * b * ab_prev / (1.0 - ab_prev) * (1.0 + 10.0 * b);
                assert!(
                    (tilde - b).abs() <= bound,
                    "taylor bound violated at t={t}: |{tilde}-{b}| > {bound}"
                );
                assert!(tilde <= b);
            }
        }
    }

    #[test]
    fn invalid_construction_rejected() {
        assert!(NoiseSchedule::build(ScheduleKind::Cosine, 1, 0.008).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Cosine, 100, -0.1).is_err());
    }

    #[test]
    fn minsnr_weight_values() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000, 0.008).unwrap();
        let policy = WeightingPolicy::MinSnr { gamma: 5.0 };
        for t in 1..=1000 {
            let w = policy.weight(&s, t).unwrap();
            assert!(w > 0.0 && w <= 1.0);
            if s.snr(t) <= 5.0 {
                assert_eq!(w, 1.0, "expected exact 1 when snr <= gamma at t={t}");
            } else {
                assert!(w < 1.0);
                assert!((w - 5.0 / s.snr(t)).abs() < 1e-15);
            }
        }
        assert_eq!(WeightingPolicy::Mse.weight(&s, 1).unwrap(), 1.0);
        assert!(policy.weight(&s, 0).is_err());
        assert!(policy.weight(&s, 1001).is_err());
    }

    #[test]
    fn minsnr_scalar_cases() {
        // min(2,5)/2 = 1 and min(10,5)/10 = 0.5 on a synthetic snr table.
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000, 0.008).unwrap();
        let t_low = (1..=1000).find(|&t| s.snr(t) < 5.0).unwrap();
        let t_high = (1..=1000).rev().find(|&t| s.snr(t) > 5.0).unwrap();
        let policy = WeightingPolicy::MinSnr { gamma: 5.0 };
        assert_eq!(policy.weight(&s, t_low).unwrap(), 1.0);
        let w = policy.weight(&s, t_high).unwrap();
        assert!((w - 5.0 / s.snr(t_high)).abs() < 1e-15);
    }

    #[test]
    fn squared_cosine_pmf_shape() {
        let t_count = 1000;
        let sampler = TimestepSampler::build(SamplerKind::SquaredCosine, t_count).unwrap();
        // Oracle: normalized sin^2(pi (t - 1/2) / T).
        let raw: Vec<f64> = (1..=t_count)
            .map(|t| (PI * (t as f64 - 0.5) / t_count as f64).sin().powi(2))
            .collect();
        let total: f64 = raw.iter().sum();
        for t in 1..=t_count {
            assert!((sampler.pmf(t) - raw[t - 1] / total).abs() < 1e-15);
            assert!(sampler.pmf(t) > 0.0);
        }
        assert!((sampler.pmf(1) - sampler.pmf(t_count)).abs() < 1e-15);
        // Symmetry around the middle of {1..T}.
        for t in 1..=t_count {
            assert!((sampler.pmf(t) - sampler.pmf(t_count + 1 - t)).abs() < 1e-15);
        }
        let total: f64 = (1..=t_count).map(|t| sampler.pmf(t)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_sampler_frequencies_within_5_sigma() {
        let t_count = 1000;
        let draws = 1_000_000;
        let sampler = TimestepSampler::build(SamplerKind::Uniform, t_count).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0usize; t_count];
        for _ in 0..draws {
            counts[sampler.sample(&mut rng) - 1] += 1;
        }
        let p = 1.0 / t_count as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let expect = draws as f64 * p;
        for (t, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 5.0 * sigma,
                "t={} count {} vs {}",
                t + 1,
                c,
                expect
            );
        }
    }

    #[test]
    fn sampler_is_deterministic_given_seed() {
        let sampler = TimestepSampler::build(SamplerKind::SquaredCosine, 777).unwrap();
        let draw = |seed: u64| -> Vec<usize> {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sampler.sample(&mut rng)).collect()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn dump_csv_has_header_and_rows() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10, 0.008).unwrap();
        let sampler = TimestepSampler::build(SamplerKind::SquaredCosine, 10).unwrap();
        let mut buf = Vec::new();
        dump_csv(&mut buf, &s, 5.0, &sampler).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar,snr,w_mse,w_minsnr,pmf");
    }
}
