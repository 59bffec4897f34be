//! Forward diffusion: noise schedules and iterative / closed-form noising.
//!
//! Steps are 1-indexed throughout: `t ∈ 1..=T`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Cosine,
    Linear,
}

/// Per-step noise variances and the derived signal-retention products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn check_bounds(steps: usize, beta_min: f64, beta_max: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min < beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )));
    }
    Ok(())
}

impl NoiseSchedule {
    /// `β_t = β_max − ½(β_max − β_min)(1 + cos(tπ/T))` for `t = 1..=T`.
    pub fn cosine(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        check_bounds(steps, beta_min, beta_max)?;
        let t_total = steps as f64;
        let betas = (1..=steps)
            .map(|t| {
                beta_max - 0.5 * (beta_max - beta_min) * (1.0 + (t as f64 / t_total * PI).cos())
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Linear interpolation from `β_min` at `t=1` to `β_max` at `t=T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        check_bounds(steps, beta_min, beta_max)?;
        let betas = if steps == 1 {
            vec![beta_min]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_min + i as f64 * (beta_max - beta_min) / span)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn new(kind: SchedulerKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        match kind {
            SchedulerKind::Cosine => Self::cosine(steps, beta_min, beta_max),
            SchedulerKind::Linear => Self::linear(steps, beta_min, beta_max),
        }
    }

    /// Builds a schedule from explicit variances. `β = 0` is accepted here so
    /// that noiseless steps can be expressed; the named schedulers never emit it.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0,1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// CSV with header `t,beta,alpha,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for i in 0..self.steps() {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e}",
                i + 1,
                self.betas[i],
                self.alphas[i],
                self.alpha_bars[i]
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn add_scaled_noise<R: Rng + ?Sized>(
    x: &ImageBuffer,
    signal: f64,
    noise: f64,
    rng: &mut R,
) -> ImageBuffer {
    let mut out = x.clone().with_noised(true);
    for v in out.data_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *v = signal * *v + noise * eps;
    }
    out
}

/// One Markov step: `x_t = √α_t·x_{t−1} + √(1−α_t)·ε`.
pub fn diffuse_step<R: Rng + ?Sized>(
    x_prev: &ImageBuffer,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageBuffer> {
    let alpha = schedule.alpha(t)?;
    Ok(add_scaled_noise(x_prev, alpha.sqrt(), (1.0 - alpha).sqrt(), rng))
}

/// Jumps straight to step `t`: `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn diffuse_closed<R: Rng + ?Sized>(
    x0: &ImageBuffer,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageBuffer> {
    let alpha_bar = schedule.alpha_bar(t)?;
    Ok(add_scaled_noise(
        x0,
        alpha_bar.sqrt(),
        (1.0 - alpha_bar).sqrt(),
        rng,
    ))
}

/// Applies `diffuse_step` for `s = 1..=t` in sequence.
pub fn diffuse_iterative<R: Rng + ?Sized>(
    x0: &ImageBuffer,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageBuffer> {
    schedule.index(t)?;
    let mut x = x0.clone();
    for s in 1..=t {
        x = diffuse_step(&x, s, schedule, rng)?;
    }
    Ok(x)
}

/// Mean and per-element variance of `q(x_t | x₀)`.
pub fn moments_at(schedule: &NoiseSchedule, t: usize, x0: &ImageBuffer) -> Result<(ImageBuffer, f64)> {
    let alpha_bar = schedule.alpha_bar(t)?;
    let scale = alpha_bar.sqrt();
    let mut mean = x0.clone();
    for v in mean.data_mut() {
        *v *= scale;
    }
    Ok((mean, 1.0 - alpha_bar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngState;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = NoiseSchedule::cosine(1000, 1e-4, 0.02).unwrap();
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-12);
        assert!((s.beta(500).unwrap() - 0.01005).abs() < 1e-12);
        let b1 = s.beta(1).unwrap();
        assert!(b1 > 1e-4 && b1 < 1e-4 + 1e-7);
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn linear_examples() {
        let s = NoiseSchedule::linear(2, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas(), &[1e-4, 0.02]);
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3]) {
            assert!((b - e).abs() < 1e-15);
        }
        assert_eq!(NoiseSchedule::linear(1, 0.1, 0.3).unwrap().betas(), &[0.1]);
    }

    #[test]
    fn bad_bounds_are_config_errors() {
        for (b0, b1) in [(0.0, 0.02), (0.02, 0.01), (1e-4, 1.0), (0.01, 0.01)] {
            assert!(matches!(NoiseSchedule::cosine(10, b0, b1), Err(Error::Config(_))));
        }
        assert!(matches!(NoiseSchedule::linear(0, 0.1, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = NoiseSchedule::cosine(1000, 1e-4, 0.02).unwrap();
        let mut acc = 1.0;
        for t in 1..=1000 {
            acc *= 1.0 - s.beta(t).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            assert!(((ab - acc) / acc).abs() < 1e-12);
            assert_eq!(s.alpha(t).unwrap(), 1.0 - s.beta(t).unwrap());
        }
        assert_eq!(s.alpha_bar(1).unwrap(), s.alpha(1).unwrap());
    }

    #[test]
    fn out_of_range_steps() {
        let s = NoiseSchedule::cosine(10, 1e-4, 0.02).unwrap();
        let x = ImageBuffer::filled(2, 2, 1, 0.5);
        let mut rng = RngState::new(0, 0).rng();
        assert!(matches!(diffuse_step(&x, 0, &s, &mut rng), Err(Error::Step { .. })));
        assert!(matches!(diffuse_closed(&x, 11, &s, &mut rng), Err(Error::Step { .. })));
        assert!(moments_at(&s, 0, &x).is_err());
    }

    #[test]
    fn zero_beta_step_is_identity() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.0]).unwrap();
        let x = ImageBuffer::new(1, 3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let mut rng = RngState::new(1, 0).rng();
        let y = diffuse_step(&x, 1, &s, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(y.is_noised());
        let (mean, var) = moments_at(&s, 2, &x).unwrap();
        assert_eq!(mean.data(), x.data());
        assert_eq!(var, 0.0);
    }

    #[test]
    fn half_betas_give_quarter_alpha_bar() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let (_, var) = moments_at(&s, 2, &ImageBuffer::filled(1, 1, 1, 1.0)).unwrap();
        assert!((s.alpha_bar(2).unwrap() - 0.25).abs() < 1e-15);
        assert!((var - 0.75).abs() < 1e-15);
    }

    #[test]
    fn variance_non_decreasing_under_default_cosine() {
        let s = NoiseSchedule::cosine(1000, 1e-4, 0.02).unwrap();
        let x = ImageBuffer::filled(1, 1, 1, 1.0);
        let vars: Vec<f64> = (1..=1000).map(|t| moments_at(&s, t, &x).unwrap().1).collect();
        assert!(vars.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s = NoiseSchedule::cosine(50, 1e-4, 0.02).unwrap();
        let x = ImageBuffer::filled(4, 4, 3, 0.3);
        let a = diffuse_closed(&x, 20, &s, &mut RngState::new(9, 1).rng()).unwrap();
        let b = diffuse_closed(&x, 20, &s, &mut RngState::new(9, 1).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
    }
}
