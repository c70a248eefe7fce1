use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ndkernel::Array;

/// Parameters of a linear beta schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Per-timestep beta / alpha / cumulative alpha tables, indexed `1..=T`.
/// Index 0 denotes clean data (`alpha_bar(0) == 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(invalid(format!("timestep {t} outside 1..={}", self.len())))
        } else {
            Ok(())
        }
    }

    /// `t,beta,alpha,alpha_bar` rows for every timestep.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "beta", "alpha", "alpha_bar"])?;
        for t in 1..=self.len() {
            out.write_record(&[
                t.to_string(),
                self.beta(t).to_string(),
                self.alpha(t).to_string(),
                self.alpha_bar(t).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Forward process in closed form: `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &Array, t: usize, eps: &Array, sched: &NoiseSchedule) -> Result<Array> {
    sched.check_timestep(t)?;
    q_sample_at(x0, sched.alpha_bar(t), eps)
}

/// [`q_sample`] at an explicit cumulative alpha.
pub fn q_sample_at(x0: &Array, alpha_bar: f64, eps: &Array) -> Result<Array> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_step_alpha_bar() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        for (t, b) in [(1, 0.1), (2, 0.2), (3, 0.3), (4, 0.4)] {
            assert!((s.beta(t) - b).abs() < 1e-15);
        }
        // 0.9 * 0.8 * 0.7 * 0.6
        assert!((s.alpha_bar(4) - 0.3024).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.25, 0.25).unwrap();
        assert_eq!(s.alpha_bar(1), 0.75);
    }

    #[test]
    fn recurrence_is_exact_and_decreasing() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        for t in 1..=1000 {
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_closed_form() {
        let x0 = Array::from_vec(vec![2.0]);
        let eps = Array::from_vec(vec![1.0]);
        assert_eq!(q_sample_at(&x0, 1.0, &eps).unwrap().data(), &[2.0]);
        assert_eq!(q_sample_at(&x0, 0.0, &eps).unwrap().data(), &[1.0]);
        let v = q_sample_at(&x0, 0.25, &eps).unwrap().data()[0];
        assert!((v - 1.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn q_sample_rejects_out_of_range_t() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let x = Array::zeros([2]);
        assert!(q_sample(&x, 0, &x, &s).is_err());
        assert!(q_sample(&x, 5, &x, &s).is_err());
    }

    #[test]
    fn csv_has_header_and_t_rows() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,beta,alpha,alpha_bar\n1,0.1,0.9,0.9\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
