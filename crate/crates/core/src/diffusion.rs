//! Variance schedules, closed-form forward corruption and the deterministic
//! reverse update.
//!
//! Timesteps are 1-based (`1..=T`); `alpha_bar(0)` is defined as 1 so the last
//! reverse step lands exactly on the clean estimate.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::numerics::Tensor;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("empty beta sequence".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0,1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative retention; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// CSV with columns `t,beta,alpha,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha,alpha_bar\n");
        for t in 1..=self.steps() {
            let _ = writeln!(
                s,
                "{t},{},{},{}",
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t)
            );
        }
        s
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `y_t = √ᾱ_t · y0 + √(1−ᾱ_t) · ε`.
pub fn forward_sample(
    y0: &HeatmapStack,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<HeatmapStack> {
    sched.check_step(t)?;
    check_same("forward_sample", &y0.values, eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = y0
        .values
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    HeatmapStack::new(Tensor::new(y0.values.shape(), data)?, y0.stride)
}

/// Noise implied by a clean estimate: `ε̂ = (y_t − √ᾱ_t · ŷ0) / √(1−ᾱ_t)`.
pub fn eps_from_x0(
    y_t: &HeatmapStack,
    y0_hat: &HeatmapStack,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    if t > sched.steps() {
        return Err(Error::Config(format!(
            "timestep {t} outside 1..={}",
            sched.steps()
        )));
    }
    check_same("eps_from_x0", &y_t.values, &y0_hat.values)?;
    eps_from_alpha_bar(y_t.values.data(), y0_hat.values.data(), sched.alpha_bar(t))
        .map(|d| Tensor::from_parts(y_t.values.shape().to_vec(), d))
}

fn eps_from_alpha_bar(y_t: &[f64], y0_hat: &[f64], ab: f64) -> Result<Vec<f64>> {
    let noise = (1.0 - ab).sqrt();
    if noise == 0.0 {
        return Err(Error::Numeric(
            "alpha_bar == 1: noise estimate is singular".into(),
        ));
    }
    let a = ab.sqrt();
    Ok(y_t
        .iter()
        .zip(y0_hat)
        .map(|(y, x)| (y - a * x) / noise)
        .collect())
}

/// Clean estimate implied by a noise estimate; inverse of [`eps_from_x0`].
pub fn x0_from_eps(
    y_t: &HeatmapStack,
    eps_hat: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<HeatmapStack> {
    sched.check_step(t)?;
    check_same("x0_from_eps", &y_t.values, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = y_t
        .values
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(y, e)| (y - b * e) / a)
        .collect();
    HeatmapStack::new(Tensor::new(y_t.values.shape(), data)?, y_t.stride)
}

/// Deterministic reverse step `ŷ_{t−1} = √ᾱ_{t−1} · ŷ0 + √(1−ᾱ_{t−1}) · ε̂`.
pub fn ddim_step(
    y_t: &HeatmapStack,
    y0_hat: &HeatmapStack,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<HeatmapStack> {
    sched.check_step(t)?;
    check_same("ddim_step", &y_t.values, &y0_hat.values)?;
    let data = ddim_update(
        y_t.values.data(),
        y0_hat.values.data(),
        sched.alpha_bar(t),
        sched.alpha_bar(t - 1),
    )?;
    HeatmapStack::new(Tensor::new(y_t.values.shape(), data)?, y_t.stride)
}

pub(crate) fn ddim_update(
    y_t: &[f64],
    y0_hat: &[f64],
    ab_t: f64,
    ab_prev: f64,
) -> Result<Vec<f64>> {
    let eps = eps_from_alpha_bar(y_t, y0_hat, ab_t)?;
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(y0_hat
        .iter()
        .zip(&eps)
        .map(|(x, e)| a * x + b * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn stack(values: Vec<f64>, shape: &[usize]) -> HeatmapStack {
        HeatmapStack::new(Tensor::new(shape, values).unwrap(), 4.0).unwrap()
    }

    fn two_step() -> DiffusionSchedule {
        DiffusionSchedule::new(2, 0.1, 0.2, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn two_step_schedule_values() {
        let s = two_step();
        assert_eq!(s.beta(1), 0.1);
        assert_eq!(s.beta(2), 0.2);
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::new(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
    }

    #[test]
    fn schedule_bounds_are_config_errors() {
        for (t, a, b) in [
            (0, 0.1, 0.2),
            (10, 0.0, 0.2),
            (10, 0.3, 0.2),
            (10, 0.1, 1.0),
        ] {
            assert!(matches!(
                DiffusionSchedule::new(t, a, b, ScheduleKind::Linear),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn default_schedule_matches_product_loop() {
        let s = DiffusionSchedule::new(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for i in 0..100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 99.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-14);
        for t in 1..100 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            let snr = |t: usize| s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
            assert!(snr(t + 1) < snr(t));
        }
    }

    #[test]
    fn forward_sample_cases() {
        let s = two_step();
        let y0 = stack(vec![1.0], &[1, 1, 1]);
        let one = Tensor::full(&[1, 1, 1], 1.0);
        let zero = Tensor::zeros(&[1, 1, 1]);
        let yt = forward_sample(&y0, 2, &one, &s).unwrap();
        assert!((yt.values.data()[0] - 1.37772).abs() < 1e-4);
        assert!((yt.values.data()[0] - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-15);
        let yt = forward_sample(&y0, 2, &zero, &s).unwrap();
        assert_eq!(yt.values.data()[0], s.alpha_bar(2).sqrt());
        assert!((yt.values.data()[0] - 0.72f64.sqrt()).abs() < 1e-15);

        let tiny = DiffusionSchedule::new(3, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        let yt = forward_sample(&y0, 1, &one, &tiny).unwrap();
        assert!((yt.values.data()[0] - 1.0).abs() < 1e-5);

        assert!(forward_sample(&y0, 3, &one, &s).is_err());
        assert!(forward_sample(&y0, 1, &Tensor::zeros(&[2, 1, 1]), &s).is_err());
    }

    #[test]
    fn eps_round_trip_and_hand_case() {
        let s = two_step();
        let mut rng = Rng::seed_from(3);
        let y0 = HeatmapStack::new(Tensor::uniform(&[2, 3, 3], 1.0, &mut rng), 4.0).unwrap();
        let eps = Tensor::randn(&[2, 3, 3], &mut rng);
        for t in 1..=2 {
            let yt = forward_sample(&y0, t, &eps, &s).unwrap();
            let back = eps_from_x0(&yt, &y0, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(eps.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let yt = stack(vec![0.7, -1.3], &[2, 1, 1]);
        let e = eps_from_x0(&yt, &yt, 2, &s).unwrap();
        for (got, y) in e.data().iter().zip(yt.values.data()) {
            let want = y * (1.0 - 0.72f64.sqrt()) / 0.28f64.sqrt();
            assert!((got - want).abs() < 1e-12);
        }
        let z = stack(vec![0.0; 2], &[2, 1, 1]);
        assert!(eps_from_x0(&z, &z, 1, &s)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(eps_from_x0(&z, &z, 0, &s), Err(Error::Numeric(_))));
    }

    #[test]
    fn ddim_final_step_returns_estimate() {
        let s = two_step();
        let yt = stack(vec![0.3, 5.0], &[2, 1, 1]);
        let x0 = stack(vec![-0.25, 0.125], &[2, 1, 1]);
        let out = ddim_step(&yt, &x0, 1, &s).unwrap();
        assert_eq!(out.values.data(), x0.values.data());
    }

    #[test]
    fn ddim_with_true_x0_lands_on_forward_sample() {
        let s = DiffusionSchedule::new(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = Rng::seed_from(9);
        let y0 = HeatmapStack::new(Tensor::uniform(&[3, 4, 4], 1.0, &mut rng), 4.0).unwrap();
        let eps = Tensor::randn(&[3, 4, 4], &mut rng);
        for t in 2..=10 {
            let yt = forward_sample(&y0, t, &eps, &s).unwrap();
            let prev = ddim_step(&yt, &y0, t, &s).unwrap();
            let want = forward_sample(&y0, t - 1, &eps, &s).unwrap();
            for (a, b) in prev.values.data().iter().zip(want.values.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddim_fixed_point_when_alpha_bar_unchanged() {
        let y = [0.4, -2.0, 1.5];
        let out = ddim_update(&y, &y, 0.6, 0.6).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = two_step().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,0.1,"));
    }
}
