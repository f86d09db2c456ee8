//! Virtual compute and network costs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedgp_core::lowrank::ResidualMode;
use fedgp_core::protocol::StepLabel;
use fedgp_core::{Error, Result};

/// Per-worker speeds and cost constants. A sub-step on a worker with `n`
/// rows and `m` knots takes
/// `(c0·n³ [full-local only] + c1·n·m² + c2) · factor(step) / speed` seconds,
/// and each message takes `latency + jitter·U[0, 1)` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct ComputeModel {
    pub speeds: Vec<f64>,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Relative cost of the derivative sub-step.
    pub delta_theta_factor: f64,
    pub latency: f64,
    pub jitter: f64,
}

impl ComputeModel {
    pub fn uniform(j: usize) -> Self {
        ComputeModel {
            speeds: vec![1.0; j],
            c0: 2e-9,
            c1: 4e-9,
            c2: 1e-4,
            delta_theta_factor: 4.0,
            latency: 1e-3,
            jitter: 5e-4,
        }
    }

    /// Every cost zero: useful to compare protocols step for step.
    pub fn instantaneous(j: usize) -> Self {
        ComputeModel {
            speeds: vec![1.0; j],
            c0: 0.0,
            c1: 0.0,
            c2: 0.0,
            delta_theta_factor: 1.0,
            latency: 0.0,
            jitter: 0.0,
        }
    }

    /// Worker `slow` runs `factor` times slower than the rest.
    pub fn with_straggler(mut self, slow: usize, factor: f64) -> Self {
        if let Some(s) = self.speeds.get_mut(slow) {
            *s = 1.0 / factor;
        }
        self
    }

    pub fn validate(&self, j: usize) -> Result<()> {
        if self.speeds.len() != j {
            return Err(Error::Config(format!("{} speed factors for {j} workers", self.speeds.len())));
        }
        if self.speeds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("speed factors must be positive".into()));
        }
        let consts = [self.c0, self.c1, self.c2, self.delta_theta_factor, self.latency, self.jitter];
        if consts.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("cost constants must be non-negative".into()));
        }
        Ok(())
    }

    pub fn compute_time(&self, worker: usize, step: StepLabel, n: usize, m: usize, mode: ResidualMode) -> f64 {
        let (n, m) = (n as f64, m as f64);
        let cubic = if mode == ResidualMode::FullLocal { self.c0 * n * n * n } else { 0.0 };
        let base = cubic + self.c1 * n * m * m + self.c2;
        let factor = if step == StepLabel::DeltaTheta { self.delta_theta_factor } else { 1.0 };
        base * factor / self.speeds[worker]
    }
}

/// Seeded source of message latencies.
pub struct Network {
    latency: f64,
    jitter: f64,
    rng: ChaCha8Rng,
}

impl Network {
    pub fn new(model: &ComputeModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        Network {
            latency: model.latency,
            jitter: model.jitter,
            rng,
        }
    }

    pub fn delay(&mut self) -> f64 {
        if self.jitter == 0.0 {
            self.latency
        } else {
            self.latency + self.jitter * self.rng.random::<f64>()
        }
    }
}

/// Least-squares fit of `(c0, c1)` to measured `(n, m, seconds)` samples,
/// with `c2` fixed. Negative fits are clamped to zero.
pub fn fit_cost_constants(samples: &[(usize, usize, f64)], c2: f64) -> (f64, f64) {
    let (mut s00, mut s01, mut s11, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(n, m, secs) in samples {
        let a = (n as f64).powi(3);
        let b = n as f64 * (m as f64).powi(2);
        let y = secs - c2;
        s00 += a * a;
        s01 += a * b;
        s11 += b * b;
        r0 += a * y;
        r1 += b * y;
    }
    let det = s00 * s11 - s01 * s01;
    if det.abs() < f64::EPSILON * s00 * s11 {
        return ((r0 / s00).max(0.0), 0.0);
    }
    let c0 = (s11 * r0 - s01 * r1) / det;
    let c1 = (s00 * r1 - s01 * r0) / det;
    (c0.max(0.0), c1.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straggler_cost_scales() {
        let m = ComputeModel::uniform(3).with_straggler(1, 8.0);
        let fast = m.compute_time(0, StepLabel::Gamma, 100, 10, ResidualMode::FullLocal);
        let slow = m.compute_time(1, StepLabel::Gamma, 100, 10, ResidualMode::FullLocal);
        assert!((slow / fast - 8.0).abs() < 1e-12);
        let dt = m.compute_time(0, StepLabel::DeltaTheta, 100, 10, ResidualMode::FullLocal);
        assert!((dt / fast - m.delta_theta_factor).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_exact_constants() {
        let samples: Vec<_> = [(50, 10), (100, 40), (200, 20)]
            .iter()
            .map(|&(n, m)| (n, m, 3e-9 * (n as f64).powi(3) + 5e-8 * n as f64 * (m * m) as f64 + 1e-4))
            .collect();
        let (c0, c1) = fit_cost_constants(&samples, 1e-4);
        assert!((c0 - 3e-9).abs() < 1e-15 && (c1 - 5e-8).abs() < 1e-14, "{c0} {c1}");
    }

    #[test]
    fn latency_is_seeded() {
        let m = ComputeModel::uniform(2);
        let a: Vec<f64> = {
            let mut n = Network::new(&m, 3);
            (0..5).map(|_| n.delay()).collect()
        };
        let mut n = Network::new(&m, 3);
        let b: Vec<f64> = (0..5).map(|_| n.delay()).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|d| *d >= m.latency && *d < m.latency + m.jitter));
    }
}
