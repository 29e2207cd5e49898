//! Noise schedule, forward corruption and the x₀-predicting reverse sampler.
//!
//! The reverse step combines the posterior-mean coefficients with a
//! deterministic residual on the prediction:
//!
//! ```text
//! mean    = √α_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · x_t + √ᾱ_{t−1} β_t / (1 − ᾱ_t) · x_rec
//! x_{t−1} = mean                    if t = 0
//!         = mean + r(σ_t) · x_rec   otherwise,   σ_t = 1 − ᾱ_t
//! ```
//!
//! where `r` is `√·` by default or the identity (see [`ResidualTerm`]).
//! Because ᾱ_{−1} = 1, the final step returns `x_rec` exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualTerm {
    #[default]
    SqrtSigma,
    Sigma,
}

impl std::str::FromStr for ResidualTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_sigma" => Ok(Self::SqrtSigma),
            "sigma" => Ok(Self::Sigma),
            other => invalid(format!("unknown residual term '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha_bar_prev: Vec<f64>,
    pub sigma: Vec<f64>,
    pub residual: ResidualTerm,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return invalid(format!("timestep {t} outside [0, {})", self.steps()));
        }
        Ok(())
    }

    /// The x_t and x_rec coefficients of the posterior mean at `t`.
    ///
    /// `1 − ᾱ_t` is evaluated as `(1 − ᾱ_{t−1}) + ᾱ_{t−1}·β_t`, which is
    /// exactly `β_0` at `t = 0`, so the x_rec coefficient is exactly 1 there.
    pub fn mean_coefficients(&self, t: usize) -> (f64, f64) {
        let prev = self.alpha_bar_prev[t];
        let denom = (1.0 - prev) + prev * self.beta[t];
        let c_xt = self.alpha[t].sqrt() * (1.0 - self.alpha_bar_prev[t]) / denom;
        let c_rec = self.alpha_bar_prev[t].sqrt() * self.beta[t] / denom;
        (c_xt, c_rec)
    }

    pub fn residual_coefficient(&self, t: usize) -> f64 {
        match self.residual {
            ResidualTerm::SqrtSigma => self.sigma[t].sqrt(),
            ResidualTerm::Sigma => self.sigma[t],
        }
    }
}

/// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return invalid("schedule needs at least one timestep");
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return invalid(format!(
            "need 0 < beta_start ({beta_start}) < beta_end ({beta_end}) < 1"
        ));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps)
            .map(|t| if t == steps - 1 { beta_end } else { beta_start + t as f64 * step })
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let mut alpha_bar_prev = vec![1.0];
    alpha_bar_prev.extend_from_slice(&alpha_bar[..steps - 1]);
    let sigma = alpha_bar.iter().map(|ab| 1.0 - ab).collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        alpha_bar_prev,
        sigma,
        residual: ResidualTerm::default(),
    })
}

fn same_len(a: &[Point], b: &[Point], op: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{op}: {} points vs {} points", a.len(), b.len())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(x0: &[Point], t: usize, eps: &[Point], schedule: &NoiseSchedule) -> Result<Vec<Point>> {
    schedule.check_t(t)?;
    same_len(x0, eps, "q_sample")?;
    let a = schedule.alpha_bar[t].sqrt();
    let s = (1.0 - schedule.alpha_bar[t]).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| [a * x[0] + s * e[0], a * x[1] + s * e[1], a * x[2] + s * e[2]])
        .collect())
}

/// One reverse step from `x_t` given the decoder's clean estimate `x_rec`.
pub fn reverse_step(x_t: &[Point], t: usize, x_rec: &[Point], schedule: &NoiseSchedule) -> Result<Vec<Point>> {
    schedule.check_t(t)?;
    same_len(x_t, x_rec, "reverse_step")?;
    let (c_xt, c_rec) = schedule.mean_coefficients(t);
    let extra = if t == 0 { 0.0 } else { schedule.residual_coefficient(t) };
    Ok(x_t
        .iter()
        .zip(x_rec)
        .map(|(x, r)| {
            let mut out = [0.0; 3];
            for k in 0..3 {
                let mean = c_xt * x[k] + c_rec * r[k];
                out[k] = if t == 0 { mean } else { mean + extra * r[k] };
            }
            out
        })
        .collect())
}

pub fn gaussian_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub points: Vec<Point>,
    /// `x_{t−1}` after every step, from `t = T−1` down to `t = 0`.
    pub trace: Option<Vec<Vec<Point>>>,
}

/// Runs the full reverse chain from Gaussian noise of `n_points` points.
///
/// `denoise(x_t, t)` must return the clean estimate for `x_t`.
pub fn sample<F>(
    mut denoise: F,
    n_points: usize,
    schedule: &NoiseSchedule,
    rng_seed: u64,
    trace: bool,
) -> Result<SampleOutput>
where
    F: FnMut(&[Point], usize) -> Result<Vec<Point>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x = gaussian_points(n_points, &mut rng);
    let mut frames = trace.then(|| Vec::with_capacity(schedule.steps()));
    for t in (0..schedule.steps()).rev() {
        let x_rec = denoise(&x, t)?;
        x = reverse_step(&x, t, &x_rec, schedule)?;
        if x.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("reverse step at t={t}")));
        }
        if let Some(f) = frames.as_mut() {
            f.push(x.clone());
        }
    }
    Ok(SampleOutput { points: x, trace: frames })
}
