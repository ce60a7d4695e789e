//! Variance-preserving forward diffusion and reverse samplers over flat
//! real-vector states.

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ScheduleKind::Linear),
            "cosine" => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

/// Per-timestep beta/alpha tables. Index `i` holds timestep `t = i + 1`;
/// timestep 0 denotes the clean signal with `alpha_bar = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub beta_range: (f64, f64),
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// alpha_bar at timestep t, with the t = 0 convention alpha_bar = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.num_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: min,
                hi: self.num_steps,
            });
        }
        Ok(())
    }
}

pub fn build_schedule(
    kind: ScheduleKind,
    num_steps: usize,
    beta_range: (f64, f64),
) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::InvalidSchedule(format!(
            "T must be >= 2, got {num_steps}"
        )));
    }
    let (beta_min, beta_max) = beta_range;
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "beta range must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
        )));
    }

    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..num_steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (num_steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            // Squared-cosine alpha_bar curve; betas derived from consecutive
            // ratios and clamped into the valid range.
            let s = 0.008;
            let f = |t: f64| {
                let x = (t / num_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (0..num_steps)
                .map(|i| {
                    let b = 1.0 - f((i + 1) as f64) / f(i as f64);
                    b.clamp(beta_min, beta_max)
                })
                .collect()
        }
    };

    if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
        return Err(Error::InvalidSchedule(
            "derived beta outside (0, 1)".to_string(),
        ));
    }

    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }

    Ok(NoiseSchedule {
        kind,
        num_steps,
        beta_range,
        betas,
        alphas,
        alpha_bars,
    })
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise
pub fn forward_diffuse(
    z0: &[f64],
    t: usize,
    noise: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_same_len(z0, noise)?;
    sched.check_timestep(t, 1)?;
    let ab = sched.alpha_bar(t);
    let c0 = ab.sqrt();
    let c1 = (1.0 - ab).sqrt();
    Ok(z0
        .iter()
        .zip(noise)
        .map(|(z, n)| c0 * z + c1 * n)
        .collect())
}

/// Ancestral DDPM posterior step using predicted noise. Deterministic given
/// the seed; at t = 1 no noise is injected.
pub fn ddpm_step(
    z_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    check_same_len(z_t, eps_hat)?;
    sched.check_timestep(t, 1)?;
    let beta = sched.betas[t - 1];
    let alpha = sched.alphas[t - 1];
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);

    // Predict z0, then the exact posterior mean q(z_{t-1} | z_t, z0).
    let sqrt_one_minus_ab = (1.0 - ab_t).sqrt();
    let coef_z0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let coef_zt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = if t == 1 {
        0.0
    } else {
        ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt()
    };

    let mut rng = StreamRng::new(rng_seed, &format!("ddpm_step/t={t}"));
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| {
            let z0_pred = (z - sqrt_one_minus_ab * e) / ab_t.sqrt();
            let mean = coef_z0 * z0_pred + coef_zt * z;
            if sigma > 0.0 {
                mean + sigma * rng.normal()
            } else {
                mean
            }
        })
        .collect())
}

/// Deterministic DDIM (eta = 0) update from timestep t to t_prev.
pub fn ddim_step(
    z_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_same_len(z_t, eps_hat)?;
    sched.check_timestep(t, 1)?;
    if t_prev > t {
        return Err(Error::TimestepOutOfRange {
            t: t_prev,
            lo: 0,
            hi: t,
        });
    }
    if t_prev == t {
        return Ok(z_t.to_vec());
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sqrt_ab_t = ab_t.sqrt();
    let sqrt_one_minus_ab_t = (1.0 - ab_t).sqrt();
    let sqrt_ab_prev = ab_prev.sqrt();
    let sqrt_one_minus_ab_prev = (1.0 - ab_prev).sqrt();
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| {
            let z0_pred = (z - sqrt_one_minus_ab_t * e) / sqrt_ab_t;
            sqrt_ab_prev * z0_pred + sqrt_one_minus_ab_prev * e
        })
        .collect())
}

/// Evenly spaced descending timesteps T = t_0 > t_1 > ... > t_S = 0 for a
/// DDIM trajectory with `steps` updates.
pub fn ddim_timesteps(num_train_steps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, num_train_steps);
    let mut ts: Vec<usize> = (0..=steps)
        .map(|k| ((num_train_steps * (steps - k)) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}
