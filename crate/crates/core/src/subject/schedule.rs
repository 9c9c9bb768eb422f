use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward-process coefficients. Index `t` runs over `0..=T`; `betas[0]` is
/// unused and zero, `alpha_bar[0] = 1` and `alpha_bar[T] = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas spanning the usual 1000-step range `[1e-4, 0.02]`,
    /// rescaled by `1000 / T` so a short chain still reaches pure noise, with
    /// the final step forced to `beta_T = 1` so that `alpha_bar[T]` is
    /// exactly zero.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("steps", "need at least 2 diffusion steps"));
        }
        let scale = 1000.0 / steps as f64;
        let (start, end) = (1e-4 * scale, 0.02 * scale);
        let mut betas = vec![0.0; steps + 1];
        for (t, beta) in betas.iter_mut().enumerate().skip(1) {
            let frac = (t - 1) as f64 / (steps - 1) as f64;
            *beta = (start + frac * (end - start)).min(0.999);
        }
        betas[steps] = 1.0;
        Self::from_betas(betas)
    }

    /// Builds the schedule from `betas[1..=T]` (`betas[0]` must be zero).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas[0] != 0.0 {
            return Err(Error::invalid("betas", "need betas[0] = 0 and at least one step"));
        }
        let last = betas.len() - 1;
        for (t, &b) in betas.iter().enumerate().skip(1) {
            let ok = if t == last { b > 0.0 && b <= 1.0 } else { b > 0.0 && b < 1.0 };
            if !ok {
                return Err(Error::invalid("betas", format!("beta[{t}] = {b} out of range")));
            }
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        alpha_bar.push(1.0);
        for &b in &betas[1..] {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid("t", format!("{t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// `z_t = sqrt(alpha_bar[t]) z + sqrt(1 - alpha_bar[t]) eps`, written into
    /// `out`. The endpoints return `z` and `eps` exactly.
    pub fn noise_into(&self, z: &[f64], eps: &[f64], t: usize, out: &mut [f64]) -> Result<()> {
        self.check_t(t)?;
        if z.len() != eps.len() || z.len() != out.len() {
            return Err(Error::shape("noise_image", z.len(), format!("eps {}, out {}", eps.len(), out.len())));
        }
        let ab = self.alpha_bar[t];
        if ab == 1.0 {
            out.copy_from_slice(z);
        } else if ab == 0.0 {
            out.copy_from_slice(eps);
        } else {
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            for ((o, &zv), &ev) in out.iter_mut().zip(z).zip(eps) {
                *o = a * zv + s * ev;
            }
        }
        Ok(())
    }

    pub fn noise_image(&self, z: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; z.len()];
        self.noise_into(z, eps, t, &mut out)?;
        Ok(out)
    }
}
