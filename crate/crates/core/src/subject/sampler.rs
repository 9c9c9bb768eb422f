//! Ancestral DDPM sampling with classifier-free guidance.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::subject::schedule::NoiseSchedule;

pub const DEFAULT_GUIDANCE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    /// Number of reverse steps; at most `T`. Fewer steps use an evenly
    /// strided subset of the schedule.
    pub steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE,
            steps,
            seed,
        }
    }

    pub fn with_guidance(mut self, g: f64) -> Self {
        self.guidance_scale = g;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid("steps", format!("must be in 1..={}", schedule.steps())));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::invalid("guidance_scale", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Descending timesteps visited by a sampler with `steps` reverse steps.
pub fn timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Combined noise estimate `eps_u + g (eps_c - eps_u)`.
pub fn guide(eps_uncond: &Array2<f64>, eps_cond: &Array2<f64>, g: f64) -> Array2<f64> {
    eps_uncond + &((eps_cond - eps_uncond) * g)
}

/// Batched predictor callback: `(z_t, t, cond) -> eps`.
pub type PredictFn<'a> = dyn FnMut(ArrayView2<f64>, &[usize], ArrayView2<f64>) -> Result<Array2<f64>> + 'a;

/// Runs the reverse chain for one image per conditioning row, each with its
/// own seeded noise stream.
///
/// With `g == 1` only the conditional branch is evaluated and with `g == 0`
/// only the unconditional one, so those cases reproduce the single-branch
/// prediction exactly.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample(
    predict: &mut PredictFn<'_>,
    schedule: &NoiseSchedule,
    shape: ImageShape,
    cond: ArrayView2<f64>,
    uncond: ArrayView1<f64>,
    guidance: f64,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    let b = seeds.len();
    if cond.nrows() != b {
        return Err(Error::shape("ddpm_sample conditioning rows", b, cond.nrows()));
    }
    let dim = shape.len();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x = Array2::<f64>::zeros((b, dim));
    for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
    }
    let uncond_rows = Array2::from_shape_fn((b, uncond.len()), |(_, j)| uncond[j]);

    let ts = timesteps(schedule.steps(), steps);
    let ab = schedule.alpha_bar();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let tvec = vec![t; b];
        let eps = if guidance == 1.0 {
            predict(x.view(), &tvec, cond)?
        } else if guidance == 0.0 {
            predict(x.view(), &tvec, uncond_rows.view())?
        } else {
            let eu = predict(x.view(), &tvec, uncond_rows.view())?;
            let ec = predict(x.view(), &tvec, cond)?;
            guide(&eu, &ec, guidance)
        };

        let (ab_t, ab_prev) = (ab[t], ab[t_prev]);
        let beta = 1.0 - ab_t / ab_prev;
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let coef_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;

        // At alpha_bar = 0 the clean-image estimate is undefined; the data
        // mean (zero) stands in, and its coefficient there is tiny anyway.
        let x0 = if ab_t > 0.0 {
            let (sa, sn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
            ((&x - &(&eps * sn)) / sa).mapv(|v| v.clamp(-1.0, 1.0))
        } else {
            Array2::zeros((b, dim))
        };
        let mut next = &x0 * coef_x0 + &(&x * coef_xt);
        if var > 0.0 && t_prev > 0 {
            let sd = var.sqrt();
            for (mut row, rng) in next.rows_mut().into_iter().zip(rngs.iter_mut()) {
                row.iter_mut().for_each(|v| {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += sd * n;
                });
            }
        }
        x = next;
    }

    x.rows()
        .into_iter()
        .map(|row| Image::new(shape, row.iter().map(|v| v.clamp(-1.0, 1.0)).collect()))
        .collect()
}

/// Convenience for one conditioning vector.
pub fn ddpm_sample_one(
    predict: &mut PredictFn<'_>,
    schedule: &NoiseSchedule,
    shape: ImageShape,
    cond: ArrayView1<f64>,
    uncond: ArrayView1<f64>,
    cfg: &SamplerConfig,
) -> Result<Image> {
    cfg.validate(schedule)?;
    let c = cond.to_owned().insert_axis(ndarray::Axis(0));
    let mut v = ddpm_sample(predict, schedule, shape, c.view(), uncond, cfg.guidance_scale, cfg.steps, &[cfg.seed])?;
    Ok(v.pop().expect("one image"))
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn full_chain_timesteps() {
        assert_eq!(timesteps(5, 5), vec![5, 4, 3, 2, 1]);
        assert_eq!(timesteps(100, 4), vec![100, 75, 50, 25]);
        assert_eq!(timesteps(10, 1), vec![10]);
    }

    #[test]
    fn unit_guidance_is_conditional_prediction() {
        let shape = ImageShape::new(1, 2, 1);
        let sched = NoiseSchedule::linear(10).unwrap();
        let cond = Array2::from_elem((1, 2), 0.5);
        let uncond = Array1::from_elem(2, -0.5);
        let mut calls = Vec::new();
        let mut predict = |z: ArrayView2<f64>, _t: &[usize], c: ArrayView2<f64>| {
            calls.push(c[[0, 0]]);
            Ok(z.mapv(|v| 0.1 * v) + c[[0, 0]])
        };
        ddpm_sample(&mut predict, &sched, shape, cond.view(), uncond.view(), 1.0, 10, &[3]).unwrap();
        assert!(calls.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn guidance_formula() {
        let eu = Array2::from_elem((1, 2), 1.0);
        let ec = Array2::from_elem((1, 2), 3.0);
        assert_eq!(guide(&eu, &ec, 2.0), Array2::from_elem((1, 2), 5.0));
        assert_eq!(guide(&eu, &ec, 0.0), eu);
    }

    #[test]
    fn output_in_range_and_seeded() {
        let shape = ImageShape::new(2, 2, 3);
        let sched = NoiseSchedule::linear(20).unwrap();
        let cond = Array2::zeros((2, 1));
        let uncond = Array1::zeros(1);
        let mut predict = |z: ArrayView2<f64>, _t: &[usize], _c: ArrayView2<f64>| Ok(z.mapv(|v| 0.5 * v));
        let a = ddpm_sample(&mut predict, &sched, shape, cond.view(), uncond.view(), 3.0, 20, &[1, 2]).unwrap();
        let b = ddpm_sample(&mut predict, &sched, shape, cond.view(), uncond.view(), 3.0, 20, &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|im| im.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn rejects_bad_config() {
        let sched = NoiseSchedule::linear(10).unwrap();
        assert!(SamplerConfig::new(0, 0).validate(&sched).is_err());
        assert!(SamplerConfig::new(11, 0).validate(&sched).is_err());
        assert!(SamplerConfig::new(5, 0).with_guidance(-1.0).validate(&sched).is_err());
    }
}
