//! The reconstruction and sparsity terms of the decomposition objective.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::subject::denoiser::NoisePredictor;
use crate::subject::{encode_prompt, NoiseSchedule, Vocabulary};

/// `1 - cos(w*, w*_N)` and its gradients with respect to both vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityLoss {
    pub value: f64,
    pub grad_star: Array1<f64>,
    pub grad_full: Array1<f64>,
    /// Either vector had norm below `1e-12`; value and gradients are zero.
    pub degenerate: bool,
}

pub const DEGENERATE_NORM: f64 = 1e-12;

pub fn sparsity_loss(w_star: ArrayView1<f64>, w_full: ArrayView1<f64>) -> Result<SparsityLoss> {
    if w_star.len() != w_full.len() {
        return Err(Error::shape("sparsity loss", w_full.len(), w_star.len()));
    }
    let (na, nb) = (w_star.dot(&w_star).sqrt(), w_full.dot(&w_full).sqrt());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(SparsityLoss {
            value: 0.0,
            grad_star: Array1::zeros(w_star.len()),
            grad_full: Array1::zeros(w_star.len()),
            degenerate: true,
        });
    }
    let cos = w_star.dot(&w_full) / (na * nb);
    // d cos / da = b / (|a||b|) - cos a / |a|^2
    let grad_star = -(&w_full / (na * nb) - &(&w_star * (cos / (na * na))));
    let grad_full = -(&w_star / (na * nb) - &(&w_full * (cos / (nb * nb))));
    Ok(SparsityLoss {
        value: 1.0 - cos,
        grad_star,
        grad_full,
        degenerate: false,
    })
}

/// One batch of the denoising objective's randomness: which images, their
/// timesteps and their noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub images: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
}

impl NoiseDraw {
    /// Draws `batch` image indices from `0..n_images` (with replacement),
    /// then per image `t ~ U{1..T}` followed by its noise.
    pub fn sample<R: Rng>(rng: &mut R, n_images: usize, batch: usize, dim: usize, steps: usize) -> Self {
        let images: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_images)).collect();
        Self::for_images(rng, images, dim, steps)
    }

    /// Per listed image, `t ~ U{1..T}` followed by its noise.
    pub fn for_images<R: Rng>(rng: &mut R, images: Vec<usize>, dim: usize, steps: usize) -> Self {
        let mut t = Vec::with_capacity(images.len());
        let mut eps = Array2::zeros((images.len(), dim));
        for mut row in eps.rows_mut() {
            t.push(rng.random_range(1..=steps));
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        }
        Self { images, t, eps }
    }

    /// Noise fixed, timestep overridden for every image.
    pub fn at_timestep(&self, t: usize) -> Self {
        Self {
            images: self.images.clone(),
            t: vec![t; self.images.len()],
            eps: self.eps.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Noised inputs `z_t` for the draw.
    pub fn noised(&self, schedule: &NoiseSchedule, images: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = Array2::zeros(self.eps.raw_dim());
        for (r, (&i, &t)) in self.images.iter().zip(&self.t).enumerate() {
            if i >= images.nrows() {
                return Err(Error::shape("noise draw image index", images.nrows(), i));
            }
            let x = images.row(i);
            let e = self.eps.row(r);
            let out = z.row_mut(r);
            schedule.noise_into(
                x.as_slice().expect("contiguous images"),
                e.as_slice().expect("contiguous noise"),
                t,
                out.into_slice().expect("contiguous output"),
            )?;
        }
        Ok(z)
    }
}

/// Mean squared noise-prediction error and its gradient with respect to the
/// conditioning vector shared by every row.
pub fn conditioned_loss(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    images: ArrayView2<f64>,
    draw: &NoiseDraw,
    cond: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>)> {
    let z = draw.noised(schedule, images)?;
    let conds = Array2::from_shape_fn((draw.len(), cond.len()), |(_, j)| cond[j]);
    let n = draw.eps.len() as f64;
    let mut loss = 0.0;
    let mut upstream = |pred: &Array2<f64>| {
        let mut g = pred - &draw.eps;
        loss = g.iter().map(|v| v * v).sum::<f64>() / n;
        g.mapv_inplace(|v| 2.0 * v / n);
        g
    };
    let (_, dcond) = model.predict_cond_vjp(z.view(), &draw.t, conds.view(), &mut upstream)?;
    Ok((loss, dcond.sum_axis(ndarray::Axis(0))))
}

/// Reconstruction loss of the prompt `[template, pseudo]` and its gradient
/// with respect to `pseudo`.
pub fn reconstruction_loss(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    images: ArrayView2<f64>,
    draw: &NoiseDraw,
    pseudo: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>)> {
    let prompt = vocab.template_prompt(pseudo.to_vec());
    let cond = encode_prompt(vocab, &prompt)?;
    let (loss, dcond) = conditioned_loss(model, schedule, images, draw, cond.view())?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "reconstruction loss",
            step: 0,
            value: loss,
        });
    }
    // the substituted vector enters the mean pooling with weight 1/len
    Ok((loss, dcond / prompt.token_ids.len() as f64))
}

/// Reconstruction loss only, for a conditioning vector.
pub fn conditioned_loss_value(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    images: ArrayView2<f64>,
    draw: &NoiseDraw,
    cond: ArrayView1<f64>,
) -> Result<f64> {
    let z = draw.noised(schedule, images)?;
    let conds = Array2::from_shape_fn((draw.len(), cond.len()), |(_, j)| cond[j]);
    let pred = model.predict(z.view(), &draw.t, conds.view())?;
    Ok((&pred - &draw.eps).iter().map(|v| v * v).sum::<f64>() / draw.eps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn sparsity_special_values() {
        let a = array![1.0, 2.0, -0.5];
        assert!(sparsity_loss(a.view(), a.view()).unwrap().value.abs() < 1e-15);
        let neg = -&a;
        assert!((sparsity_loss(a.view(), neg.view()).unwrap().value - 2.0).abs() < 1e-15);
        let o = sparsity_loss(array![1.0, 0.0].view(), array![0.0, 3.0].view()).unwrap();
        assert_eq!(o.value, 1.0);
        let z = sparsity_loss(array![0.0, 0.0].view(), array![0.0, 3.0].view()).unwrap();
        assert!(z.degenerate && z.value == 0.0);
    }

    #[test]
    fn sparsity_gradient_matches_finite_differences() {
        let a = array![0.3, -1.2, 0.8, 0.1];
        let b = array![1.0, 0.4, -0.2, 0.6];
        let l = sparsity_loss(a.view(), b.view()).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut ap = a.clone();
            ap[k] += h;
            let mut am = a.clone();
            am[k] -= h;
            let fd = (sparsity_loss(ap.view(), b.view()).unwrap().value - sparsity_loss(am.view(), b.view()).unwrap().value) / (2.0 * h);
            assert!((fd - l.grad_star[k]).abs() < 1e-8);
            let mut bp = b.clone();
            bp[k] += h;
            let mut bm = b.clone();
            bm[k] -= h;
            let fd = (sparsity_loss(a.view(), bp.view()).unwrap().value - sparsity_loss(a.view(), bm.view()).unwrap().value) / (2.0 * h);
            assert!((fd - l.grad_full[k]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn sparsity_is_scale_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 5),
            b in proptest::collection::vec(-3.0f64..3.0, 5),
            s in 0.01f64..100.0,
        ) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            prop_assume!(a.dot(&a) > 1e-6 && b.dot(&b) > 1e-6);
            let l1 = sparsity_loss(a.view(), b.view()).unwrap().value;
            let l2 = sparsity_loss((&a * s).view(), (&b * s).view()).unwrap().value;
            prop_assert!((l1 - l2).abs() < 1e-12);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l1));
        }
    }
}
