//! The bias-free coefficient network `f(w) = relu(W2 relu(W1 w))`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMlp {
    /// `h x d`.
    pub w1: Array2<f64>,
    /// The single output row, length `h`.
    pub w2: Array1<f64>,
}

/// Values kept from a forward pass for the backward pass.
pub struct MlpTape {
    pre: Array2<f64>,
    act: Array2<f64>,
    out: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub w2: Array1<f64>,
}

impl CoefficientMlp {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, dim)),
            w2: Array1::zeros(hidden),
        }
    }

    /// Uniform fan-in initialization. The output row is drawn from
    /// `[0, out_scale / sqrt(h))` so the initial coefficients are small but
    /// not all clamped to zero.
    pub fn init<R: Rng>(dim: usize, hidden: usize, out_scale: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("hidden", "MLP dimensions must be positive"));
        }
        if !(out_scale > 0.0 && out_scale.is_finite()) {
            return Err(Error::invalid("init_scale", "must be positive"));
        }
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = out_scale / (hidden as f64).sqrt();
        Ok(Self {
            w1: Array2::from_shape_simple_fn((hidden, dim), || rng.random_range(-b1..b1)),
            w2: Array1::from_shape_simple_fn(hidden, || rng.random_range(0.0..b2)),
        })
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::shape("coefficient MLP input", self.dim(), x.ncols()));
        }
        Ok(())
    }

    /// Coefficients for each row of `x`.
    pub fn coefficients(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_tape(x)?.0)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, MlpTape)> {
        self.check(&x)?;
        let pre = x.dot(&self.w1.t());
        let act = pre.mapv(|v| v.max(0.0));
        let out = act.dot(&self.w2);
        let alpha = out.mapv(|v| v.max(0.0));
        Ok((alpha, MlpTape { pre, act, out }))
    }

    /// Gradients of `<d_alpha, alpha>`. ReLU derivatives are taken as zero at
    /// zero.
    pub fn backward(&self, x: ArrayView2<f64>, tape: &MlpTape, d_alpha: &Array1<f64>) -> MlpGrads {
        let d_out = Array1::from_shape_fn(d_alpha.len(), |i| if tape.out[i] > 0.0 { d_alpha[i] } else { 0.0 });
        let w2 = tape.act.t().dot(&d_out);
        let mut d_pre = Array2::from_shape_fn(tape.pre.raw_dim(), |(i, k)| d_out[i] * self.w2[k]);
        d_pre.zip_mut_with(&tape.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = d_pre.t().dot(&x);
        MlpGrads { w1, w2 }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w1.as_slice_mut().unwrap(), self.w2.as_slice_mut().unwrap()]
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        vec![self.w1.len(), self.w2.len()]
    }

    pub fn weights(&self) -> MlpWeights {
        MlpWeights {
            w1: self.w1.axis_iter(Axis(0)).map(|r| r.to_vec()).collect(),
            w2: self.w2.to_vec(),
        }
    }
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![self.w1.as_slice().unwrap(), self.w2.as_slice().unwrap()]
    }
}

/// Serialized MLP weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<f64>,
}

impl TryFrom<&MlpWeights> for CoefficientMlp {
    type Error = Error;

    fn try_from(w: &MlpWeights) -> Result<Self> {
        let h = w.w1.len();
        let d = w.w1.first().map_or(0, Vec::len);
        if h == 0 || d == 0 || w.w1.iter().any(|r| r.len() != d) || w.w2.len() != h {
            return Err(Error::Format {
                what: "coefficient MLP weights",
                reason: "inconsistent matrix shapes".into(),
            });
        }
        Ok(Self {
            w1: Array2::from_shape_vec((h, d), w.w1.concat()).expect("checked shape"),
            w2: Array1::from(w.w2.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn hand_evaluated_coefficient() {
        let m = CoefficientMlp {
            w1: array![[1.0]],
            w2: array![2.0],
        };
        assert_eq!(m.coefficients(array![[3.0]].view()).unwrap(), array![6.0]);
    }

    #[test]
    fn zero_or_negative_weights_give_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_simple_fn((10, 4), || rng.random_range(-1.0..1.0));
        let mut m = CoefficientMlp::init(4, 6, 1.0, &mut rng).unwrap();
        m.w2.mapv_inplace(|v| -v.abs() - 0.1);
        assert!(m.coefficients(x.view()).unwrap().iter().all(|&a| a == 0.0));
        let z = CoefficientMlp { w1: Array2::zeros((6, 4)), ..m };
        assert!(z.coefficients(x.view()).unwrap().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = CoefficientMlp::init(3, 5, 1.0, &mut rng).unwrap();
        assert_eq!(CoefficientMlp::try_from(&m.weights()).unwrap(), m);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-1.0..1.0));
        let mut m = CoefficientMlp::init(3, 4, 1.0, &mut rng).unwrap();
        m.w2.mapv_inplace(|v| v + 0.2);
        let g = Array1::from_shape_simple_fn(7, || rng.random_range(-1.0..1.0));
        let f = |m: &CoefficientMlp| m.coefficients(x.view()).unwrap().dot(&g);
        let (_, tape) = m.forward_tape(x.view()).unwrap();
        let grads = m.backward(x.view(), &tape, &g);
        let analytic: Vec<f64> = grads.slices().concat();
        let h = 1e-6;
        let mut k = 0;
        for b in 0..2 {
            for i in 0..m.param_sizes()[b] {
                let mut p = m.clone();
                p.param_slices_mut()[b][i] += h;
                let mut q = m.clone();
                q.param_slices_mut()[b][i] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
                k += 1;
            }
        }
    }
}
