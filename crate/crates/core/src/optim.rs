use num_traits::Float;

/// Adam over a list of flat parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: Vec<&mut [F]>, grads: &[&[F]]) {
        let lr = self.lr;
        self.step_with_lr(params, grads, lr);
    }

    pub fn step_with_lr(&mut self, params: Vec<&mut [F]>, grads: &[&[F]], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.t += 1;
        let c = |x: f64| F::from(x).unwrap();
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = c(lr * bc2.sqrt() / bc1);
        let eps = c(self.eps * bc2.sqrt());
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                p[i] = p[i] - step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
