//! Image similarity oracles.

use crate::image::Image;

/// Symmetric image similarity in `[0, 1]` with `sim(I, I) = 1`.
pub trait SimilarityOracle: Send + Sync {
    fn sim(&self, a: &Image, b: &Image) -> f64;

    fn name(&self) -> &str;
}

const FLAT_NORM: f64 = 1e-9;

/// Both images average-pooled to `grid x grid` cells per channel,
/// mean-subtracted and flattened; `sim = (1 + cos) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledCosine {
    pub grid: usize,
}

impl Default for PooledCosine {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl PooledCosine {
    /// Pooled, mean-subtracted feature vector. Cell boundaries follow
    /// `floor(k * size / grid)`, so sizes need not divide evenly.
    pub fn features(&self, image: &Image) -> Vec<f64> {
        let s = image.shape();
        let g = self.grid;
        let mut out = Vec::with_capacity(g * g * s.channels);
        for gy in 0..g {
            let (y0, y1) = (gy * s.height / g, ((gy + 1) * s.height / g).max(gy * s.height / g + 1));
            for gx in 0..g {
                let (x0, x1) = (gx * s.width / g, ((gx + 1) * s.width / g).max(gx * s.width / g + 1));
                for c in 0..s.channels {
                    let mut acc = 0.0;
                    let mut n = 0usize;
                    for y in y0..y1.min(s.height) {
                        for x in x0..x1.min(s.width) {
                            acc += image.pixel(y, x)[c];
                            n += 1;
                        }
                    }
                    out.push(if n > 0 { acc / n as f64 } else { 0.0 });
                }
            }
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v -= mean);
        out
    }
}

impl SimilarityOracle for PooledCosine {
    fn sim(&self, a: &Image, b: &Image) -> f64 {
        if a.shape() == b.shape() && a.data() == b.data() {
            return 1.0;
        }
        let (fa, fb) = (self.features(a), self.features(b));
        let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
        let na = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
        // pooled features of a constant image are zero up to rounding
        if na < FLAT_NORM || nb < FLAT_NORM {
            return 0.5;
        }
        ((1.0 + dot / (na * nb)) / 2.0).clamp(0.0, 1.0)
    }

    fn name(&self) -> &str {
        "pooled-cosine-8x8"
    }
}
