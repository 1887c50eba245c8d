//! Dense building blocks with explicit backward passes. Activations are
//! matrices with one row per frame.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;

pub const LN_EPS: f64 = 1e-5;

/// `y = x w + b`, with `w` stored `in x out` and `b` as a `1 x out` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear { w: Mat::zeros(inp, out), b: Mat::zeros(1, out) }
    }

    /// Gaussian weights with variance `gain^2 / inp`, zero bias.
    pub fn random(inp: usize, out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let sd = gain / (inp as f64).sqrt();
        Linear {
            w: Mat::from_fn(inp, out, |_, _| sd * rng.sample::<f64, _>(StandardNormal)),
            b: Mat::zeros(1, out),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x * &self.w;
        add_row(&mut y, &self.b);
        y
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward(&self, x: &Mat, gy: &Mat, g: &mut Linear) -> Mat {
        g.w += x.tr_mul(gy);
        g.b += column_sums(gy);
        gy * self.w.transpose()
    }
}

pub fn add_row(y: &mut Mat, b: &Mat) {
    for c in 0..y.ncols() {
        let v = b[(0, c)];
        y.column_mut(c).add_scalar_mut(v);
    }
}

pub fn column_sums(m: &Mat) -> Mat {
    Mat::from_fn(1, m.ncols(), |_, c| m.column(c).sum())
}

pub fn relu(x: &Mat) -> Mat {
    x.map(|v| v.max(0.0))
}

/// Gradient through [`relu`] given its pre-activation.
pub fn relu_backward(pre: &Mat, gy: &Mat) -> Mat {
    gy.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

/// Row-wise layer normalization with gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub g: Mat,
    pub b: Mat,
}

pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { g: Mat::from_element(1, dim, 1.0), b: Mat::zeros(1, dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm { g: Mat::zeros(1, dim), b: Mat::zeros(1, dim) }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let (n, d) = x.shape();
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..d {
                xhat[(r, c)] = (x[(r, c)] - mean) * is;
            }
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for c in 0..d {
            let (g, b) = (self.g[(0, c)], self.b[(0, c)]);
            y.column_mut(c).apply(|v| *v = *v * g + b);
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, gy: &Mat, g: &mut LayerNorm) -> Mat {
        let (n, d) = gy.shape();
        g.g += column_sums(&gy.component_mul(&cache.xhat));
        g.b += column_sums(gy);
        let mut gx = Mat::zeros(n, d);
        for r in 0..n {
            let gh: Vec<f64> = (0..d).map(|c| gy[(r, c)] * self.g[(0, c)]).collect();
            let mean_gh = gh.iter().sum::<f64>() / d as f64;
            let mean_ghx = (0..d).map(|c| gh[c] * cache.xhat[(r, c)]).sum::<f64>() / d as f64;
            for c in 0..d {
                gx[(r, c)] = cache.inv_std[r] * (gh[c] - mean_gh - cache.xhat[(r, c)] * mean_ghx);
            }
        }
        gx
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    /// Applies one update to `x` in place.
    pub fn update(&mut self, x: &mut [f64], g: &[f64]) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
