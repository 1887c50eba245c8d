//! Keypoint encoder and iterative-feedback parameter regressor.

use rand::Rng;

use super::layers::{relu, relu_backward, Linear, Mat};

pub const ENCODER_HIDDEN: usize = 64;
pub const REGRESSOR_HIDDEN: usize = 128;
pub const IEF_STEPS: usize = 3;

/// `phi = l2(relu(l1(x)))` on `3J` normalized keypoint inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct EncoderCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Encoder {
    pub fn new(inputs: usize, d: usize, rng: &mut impl Rng) -> Self {
        Encoder {
            l1: Linear::random(inputs, ENCODER_HIDDEN, 2f64.sqrt(), rng),
            l2: Linear::random(ENCODER_HIDDEN, d, 1.0, rng),
        }
    }

    pub fn zeros(inputs: usize, d: usize) -> Self {
        Encoder { l1: Linear::zeros(inputs, ENCODER_HIDDEN), l2: Linear::zeros(ENCODER_HIDDEN, d) }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, EncoderCache) {
        let pre = self.l1.forward(x);
        let act = relu(&pre);
        let phi = self.l2.forward(&act);
        (phi, EncoderCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &EncoderCache, g_phi: &Mat, g: &mut Encoder) {
        let g_act = self.l2.backward(&cache.act, g_phi, &mut g.l2);
        let g_pre = relu_backward(&cache.pre, &g_act);
        self.l1.backward(&cache.x, &g_pre, &mut g.l1);
    }
}

/// `theta_{s+1} = theta_s + l2(relu(l1([Φ, theta_s])))` for [`IEF_STEPS`]
/// steps from `mean`, with weights shared across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub l1: Linear,
    pub l2: Linear,
    /// Starting parameter vector, `1 x P`. Not trained.
    pub mean: Mat,
}

pub struct RegressorCache {
    /// Per step: concatenated input and hidden pre-activation/activation.
    steps: Vec<(Mat, Mat, Mat)>,
    d: usize,
}

impl Regressor {
    /// The output layer starts small so the first predictions sit near `mean`.
    pub fn new(d: usize, mean: Mat, rng: &mut impl Rng) -> Self {
        let p = mean.ncols();
        Regressor {
            l1: Linear::random(d + p, REGRESSOR_HIDDEN, 2f64.sqrt(), rng),
            l2: Linear::random(REGRESSOR_HIDDEN, p, 0.01, rng),
            mean,
        }
    }

    pub fn zeros(d: usize, p: usize) -> Self {
        Regressor {
            l1: Linear::zeros(d + p, REGRESSOR_HIDDEN),
            l2: Linear::zeros(REGRESSOR_HIDDEN, p),
            mean: Mat::zeros(1, p),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn forward(&self, phi: &Mat) -> (Mat, RegressorCache) {
        self.forward_steps(phi, IEF_STEPS)
    }

    pub fn forward_steps(&self, phi: &Mat, steps: usize) -> (Mat, RegressorCache) {
        let (n, d) = phi.shape();
        let p = self.param_dim();
        let mut theta = Mat::from_fn(n, p, |_, c| self.mean[(0, c)]);
        let mut cache = RegressorCache { steps: Vec::with_capacity(steps), d };
        for _ in 0..steps {
            let mut input = Mat::zeros(n, d + p);
            input.columns_mut(0, d).copy_from(phi);
            input.columns_mut(d, p).copy_from(&theta);
            let pre = self.l1.forward(&input);
            let act = relu(&pre);
            theta += self.l2.forward(&act);
            cache.steps.push((input, pre, act));
        }
        (theta, cache)
    }

    /// Accumulates into `g` and returns the gradient with respect to `phi`.
    pub fn backward(&self, cache: &RegressorCache, g_theta: &Mat, g: &mut Regressor) -> Mat {
        let d = cache.d;
        let p = self.param_dim();
        let mut g_phi = Mat::zeros(g_theta.nrows(), d);
        let mut g_th = g_theta.clone();
        for (input, pre, act) in cache.steps.iter().rev() {
            let g_act = self.l2.backward(act, &g_th, &mut g.l2);
            let g_pre = relu_backward(pre, &g_act);
            let g_in = self.l1.backward(input, &g_pre, &mut g.l1);
            g_phi += g_in.columns(0, d);
            g_th += g_in.columns(d, p);
        }
        g_phi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::tests::rand_mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_return_the_mean() {
        let mut r = Regressor::zeros(4, 5);
        r.mean = Mat::from_row_slice(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (theta, _) = r.forward(&rand_mat(&mut rng, 3, 4));
        for row in theta.row_iter() {
            assert_eq!(row, r.mean.row(0));
        }
    }

    #[test]
    fn step_count_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = Regressor::new(4, Mat::zeros(1, 5), &mut rng);
        r.l2 = Linear::random(REGRESSOR_HIDDEN, 5, 1.0, &mut rng);
        let phi = rand_mat(&mut rng, 2, 4);
        assert_ne!(r.forward_steps(&phi, 1).0, r.forward_steps(&phi, 3).0);
    }

    #[test]
    fn outputs_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mean = rand_mat(&mut rng, 1, 6);
            let r = Regressor::new(8, mean, &mut rng);
            let phi = rand_mat(&mut rng, 4, 8) * 100.0;
            assert!(r.forward(&phi).0.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = Regressor::new(3, rand_mat(&mut rng, 1, 4), &mut rng);
        r.l2 = Linear::random(REGRESSOR_HIDDEN, 4, 0.5, &mut rng);
        r.l1.b = rand_mat(&mut rng, 1, REGRESSOR_HIDDEN) * 0.1;
        let phi = rand_mat(&mut rng, 2, 3);
        let w = rand_mat(&mut rng, 2, 4);
        let loss = |r: &Regressor, phi: &Mat| r.forward(phi).0.component_mul(&w).sum();
        let (_, cache) = r.forward(&phi);
        let mut g = Regressor::zeros(3, 4);
        let g_phi = r.backward(&cache, &w, &mut g);
        let h = 1e-6;
        for i in 0..phi.len() {
            let (mut a, mut b) = (phi.clone(), phi.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&r, &a) - loss(&r, &b)) / (2.0 * h);
            assert!((fd - g_phi[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for i in (0..r.l1.w.len()).step_by(7) {
            let (mut a, mut b) = (r.clone(), r.clone());
            a.l1.w[i] += h;
            b.l1.w[i] -= h;
            let fd = (loss(&a, &phi) - loss(&b, &phi)) / (2.0 * h);
            assert!((fd - g.l1.w[i]).abs() < 1e-6 * (1.0 + fd.abs()), "l1.w[{i}]");
        }
        for i in 0..r.l2.b.len() {
            let (mut a, mut b) = (r.clone(), r.clone());
            a.l2.b[i] += h;
            b.l2.b[i] -= h;
            let fd = (loss(&a, &phi) - loss(&b, &phi)) / (2.0 * h);
            assert!((fd - g.l2.b[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
