//! Temporal convolution baseline: two residual blocks of kernel-3
//! convolutions with zero padding at the window edges.
//!
//! Every slot is data here. A missing frame arrives as the encoder's zero
//! feature and is convolved like any other row, which is the contrast with
//! the masked transformer.

use rand::Rng;

use super::layers::{add_row, column_sums, relu, relu_backward, Mat};

pub const KERNEL: usize = 3;
pub const BLOCKS: usize = 2;

/// `y_t = b + sum_k x_{t+k-1} w_k`; `w` stacks the three `d x d` taps
/// vertically.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub w: Mat,
    pub b: Mat,
}

impl Conv1d {
    pub fn zeros(d: usize) -> Self {
        Conv1d { w: Mat::zeros(KERNEL * d, d), b: Mat::zeros(1, d) }
    }

    pub fn random(d: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let lin = super::layers::Linear::random(KERNEL * d, d, gain, rng);
        Conv1d { w: lin.w, b: lin.b }
    }

    fn dim(&self) -> usize {
        self.b.ncols()
    }

    fn padded(x: &Mat) -> Mat {
        let (n, d) = x.shape();
        let mut p = Mat::zeros(n + 2, d);
        p.rows_mut(1, n).copy_from(x);
        p
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let (n, d) = x.shape();
        let p = Self::padded(x);
        let mut y = Mat::zeros(n, d);
        for k in 0..KERNEL {
            y += p.rows(k, n) * self.w.rows(k * d, d);
        }
        add_row(&mut y, &self.b);
        y
    }

    pub fn backward(&self, x: &Mat, gy: &Mat, g: &mut Conv1d) -> Mat {
        let (n, d) = x.shape();
        let p = Self::padded(x);
        let mut gp = Mat::zeros(n + 2, d);
        for k in 0..KERNEL {
            let mut gw = g.w.rows_mut(k * d, d);
            gw += p.rows(k, n).transpose() * gy;
            let mut rows = gp.rows_mut(k, n);
            rows += gy * self.w.rows(k * d, d).transpose();
        }
        g.b += column_sums(gy);
        debug_assert_eq!(self.dim(), d);
        gp.rows(1, n).into_owned()
    }
}

/// `y = x + c2(relu(c1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub c1: Conv1d,
    pub c2: Conv1d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub blocks: Vec<ConvBlock>,
}

pub struct ConvCache {
    /// Per block: input, first pre-activation, hidden activation.
    steps: Vec<(Mat, Mat, Mat)>,
}

impl ConvStage {
    /// The second convolution of each block starts at zero, so a fresh stage
    /// is the identity.
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        ConvStage {
            blocks: (0..BLOCKS)
                .map(|_| ConvBlock { c1: Conv1d::random(d, 2f64.sqrt(), rng), c2: Conv1d::zeros(d) })
                .collect(),
        }
    }

    pub fn zeros(d: usize) -> Self {
        ConvStage { blocks: (0..BLOCKS).map(|_| ConvBlock { c1: Conv1d::zeros(d), c2: Conv1d::zeros(d) }).collect() }
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.c1.w"), &b.c1.w));
            out.push((format!("block{i}.c1.b"), &b.c1.b));
            out.push((format!("block{i}.c2.w"), &b.c2.w));
            out.push((format!("block{i}.c2.b"), &b.c2.b));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.c1.w);
            out.push(&mut b.c1.b);
            out.push(&mut b.c2.w);
            out.push(&mut b.c2.b);
        }
        out
    }

    pub fn forward(&self, x: &Mat) -> (Mat, ConvCache) {
        let mut h = x.clone();
        let mut steps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let pre = b.c1.forward(&h);
            let act = relu(&pre);
            let y = &h + b.c2.forward(&act);
            steps.push((h, pre, act));
            h = y;
        }
        (h, ConvCache { steps })
    }

    pub fn backward(&self, cache: &ConvCache, gy: &Mat, g: &mut ConvStage) -> Mat {
        let mut gh = gy.clone();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let (x, pre, act) = &cache.steps[i];
            let g_act = b.c2.backward(act, &gh, &mut g.blocks[i].c2);
            let g_pre = relu_backward(pre, &g_act);
            gh += b.c1.backward(x, &g_pre, &mut g.blocks[i].c1);
        }
        gh
    }
}
