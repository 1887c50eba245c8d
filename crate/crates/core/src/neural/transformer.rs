//! One pre-norm transformer layer over a window of frame features.
//!
//! Invalid frames are dropped before attention: they are neither queries
//! nor keys, and their output is their input. Valid outputs therefore never
//! read an invalid frame's feature.

use rand::Rng;

use super::layers::{relu, relu_backward, LayerNorm, Linear, LnCache, Mat};
use crate::error::{Error, Result};

pub const HEADS: usize = 4;
pub const FFN_DIM: usize = 128;

/// Sinusoidal encoding: entries `2k` and `2k + 1` are the sine and cosine of
/// `t / 10000^(2k/d)`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 == 1 {
        return Err(Error::invalid("positional encoding", format!("dimension {d} is odd")));
    }
    let mut p = vec![0.0; d];
    for k in 0..d / 2 {
        let a = t as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
        p[2 * k] = a.sin();
        p[2 * k + 1] = a.cos();
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    /// Output projections start at zero, so a fresh layer adds no residual.
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        TransformerLayer {
            ln1: LayerNorm::new(d),
            wq: Linear::random(d, d, 1.0, rng),
            wk: Linear::random(d, d, 1.0, rng),
            wv: Linear::random(d, d, 1.0, rng),
            wo: Linear::zeros(d, d),
            ln2: LayerNorm::new(d),
            ff1: Linear::random(d, FFN_DIM, 2f64.sqrt(), rng),
            ff2: Linear::zeros(FFN_DIM, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        TransformerLayer {
            ln1: LayerNorm::zeros(d),
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            ff1: Linear::zeros(d, FFN_DIM),
            ff2: Linear::zeros(FFN_DIM, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.inputs()
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("ln1.g", &self.ln1.g),
            ("ln1.b", &self.ln1.b),
            ("wq.w", &self.wq.w),
            ("wq.b", &self.wq.b),
            ("wk.w", &self.wk.w),
            ("wk.b", &self.wk.b),
            ("wv.w", &self.wv.w),
            ("wv.b", &self.wv.b),
            ("wo.w", &self.wo.w),
            ("wo.b", &self.wo.b),
            ("ln2.g", &self.ln2.g),
            ("ln2.b", &self.ln2.b),
            ("ff1.w", &self.ff1.w),
            ("ff1.b", &self.ff1.b),
            ("ff2.w", &self.ff2.w),
            ("ff2.b", &self.ff2.b),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.ln1.g,
            &mut self.ln1.b,
            &mut self.wq.w,
            &mut self.wq.b,
            &mut self.wk.w,
            &mut self.wk.b,
            &mut self.wv.w,
            &mut self.wv.b,
            &mut self.wo.w,
            &mut self.wo.b,
            &mut self.ln2.g,
            &mut self.ln2.b,
            &mut self.ff1.w,
            &mut self.ff1.b,
            &mut self.ff2.w,
            &mut self.ff2.b,
        ]
    }

    /// Returns `Φ` for every row of `phi` and the forward cache. `cache.empty`
    /// is set when no frame is valid.
    pub fn forward(&self, phi: &Mat, valid: &[bool]) -> Result<(Mat, TransformerCache)> {
        let (n, d) = phi.shape();
        if valid.len() != n {
            return Err(Error::Dimension { what: "validity flags", expected: n, actual: valid.len() });
        }
        if d % HEADS != 0 {
            return Err(Error::invalid("transformer", format!("dimension {d} not divisible by {HEADS} heads")));
        }
        let idx: Vec<usize> = (0..n).filter(|&t| valid[t]).collect();
        let mut out = phi.clone();
        if idx.is_empty() {
            return Ok((out, TransformerCache { idx, empty: true, inner: None }));
        }
        let m = idx.len();
        let mut x = Mat::zeros(m, d);
        for (r, &t) in idx.iter().enumerate() {
            let p = positional_encoding(t, d)?;
            for c in 0..d {
                x[(r, c)] = phi[(t, c)] + p[c];
            }
        }
        let (z, ln1) = self.ln1.forward(&x);
        let q = self.wq.forward(&z);
        let k = self.wk.forward(&z);
        let v = self.wv.forward(&z);
        let dh = d / HEADS;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Mat::zeros(m, d);
        let mut attn = Vec::with_capacity(HEADS);
        for h in 0..HEADS {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.columns(cols.start, dh);
            let kh = k.columns(cols.start, dh);
            let vh = v.columns(cols.start, dh);
            let mut a = (qh * kh.transpose()) * scale;
            for r in 0..m {
                let mx = a.row(r).max();
                let mut row = a.row_mut(r);
                row.apply(|s| *s = (*s - mx).exp());
                let sum = row.sum();
                row /= sum;
            }
            o.columns_mut(cols.start, dh).copy_from(&(&a * vh));
            attn.push(a);
        }
        let a_out = self.wo.forward(&o);
        let h1 = &x + &a_out;
        let (z2, ln2) = self.ln2.forward(&h1);
        let f1 = self.ff1.forward(&z2);
        let hf = relu(&f1);
        let f = self.ff2.forward(&hf);
        let delta = &a_out + &f;
        for (r, &t) in idx.iter().enumerate() {
            for c in 0..d {
                out[(t, c)] += delta[(r, c)];
            }
        }
        let inner = Inner { z, ln1, q, k, v, attn, o, z2, ln2, f1, hf };
        Ok((out, TransformerCache { idx, empty: false, inner: Some(Box::new(inner)) }))
    }

    /// Accumulates parameter gradients into `g`; returns the gradient with
    /// respect to `phi`.
    pub fn backward(&self, cache: &TransformerCache, g_out: &Mat, g: &mut TransformerLayer) -> Mat {
        let mut g_phi = g_out.clone();
        let Some(c) = &cache.inner else { return g_phi };
        let d = g_out.ncols();
        let m = cache.idx.len();
        let mut g_delta = Mat::zeros(m, d);
        for (r, &t) in cache.idx.iter().enumerate() {
            g_delta.row_mut(r).copy_from(&g_out.row(t));
        }
        // Feedforward branch.
        let g_hf = self.ff2.backward(&c.hf, &g_delta, &mut g.ff2);
        let g_f1 = relu_backward(&c.f1, &g_hf);
        let g_z2 = self.ff1.backward(&c.z2, &g_f1, &mut g.ff1);
        let g_h1 = self.ln2.backward(&c.ln2, &g_z2, &mut g.ln2);
        // Attention branch: its output feeds both the residual and h1.
        let g_aout = &g_delta + &g_h1;
        let g_o = self.wo.backward(&c.o, &g_aout, &mut g.wo);
        let dh = d / HEADS;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut g_q = Mat::zeros(m, d);
        let mut g_k = Mat::zeros(m, d);
        let mut g_v = Mat::zeros(m, d);
        for h in 0..HEADS {
            let s = h * dh;
            let a = &c.attn[h];
            let g_oh = g_o.columns(s, dh);
            let vh = c.v.columns(s, dh);
            g_v.columns_mut(s, dh).copy_from(&(a.transpose() * g_oh));
            let g_a = g_oh * vh.transpose();
            let mut g_s = Mat::zeros(m, m);
            for r in 0..m {
                let dot: f64 = (0..m).map(|j| a[(r, j)] * g_a[(r, j)]).sum();
                for j in 0..m {
                    g_s[(r, j)] = a[(r, j)] * (g_a[(r, j)] - dot) * scale;
                }
            }
            g_q.columns_mut(s, dh).copy_from(&(&g_s * c.k.columns(s, dh)));
            g_k.columns_mut(s, dh).copy_from(&(g_s.transpose() * c.q.columns(s, dh)));
        }
        let mut g_z = self.wq.backward(&c.z, &g_q, &mut g.wq);
        g_z += self.wk.backward(&c.z, &g_k, &mut g.wk);
        g_z += self.wv.backward(&c.z, &g_v, &mut g.wv);
        let g_x = g_h1 + self.ln1.backward(&c.ln1, &g_z, &mut g.ln1);
        for (r, &t) in cache.idx.iter().enumerate() {
            for col in 0..d {
                g_phi[(t, col)] += g_x[(r, col)];
            }
        }
        g_phi
    }
}

pub struct TransformerCache {
    idx: Vec<usize>,
    /// No valid frame in the window; every output equals its input.
    pub empty: bool,
    inner: Option<Box<Inner>>,
}

impl TransformerCache {
    /// Attention matrices per head, over valid frames in window order.
    pub fn attention(&self) -> Vec<&Mat> {
        self.inner.as_ref().map(|c| c.attn.iter().collect()).unwrap_or_default()
    }
}

struct Inner {
    z: Mat,
    ln1: LnCache,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Vec<Mat>,
    o: Mat,
    z2: Mat,
    ln2: LnCache,
    f1: Mat,
    hf: Mat,
}
