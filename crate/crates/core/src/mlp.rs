//! Fully connected network with SiLU activations, hand-written reverse mode
//! and an Adam optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Layers `sizes[0] -> sizes[1] -> ... -> sizes[n]`, SiLU between layers and
/// a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-parameter gradients, laid out like [`Mlp::layers`].
pub type Grads = Mlp;

pub struct Cache {
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<f64>>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        Mlp {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(sizes);
        for layer in &mut m.layers {
            let (fi, fo) = layer.w.dim();
            let lim = (6.0 / (fi + fo) as f64).sqrt();
            layer.w.mapv_inplace(|_| rng.random_range(-lim..lim));
        }
        m
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    fn locate(&self, mut idx: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if idx < l.w.len() {
                let cols = l.w.ncols();
                return (li, Some((idx / cols, idx % cols)), 0);
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return (li, None, idx);
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `idx` in flat order: per layer, weights row-major then bias.
    pub fn get(&self, idx: usize) -> f64 {
        match self.locate(idx) {
            (l, Some(rc), _) => self.layers[l].w[rc],
            (l, None, j) => self.layers[l].b[j],
        }
    }

    pub fn set(&mut self, idx: usize, v: f64) {
        match self.locate(idx) {
            (l, Some(rc), _) => self.layers[l].w[rc] = v,
            (l, None, j) => self.layers[l].b[j] = v,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.w);
            z += &l.b;
            if i < last {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Cache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.w);
            z += &l.b;
            inputs.push(h);
            if i < last {
                h = z.mapv(silu);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, Cache { inputs, pre })
    }

    /// Gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, cache: &Cache, d_out: Array2<f64>) -> Grads {
        let mut grads = self.zeros_like();
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            let g = &mut grads.layers[i];
            g.w = cache.inputs[i].t().dot(&delta);
            g.b = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].w.t());
                back.zip_mut_with(&cache.pre[i - 1], |d, &z| *d *= silu_grad(z));
                delta = back;
            }
        }
        grads
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub m: Mlp,
    pub v: Mlp,
    pub step: u64,
}

impl Adam {
    pub fn new(model: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            m: model.zeros_like(),
            v: model.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, model: &mut Mlp, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let lr = self.lr;
        let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        };
        for (((layer, g), m), v) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut())
            .zip(self.v.layers.iter_mut())
        {
            ndarray::Zip::from(&mut layer.w)
                .and(&g.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            ndarray::Zip::from(&mut layer.b)
                .and(&g.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::rng_for;
    use ndarray::Array2;

    fn loss(m: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let out = m.forward(x.view());
        (&out - y).mapv(|d| d * d).sum() / out.len() as f64
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_for(3, 0);
        let m = Mlp::init(&[5, 7, 6, 3], &mut rng);
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (out, cache) = m.forward_cached(x.view());
        let d_out = (&out - &y).mapv(|d| 2.0 * d / out.len() as f64);
        let g = m.backward(&cache, d_out).flatten();
        for idx in (0..m.num_params()).step_by(7) {
            let h = 1e-6;
            let mut p = m.clone();
            p.set(idx, m.get(idx) + h);
            let up = loss(&p, &x, &y);
            p.set(idx, m.get(idx) - h);
            let down = loss(&p, &x, &y);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-6 * fd.abs().max(1e-4), "param {idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn flat_indexing_round_trips() {
        let mut rng = rng_for(1, 0);
        let m = Mlp::init(&[3, 4, 2], &mut rng);
        let flat = m.flatten();
        assert_eq!(flat.len(), m.num_params());
        for (i, v) in flat.iter().enumerate() {
            assert_eq!(m.get(i), *v);
        }
        let mut z = m.zeros_like();
        for (i, v) in flat.iter().enumerate() {
            z.set(i, *v);
        }
        assert_eq!(z, m);
    }

    #[test]
    fn forward_cached_matches_forward() {
        let mut rng = rng_for(2, 0);
        let m = Mlp::init(&[6, 8, 8, 6], &mut rng);
        let x = Array2::from_shape_fn((3, 6), |_| rng.random_range(-2.0..2.0));
        assert_eq!(m.forward(x.view()), m.forward_cached(x.view()).0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = Mlp::zeros(&[2, 2]);
        let mut g = m.zeros_like();
        g.layers[0].w[[0, 0]] = 3.0;
        g.layers[0].b[1] = -0.5;
        let mut opt = Adam::new(&m, 1e-3);
        opt.update(&mut m, &g);
        assert!((m.layers[0].w[[0, 0]] + 1e-3).abs() < 1e-9);
        assert!((m.layers[0].b[1] - 1e-3).abs() < 1e-9);
        assert_eq!(m.layers[0].w[[1, 1]], 0.0);
    }
}
