//! Residual MLP `f(t, ξ)` used as the learned feedback law, with exact
//! reverse-mode gradients.
//!
//! ```text
//! h_0     = W_in [t, ξ] + b_in
//! h_{k+1} = h_k + W2_k elu(W1_k h_k + b1_k) + b2_k      (k = 0..blocks)
//! f       = W_out h_blocks + b_out
//! ```
//!
//! Parameters live in one flat vector. Layer order is `input`,
//! `block{k}.first`, `block{k}.second` for each block, then `output`; each
//! layer stores its weight (row-major, `out × in`) followed by its bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `n + 1`: time followed by the state.
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }
}

impl Architecture {
    pub const DEFAULT_WIDTH: usize = 32;
    pub const DEFAULT_BLOCKS: usize = 3;

    /// Three residual blocks of width 32 for an `n`-state, `m`-input system.
    pub fn standard(n: usize, m: usize) -> Self {
        Architecture {
            input_dim: n + 1,
            output_dim: m,
            width: Self::DEFAULT_WIDTH,
            blocks: Self::DEFAULT_BLOCKS,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::with_capacity(2 * self.blocks + 2);
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            out.push(LayerSpec {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * (cols + 1);
        };
        push("input".into(), self.width, self.input_dim);
        for k in 0..self.blocks {
            push(format!("block{k}.first"), self.width, self.width);
            push(format!("block{k}.second"), self.width, self.width);
        }
        push("output".into(), self.output_dim, self.width);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.output_dim == 0 || self.width == 0 {
            return Err(Error::invalid(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: Architecture,
    layers: Vec<LayerSpec>,
    values: Vec<f64>,
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Activations kept for the backward pass of one row.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// `blocks + 1` hidden states of length `width`.
    hidden: Vec<Vec<f64>>,
    /// Pre-activations of each block's first layer.
    pre: Vec<Vec<f64>>,
    /// `elu(pre)`
    act: Vec<Vec<f64>>,
    out: Vec<f64>,
}

/// One regression row: time, bridge state and target control.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub t: f64,
    pub state: Vec<f64>,
    pub control: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        let count = arch.param_count();
        Ok(MlpParams {
            arch,
            layers,
            values: vec![0.0; count],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: rand::Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for layer in p.layers.clone() {
            let limit = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            for w in &mut p.values[layer.offset..layer.offset + layer.weight_len()] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(Error::dim(format!(
                "architecture needs {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        p.values = values;
        Ok(p)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn state_dim(&self) -> usize {
        self.arch.input_dim - 1
    }

    pub fn control_dim(&self) -> usize {
        self.arch.output_dim
    }

    fn affine(&self, layer: &LayerSpec, x: &[f64], out: &mut [f64]) {
        let w = &self.values[layer.offset..layer.bias_offset()];
        let b = &self.values[layer.bias_offset()..layer.offset + layer.len()];
        for ((o, row), bias) in out.iter_mut().zip(w.chunks_exact(layer.cols)).zip(b) {
            *o = bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
    }

    /// Evaluates the network on `[t, ξ]`, keeping activations in `cache`.
    pub fn forward_cached<'c>(&self, t: f64, xi: &[f64], cache: &'c mut ForwardCache) -> &'c [f64] {
        let (w, nb) = (self.arch.width, self.arch.blocks);
        debug_assert_eq!(xi.len() + 1, self.arch.input_dim);
        cache.input.clear();
        cache.input.push(t);
        cache.input.extend_from_slice(xi);
        cache.hidden.resize(nb + 1, Vec::new());
        cache.pre.resize(nb, Vec::new());
        cache.act.resize(nb, Vec::new());
        for v in cache.hidden.iter_mut().chain(&mut cache.pre).chain(&mut cache.act) {
            v.resize(w, 0.0);
        }
        cache.out.resize(self.arch.output_dim, 0.0);

        self.affine(&self.layers[0], &cache.input, &mut cache.hidden[0]);
        for k in 0..nb {
            self.affine(&self.layers[1 + 2 * k], &cache.hidden[k], &mut cache.pre[k]);
            for (a, p) in cache.act[k].iter_mut().zip(&cache.pre[k]) {
                *a = elu(*p);
            }
            let (done, rest) = cache.hidden.split_at_mut(k + 1);
            let next = &mut rest[0];
            self.affine(&self.layers[2 + 2 * k], &cache.act[k], next);
            for (n, h) in next.iter_mut().zip(&done[k]) {
                *n += h;
            }
        }
        self.affine(&self.layers[1 + 2 * nb], &cache.hidden[nb], &mut cache.out);
        &cache.out
    }

    pub fn forward(&self, t: f64, xi: &[f64]) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(t, xi, &mut cache).to_vec()
    }

    /// Accumulates `d loss / d params` for one row given `d loss / d output`.
    fn backward(&self, cache: &ForwardCache, dout: &[f64], grad: &mut [f64], dh: &mut Vec<f64>, tmp: &mut Vec<f64>) {
        let (w, nb) = (self.arch.width, self.arch.blocks);
        dh.clear();
        dh.resize(w, 0.0);
        tmp.clear();
        tmp.resize(w, 0.0);

        let out_layer = &self.layers[1 + 2 * nb];
        accumulate_affine(out_layer, &self.values, dout, &cache.hidden[nb], grad, Some(dh));
        for k in (0..nb).rev() {
            // second layer: input act[k], output gradient dh
            let second = &self.layers[2 + 2 * k];
            tmp.iter_mut().for_each(|v| *v = 0.0);
            accumulate_affine(second, &self.values, dh, &cache.act[k], grad, Some(tmp));
            for (g, p) in tmp.iter_mut().zip(&cache.pre[k]) {
                *g *= elu_grad(*p);
            }
            // first layer adds its input gradient onto the skip path
            let first = &self.layers[1 + 2 * k];
            let dpre = std::mem::take(tmp);
            accumulate_affine(first, &self.values, &dpre, &cache.hidden[k], grad, Some(dh));
            *tmp = dpre;
        }
        accumulate_affine(&self.layers[0], &self.values, dh, &cache.input, grad, None);
    }

    /// Mean squared error `(1/B) Σ |f(t, ξ) - u|²` and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[BatchRow]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.values.len()];
        let mut cache = ForwardCache::default();
        let (mut dh, mut tmp) = (Vec::new(), Vec::new());
        let mut dout = vec![0.0; self.arch.output_dim];
        let mut loss = 0.0;
        for row in batch {
            if row.state.len() + 1 != self.arch.input_dim || row.control.len() != self.arch.output_dim {
                return Err(Error::dim("batch row does not match the network shape"));
            }
            let out = self.forward_cached(row.t, &row.state, &mut cache);
            for ((d, o), u) in dout.iter_mut().zip(out).zip(&row.control) {
                let r = o - u;
                loss += r * r * scale;
                *d = 2.0 * r * scale;
            }
            self.backward(&cache, &dout, &mut grad, &mut dh, &mut tmp);
        }
        Ok((loss, grad))
    }
}

/// For `y = W x + b` with upstream gradient `dy`: adds `dy x'` to the weight
/// gradient, `dy` to the bias gradient and, when requested, `W' dy` to `dx`.
fn accumulate_affine(
    layer: &LayerSpec,
    values: &[f64],
    dy: &[f64],
    x: &[f64],
    grad: &mut [f64],
    dx: Option<&mut Vec<f64>>,
) {
    let wg = &mut grad[layer.offset..layer.offset + layer.weight_len()];
    for (row, d) in wg.chunks_exact_mut(layer.cols).zip(dy) {
        for (g, xv) in row.iter_mut().zip(x) {
            *g += d * xv;
        }
    }
    let bg = &mut grad[layer.bias_offset()..layer.offset + layer.len()];
    for (g, d) in bg.iter_mut().zip(dy) {
        *g += d;
    }
    if let Some(dx) = dx {
        let w = &values[layer.offset..layer.bias_offset()];
        for (row, d) in w.chunks_exact(layer.cols).zip(dy) {
            for (acc, wv) in dx.iter_mut().zip(row) {
                *acc += d * wv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> Architecture {
        Architecture {
            input_dim: 3,
            output_dim: 2,
            width: 4,
            blocks: 3,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(Architecture::standard(2, 1)).unwrap();
        assert_eq!(p.forward(0.3, &[1.0, -4.0]), vec![0.0]);
        assert_eq!(p.forward(0.9, &[100.0, 7.0]), vec![0.0]);
    }

    #[test]
    fn output_shape_and_determinism() {
        let arch = Architecture::standard(8, 4);
        let p = MlpParams::init(arch, &mut rng::stream(1, rng::INIT_WEIGHTS)).unwrap();
        let xi = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let a = p.forward(0.5, &xi);
        let b = p.forward(0.5, &xi);
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert_eq!(arch.param_count(), 32 * 10 + 3 * 2 * (32 * 33) + 4 * 33);
    }

    #[test]
    fn duplicated_rows_average_out() {
        let p = MlpParams::init(small(), &mut rng::stream(2, rng::INIT_WEIGHTS)).unwrap();
        let row = BatchRow {
            t: 0.4,
            state: vec![0.5, -1.0],
            control: vec![1.0, 2.0],
        };
        let (l1, g1) = p.loss_and_grad(std::slice::from_ref(&row)).unwrap();
        let (l3, g3) = p.loss_and_grad(&[row.clone(), row.clone(), row]).unwrap();
        assert!((l1 - l3).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((a - b).abs() <= 1e-13 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let p = MlpParams::zeros(small()).unwrap();
        assert!(p.loss_and_grad(&[]).is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let layers = small().layers();
        assert_eq!(layers[0].name, "input");
        assert_eq!(layers.last().unwrap().name, "output");
        let mut off = 0;
        for l in &layers {
            assert_eq!(l.offset, off);
            off += l.len();
        }
        assert_eq!(off, small().param_count());
    }
}
