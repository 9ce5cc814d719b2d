//! Fully connected networks over a flat parameter vector, with hand-written
//! reverse-mode gradients for both the parameters and the input.
//!
//! Parameter order: for each layer in turn, the weight matrix (row-major,
//! `out x in`) followed by the bias vector. Hidden layers use softplus; the
//! output layer is linear. Hidden pre-activations may be modulated as
//! `gain * h + shift` with gain/shift read from the same parameter vector.

use rand::Rng as _;

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    num_params: usize,
}

/// Per-hidden-layer gain/shift vectors: `offsets[l]` locates layer `l`'s
/// gain and shift inside `values`.
#[derive(Debug, Clone, Copy)]
pub struct Modulation<'a> {
    pub values: &'a [f64],
    pub offsets: &'a [(usize, usize)],
}

#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Layer inputs: `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Raw hidden pre-activations `W a + b`.
    raw: Vec<Vec<f64>>,
    /// Modulated hidden pre-activations (softplus arguments).
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl MlpLayout {
    /// `sizes` = input, hidden widths..., output.
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|s| *s > 0), "invalid layer sizes");
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for w in sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        Self {
            sizes,
            offsets,
            num_params: off,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Offset of layer `l`'s weight matrix.
    pub fn weight_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    /// Offset of layer `l`'s bias vector.
    pub fn bias_offset(&self, l: usize) -> usize {
        self.offsets[l] + self.sizes[l] * self.sizes[l + 1]
    }

    /// Glorot-uniform weights, zero biases, written into `theta[..num_params]`.
    pub fn init(&self, theta: &mut [f64], rng: &mut Rng) {
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = self.weight_offset(l);
            for v in &mut theta[w..w + fan_in * fan_out] {
                *v = rng.random_range(-limit..limit);
            }
            let b = self.bias_offset(l);
            theta[b..b + fan_out].fill(0.0);
        }
    }

    pub fn forward(&self, theta: &[f64], x: &[f64], modulation: Option<Modulation>) -> ForwardCache {
        let mut cache = ForwardCache::default();
        self.forward_into(theta, x, modulation, &mut cache);
        cache
    }

    /// Forward pass reusing the buffers of `cache`.
    pub fn forward_into(
        &self,
        theta: &[f64],
        x: &[f64],
        modulation: Option<Modulation>,
        cache: &mut ForwardCache,
    ) {
        debug_assert_eq!(x.len(), self.input_dim());
        let hidden = self.num_layers() - 1;
        cache.acts.resize_with(hidden + 1, Vec::new);
        cache.raw.resize_with(hidden, Vec::new);
        cache.pre.resize_with(hidden, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &theta[self.weight_offset(l)..self.weight_offset(l) + n_in * n_out];
            let b = &theta[self.bias_offset(l)..self.bias_offset(l) + n_out];
            let input = &cache.acts[l];
            let mut z: Vec<f64> = Vec::with_capacity(n_out);
            for (row, bias) in w.chunks_exact(n_in).zip(b) {
                z.push(bias + dot(row, input));
            }
            if l == hidden {
                cache.output = z;
                break;
            }
            let mut pre = z.clone();
            if let Some(m) = modulation {
                let (g, s) = m.offsets[l];
                for ((p, gain), shift) in pre.iter_mut().zip(&m.values[g..g + n_out]).zip(&m.values[s..s + n_out]) {
                    *p = gain * *p + shift;
                }
            }
            let act = &mut cache.acts[l + 1];
            act.clear();
            act.extend(pre.iter().map(|v| softplus(*v)));
            cache.raw[l] = z;
            cache.pre[l] = pre;
        }
    }

    /// Backpropagates `grad_out` (dLoss/dOutput) through a cached forward pass.
    ///
    /// Parameter gradients are accumulated into `grad_theta` and modulation
    /// gradients into `grad_mod` (indexed like `Modulation::values`) when
    /// given; the gradient with respect to the network input is returned.
    pub fn backward(
        &self,
        theta: &[f64],
        cache: &ForwardCache,
        grad_out: &[f64],
        modulation: Option<Modulation>,
        mut grad_theta: Option<&mut [f64]>,
        mut grad_mod: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let mut delta = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < self.num_layers() {
                // delta currently holds dL/d(act of layer l); move to dL/d(raw).
                let pre = &cache.pre[l];
                for (d, p) in delta.iter_mut().zip(pre) {
                    *d *= sigmoid(*p);
                }
                if let Some(m) = modulation {
                    let (g, s) = m.offsets[l];
                    if let Some(gm) = grad_mod.as_deref_mut() {
                        for (i, d) in delta.iter().enumerate() {
                            gm[g + i] += d * cache.raw[l][i];
                            gm[s + i] += d;
                        }
                    }
                    for (d, gain) in delta.iter_mut().zip(&m.values[g..g + n_out]) {
                        *d *= gain;
                    }
                }
            }
            let w_off = self.weight_offset(l);
            let w = &theta[w_off..w_off + n_in * n_out];
            let input = &cache.acts[l];
            if let Some(gt) = grad_theta.as_deref_mut() {
                let gw = &mut gt[w_off..w_off + n_in * n_out];
                for (row, d) in gw.chunks_exact_mut(n_in).zip(&delta) {
                    if *d != 0.0 {
                        axpy(*d, input, row);
                    }
                }
                let b_off = self.bias_offset(l);
                for (gb, d) in gt[b_off..b_off + n_out].iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            let mut next = vec![0.0; n_in];
            for (row, d) in w.chunks_exact(n_in).zip(&delta) {
                if *d != 0.0 {
                    axpy(*d, row, &mut next);
                }
            }
            delta = next;
        }
        delta
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
