//! Neural-network building blocks on top of the autodiff tape.
//!
//! Parameters live in a [`Params`] registry as plain matrices. A training
//! step stages the registry onto a fresh [`Tape`] (one leaf per parameter),
//! runs the forward graph, calls backward, and hands the collected gradients
//! to [`Adam`]. Inference paths use the `_plain` forwards, which perform the
//! same arithmetic without recording.

use crate::tape::{Grads, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to one matrix inside a [`Params`] registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named collection of trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    mats: Vec<Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mat: Array2<f64>) -> ParamId {
        self.names.push(name.to_string());
        self.mats.push(mat);
        ParamId(self.mats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Total number of scalar entries across all matrices.
    pub fn scalar_count(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.mats.iter())
    }

    /// Replaces every matrix with the same-named entry of `pairs`.
    /// Shapes must match the existing registry.
    pub fn load_named(&mut self, pairs: &[(String, Array2<f64>)]) -> crate::Result<()> {
        for (name, mat) in pairs {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| crate::Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.mats[idx].raw_dim() != mat.raw_dim() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    mat.dim(),
                    self.mats[idx].dim()
                )));
            }
            self.mats[idx] = mat.clone();
        }
        Ok(())
    }

    /// Inserts one leaf per parameter onto `tape`, in registry order.
    pub fn stage(&self, tape: &mut Tape) -> Staged {
        let vars = self.mats.iter().map(|m| tape.leaf(m.clone())).collect();
        Staged { vars }
    }

    /// Flat view of one matrix per id, e.g. for perturbation in tests.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.mats.len()).map(ParamId)
    }
}

/// Tape handles for a staged [`Params`] registry.
pub struct Staged {
    vars: Vec<Var>,
}

impl Staged {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects the gradient of every parameter after a backward pass,
    /// in registry order.
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Vec<Array2<f64>> {
        self.vars.iter().map(|v| grads.wrt(tape, *v)).collect()
    }
}

/// Glorot-uniform initialization: entries from U(−a, a) with
/// a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

/// Elementwise activation at the end of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
}

impl Act {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Tanh => tape.tanh(x),
            Act::Sigmoid => tape.sigmoid(x),
            Act::Relu => tape.relu(x),
        }
    }

    pub fn apply_plain(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Act::Identity => x.clone(),
            Act::Tanh => x.mapv(f64::tanh),
            Act::Sigmoid => x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Act::Relu => x.mapv(|v| v.max(0.0)),
        }
    }
}

/// Fully connected layer: x·W + b.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = params.add(&format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = params.add(&format!("{name}.b"), Array2::zeros((1, fan_out)));
        Dense { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, sp: &Staged, x: Var) -> Var {
        let z = tape.matmul(x, sp.var(self.w));
        tape.add_row(z, sp.var(self.b))
    }

    pub fn forward_plain(&self, params: &Params, x: &Array2<f64>) -> Array2<f64> {
        x.dot(params.get(self.w)) + params.get(self.b)
    }
}

/// Feedforward stack of [`Dense`] layers with a shared hidden activation
/// and a separate output activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden_act: Act,
    pub out_act: Act,
}

impl Mlp {
    /// `sizes` lists layer widths input-first, e.g. `[4, 100, 16]`.
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        sizes: &[usize],
        hidden_act: Act,
        out_act: Act,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = (0..sizes.len() - 1)
            .map(|i| {
                Dense::new(params, rng, &format!("{name}.{i}"), sizes[i], sizes[i + 1])
            })
            .collect();
        Mlp { layers, hidden_act, out_act }
    }

    pub fn forward(&self, tape: &mut Tape, sp: &Staged, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, sp, h);
            let act = if i == last { self.out_act } else { self.hidden_act };
            h = act.apply(tape, h);
        }
        h
    }

    pub fn forward_plain(&self, params: &Params, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(params, &h);
            let act = if i == last { self.out_act } else { self.hidden_act };
            h = act.apply_plain(&h);
        }
        h
    }
}

/// Single-layer LSTM with packed gate weights, order [input, forget, cell,
/// output]. The forget-gate bias starts at 1 so early training does not
/// erase cell state.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl Lstm {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_size: usize,
        hidden_size: usize,
    ) -> Self {
        let w_x = params.add(&format!("{name}.w_x"), xavier(rng, input_size, 4 * hidden_size));
        let w_h = params.add(&format!("{name}.w_h"), xavier(rng, hidden_size, 4 * hidden_size));
        let mut b0 = Array2::zeros((1, 4 * hidden_size));
        for j in hidden_size..2 * hidden_size {
            b0[[0, j]] = 1.0;
        }
        let b = params.add(&format!("{name}.b"), b0);
        Lstm { w_x, w_h, b, input_size, hidden_size }
    }

    /// Runs the cell over `steps` (each B×input) and returns the final
    /// hidden state, B×hidden.
    pub fn forward(&self, tape: &mut Tape, sp: &Staged, steps: &[Var]) -> Var {
        assert!(!steps.is_empty(), "LSTM needs at least one step");
        let batch = tape.value(steps[0]).nrows();
        let hs = self.hidden_size;
        let mut h = tape.leaf(Array2::zeros((batch, hs)));
        let mut c = tape.leaf(Array2::zeros((batch, hs)));
        for &x in steps {
            let zx = tape.matmul(x, sp.var(self.w_x));
            let zh = tape.matmul(h, sp.var(self.w_h));
            let z = tape.add(zx, zh);
            let z = tape.add_row(z, sp.var(self.b));
            let i = tape.slice_cols(z, 0, hs);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(z, hs, 2 * hs);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(z, 2 * hs, 3 * hs);
            let g = tape.tanh(g);
            let o = tape.slice_cols(z, 3 * hs, 4 * hs);
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
        }
        h
    }

    /// Value-only version of [`Lstm::forward`]; `steps` are B×input.
    pub fn forward_plain(&self, params: &Params, steps: &[Array2<f64>]) -> Array2<f64> {
        assert!(!steps.is_empty());
        let batch = steps[0].nrows();
        let hs = self.hidden_size;
        let w_x = params.get(self.w_x);
        let w_h = params.get(self.w_h);
        let b = params.get(self.b);
        let mut h = Array2::zeros((batch, hs));
        let mut c: Array2<f64> = Array2::zeros((batch, hs));
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for x in steps {
            let z = x.dot(w_x) + h.dot(w_h) + b;
            let mut nc = Array2::zeros((batch, hs));
            let mut nh = Array2::zeros((batch, hs));
            for bi in 0..batch {
                for j in 0..hs {
                    let i = sigmoid(z[[bi, j]]);
                    let f = sigmoid(z[[bi, hs + j]]);
                    let g = z[[bi, 2 * hs + j]].tanh();
                    let o = sigmoid(z[[bi, 3 * hs + j]]);
                    let cc = f * c[[bi, j]] + i * g;
                    nc[[bi, j]] = cc;
                    nh[[bi, j]] = o * cc.tanh();
                }
            }
            c = nc;
            h = nh;
        }
        h
    }
}

/// Adam optimizer with bias correction. State vectors parallel the
/// parameter registry.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        let m = params.mats.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let v = params.mats.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update; `grads` must be in registry order (as returned by
    /// [`Staged::grads`]).
    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.mats.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, g) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mi, gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let p = &mut params.mats[idx];
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / b1t;
                let vhat = vi / b2t;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) {
    let total: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
}
