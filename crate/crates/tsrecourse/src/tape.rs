//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and
//! accumulates gradients for every node, including leaves. Every value is an
//! `Array2<f64>`; vectors are 1×n rows and scalars are 1×1 matrices.
//!
//! Norm-type nodes (`row_l2`, `relu`, `abs`) are nondifferentiable at
//! isolated points; their backward pass uses the zero subgradient there.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// B×m plus a 1×m bias row broadcast over rows.
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    /// Per-row Euclidean norm, B×m → B×1.
    RowL2(Var),
    /// Per-row sum of squares, B×m → B×1.
    RowSumSq(Var),
    /// Per-row sum, B×m → B×1.
    RowSum(Var),
    /// Sum of all entries → 1×1.
    Sum(Var),
    /// Horizontal concatenation of same-height blocks.
    ConcatCols(Vec<Var>),
    /// Column range [start, end) of the input.
    SliceCols(Var, usize),
    /// out[i] = in[i+1] − in[i], B×m → (B−1)×m.
    DiffRows(Var),
    /// Batched coefficient-matrix × vector contraction:
    /// coefs B×(d·d), x B×d → out B×d with
    /// out[b,i] = Σ_j coefs[b, i·d+j] · x[b,j].
    CoefMatVec(Var, Var),
}

/// Gradient-recording computation tape.
pub struct Tape {
    vals: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `v`.
    /// Zero-filled if `v` did not influence the root.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.vals[v.0].raw_dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.vals[v.0]
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.vals[v.0].dim(), (1, 1));
        self.vals[v.0][[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.vals.push(value);
        self.ops.push(op);
        Var(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// 1×1 constant.
    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.0].mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.0].mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0].dot(&self.vals[b.0]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = &self.vals[a.0] + &self.vals[bias.0];
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn row_l2(&mut self, a: Var) -> Var {
        let rows = self.vals[a.0].nrows();
        let mut v = Array2::zeros((rows, 1));
        for (i, row) in self.vals[a.0].rows().into_iter().enumerate() {
            v[[i, 0]] = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        self.push(v, Op::RowL2(a))
    }

    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let rows = self.vals[a.0].nrows();
        let mut v = Array2::zeros((rows, 1));
        for (i, row) in self.vals[a.0].rows().into_iter().enumerate() {
            v[[i, 0]] = row.iter().map(|x| x * x).sum::<f64>();
        }
        self.push(v, Op::RowSumSq(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let rows = self.vals[a.0].nrows();
        let mut v = Array2::zeros((rows, 1));
        for (i, row) in self.vals[a.0].rows().into_iter().enumerate() {
            v[[i, 0]] = row.sum();
        }
        self.push(v, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.vals[a.0].sum());
        self.push(v, Op::Sum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts must match");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.vals[a.0].ncols());
        let v = self.vals[a.0].slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn diff_rows(&mut self, a: Var) -> Var {
        let x = &self.vals[a.0];
        let n = x.nrows();
        assert!(n >= 2, "diff_rows needs at least 2 rows");
        let v = &x.slice(s![1.., ..]) - &x.slice(s![..n - 1, ..]);
        self.push(v, Op::DiffRows(a))
    }

    pub fn coef_matvec(&mut self, coefs: Var, x: Var) -> Var {
        let c = &self.vals[coefs.0];
        let xv = &self.vals[x.0];
        let (b, d) = xv.dim();
        assert_eq!(c.nrows(), b, "coef_matvec: batch sizes must match");
        assert_eq!(c.ncols(), d * d, "coef_matvec: coefs must be B×(d·d)");
        let mut out = Array2::zeros((b, d));
        for bi in 0..b {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += c[[bi, i * d + j]] * xv[[bi, j]];
                }
                out[[bi, i]] = acc;
            }
        }
        self.push(out, Op::CoefMatVec(coefs, x))
    }

    /// Reverse pass from a 1×1 root node. Consumes nothing; the tape can keep
    /// growing afterwards, but gradients reflect the graph up to `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.vals[root.0].dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * &self.vals[b.0]);
                    accumulate(&mut grads, *b, &g * &self.vals[a.0]);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.mapv(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.vals[b.0].t()));
                    accumulate(&mut grads, *b, self.vals[a.0].t().dot(&g));
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *a, g.clone());
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Tanh(a) => {
                    let y = &self.vals[idx];
                    accumulate(&mut grads, *a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(a) => {
                    let y = &self.vals[idx];
                    accumulate(&mut grads, *a, &g * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Relu(a) => {
                    let mask = self.vals[a.0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Abs(a) => {
                    let sgn = self.vals[a.0].mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, &g * &sgn);
                }
                Op::RowL2(a) => {
                    let x = &self.vals[a.0];
                    let norms = &self.vals[idx];
                    let mut ga = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let n = norms[[i, 0]];
                        if n > 0.0 {
                            let scale = g[[i, 0]] / n;
                            for j in 0..x.ncols() {
                                ga[[i, j]] = scale * x[[i, j]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSumSq(a) => {
                    let x = &self.vals[a.0];
                    let mut ga = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let gi = 2.0 * g[[i, 0]];
                        for j in 0..x.ncols() {
                            ga[[i, j]] = gi * x[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let x = &self.vals[a.0];
                    let mut ga = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        for j in 0..x.ncols() {
                            ga[[i, j]] = g[[i, 0]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.vals[a.0].raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.vals[p.0].ncols();
                        let gp = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.vals[a.0].raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::DiffRows(a) => {
                    let n = self.vals[a.0].nrows();
                    let mut ga = Array2::zeros(self.vals[a.0].raw_dim());
                    for i in 0..n - 1 {
                        for j in 0..self.vals[a.0].ncols() {
                            ga[[i + 1, j]] += g[[i, j]];
                            ga[[i, j]] -= g[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CoefMatVec(coefs, x) => {
                    let c = &self.vals[coefs.0];
                    let xv = &self.vals[x.0];
                    let (b, d) = xv.dim();
                    let mut gc = Array2::zeros(c.raw_dim());
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for bi in 0..b {
                        for i in 0..d {
                            let gi = g[[bi, i]];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                gc[[bi, i * d + j]] += gi * xv[[bi, j]];
                                gx[[bi, j]] += gi * c[[bi, i * d + j]];
                            }
                        }
                    }
                    accumulate(&mut grads, *coefs, gc);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Grads { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.5..1.5))
    }

    /// Central finite differences of `f` at `x0`, one entry at a time.
    fn fd_grad(
        f: &mut dyn FnMut(&Array2<f64>) -> f64,
        x0: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x0.raw_dim());
        let mut x = x0.clone();
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let orig = x[[r, c]];
            x[[r, c]] = orig + h;
            let fp = f(&x);
            x[[r, c]] = orig - h;
            let fm = f(&x);
            x[[r, c]] = orig;
            g[[r, c]] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
        a.iter()
            .zip(n.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    /// Every op appears in this composite graph; FD must agree with the tape.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = rand_mat(&mut rng, 4, 3);
        let b0 = rand_mat(&mut rng, 3, 5);
        let bias0 = rand_mat(&mut rng, 1, 5);
        let c0 = rand_mat(&mut rng, 4, 9);
        let x0 = rand_mat(&mut rng, 4, 3);

        let eval = |a: &Array2<f64>,
                    b: &Array2<f64>,
                    bias: &Array2<f64>,
                    c: &Array2<f64>,
                    x: &Array2<f64>|
         -> (f64, Option<(Grads, Tape, [Var; 5])>) {
            let mut t = Tape::new();
            let va = t.leaf(a.clone());
            let vb = t.leaf(b.clone());
            let vbias = t.leaf(bias.clone());
            let vc = t.leaf(c.clone());
            let vx = t.leaf(x.clone());

            let mm = t.matmul(va, vb);
            let biased = t.add_row(mm, vbias);
            let th = t.tanh(biased);
            let sg = t.sigmoid(biased);
            let prod = t.mul(th, sg);
            let rl = t.relu(prod);
            let n1 = t.row_l2(rl);
            let s1 = t.sum(n1);

            let cmv = t.coef_matvec(vc, vx);
            let d = t.diff_rows(cmv);
            let n2 = t.row_sum_sq(d);
            let s2 = t.sum(n2);

            let ab = t.abs(va);
            let rs = t.row_sum(ab);
            let s3 = t.sum(rs);

            let cat = t.concat_cols(&[cmv, vx]);
            let sl = t.slice_cols(cat, 1, 5);
            let n3 = t.row_l2(sl);
            let s4 = t.sum(n3);

            let sc = t.scale(s1, 0.7);
            let shifted = t.add_scalar(s2, 0.11);
            let t1 = t.add(sc, shifted);
            let t2 = t.sub(t1, s3);
            let total = t.add(t2, s4);
            let val = t.scalar(total);
            let grads = t.backward(total);
            (val, Some((grads, t, [va, vb, vbias, vc, vx])))
        };

        let (_, parts) = eval(&a0, &b0, &bias0, &c0, &x0);
        let (grads, tape, vars) = parts.unwrap();

        let inputs: [&Array2<f64>; 5] = [&a0, &b0, &bias0, &c0, &x0];
        for (i, x_in) in inputs.iter().enumerate() {
            let mut f = |xp: &Array2<f64>| {
                let mut args: Vec<Array2<f64>> =
                    inputs.iter().map(|m| (*m).clone()).collect();
                args[i] = xp.clone();
                eval(&args[0], &args[1], &args[2], &args[3], &args[4]).0
            };
            let num = fd_grad(&mut f, x_in, 1e-5);
            let ana = grads.wrt(&tape, vars[i]);
            let err = max_rel_err(&ana, &num);
            assert!(err < 1e-6, "input {i}: max rel err {err}");
        }
    }

    #[test]
    fn row_l2_zero_row_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::zeros((2, 3)));
        let n = t.row_l2(a);
        let s = t.sum(n);
        let g = t.backward(s);
        assert_eq!(g.wrt(&t, a), Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn gradient_accumulates_over_shared_nodes() {
        // f = sum(a ⊙ a) has gradient 2a via the two Mul branches.
        let mut t = Tape::new();
        let a = t.leaf(Array2::from_elem((1, 2), 3.0));
        let m = t.mul(a, a);
        let s = t.sum(m);
        let g = t.backward(s);
        assert_eq!(g.wrt(&t, a), Array2::<f64>::from_elem((1, 2), 6.0));
    }
}
