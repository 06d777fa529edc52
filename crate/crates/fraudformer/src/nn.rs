//! Reverse-mode automatic differentiation over dense f64 matrices, plus the
//! composite pieces the classifier needs: causal multi-head attention, layer
//! norm, GELU, sigmoid, dropout, and numerically stable binary cross-entropy.
//!
//! A `Tape` records operations as they execute; `backward` replays the record
//! in reverse, accumulating gradients additively at fan-out points. All math
//! is double precision so the finite-difference harness is meaningful.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// (n,d) plus a (1,d) bias row.
    AddBias(Var, Var),
    AddConst(Var),
    MulElem(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    /// Multiply by a (1,1) node, so the scalar itself can receive gradient.
    ScaleByVar(Var, Var),
    Matmul(Var, Var),
    /// a . b^T without materializing the transpose.
    MatmulTB(Var, Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, tau: Var, beta: Var, eps: f64 },
    Gelu(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    BceWithLogits { logits: Var, targets: Array2<f64> },
}

struct Node {
    op: Op,
    value: Rc<Array2<f64>>,
    needs_grad: bool,
}

/// Gradients from one backward pass, indexed by `Var`.
pub struct Gradients {
    inner: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.inner[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.inner[v.0].take()
    }
}

/// Topologically ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Rc::new(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that will receive gradient. Shares the buffer with the caller.
    pub fn param(&mut self, value: Rc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_owned(&mut self, value: Array2<f64>) -> Var {
        self.param(Rc::new(value))
    }

    /// Leaf excluded from gradient propagation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, needs)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        debug_assert_eq!(self.value(bias).nrows(), 1);
        let v = self.value(x) + self.value(bias);
        let needs = self.needs(x) || self.needs(bias);
        self.push(Op::AddBias(x, bias), v, needs)
    }

    pub fn add_const(&mut self, x: Var, m: Array2<f64>) -> Var {
        let v = self.value(x) + &m;
        let needs = self.needs(x);
        self.push(Op::AddConst(x), v, needs)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MulElem(a, b), v, needs)
    }

    pub fn mul_const(&mut self, x: Var, m: Array2<f64>) -> Var {
        let v = self.value(x) * &m;
        let needs = self.needs(x);
        self.push(Op::MulConst(x, m), v, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        let needs = self.needs(x);
        self.push(Op::Scale(x, c), v, needs)
    }

    pub fn scale_by_var(&mut self, x: Var, s: Var) -> Var {
        debug_assert_eq!(self.value(s).len(), 1);
        let c = self.value(s)[[0, 0]];
        let v = self.value(x) * c;
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::ScaleByVar(x, s), v, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), v, needs)
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatmulTB(a, b), v, needs)
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.nrows(), t.ncols());
        let mut out = Array2::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(Error::Bounds {
                    what: "embedding row".into(),
                    index: i,
                    limit: rows,
                });
            }
            out.row_mut(r).assign(&t.row(i));
        }
        let needs = self.needs(table);
        Ok(self.push(Op::GatherRows(table, indices.to_vec()), out, needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let needs = self.needs(x);
        self.push(Op::SliceRows(x, start, len), v, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let needs = self.needs(x);
        self.push(Op::SliceCols(x, start, len), v, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut c0 = 0;
        let mut needs = false;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), n);
            out.slice_mut(s![.., c0..c0 + v.ncols()]).assign(v);
            c0 += v.ncols();
            needs |= self.needs(p);
        }
        self.push(Op::ConcatCols(parts.to_vec()), out, needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let needs = self.needs(x);
        self.push(Op::SoftmaxRows(x), out, needs)
    }

    /// Row-wise layer norm with population variance:
    /// out = tau * (x - mean) / sqrt(var + eps) + beta.
    pub fn layer_norm_rows(&mut self, x: Var, tau: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols();
        debug_assert_eq!(self.value(tau).ncols(), d);
        debug_assert_eq!(self.value(beta).ncols(), d);
        let tau_row = self.value(tau).row(0).to_owned();
        let beta_row = self.value(beta).row(0).to_owned();
        let mut out = Array2::zeros(xv.raw_dim());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out[[r, c]] = tau_row[c] * (row[c] - mean) * inv + beta_row[c];
            }
        }
        let needs = self.needs(x) || self.needs(tau) || self.needs(beta);
        self.push(Op::LayerNormRows { x, tau, beta, eps }, out, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| {
            0.5 * t * (1.0 + (GELU_C * (t + GELU_A * t.powi(3))).tanh())
        });
        let needs = self.needs(x);
        self.push(Op::Gelu(x), v, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let needs = self.needs(x);
        self.push(Op::Sigmoid(x), v, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let needs = self.needs(x);
        self.push(Op::SumAll(x), v, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        let needs = self.needs(x);
        self.push(Op::MeanAll(x), v, needs)
    }

    /// Mean over entries of the numerically stable BCE:
    /// loss = max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.raw_dim(), targets.raw_dim());
        let mut total = 0.0;
        for (&zi, &yi) in z.iter().zip(targets.iter()) {
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let v = Array2::from_elem((1, 1), total / z.len() as f64);
        let needs = self.needs(logits);
        self.push(Op::BceWithLogits { logits, targets }, v, needs)
    }

    /// Inverted-scale dropout; identity when p = 0. Train-time only.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl rand::Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be below 1");
        let keep = 1.0 - p;
        let mask = self
            .value(x)
            .mapv(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
        self.mul_const(x, mask)
    }

    fn push_grad(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar root. Visits each node once; gradients
    /// accumulate additively where a node fans out.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let root_val = self.value(root);
        assert_eq!(root_val.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[root.0] = Some(Array2::from_elem(root_val.raw_dim(), 1.0));

        for i in (0..n).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    self.push_grad(&mut grads, *a, g.clone());
                    self.push_grad(&mut grads, *b, g);
                }
                Op::AddBias(x, bias) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.push_grad(&mut grads, *x, g);
                    self.push_grad(&mut grads, *bias, db);
                }
                Op::AddConst(x) => self.push_grad(&mut grads, *x, g),
                Op::MulElem(a, b) => {
                    self.push_grad(&mut grads, *a, &g * self.value(*b));
                    self.push_grad(&mut grads, *b, &g * self.value(*a));
                }
                Op::MulConst(x, m) => self.push_grad(&mut grads, *x, &g * m),
                Op::Scale(x, c) => self.push_grad(&mut grads, *x, &g * *c),
                Op::ScaleByVar(x, sc) => {
                    let c = self.value(*sc)[[0, 0]];
                    let ds = Array2::from_elem((1, 1), (&g * self.value(*x)).sum());
                    self.push_grad(&mut grads, *x, &g * c);
                    self.push_grad(&mut grads, *sc, ds);
                }
                Op::Matmul(a, b) => {
                    self.push_grad(&mut grads, *a, g.dot(&self.value(*b).t()));
                    self.push_grad(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatmulTB(a, b) => {
                    self.push_grad(&mut grads, *a, g.dot(self.value(*b)));
                    self.push_grad(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::GatherRows(table, idx) => {
                    let mut dt = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = dt.row_mut(i);
                        row.zip_mut_with(&g.row(r), |a, &b| *a += b);
                    }
                    self.push_grad(&mut grads, *table, dt);
                }
                Op::SliceRows(x, start, len) => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    self.push_grad(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start, len) => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    self.push_grad(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(s![.., c0..c0 + w]).to_owned();
                        self.push_grad(&mut grads, p, gp);
                        c0 += w;
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = self.value(Var(i));
                    let mut dx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            dx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    self.push_grad(&mut grads, *x, dx);
                }
                Op::LayerNormRows { x, tau, beta, eps } => {
                    let xv = self.value(*x);
                    let d = xv.ncols();
                    let tau_row = self.value(*tau).row(0).to_owned();
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dtau = Array2::zeros((1, d));
                    let mut dbeta = Array2::zeros((1, d));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / d as f64;
                        let var =
                            row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..d).map(|c| g[[r, c]] * tau_row[c]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            dx[[r, c]] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                            dtau[[0, c]] += g[[r, c]] * xhat[c];
                            dbeta[[0, c]] += g[[r, c]];
                        }
                    }
                    self.push_grad(&mut grads, *x, dx);
                    self.push_grad(&mut grads, *tau, dtau);
                    self.push_grad(&mut grads, *beta, dbeta);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    dx.zip_mut_with(xv, |gi, &t| {
                        let u = GELU_C * (t + GELU_A * t.powi(3));
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * t * t);
                        *gi *= 0.5 * (1.0 + th) + 0.5 * t * (1.0 - th * th) * du;
                    });
                    self.push_grad(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(i));
                    let dx = &g * &y.mapv(|s| s * (1.0 - s));
                    self.push_grad(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let dx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    self.push_grad(&mut grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let dx = Array2::from_elem(xv.raw_dim(), g[[0, 0]] / xv.len() as f64);
                    self.push_grad(&mut grads, *x, dx);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits);
                    let scale = g[[0, 0]] / z.len() as f64;
                    let mut dz = z.mapv(sigmoid);
                    dz.zip_mut_with(targets, |s, &y| *s = (*s - y) * scale);
                    self.push_grad(&mut grads, *logits, dz);
                }
            }
        }
        Gradients { inner: grads }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scalar stable BCE, the same form the tape op uses.
pub fn bce_scalar(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Additive attention mask: entry (i, j) is 0 when query i may attend to key
/// j (j <= i and j indexes a real token), -inf otherwise. PAD is assumed to
/// be a suffix, so `n_real` is the count of leading real tokens.
pub fn causal_pad_mask(len: usize, n_real: usize) -> Array2<f64> {
    assert!(n_real >= 1 && n_real <= len, "need at least one real token");
    Array2::from_shape_fn((len, len), |(i, j)| {
        if j <= i && j < n_real {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Projection parameters of one attention layer, already on the tape.
pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head scaled dot-product attention with an additive mask, scale
/// 1/sqrt(d/n_heads) per head.
pub fn causal_self_attention(
    tape: &mut Tape,
    x: Var,
    params: &AttnParams,
    n_heads: usize,
    mask: &Array2<f64>,
) -> Result<Var> {
    let d = tape.value(x).ncols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(
            "n_heads",
            format!("d_model {d} is not divisible by {n_heads} heads"),
        ));
    }
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q0 = tape.matmul(x, params.wq);
    let q = tape.add_bias(q0, params.bq);
    let k0 = tape.matmul(x, params.wk);
    let k = tape.add_bias(k0, params.bk);
    let v0 = tape.matmul(x, params.wv);
    let v = tape.add_bias(v0, params.bv);

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dk, dk);
        let kh = tape.slice_cols(k, h * dk, dk);
        let vh = tape.slice_cols(v, h * dk, dk);
        let scores = tape.matmul_tb(qh, kh);
        let scaled = tape.scale(scores, scale);
        let masked = tape.add_const(scaled, mask.clone());
        let weights = tape.softmax_rows(masked);
        heads.push(tape.matmul(weights, vh));
    }
    let ctx = tape.concat_cols(&heads);
    let out0 = tape.matmul(ctx, params.wo);
    Ok(tape.add_bias(out0, params.bo))
}

/// Outcome of one finite-difference verification.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    /// Set when a gradient or difference quotient came out non-finite.
    pub non_finite: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_err <= self.tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate, over every input.
pub fn grad_check<F>(inputs: &[Array2<f64>], tolerance: f64, step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |arrays: &[Array2<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays
            .iter()
            .map(|a| tape.param_owned(a.clone()))
            .collect();
        let root = build(&mut tape, &vars);
        let v = tape.value(root);
        assert_eq!(v.len(), 1, "grad_check target must be scalar");
        v[[0, 0]]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| tape.param_owned(a.clone()))
        .collect();
    let root = build(&mut tape, &vars);
    assert_eq!(tape.value(root).len(), 1, "grad_check target must be scalar");
    let grads = tape.backward(root);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        non_finite: None,
        tolerance,
    };
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ii]);
        for j in 0..input.len() {
            let a = analytic
                .map(|g| g.as_slice().expect("standard layout")[j])
                .unwrap_or(0.0);
            let mut plus: Vec<Array2<f64>> = inputs.to_vec();
            plus[ii].as_slice_mut().expect("standard layout")[j] += step;
            let mut minus: Vec<Array2<f64>> = inputs.to_vec();
            minus[ii].as_slice_mut().expect("standard layout")[j] -= step;
            let n = (eval(&plus) - eval(&minus)) / (2.0 * step);
            if !a.is_finite() || !n.is_finite() {
                report.non_finite = Some((ii, j));
                return report;
            }
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ii, j));
            }
        }
    }
    report
}
