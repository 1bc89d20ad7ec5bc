//! Tape-based reverse-mode differentiation over 2-D `f64` values.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Gradients, ParamId, ParamStore};
use super::{Mask, NnError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskedSoftmax { a: Var },
    MaskedLogSoftmax { a: Var, mask: Option<Rc<Mask>> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    WeightedSum { a: Var, weights: Vec<f64> },
    Sum(Var),
    MeanRows(Var),
    L2NormalizeRows { a: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass. Build it, call [`Graph::backward`], read gradients.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, l: (usize, usize), r: (usize, usize)) -> NnError {
    NnError::ShapeMismatch { op, left: vec![l.0, l.1], right: vec![r.0, r.1] }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a (m×k) · b (k×n)` accumulated into `out`.
pub(crate) fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(row, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `a (m×k) · bᵀ` where `b` is `n×k`, accumulated into `out`.
pub(crate) fn matmul_bt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `aᵀ (k×m)ᵀ · b (m×n)` where `a` is `m×k`, accumulated into `out` (k×n).
pub(crate) fn matmul_at_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av != 0.0 {
                axpy(&mut out[i * n..(i + 1) * n], av, br);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row softmax over allowed entries; forbidden entries get exactly 0.
pub(crate) fn softmax_row(x: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.map_or(true, |m| m[j]);
    let max = (0..x.len()).filter(|&j| ok(j)).map(|j| x[j]).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for j in 0..x.len() {
        out[j] = if ok(j) { (x[j] - max).exp() } else { 0.0 };
        sum += out[j];
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    /// A graph with no parameters, for checks over plain inputs.
    pub fn detached() -> Graph<'static> {
        Graph { store: None, nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Result<Var, NnError> {
        if value.len() != rows * cols {
            return Err(NnError::ShapeMismatch { op: "input", left: vec![rows, cols], right: vec![value.len()] });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var, NnError> {
        self.input(rows, cols, value, false)
    }

    /// Loads a parameter onto the tape (once per graph). Frozen parameters
    /// do not require gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let p = store.get(id);
        let (r, c) = p.value.matrix_dims();
        let value = p.value.data.iter().map(|&x| f64::from(x)).collect();
        let v = self.push(r, c, value, Op::Param, !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(mismatch("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(mismatch("matmul_bt", (m, k), (n, k2)));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(&mut out, self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.dims(a) != self.dims(b) {
            return Err(mismatch("add", self.dims(a), self.dims(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let ((r, c), (r2, c2)) = (self.dims(a), self.dims(row));
        if r2 != 1 || c != c2 {
            return Err(mismatch("add_row", (r, c), (r2, c2)));
        }
        let bias = self.value(row).to_vec();
        let out = self.value(a).chunks(c).flat_map(|x| x.iter().zip(&bias).map(|(p, q)| p + q)).collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(r, c, out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.dims(a) != self.dims(b) {
            return Err(mismatch("mul", self.dims(a), self.dims(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Scale(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            if self.dims(p) != (1, c) {
                return Err(mismatch("layer_norm", (r, c), self.dims(p)));
            }
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let xv = self.value(x);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = (0..r * c).map(|k| xhat[k] * g[k % c] + b[k % c]).collect();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let (v, d) = self.dims(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        let tv = self.value(table);
        for &i in ids {
            if i >= v {
                return Err(NnError::IndexOutOfRange { op: "embedding", index: i, limit: v });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(ids.len(), d, out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NnError> {
        let (r, c) = self.dims(a);
        if start + width > c || width == 0 {
            return Err(mismatch("slice_cols", (r, c), (start, width)));
        }
        let av = self.value(a);
        let out = (0..r).flat_map(|i| av[i * c + start..i * c + start + width].iter().copied()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(r, width, out, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let r = self.dims(parts[0]).0;
        let mut c = 0;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(mismatch("concat_cols", self.dims(parts[0]), self.dims(p)));
            }
            c += self.dims(p).1;
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(mismatch("concat_rows", self.dims(parts[0]), self.dims(p)));
            }
            r += self.dims(p).0;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    fn check_mask(&self, a: Var, mask: Option<&Mask>, op: &'static str) -> Result<(), NnError> {
        if let Some(m) = mask {
            if (m.rows, m.cols) != self.dims(a) {
                return Err(mismatch(op, self.dims(a), (m.rows, m.cols)));
            }
        }
        Ok(())
    }

    /// Row softmax; entries the mask forbids receive weight exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var, NnError> {
        self.check_mask(a, mask, "masked_softmax")?;
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        let av = self.value(a);
        for i in 0..r {
            let allowed = mask.map(|m| &m.allowed[i * c..(i + 1) * c]);
            softmax_row(&av[i * c..(i + 1) * c], allowed, &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, out, Op::MaskedSoftmax { a }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.masked_softmax(a, None).expect("no mask")
    }

    /// Row log-softmax over allowed entries; forbidden entries hold 0 and
    /// pass no gradient.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Option<Rc<Mask>>) -> Result<Var, NnError> {
        self.check_mask(a, mask.as_deref(), "masked_log_softmax")?;
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let ok = |j: usize| mask.as_ref().map_or(true, |m| m.get(i, j));
            let max = (0..c).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max + (0..c).filter(|&j| ok(j)).map(|j| (row[j] - max).exp()).sum::<f64>().ln();
            for j in (0..c).filter(|&j| ok(j)) {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, out, Op::MaskedLogSoftmax { a, mask }, rg))
    }

    /// Mean next-token cross-entropy over rows with `Some(target)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NnError> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(mismatch("cross_entropy", (r, c), (targets.len(), 1)));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(NnError::IndexOutOfRange { op: "cross_entropy", index: t, limit: c });
                }
                let row = &lv[i * c..(i + 1) * c];
                softmax_row(row, None, &mut probs[i * c..(i + 1) * c]);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits]);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg))
    }

    /// `Σ w_ij · a_ij` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var, NnError> {
        if weights.len() != self.value(a).len() {
            return Err(mismatch("weighted_sum", self.dims(a), (weights.len(), 1)));
        }
        let s = dot(self.value(a), &weights);
        let rg = self.rg(&[a]);
        Ok(self.push(1, 1, vec![s], Op::WeightedSum { a, weights }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    /// Column means, `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            axpy(&mut out, 1.0, row);
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        let rg = self.rg(&[a]);
        self.push(1, c, out, Op::MeanRows(a), rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let norms: Vec<f64> = av.chunks(c).map(|row| dot(row, row).sqrt().max(1e-12)).collect();
        let out = (0..r * c).map(|k| av[k] / norms[k / c]).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::L2NormalizeRows { a, norms }, rg)
    }

    /// Back-propagates from a scalar, filling gradients for every node that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(NnError::NotScalar(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                if !trans_b {
                    let n = self.dims(*b).1;
                    if let Some(ga) = self.acc(grads, *a) {
                        matmul_bt_into(ga, gy, bv, m, n, k);
                    }
                    if let Some(gb) = self.acc(grads, *b) {
                        matmul_at_into(gb, av, gy, m, k, n);
                    }
                } else {
                    let n = self.dims(*b).0;
                    if let Some(ga) = self.acc(grads, *a) {
                        matmul_into(ga, gy, bv, m, n, k);
                    }
                    if let Some(gb) = self.acc(grads, *b) {
                        matmul_at_into(gb, gy, av, m, n, k);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        axpy(g, 1.0, gy);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(g) = self.acc(grads, *a) {
                    axpy(g, 1.0, gy);
                }
                if let Some(g) = self.acc(grads, *row) {
                    for chunk in gy.chunks(c) {
                        axpy(g, 1.0, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        g[k] += gy[k] * bv[k];
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        g[k] += gy[k] * av[k];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.acc(grads, *a) {
                    axpy(g, *s, gy);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(g) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        g[k] += gy[k] * gelu_grad(av[k]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).to_vec();
                if let Some(g) = self.acc(grads, *gain) {
                    for k in 0..r * c {
                        g[k % c] += gy[k] * xhat[k];
                    }
                }
                if let Some(g) = self.acc(grads, *bias) {
                    for chunk in gy.chunks(c) {
                        axpy(g, 1.0, chunk);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| gy[i * c + j] * gv[j]).collect();
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dot(&dxhat, xh) / c as f64;
                        for j in 0..c {
                            g[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = c;
                if let Some(g) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut g[id * d..(id + 1) * d], 1.0, &gy[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let ac = self.dims(*a).1;
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..r {
                        axpy(&mut g[i * ac + start..i * ac + start + c], 1.0, &gy[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(g) = self.acc(grads, p) {
                        for i in 0..r {
                            axpy(&mut g[i * pc..(i + 1) * pc], 1.0, &gy[i * c + off..i * c + off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.acc(grads, p) {
                        axpy(g, 1.0, &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::MaskedSoftmax { a } => {
                let y = &node.value;
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &gy[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            g[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax { a, mask } => {
                let y = &node.value;
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..r {
                        let ok = |j: usize| mask.as_ref().map_or(true, |m| m.get(i, j));
                        let s: f64 = (0..c).filter(|&j| ok(j)).map(|j| gy[i * c + j]).sum();
                        for j in (0..c).filter(|&j| ok(j)) {
                            g[i * c + j] += gy[i * c + j] - y[i * c + j].exp() * s;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let lc = self.dims(*logits).1;
                let scale = gy[0] / *count as f64;
                if let Some(g) = self.acc(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..lc {
                                g[i * lc + j] += scale * probs[i * lc + j];
                            }
                            g[i * lc + t] -= scale;
                        }
                    }
                }
            }
            Op::WeightedSum { a, weights } => {
                if let Some(g) = self.acc(grads, *a) {
                    axpy(g, gy[0], weights);
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().for_each(|x| *x += gy[0]);
                }
            }
            Op::MeanRows(a) => {
                let ar = self.dims(*a).0;
                if let Some(g) = self.acc(grads, *a) {
                    for chunk in g.chunks_mut(c) {
                        axpy(chunk, 1.0 / ar as f64, gy);
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &node.value;
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &gy[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            g[i * c + j] += (gr[j] - yr[j] * s) / norms[i];
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects parameter gradients after [`Graph::backward`].
    pub fn param_grads(&self) -> Gradients {
        let n = self.store.map_or(0, ParamStore::len);
        let mut out = Gradients::empty(n);
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out.grads[id.0] = Some(g.to_vec());
            }
        }
        out
    }
}
