//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Values are computed
//! eagerly; [`Graph::backward`] replays the record in reverse exactly once and
//! accumulates parameter gradients into a [`ParamStore`].

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::{
    gelu_grad_scalar, gelu_scalar, layer_norm_slice, log_softmax_rows_slice, matmul,
    matmul_nt, matmul_tn_acc, softmax_rows_slice,
};
use crate::numerics::{ParamId, ParamStore, Tensor};

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    index: usize,
}

/// One parameter read: which array and which block of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamAccess {
    pub id: ParamId,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        access: ParamAccess,
        src_cols: usize,
        trainable: bool,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Scores {
        q: Var,
        k: Var,
        groups: usize,
    },
    Apply {
        p: Var,
        v: Var,
        groups: usize,
    },
    SliceCols(Var, Range<usize>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mse(Var, Var),
    SoftCrossEntropy(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Graph {
    id: usize,
    nodes: Vec<Node>,
    adjoints: Option<Vec<Option<Vec<f64>>>>,
    macs: u64,
    accesses: Vec<ParamAccess>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => {
            let c = *s.last().unwrap();
            (s.iter().product::<usize>() / c, c)
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            adjoints: None,
            macs: 0,
            accesses: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.index]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable is not recorded on this graph".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matrix products so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    /// Every parameter block read, in order.
    pub fn param_accesses(&self) -> &[ParamAccess] {
        &self.accesses
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar() on a non-scalar");
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Constant (non-parameter) input.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn input_raw(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return shape_err(format!("shape {:?} vs {} values", shape, value.len()));
        }
        Ok(self.push(shape, value, Op::Leaf))
    }

    /// Whole parameter array.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = rows_cols(t.shape());
        self.param_block_inner(store, id, 0..r, 0..c, t.shape().to_vec())
            .expect("full block is in range")
    }

    /// Rectangular block of a 2-D parameter.
    pub fn param_block(
        &mut self,
        store: &ParamStore,
        id: ParamId,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Result<Var> {
        let shape = vec![rows.len(), cols.len()];
        self.param_block_inner(store, id, rows, cols, shape)
    }

    /// Contiguous range of a 1-D parameter.
    pub fn param_range(&mut self, store: &ParamStore, id: ParamId, range: Range<usize>) -> Result<Var> {
        let shape = vec![range.len()];
        self.param_block_inner(store, id, 0..1, range, shape)
    }

    fn param_block_inner(
        &mut self,
        store: &ParamStore,
        id: ParamId,
        rows: Range<usize>,
        cols: Range<usize>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let t = store.get(id);
        let (r, c) = rows_cols(t.shape());
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return shape_err(format!(
                "block rows {:?} cols {:?} outside parameter {} of shape {:?}",
                rows,
                cols,
                store.name(id),
                t.shape()
            ));
        }
        let data = t.data();
        let mut value = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            value.extend_from_slice(&data[i * c + cols.start..i * c + cols.end]);
        }
        let access = ParamAccess { id, rows, cols };
        self.accesses.push(access.clone());
        Ok(self.push(
            shape,
            value,
            Op::Param {
                access,
                src_cols: c,
                trainable: t.requires_grad(),
            },
        ))
    }

    /// Row gather: output row `i` is row `rows[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        self.check(src)?;
        let (r, c) = rows_cols(self.shape(src));
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return shape_err(format!("gather row {bad} out of range for {r} rows"));
        }
        let sv = self.value(src);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            value.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            vec![rows.len(), c],
            value,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let value = matmul(self.value(a), self.value(b), m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Add(a, b)))
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (_, c) = rows_cols(self.shape(x));
        if self.value(bias).len() != c {
            return shape_err(format!(
                "row bias of length {} for {} columns",
                self.value(bias).len(),
                c
            ));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Scale(x, s))
    }

    /// Adds a constant (no gradient flows to it).
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        self.check(x)?;
        if c.len() != self.value(x).len() {
            return shape_err("add_const length mismatch");
        }
        let value = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::AddConst(x)))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        self.check(x)?;
        if c.len() != self.value(x).len() {
            return shape_err("mul_const length mismatch");
        }
        let value = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::MulConst(x, c)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, c) = rows_cols(self.shape(x));
        let value = softmax_rows_slice(self.value(x), c);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Softmax(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let (_, d) = rows_cols(self.shape(x));
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err(format!("layer_norm feature size {d} vs gain/bias"));
        }
        let ln = layer_norm_slice(self.value(x), d, self.value(gain), self.value(bias));
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            ln.out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: ln.normalized,
                inv_std: ln.inv_std,
            },
        ))
    }

    /// Grouped `Q_g · K_gᵀ`: `q` and `k` are `(groups·n)×e`, output is `(groups·n)×n`.
    pub fn grouped_scores(&mut self, q: Var, k: Var, groups: usize) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        let (rq, e) = rows_cols(self.shape(q));
        let (rk, e2) = rows_cols(self.shape(k));
        if rq != rk || e != e2 || groups == 0 || rq % groups != 0 {
            return shape_err(format!(
                "grouped scores {:?} vs {:?} in {groups} groups",
                self.shape(q),
                self.shape(k)
            ));
        }
        let n = rq / groups;
        let mut value = Vec::with_capacity(rq * n);
        for g in 0..groups {
            let qg = &self.value(q)[g * n * e..(g + 1) * n * e];
            let kg = &self.value(k)[g * n * e..(g + 1) * n * e];
            value.extend(matmul_nt(qg, kg, n, e, n));
        }
        self.macs += (groups * n * n * e) as u64;
        Ok(self.push(vec![rq, n], value, Op::Scores { q, k, groups }))
    }

    /// Grouped `P_g · V_g`: `p` is `(groups·n)×n`, `v` is `(groups·n)×e`.
    pub fn grouped_apply(&mut self, p: Var, v: Var, groups: usize) -> Result<Var> {
        self.check(p)?;
        self.check(v)?;
        let (rp, n) = rows_cols(self.shape(p));
        let (rv, e) = rows_cols(self.shape(v));
        if rp != rv || groups == 0 || rp != groups * n {
            return shape_err(format!(
                "grouped apply {:?} vs {:?} in {groups} groups",
                self.shape(p),
                self.shape(v)
            ));
        }
        let mut value = Vec::with_capacity(rv * e);
        for g in 0..groups {
            let pg = &self.value(p)[g * n * n..(g + 1) * n * n];
            let vg = &self.value(v)[g * n * e..(g + 1) * n * e];
            value.extend(matmul(pg, vg, n, n, e));
        }
        self.macs += (groups * n * n * e) as u64;
        Ok(self.push(vec![rv, e], value, Op::Apply { p, v, groups }))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        self.check(x)?;
        let (r, c) = rows_cols(self.shape(x));
        if cols.end > c || cols.start > cols.end {
            return shape_err(format!("column slice {cols:?} of {c} columns"));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            value.extend_from_slice(&xv[i * c + cols.start..i * c + cols.end]);
        }
        Ok(self.push(vec![r, cols.len()], value, Op::SliceCols(x, cols)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let (r, _) = rows_cols(self.shape(first));
        let widths: Vec<usize> = parts.iter().map(|&p| rows_cols(self.shape(p)).1).collect();
        if parts.iter().any(|&p| rows_cols(self.shape(p)).0 != r) {
            return shape_err("concat_cols row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mse {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).len() as f64;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(vec![], vec![s], Op::Mse(a, b)))
    }

    /// Batch mean of `−Σ_c softmax(teacher)_c · log softmax(student)_c`.
    pub fn soft_cross_entropy(&mut self, student: Var, teacher: Var) -> Result<Var> {
        self.check(student)?;
        self.check(teacher)?;
        if self.shape(student) != self.shape(teacher) {
            return shape_err(format!(
                "soft cross-entropy {:?} vs {:?}",
                self.shape(student),
                self.shape(teacher)
            ));
        }
        let (b, c) = rows_cols(self.shape(student));
        if c < 2 {
            return shape_err("soft cross-entropy needs at least 2 classes");
        }
        let logq = log_softmax_rows_slice(self.value(student), c);
        let p = softmax_rows_slice(self.value(teacher), c);
        let s = -p.iter().zip(&logq).map(|(pi, li)| pi * li).sum::<f64>() / b as f64;
        Ok(self.push(vec![], vec![s], Op::SoftCrossEntropy(student, teacher)))
    }

    /// Mean negative log-probability of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (b, c) = rows_cols(self.shape(logits));
        if labels.len() != b {
            return shape_err(format!("{} labels for {} rows", labels.len(), b));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let logq = log_softmax_rows_slice(self.value(logits), c);
        let s = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logq[i * c + l])
            .sum::<f64>()
            / b as f64;
        Ok(self.push(vec![], vec![s], Op::CrossEntropy(logits, labels.to_vec())))
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v).ok()?;
        self.adjoints.as_ref()?[v.index].as_deref()
    }

    /// Reverse sweep from a scalar loss. Parameter gradients are summed into
    /// the store's existing buffers; nothing is zeroed. A graph can be swept
    /// only once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.check(loss)?;
        if self.adjoints.is_some() {
            return Err(Error::Tape("backward already ran on this recording".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut adj, store);
            adj[idx] = Some(dy);
        }
        self.adjoints = Some(adj);
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        dy: &[f64],
        adj: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = nodes[v.index].value.len();
            let slot = adj[v.index].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param {
                access,
                src_cols,
                trainable,
            } => {
                if *trainable {
                    let g = store.get_mut(access.id).grad_mut();
                    let w = access.cols.len();
                    for (bi, i) in access.rows.clone().enumerate() {
                        let dst = &mut g[i * src_cols + access.cols.start..i * src_cols + access.cols.end];
                        add_into(dst, &dy[bi * w..(bi + 1) * w]);
                    }
                }
            }
            Op::Gather { src, rows } => {
                let c = rows_cols(&node.shape).1;
                acc(*src, &mut |g| {
                    for (o, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &dy[o * c..(o + 1) * c]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.index].shape);
                let n = rows_cols(&node.shape).1;
                let bv = &nodes[b.index].value;
                let av = &nodes[a.index].value;
                let da = matmul_nt(dy, bv, m, n, k);
                acc(*a, &mut |g| add_into(g, &da));
                acc(*b, &mut |g| matmul_tn_acc(av, dy, g, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::AddRow(x, bias) => {
                let c = rows_cols(&node.shape).1;
                acc(*x, &mut |g| add_into(g, dy));
                acc(*bias, &mut |g| {
                    for row in dy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                for (gv, d) in g.iter_mut().zip(dy) {
                    *gv += d * s;
                }
            }),
            Op::AddConst(x) => acc(*x, &mut |g| add_into(g, dy)),
            Op::MulConst(x, c) => acc(*x, &mut |g| {
                for ((gv, d), cv) in g.iter_mut().zip(dy).zip(c) {
                    *gv += d * cv;
                }
            }),
            Op::Softmax(x) => {
                let c = rows_cols(&node.shape).1;
                let y = &node.value;
                acc(*x, &mut |g| {
                    for ((grow, yrow), drow) in g.chunks_mut(c).zip(y.chunks(c)).zip(dy.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for ((gv, yv), dv) in grow.iter_mut().zip(yrow).zip(drow) {
                            *gv += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.index].value;
                acc(*x, &mut |g| {
                    for ((gv, &xi), d) in g.iter_mut().zip(xv).zip(dy) {
                        *gv += d * gelu_grad_scalar(xi);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = rows_cols(&node.shape).1;
                let gv = &nodes[gain.index].value;
                acc(*gain, &mut |g| {
                    for (drow, nrow) in dy.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            g[j] += drow[j] * nrow[j];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for drow in dy.chunks(d) {
                        add_into(g, drow);
                    }
                });
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; d];
                    for (r, (drow, nrow)) in dy.chunks(d).zip(normalized.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = drow[j] * gv[j];
                        }
                        let sum_dx: f64 = dxhat.iter().sum();
                        let sum_dx_xh: f64 = dxhat.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        let grow = &mut g[r * d..(r + 1) * d];
                        for j in 0..d {
                            grow[j] += k * (d as f64 * dxhat[j] - sum_dx - nrow[j] * sum_dx_xh);
                        }
                    }
                });
            }
            Op::Scores { q, k, groups } => {
                let (rows, e) = rows_cols(&nodes[q.index].shape);
                let n = rows / groups;
                let qv = &nodes[q.index].value;
                let kv = &nodes[k.index].value;
                acc(*q, &mut |g| {
                    for gi in 0..*groups {
                        let ds = &dy[gi * n * n..(gi + 1) * n * n];
                        let kg = &kv[gi * n * e..(gi + 1) * n * e];
                        let dq = matmul(ds, kg, n, n, e);
                        add_into(&mut g[gi * n * e..(gi + 1) * n * e], &dq);
                    }
                });
                acc(*k, &mut |g| {
                    for gi in 0..*groups {
                        let ds = &dy[gi * n * n..(gi + 1) * n * n];
                        let qg = &qv[gi * n * e..(gi + 1) * n * e];
                        matmul_tn_acc(ds, qg, &mut g[gi * n * e..(gi + 1) * n * e], n, n, e);
                    }
                });
            }
            Op::Apply { p, v, groups } => {
                let n = rows_cols(&nodes[p.index].shape).1;
                let e = rows_cols(&nodes[v.index].shape).1;
                let pv = &nodes[p.index].value;
                let vv = &nodes[v.index].value;
                acc(*p, &mut |g| {
                    for gi in 0..*groups {
                        let dc = &dy[gi * n * e..(gi + 1) * n * e];
                        let vg = &vv[gi * n * e..(gi + 1) * n * e];
                        let dp = matmul_nt(dc, vg, n, e, n);
                        add_into(&mut g[gi * n * n..(gi + 1) * n * n], &dp);
                    }
                });
                acc(*v, &mut |g| {
                    for gi in 0..*groups {
                        let dc = &dy[gi * n * e..(gi + 1) * n * e];
                        let pg = &pv[gi * n * n..(gi + 1) * n * n];
                        matmul_tn_acc(pg, dc, &mut g[gi * n * e..(gi + 1) * n * e], n, n, e);
                    }
                });
            }
            Op::SliceCols(x, cols) => {
                let c = rows_cols(&nodes[x.index].shape).1;
                let w = cols.len();
                if w > 0 {
                    acc(*x, &mut |g| {
                        for (i, drow) in dy.chunks(w).enumerate() {
                            add_into(&mut g[i * c + cols.start..i * c + cols.end], drow);
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = rows_cols(&node.shape).1;
                let mut offset = 0;
                for &p in parts {
                    let w = rows_cols(&nodes[p.index].shape).1;
                    if w > 0 {
                        acc(p, &mut |g| {
                            for (i, grow) in g.chunks_mut(w).enumerate() {
                                add_into(grow, &dy[i * total + offset..i * total + offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::Mse(a, b) => {
                let av = &nodes[a.index].value;
                let bv = &nodes[b.index].value;
                let k = 2.0 * dy[0] / av.len() as f64;
                acc(*a, &mut |g| {
                    for ((gv, x), y) in g.iter_mut().zip(av).zip(bv) {
                        *gv += k * (x - y);
                    }
                });
                acc(*b, &mut |g| {
                    for ((gv, x), y) in g.iter_mut().zip(av).zip(bv) {
                        *gv -= k * (x - y);
                    }
                });
            }
            Op::SoftCrossEntropy(s, t) => {
                let (b, c) = rows_cols(&nodes[s.index].shape);
                let logq = log_softmax_rows_slice(&nodes[s.index].value, c);
                let p = softmax_rows_slice(&nodes[t.index].value, c);
                let k = dy[0] / b as f64;
                acc(*s, &mut |g| {
                    for i in 0..b * c {
                        g[i] += k * (logq[i].exp() - p[i]);
                    }
                });
                acc(*t, &mut |g| {
                    for r in 0..b {
                        let pr = &p[r * c..(r + 1) * c];
                        let lr = &logq[r * c..(r + 1) * c];
                        let mean: f64 = pr.iter().zip(lr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[r * c + j] -= k * pr[j] * (lr[j] - mean);
                        }
                    }
                });
            }
            Op::CrossEntropy(x, labels) => {
                let (b, c) = rows_cols(&nodes[x.index].shape);
                let logq = log_softmax_rows_slice(&nodes[x.index].value, c);
                let k = dy[0] / b as f64;
                acc(*x, &mut |g| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            g[r * c + j] += k * (logq[r * c + j].exp() - onehot);
                        }
                    }
                });
            }
        }
    }
}
