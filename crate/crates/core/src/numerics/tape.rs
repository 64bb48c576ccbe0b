//! Operation tape for reverse-mode differentiation over [`Tensor2D`] values.
//!
//! Every forward operation appends a node holding its output and the
//! operation that produced it. [`Tape::backward`] walks the nodes in reverse
//! and accumulates adjoints. A tape is per-invocation state: model parameters
//! live in a [`ParameterStore`] and are copied onto the tape as leaves by
//! [`Tape::bind`], so concurrent forward passes never share a tape.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParameterStore;
use super::tensor::{softmax_rows, Activation, Tensor2D};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Directed neighbor lists in compressed-row form: row `i` owns the edge
/// range `offsets[i]..offsets[i + 1]` of `targets`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborLists {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl NeighborLists {
    pub fn new(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for l in lists {
            targets.extend_from_slice(l);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn edges_of(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.edges_of(i)]
    }

    #[inline]
    pub fn target(&self, edge: usize) -> usize {
        self.targets[edge]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    EdgeSoftmax {
        dst: Var,
        src: Var,
        graph: Arc<NeighborLists>,
        slope: f64,
    },
    EdgeAggregate {
        alpha: Var,
        z: Var,
        graph: Arc<NeighborLists>,
    },
}

struct Node {
    value: Tensor2D,
    op: Op,
}

/// Counters for work performed while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Number of pairwise attention scores evaluated by graph attention.
    pub attention_scores: u64,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stats: TapeStats,
}

/// Parameter path to leaf handle, produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or parameter leaf.
    pub fn leaf(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Places every parameter of `store` on the tape.
    pub fn bind(&mut self, store: &ParameterStore) -> Bindings {
        let vars = store
            .iter()
            .map(|(path, t)| (path.to_string(), self.leaf(t.clone())))
            .collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x·w (+ b)`; the bias is a `1 × w.cols` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2D> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err(name, tx, tr));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o = f(*o, b);
            }
        }
        Ok(out)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Multiplies each column of `x` by the matching entry of a `1 × cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act(x, kind))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        self.push(out, Op::Sqrt(x))
    }

    /// Row softmax; masked-out entries (mask `false`) are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = softmax_rows(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// `a · bᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols input"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let t = self.value(p);
                out.row_mut(r)[c0..c0 + t.cols()].copy_from_slice(t.row(r));
                c0 += t.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows input"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor2D::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::range(
                "slice_cols",
                format!("{start}..{} of {} columns", start + len, t.cols()),
            ));
        }
        let mut out = Tensor2D::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::range(
                "slice_rows",
                format!("{start}..{} of {} rows", start + len, t.rows()),
            ));
        }
        let cols = t.cols();
        let out =
            Tensor2D::from_vec(len, cols, t.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Gathers the listed rows (repeats allowed) into a new tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::range(
                    "select_rows",
                    format!("row {r} of {}", t.rows()),
                ));
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor2D::from_vec(rows.len(), t.cols(), data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor2D::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).data().len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Graph-attention normalisation over directed edges.
    ///
    /// `dst` and `src` are `N × 1` per-node score halves; edge `i → j` gets
    /// `LeakyReLU(dst[i] + src[j])`, softmax-normalised over the neighbors of
    /// `i`. Output is `E × 1` in the edge order of `graph`. Only existing
    /// edges are evaluated.
    pub fn edge_softmax(
        &mut self,
        dst: Var,
        src: Var,
        graph: &Arc<NeighborLists>,
        slope: f64,
    ) -> Result<Var> {
        let (td, ts) = (self.value(dst), self.value(src));
        let n = graph.nodes();
        if td.shape() != (n, 1) || ts.shape() != (n, 1) {
            return Err(shape_err("edge_softmax", td, ts));
        }
        let act = Activation::LeakyRelu(slope);
        let mut out = Tensor2D::zeros(graph.edge_count(), 1);
        for i in 0..n {
            let range = graph.edges_of(i);
            if range.is_empty() {
                return Err(Error::DegenerateRow { row: i });
            }
            let di = td.get(i, 0);
            let mut max = f64::NEG_INFINITY;
            for e in range.clone() {
                let s = act.apply(di + ts.get(graph.target(e), 0));
                out.data_mut()[e] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for e in range.clone() {
                let w = (out.data()[e] - max).exp();
                out.data_mut()[e] = w;
                total += w;
            }
            for e in range {
                out.data_mut()[e] /= total;
            }
        }
        self.stats.attention_scores += graph.edge_count() as u64;
        Ok(self.push(
            out,
            Op::EdgeSoftmax {
                dst,
                src,
                graph: Arc::clone(graph),
                slope,
            },
        ))
    }

    /// `out[i] = Σ_{edges i→j} alpha[e] · z[j]`.
    pub fn edge_aggregate(
        &mut self,
        alpha: Var,
        z: Var,
        graph: &Arc<NeighborLists>,
    ) -> Result<Var> {
        let (ta, tz) = (self.value(alpha), self.value(z));
        if ta.shape() != (graph.edge_count(), 1) || tz.rows() != graph.nodes() {
            return Err(shape_err("edge_aggregate", ta, tz));
        }
        let mut out = Tensor2D::zeros(tz.rows(), tz.cols());
        for i in 0..graph.nodes() {
            for e in graph.edges_of(i) {
                let w = ta.data()[e];
                let zj = tz.row(graph.target(e));
                for (o, v) in out.row_mut(i).iter_mut().zip(zj) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::EdgeAggregate {
                alpha,
                z,
                graph: Arc::clone(graph),
            },
        ))
    }

    /// Reverse sweep from a scalar (`1 × 1`) output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: out.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor2D::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        let mut acc = |v: Var, delta: Tensor2D| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul_t(tb));
                acc(*b, ta.t_matmul(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(tb, |x, y| x * y));
                acc(*b, g.zip_map(ta, |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                acc(*row, g.column_sums());
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                let mut gx = g.clone();
                let mut gr = Tensor2D::zeros(1, tr.cols());
                for r in 0..gx.rows() {
                    for (c, v) in gx.row_mut(r).iter_mut().enumerate() {
                        gr.data_mut()[c] += *v * tx.get(r, c);
                        *v *= tr.data()[c];
                    }
                }
                acc(*x, gx);
                acc(*row, gr);
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Act(x, kind) => {
                let tx = self.value(*x);
                let d = Tensor2D::from_vec(
                    tx.rows(),
                    tx.cols(),
                    tx.data()
                        .iter()
                        .zip(node.value.data())
                        .zip(g.data())
                        .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                        .collect(),
                )
                .expect("shape preserved");
                acc(*x, d);
            }
            Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |gi, xi| 2.0 * gi * xi)),
            Op::Sqrt(x) => acc(*x, g.zip_map(&node.value, |gi, yi| gi * 0.5 / yi)),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Tensor2D::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                    }
                    acc(p, gp);
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut r0 = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let gp = Tensor2D::from_vec(h, cols, g.data()[r0 * cols..(r0 + h) * cols].to_vec())
                        .expect("shape preserved");
                    acc(p, gp);
                    r0 += h;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let mut gx = Tensor2D::zeros(tx.rows(), tx.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let mut gx = Tensor2D::zeros(tx.rows(), tx.cols());
                let cols = tx.cols();
                gx.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let mut gx = Tensor2D::zeros(tx.rows(), tx.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                acc(*x, Tensor2D::filled(tx.rows(), tx.cols(), g.item()));
            }
            Op::EdgeSoftmax {
                dst,
                src,
                graph,
                slope,
            } => {
                let (td, ts) = (self.value(*dst), self.value(*src));
                let alpha = node.value.data();
                let mut gd = Tensor2D::zeros(td.rows(), 1);
                let mut gs = Tensor2D::zeros(ts.rows(), 1);
                for i in 0..graph.nodes() {
                    let range = graph.edges_of(i);
                    let dot: f64 = range.clone().map(|e| alpha[e] * g.data()[e]).sum();
                    for e in range {
                        let j = graph.target(e);
                        let pre = td.get(i, 0) + ts.get(j, 0);
                        let slope_factor = if pre > 0.0 { 1.0 } else { *slope };
                        let de = alpha[e] * (g.data()[e] - dot) * slope_factor;
                        gd.data_mut()[i] += de;
                        gs.data_mut()[j] += de;
                    }
                }
                acc(*dst, gd);
                acc(*src, gs);
            }
            Op::EdgeAggregate { alpha, z, graph } => {
                let (ta, tz) = (self.value(*alpha), self.value(*z));
                let mut ga = Tensor2D::zeros(ta.rows(), 1);
                let mut gz = Tensor2D::zeros(tz.rows(), tz.cols());
                for i in 0..graph.nodes() {
                    let gi = g.row(i);
                    for e in graph.edges_of(i) {
                        let j = graph.target(e);
                        ga.data_mut()[e] = gi.iter().zip(tz.row(j)).map(|(a, b)| a * b).sum();
                        let w = ta.data()[e];
                        for (o, v) in gz.row_mut(j).iter_mut().zip(gi) {
                            *o += w * v;
                        }
                    }
                }
                acc(*alpha, ga);
                acc(*z, gz);
            }
        }
    }
}
