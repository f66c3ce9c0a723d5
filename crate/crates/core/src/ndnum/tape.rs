//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents. `backward` walks the nodes once in reverse recording order,
//! so the graph is rebuilt for every forward pass and never needs an
//! explicit topological sort.

use crate::error::{Error, Result};
use crate::ndnum::tensor::{matmul_values, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowL1(Var),
    RowL2(Var),
    L2(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MeanRows(Var),
    Select(Vec<bool>, Var, Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Gradients of leaves created with `requires_grad` accumulate across
/// repeated `backward` calls until [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    kink_margin: f64,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.node(v).value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Smallest recorded distance of any input to a non-differentiable point
    /// (relu/abs at zero, norms at the origin, and margins noted through
    /// [`Tape::note_kink`]). Infinite when no kinked op was recorded.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn note_kink(&mut self, margin: f64) {
        self.kink_margin = self.kink_margin.min(margin.abs());
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::matrix(m, n, matmul_values(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a).value;
        if av.shape().len() != 2 {
            return Err(Error::dim("transpose", av.shape(), &[]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = Tensor::matrix(c, r, transpose_values(av.data(), r, c))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, v: Var, negate: bool) -> Result<Var> {
        let (av, vv) = (&self.node(a).value, &self.node(v).value);
        let (_, cols) = av.matrix_dims();
        if vv.shape().len() != 1 || vv.len() != cols || av.shape().len() != 2 {
            return Err(Error::dim(name, av.shape(), vv.shape()));
        }
        let s = if negate { -1.0 } else { 1.0 };
        let data = av
            .data()
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(vv.data()).map(move |(&x, &y)| x + s * y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(v);
        let op = if negate { Op::SubRow(a, v) } else { Op::AddRow(a, v) };
        Ok(self.push(out, op, rg))
    }

    /// `a[i, :] + v` for every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, v, false)
    }

    /// `a[i, :] - v` for every row of matrix `a`.
    pub fn sub_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.row_broadcast("sub_row", a, v, true)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = &self.node(a).value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self.min_abs(a);
        self.note_kink(m);
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let m = self.min_abs(a);
        self.note_kink(m);
        self.map(a, f64::abs, Op::Abs(a))
    }

    fn min_abs(&self, a: Var) -> f64 {
        self.node(a)
            .value
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    fn reduce(&mut self, a: Var, value: f64, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(Tensor::scalar(value), op, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.data().iter().sum();
        self.reduce(a, s, Op::Sum(a))
    }

    /// Mean over all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.node(a).value;
        let n = av.len();
        let s = if n == 0 {
            0.0
        } else {
            av.data().iter().sum::<f64>() / n as f64
        };
        self.reduce(a, s, Op::Mean(a))
    }

    /// L2 norm of the whole tensor. The gradient at the origin is 0.
    pub fn l2(&mut self, a: Var) -> Var {
        let n = self.node(a).value.l2();
        self.note_kink(n);
        self.reduce(a, n, Op::L2(a))
    }

    /// L1 norm of the whole tensor (subgradient 0 at 0).
    pub fn l1(&mut self, a: Var) -> Var {
        let abs = self.abs(a);
        self.sum(abs)
    }

    pub fn norms(&mut self, a: Var) -> (Var, Var) {
        (self.l1(a), self.l2(a))
    }

    fn per_row(&mut self, a: Var, f: impl Fn(&[f64]) -> f64, op: Op) -> Result<Var> {
        let av = &self.node(a).value;
        if av.shape().len() != 2 {
            return Err(Error::dim("row reduction", av.shape(), &[]));
        }
        let (r, c) = av.matrix_dims();
        let data: Vec<f64> = if c == 0 {
            vec![f(&[]); r]
        } else {
            av.data().chunks(c).map(f).collect()
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), op, rg))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.per_row(a, |r| r.iter().sum(), Op::RowSum(a))
    }

    pub fn row_l1(&mut self, a: Var) -> Result<Var> {
        let m = self.min_abs(a);
        self.note_kink(m);
        self.per_row(a, |r| r.iter().map(|v| v.abs()).sum(), Op::RowL1(a))
    }

    pub fn row_l2(&mut self, a: Var) -> Result<Var> {
        let out = self.per_row(a, |r| r.iter().map(|v| v * v).sum::<f64>().sqrt(), Op::RowL2(a))?;
        let m = self.min_abs(out);
        self.note_kink(m);
        Ok(out)
    }

    /// Row-wise log-softmax (a vector is treated as one row).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a).value;
        if av.is_empty() {
            return Err(Error::Contract("log_softmax of an empty tensor".into()));
        }
        if let Some(bad) = av.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("log_softmax input contains {bad}")));
        }
        let (_, c) = av.matrix_dims();
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Stacks `a[idx[0]], a[idx[1]], ...` into a new matrix.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = &self.node(a).value;
        if av.shape().len() != 2 {
            return Err(Error::dim("gather_rows", av.shape(), &[]));
        }
        let (r, c) = av.matrix_dims();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Contract(format!("gather_rows index {i} out of {r} rows")));
            }
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Picks `a[i, cols[i]]` for every row, giving a vector.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = &self.node(a).value;
        let (r, c) = av.matrix_dims();
        if av.shape().len() != 2 || cols.len() != r {
            return Err(Error::dim("pick", av.shape(), &[cols.len()]));
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::Contract(format!("pick column {j} out of {c}")));
            }
            data.push(av.at(i, j));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::Pick(a, cols.to_vec()), rg))
    }

    /// Column means of a matrix, giving a vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a).value;
        if av.shape().len() != 2 || av.rows() == 0 {
            return Err(Error::dim("mean_rows", av.shape(), &[]));
        }
        let (r, c) = av.matrix_dims();
        let mut data = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::MeanRows(a), rg))
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        same_shape("select", av, bv)?;
        if mask.len() != av.len() {
            return Err(Error::dim("select", &[mask.len()], av.shape()));
        }
        let data = mask
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Select(mask.to_vec(), a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = &self.node(a).value;
        let out = Tensor::new(shape, av.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("backward root is not on this tape".into()));
        }
        if self.node(root).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.node(root).value.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        local[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = local[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).matrix_dims();
                let n = val(*b).cols();
                acc(*a, &mut |s| {
                    let bt = transpose_values(val(*b).data(), k, n);
                    let ga = matmul_values(g, &bt, m, n, k);
                    s.iter_mut().zip(ga).for_each(|(x, y)| *x += y);
                });
                acc(*b, &mut |s| {
                    let at = transpose_values(val(*a).data(), m, k);
                    let gb = matmul_values(&at, g, k, m, n);
                    s.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).matrix_dims();
                acc(*a, &mut |s| {
                    let gt = transpose_values(g, c, r);
                    s.iter_mut().zip(gt).for_each(|(x, y)| *x += y);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(a, v) | Op::SubRow(a, v) => {
                let sgn = if matches!(node.op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                let c = val(*a).cols();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*v, &mut |s| {
                    for row in g.chunks(c.max(1)) {
                        s.iter_mut().zip(row).for_each(|(x, y)| *x += sgn * y);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Relu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        *x += 2.0 * ai * gi;
                    }
                });
            }
            Op::Abs(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        *x += sign(*ai) * gi;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::RowSum(a) => {
                let c = val(*a).cols().max(1);
                acc(*a, &mut |s| {
                    for (row, gi) in s.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|x| *x += gi);
                    }
                });
            }
            Op::RowL1(a) => {
                let av = val(*a);
                let c = av.cols().max(1);
                acc(*a, &mut |s| {
                    for ((row, src), gi) in s.chunks_mut(c).zip(av.data().chunks(c)).zip(g) {
                        for (x, v) in row.iter_mut().zip(src) {
                            *x += sign(*v) * gi;
                        }
                    }
                });
            }
            Op::RowL2(a) => {
                let av = val(*a);
                let c = av.cols().max(1);
                let norms = node.value.data();
                acc(*a, &mut |s| {
                    for (((row, src), gi), nrm) in
                        s.chunks_mut(c).zip(av.data().chunks(c)).zip(g).zip(norms)
                    {
                        if *nrm > 0.0 {
                            for (x, v) in row.iter_mut().zip(src) {
                                *x += gi * v / nrm;
                            }
                        }
                    }
                });
            }
            Op::L2(a) => {
                let nrm = node.value.data()[0];
                let ad = val(*a).data();
                if nrm > 0.0 {
                    acc(*a, &mut |s| {
                        for (x, v) in s.iter_mut().zip(ad) {
                            *x += g[0] * v / nrm;
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                let c = val(*a).cols().max(1);
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((row, yr), gr) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((x, yi), gi) in row.iter_mut().zip(yr).zip(gr) {
                            *x += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = val(*a).cols();
                acc(*a, &mut |s| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            s[src * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::Pick(a, cols) => {
                let c = val(*a).cols();
                acc(*a, &mut |s| {
                    for (i, &j) in cols.iter().enumerate() {
                        s[i * c + j] += g[i];
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).matrix_dims();
                acc(*a, &mut |s| {
                    for row in s.chunks_mut(c.max(1)) {
                        row.iter_mut().zip(g).for_each(|(x, y)| *x += y / r as f64);
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Select(mask, a, b) => {
                acc(*a, &mut |s| {
                    for ((x, gi), m) in s.iter_mut().zip(g).zip(mask) {
                        if *m {
                            *x += gi;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gi), m) in s.iter_mut().zip(g).zip(mask) {
                        if !*m {
                            *x += gi;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let b = tape.constant(t(&[vec![1.5, -2.0], vec![0.25, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let ib = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(ib), tape.value(b));

        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        let bz = tape.matmul(b, z).unwrap();
        assert!(tape.value(bz).data().iter().all(|&v| v == 0.0));

        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = tape.constant(t(&[vec![5.0], vec![6.0]]));
        let ac = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(ac).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::zeros(vec![3]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));

        let other = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.add(x, other), Err(Error::Dimension { .. })));

        // relu gradient at exactly 0 is 0.
        let total = tape.sum(r);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn square_backward() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn norms_examples() {
        let cases = [
            (vec![0.0, 0.0], 0.0, 0.0),
            (vec![0.3, -0.4], 0.7, 0.5),
            (vec![1.0, 1.0, 1.0, 1.0], 4.0, 2.0),
        ];
        for (x, l1, l2) in cases {
            let mut tape = Tape::new();
            let v = tape.param(Tensor::vector(x));
            let (a, b) = tape.norms(v);
            assert!((tape.scalar_value(a).unwrap() - l1).abs() < 1e-15);
            assert!((tape.scalar_value(b).unwrap() - l2).abs() < 1e-15);
        }
        // Gradients at the origin are 0 by convention.
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(vec![0.0, 0.0]));
        let (a, b) = tape.norms(v);
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_softmax_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![0.7; 5]));
        let y = tape.log_softmax(c).unwrap();
        for v in tape.value(y).data() {
            assert!((v + 5f64.ln()).abs() < 1e-15);
        }
        let one = tape.constant(Tensor::vector(vec![42.0]));
        let y1 = tape.log_softmax(one).unwrap();
        assert_eq!(tape.value(y1).data(), &[0.0]);

        let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let yb = tape.log_softmax(big).unwrap();
        let d = tape.value(yb).data();
        assert!(d[0].abs() < 1e-12 && (d[1] + 1000.0).abs() < 1e-9);

        let bad = tape.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(tape.log_softmax(bad), Err(Error::Numeric(_))));
        let inf = tape.constant(Tensor::vector(vec![f64::INFINITY]));
        assert!(matches!(tape.log_softmax(inf), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let xx = tape.mul(x, x).unwrap();
        let d = tape.sum(xx);
        let half = tape.scale(d, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);

        // Repeated calls accumulate until zero_grad.
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn kink_margin_tracks_relu_inputs() {
        let mut tape = Tape::new();
        assert!(tape.kink_margin().is_infinite());
        let x = tape.param(Tensor::vector(vec![-0.5, 0.02, 3.0]));
        tape.relu(x);
        assert!((tape.kink_margin() - 0.02).abs() < 1e-15);
    }
}
