//! Reverse-mode differentiation over a linear recording of primitive ops.
//!
//! Every primitive pushes one [`Node`] holding its output value and the ids of
//! its inputs. [`Tape::gradients`] walks the recording backwards once,
//! summing contributions into each input in the order they are visited.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::{dot, softmax_slice, Tensor};
use crate::error::{mismatch, CoreError, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    LinearMap { w: usize, x: usize, bias: Option<usize> },
    LinearRows { x: usize, w: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    ScaleRows { a: usize, s: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softmax(usize),
    SegmentSoftmax { a: usize, seg: Rc<[usize]>, groups: usize },
    NegL2Norm(usize),
    Dot(usize, usize),
    Concat(Vec<usize>),
    ConcatCols(Vec<usize>),
    Gather { a: usize, idx: Rc<[usize]> },
    ScatterAdd { a: usize, idx: Rc<[usize]> },
    Outer { a: usize, b: usize },
    Sum(usize),
    RowSums(usize),
    MeanRows(usize),
    NormalizeRows(usize),
    PairwiseDist { a: usize, b: usize },
    Transpose(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: every executed primitive in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the var does not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input (parameter).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(value, op, rg)
    }

    /// Replays the record in reverse from a scalar `loss`.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(CoreError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backward(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::LinearMap { w, x, bias } => {
            let (wv, xv) = (val(*w), val(*x));
            let (rows, cols) = (wv.rows(), wv.cols());
            if needs(*w) {
                let mut gw = Tensor::zeros(wv.shape());
                for o in 0..rows {
                    let go = g.data()[o];
                    for (gwi, xi) in gw.row_mut(o).iter_mut().zip(xv.data()) {
                        *gwi = go * xi;
                    }
                }
                accumulate(nodes, grads, *w, gw);
            }
            if needs(*x) {
                let mut gx = vec![0.0; cols];
                for o in 0..rows {
                    let go = g.data()[o];
                    for (gxi, wi) in gx.iter_mut().zip(wv.row(o)) {
                        *gxi += go * wi;
                    }
                }
                accumulate(nodes, grads, *x, Tensor::vector(gx));
            }
            if let Some(b) = bias {
                accumulate(nodes, grads, *b, g.clone());
            }
        }
        Op::LinearRows { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, din, dout) = (xv.rows(), xv.cols(), wv.rows());
            if needs(*x) {
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..n {
                    let grow = g.row(r);
                    let gxr = gx.row_mut(r);
                    for (o, &go) in grow.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        for (gxi, wi) in gxr.iter_mut().zip(wv.row(o)) {
                            *gxi += go * wi;
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            if needs(*w) {
                let mut gw = Tensor::zeros(&[dout, din]);
                for r in 0..n {
                    let xr = xv.row(r);
                    for (o, &go) in g.row(r).iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        for (gwi, xi) in gw.row_mut(o).iter_mut().zip(xr) {
                            *gwi += go * xi;
                        }
                    }
                }
                accumulate(nodes, grads, *w, gw);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(val(*b).data()) {
                    *x *= y;
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = g.clone();
                for (x, y) in gb.data_mut().iter_mut().zip(val(*a).data()) {
                    *x *= y;
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::AddRow { a, row } => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(*row) {
                let mut gr = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, v) in gr.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                accumulate(nodes, grads, *row, Tensor::vector(gr));
            }
        }
        Op::ScaleRows { a, s } => {
            let (av, sv) = (val(*a), val(*s));
            if needs(*a) {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let k = sv.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= k);
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*s) {
                let gs: Vec<f64> = (0..av.rows()).map(|r| dot(g.row(r), av.row(r))).collect();
                let gs = Tensor::new(sv.shape().to_vec(), gs).expect("scale_rows grad");
                accumulate(nodes, grads, *s, gs);
            }
        }
        Op::Scale { a, c } => {
            let c = *c;
            accumulate(nodes, grads, *a, g.map(|v| v * c));
        }
        Op::AddConst { a } => accumulate(nodes, grads, *a, g.clone()),
        Op::Relu(a) => {
            let mut ga = g.clone();
            for (x, y) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                if *y <= 0.0 {
                    *x = 0.0;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Tanh(a) => {
            let mut ga = g.clone();
            for (x, y) in ga.data_mut().iter_mut().zip(out.data()) {
                *x *= 1.0 - y * y;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Exp(a) => {
            let mut ga = g.clone();
            for (x, y) in ga.data_mut().iter_mut().zip(out.data()) {
                *x *= y;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Log(a) => {
            let mut ga = g.clone();
            for (x, y) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                *x /= y;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Square(a) => {
            let mut ga = g.clone();
            for (x, y) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                *x *= 2.0 * y;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax(a) => {
            let gy = dot(g.data(), out.data());
            let ga: Vec<f64> = out
                .data()
                .iter()
                .zip(g.data())
                .map(|(y, gi)| y * (gi - gy))
                .collect();
            accumulate(nodes, grads, *a, Tensor::vector(ga));
        }
        Op::SegmentSoftmax { a, seg, groups } => {
            let mut gy = vec![0.0; *groups];
            for (e, &s) in seg.iter().enumerate() {
                gy[s] += g.data()[e] * out.data()[e];
            }
            let ga: Vec<f64> = seg
                .iter()
                .enumerate()
                .map(|(e, &s)| out.data()[e] * (g.data()[e] - gy[s]))
                .collect();
            accumulate(nodes, grads, *a, Tensor::vector(ga));
        }
        Op::NegL2Norm(a) => {
            let av = val(*a);
            let norm = -out.item();
            let gs = g.item();
            let ga = if norm > 0.0 {
                av.map(|x| -gs * x / norm)
            } else {
                Tensor::zeros(av.shape())
            };
            accumulate(nodes, grads, *a, ga);
        }
        Op::Dot(a, b) => {
            let gs = g.item();
            if needs(*a) {
                accumulate(nodes, grads, *a, val(*b).map(|x| gs * x));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, val(*a).map(|x| gs * x));
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    let slice = g.data()[offset..offset + n].to_vec();
                    let t = Tensor::new(val(p).shape().to_vec(), slice).expect("concat grad");
                    accumulate(nodes, grads, p, t);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let c = pv.cols();
                if needs(p) {
                    let mut gp = Tensor::zeros(pv.shape());
                    for r in 0..pv.rows() {
                        gp.row_mut(r)
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += c;
            }
        }
        Op::Gather { a, idx } => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.shape());
            let c = av.cols();
            let c = if av.rank() == 1 { 1 } else { c };
            for (r, &i) in idx.iter().enumerate() {
                let src = &g.data()[r * c..(r + 1) * c];
                for (d, s) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *d += s;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ScatterAdd { a, idx } => {
            let av = val(*a);
            let c = if av.rank() == 1 { 1 } else { av.cols() };
            let mut data = Vec::with_capacity(av.len());
            for &i in idx.iter() {
                data.extend_from_slice(&g.data()[i * c..(i + 1) * c]);
            }
            let ga = Tensor::new(av.shape().to_vec(), data).expect("scatter grad");
            accumulate(nodes, grads, *a, ga);
        }
        Op::Outer { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let ga: Vec<f64> = (0..av.len()).map(|e| dot(g.row(e), bv.data())).collect();
                accumulate(nodes, grads, *a, Tensor::vector(ga));
            }
            if needs(*b) {
                let mut gb = vec![0.0; bv.len()];
                for (e, &ae) in av.data().iter().enumerate() {
                    for (s, v) in gb.iter_mut().zip(g.row(e)) {
                        *s += ae * v;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::vector(gb));
            }
        }
        Op::Sum(a) => {
            let gs = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), gs));
        }
        Op::RowSums(a) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.shape());
            for r in 0..av.rows() {
                let gr = g.data()[r];
                ga.row_mut(r).iter_mut().for_each(|x| *x = gr);
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let n = av.rows() as f64;
            let mut ga = Tensor::zeros(av.shape());
            for r in 0..av.rows() {
                for (x, gi) in ga.row_mut(r).iter_mut().zip(g.data()) {
                    *x = gi / n;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::NormalizeRows(a) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.shape());
            for r in 0..av.rows() {
                let norm = super::tensor::l2_norm(av.row(r));
                if norm == 0.0 {
                    continue;
                }
                let y = out.row(r);
                let gr = g.row(r);
                let proj = dot(y, gr);
                for ((x, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                    *x = (gi - yi * proj) / norm;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::PairwiseDist { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (n, m, d) = (av.rows(), bv.rows(), av.cols());
            let mut ga = Tensor::zeros(av.shape());
            let mut gb = Tensor::zeros(bv.shape());
            for i in 0..n {
                for j in 0..m {
                    let dist = out.at(i, j);
                    let gij = g.at(i, j);
                    if dist == 0.0 || gij == 0.0 {
                        continue;
                    }
                    let k = gij / dist;
                    for c in 0..d {
                        let diff = k * (av.at(i, c) - bv.at(j, c));
                        ga.data_mut()[i * d + c] += diff;
                        gb.data_mut()[j * d + c] -= diff;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Transpose(a) => {
            accumulate(nodes, grads, *a, transpose(g));
        }
        Op::Reshape(a) => {
            let t = g.clone().reshaped(val(*a).shape().to_vec()).expect("reshape grad");
            accumulate(nodes, grads, *a, t);
        }
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.at(i, j);
        }
    }
    Tensor::matrix(c, r, data).expect("transpose")
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if a.rank() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.tape.value(self.id));
        self.tape.record(v, op, &[self.id])
    }

    /// `W·x (+ bias)` for a matrix `W` (self) and vector `x`.
    pub fn linear_map(&self, x: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let value = {
            let (w, xv) = (self.tape.value(self.id), self.tape.value(x.id));
            check_matrix("linear_map", &w)?;
            if xv.rank() != 1 || xv.len() != w.cols() {
                return Err(mismatch(
                    "linear_map",
                    format!("W {:?} cannot multiply x {:?}", w.shape(), xv.shape()),
                ));
            }
            let mut y: Vec<f64> = (0..w.rows()).map(|o| dot(w.row(o), xv.data())).collect();
            if let Some(b) = bias {
                let bv = self.tape.value(b.id);
                if bv.len() != y.len() || bv.rank() != 1 {
                    return Err(mismatch(
                        "linear_map",
                        format!("bias {:?} for output of length {}", bv.shape(), y.len()),
                    ));
                }
                y.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
            }
            Tensor::vector(y)
        };
        let mut inputs = vec![self.id, x.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.tape.record(
            value,
            Op::LinearMap {
                w: self.id,
                x: x.id,
                bias: bias.map(|b| b.id),
            },
            &inputs,
        ))
    }

    /// Applies the matrix `w` ([out×in]) to every row of `self` ([n×in]).
    pub fn linear_rows(&self, w: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, wv) = (self.tape.value(self.id), self.tape.value(w.id));
            check_matrix("linear_rows", &x)?;
            check_matrix("linear_rows", &wv)?;
            if x.cols() != wv.cols() {
                return Err(mismatch(
                    "linear_rows",
                    format!("rows {:?} against W {:?}", x.shape(), wv.shape()),
                ));
            }
            let (n, dout) = (x.rows(), wv.rows());
            let mut data = vec![0.0; n * dout];
            for r in 0..n {
                let xr = x.row(r);
                for o in 0..dout {
                    data[r * dout + o] = dot(xr, wv.row(o));
                }
            }
            Tensor::matrix(n, dout, data)?
        };
        Ok(self
            .tape
            .record(value, Op::LinearRows { x: self.id, w: w.id }, &[self.id, w.id]))
    }

    fn zip_with(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            check_same(name, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds the vector `row` to every row of the matrix `self`.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, r) = (self.tape.value(self.id), self.tape.value(row.id));
            if r.rank() != 1 || r.len() != a.cols() {
                return Err(mismatch(
                    "add_row",
                    format!("{:?} + row {:?}", a.shape(), r.shape()),
                ));
            }
            let mut out = a.clone();
            for i in 0..out.rows() {
                out.row_mut(i).iter_mut().zip(r.data()).for_each(|(x, y)| *x += y);
            }
            out
        };
        Ok(self.tape.record(
            value,
            Op::AddRow {
                a: self.id,
                row: row.id,
            },
            &[self.id, row.id],
        ))
    }

    /// Multiplies row `i` of `self` by `s[i]`.
    pub fn scale_rows(&self, s: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, sv) = (self.tape.value(self.id), self.tape.value(s.id));
            if sv.len() != a.rows() {
                return Err(mismatch(
                    "scale_rows",
                    format!("{:?} scaled by {:?}", a.shape(), sv.shape()),
                ));
            }
            let mut out = a.clone();
            for i in 0..out.rows() {
                let k = sv.data()[i];
                out.row_mut(i).iter_mut().for_each(|x| *x *= k);
            }
            out
        };
        Ok(self
            .tape
            .record(value, Op::ScaleRows { a: self.id, s: s.id }, &[self.id, s.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale { a: self.id, c }, |a| a.map(|x| x * c))
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst { a: self.id }, |a| a.map(|x| x + c))
    }

    /// ReLU; the subgradient at zero is zero.
    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn softmax(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.is_empty() {
                return Err(CoreError::EmptyInput("softmax"));
            }
            Tensor::vector(softmax_slice(a.data()))
        };
        Ok(self.tape.record(value, Op::Softmax(self.id), &[self.id]))
    }

    /// Softmax of a flat score vector within each group; `seg[e]` is the
    /// group of entry `e`.
    pub fn segment_softmax(&self, seg: Rc<[usize]>, groups: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if seg.len() != a.len() {
                return Err(mismatch(
                    "segment_softmax",
                    format!("{} scores, {} segment ids", a.len(), seg.len()),
                ));
            }
            let mut max = vec![f64::NEG_INFINITY; groups];
            for (e, &s) in seg.iter().enumerate() {
                max[s] = max[s].max(a.data()[e]);
            }
            let exps: Vec<f64> = seg
                .iter()
                .enumerate()
                .map(|(e, &s)| (a.data()[e] - max[s]).exp())
                .collect();
            let mut total = vec![0.0; groups];
            for (e, &s) in seg.iter().enumerate() {
                total[s] += exps[e];
            }
            Tensor::vector(seg.iter().enumerate().map(|(e, &s)| exps[e] / total[s]).collect())
        };
        Ok(self.tape.record(
            value,
            Op::SegmentSoftmax {
                a: self.id,
                seg,
                groups,
            },
            &[self.id],
        ))
    }

    /// `-‖x‖₂` as a scalar.
    pub fn neg_l2_norm(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if a.is_empty() {
                return Err(CoreError::EmptyInput("neg_l2_norm"));
            }
            Tensor::scalar(-super::tensor::l2_norm(a.data()))
        };
        Ok(self.tape.record(value, Op::NegL2Norm(self.id), &[self.id]))
    }

    pub fn dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            check_same("dot", &a, &b)?;
            Tensor::scalar(dot(a.data(), b.data()))
        };
        Ok(self
            .tape
            .record(value, Op::Dot(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn row_sums(&self) -> Var<'t> {
        self.unary(Op::RowSums(self.id), |a| {
            Tensor::vector((0..a.rows()).map(|r| a.row(r).iter().sum()).collect())
        })
    }

    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            check_matrix("mean_rows", &a)?;
            if a.rows() == 0 {
                return Err(CoreError::EmptyInput("mean_rows"));
            }
            let mut acc = vec![0.0; a.cols()];
            for r in 0..a.rows() {
                acc.iter_mut().zip(a.row(r)).for_each(|(s, x)| *s += x);
            }
            let n = a.rows() as f64;
            Tensor::vector(acc.into_iter().map(|s| s / n).collect())
        };
        Ok(self.tape.record(value, Op::MeanRows(self.id), &[self.id]))
    }

    /// Scales every row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&self) -> Var<'t> {
        self.unary(Op::NormalizeRows(self.id), |a| {
            let mut out = a.clone();
            for r in 0..out.rows() {
                let norm = super::tensor::l2_norm(a.row(r));
                if norm > 0.0 {
                    out.row_mut(r).iter_mut().for_each(|x| *x /= norm);
                }
            }
            out
        })
    }

    /// Euclidean distances between every row of `self` and every row of `other`.
    pub fn pairwise_dist(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            check_matrix("pairwise_dist", &a)?;
            check_matrix("pairwise_dist", &b)?;
            if a.cols() != b.cols() {
                return Err(mismatch(
                    "pairwise_dist",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let (n, m) = (a.rows(), b.rows());
            let mut data = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    data.push(super::tensor::l2_distance(a.row(i), b.row(j)));
                }
            }
            Tensor::matrix(n, m, data)?
        };
        Ok(self.tape.record(
            value,
            Op::PairwiseDist {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            check_matrix("transpose", &a)?;
            transpose(&a)
        };
        Ok(self.tape.record(value, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).clone().reshaped(shape)?;
        Ok(self.tape.record(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Selects rows (or elements of a vector) by index; indices may repeat.
    pub fn gather(&self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (rows, width) = if a.rank() == 1 { (a.len(), 1) } else { (a.rows(), a.cols()) };
            let mut data = Vec::with_capacity(idx.len() * width);
            for &i in idx.iter() {
                if i >= rows {
                    return Err(mismatch("gather", format!("index {i} of {rows} rows")));
                }
                data.extend_from_slice(&a.data()[i * width..(i + 1) * width]);
            }
            if a.rank() == 1 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(idx.len(), width, data)?
            }
        };
        Ok(self
            .tape
            .record(value, Op::Gather { a: self.id, idx }, &[self.id]))
    }

    /// Sums row `e` of `self` into output row `idx[e]` of an `n`-row result.
    pub fn scatter_add(&self, idx: Rc<[usize]>, n: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (rows, width) = if a.rank() == 1 { (a.len(), 1) } else { (a.rows(), a.cols()) };
            if rows != idx.len() {
                return Err(mismatch(
                    "scatter_add",
                    format!("{rows} rows, {} indices", idx.len()),
                ));
            }
            let mut data = vec![0.0; n * width];
            for (e, &i) in idx.iter().enumerate() {
                if i >= n {
                    return Err(mismatch("scatter_add", format!("index {i} of {n}")));
                }
                for (d, s) in data[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&a.data()[e * width..(e + 1) * width])
                {
                    *d += s;
                }
            }
            if a.rank() == 1 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(n, width, data)?
            }
        };
        Ok(self
            .tape
            .record(value, Op::ScatterAdd { a: self.id, idx }, &[self.id]))
    }

    /// Outer product of two vectors.
    pub fn outer(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            if a.rank() != 1 || b.rank() != 1 {
                return Err(mismatch(
                    "outer",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut data = Vec::with_capacity(a.len() * b.len());
            for x in a.data() {
                data.extend(b.data().iter().map(|y| x * y));
            }
            Tensor::matrix(a.len(), b.len(), data)?
        };
        Ok(self.tape.record(
            value,
            Op::Outer {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Concatenates vectors end to end.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .map(|p| p.tape)
            .ok_or(CoreError::EmptyInput("concat"))?;
        if parts.len() < 2 {
            return Err(mismatch("concat", "needs at least two vectors"));
        }
        let value = {
            let mut data = Vec::new();
            for p in parts {
                let v = tape.value(p.id);
                if v.rank() != 1 {
                    return Err(mismatch("concat", format!("non-vector {:?}", v.shape())));
                }
                data.extend_from_slice(v.data());
            }
            Tensor::vector(data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(value, Op::Concat(ids.clone()), &ids))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .map(|p| p.tape)
            .ok_or(CoreError::EmptyInput("concat_cols"))?;
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value(p.id)).collect();
            let rows = vals[0].rows();
            for v in &vals {
                check_matrix("concat_cols", v)?;
                if v.rows() != rows {
                    return Err(mismatch(
                        "concat_cols",
                        format!("{} rows vs {rows}", v.rows()),
                    ));
                }
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(value, Op::ConcatCols(ids.clone()), &ids))
    }
}
