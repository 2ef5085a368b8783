use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{conv1d_backward, conv1d_forward, ConvShape, Padding};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How the second operand of a binary op lines up with the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// `b` is `R x 1` against `a` of `R x C`.
    PerRow(usize),
    /// `b` has `C` entries against `a` of `R x C`.
    PerCol(usize),
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize], blen: usize) -> Option<Self> {
        if a == b {
            return Some(Bcast::Same);
        }
        if blen == 1 {
            return Some(Bcast::Scalar);
        }
        if let [r, c] = a {
            if b == [*r, 1] {
                return Some(Bcast::PerRow(*c));
            }
            if b == [1, *c] || b == [*c] {
                return Some(Bcast::PerCol(*c));
            }
        }
        None
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::PerRow(c) => i / c,
            Bcast::PerCol(c) => i % c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Tanh,
    Exp,
    Ln,
    Recip,
    Sqrt,
    Abs,
    Square,
    Powf(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    Max(usize, usize),
    Gather(usize, Rc<Vec<usize>>),
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Stencil(usize, Rc<Vec<(usize, f64)>>),
    SoftmaxRows(usize),
    Conv { input: usize, kernel: usize, bias: usize, shape: ConvShape, pad: Padding },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Values are computed eagerly as ops are recorded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Constant input: gradients are not tracked.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: [`Tape::backward`] reports its gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::invalid("loss does not belong to this tape"));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (i, v) in g.iter().enumerate() {
                    gb[bc.index(i)] += sign * v;
                }
            }
        }
        &Op::Mul(a, b, bc) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = slot(grads, nodes, a) {
                for (i, v) in g.iter().enumerate() {
                    ga[i] += v * bv.data()[bc.index(i)];
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (i, v) in g.iter().enumerate() {
                    gb[bc.index(i)] += v * av.data()[i];
                }
            }
        }
        &Op::Scale(a, s) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
        }
        &Op::Offset(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        &Op::Unary(a, u) => {
            let x = Rc::clone(&nodes[a].value);
            if let Some(ga) = slot(grads, nodes, a) {
                let (xs, ys) = (x.data(), out.data());
                for i in 0..g.len() {
                    let d = match u {
                        Unary::Tanh => 1.0 - ys[i] * ys[i],
                        Unary::Exp => ys[i],
                        Unary::Ln => 1.0 / xs[i],
                        Unary::Recip => -ys[i] * ys[i],
                        Unary::Sqrt => 0.5 / ys[i],
                        Unary::Abs => {
                            if xs[i] > 0.0 {
                                1.0
                            } else if xs[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xs[i],
                        Unary::Powf(p) => p * xs[i].powf(p - 1.0),
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        &Op::Max(a, b) => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x >= y).collect();
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    if pick_a[i] {
                        ga[i] += g[i];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for i in 0..g.len() {
                    if !pick_a[i] {
                        gb[i] += g[i];
                    }
                }
            }
        }
        Op::Gather(a, idx) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (v, &src) in g.iter().zip(idx.iter()) {
                    ga[src] += v;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let cols: usize = out.shape()[1];
            let rows = out.shape()[0];
            let mut off = 0;
            for &p in parts {
                let pc = nodes[p].value.shape()[1];
                if let Some(gp) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        for c in 0..pc {
                            gp[r * pc + c] += g[r * cols + off + c];
                        }
                    }
                }
                off += pc;
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::SumCols(a) => {
            let c = nodes[a].value.shape()[1];
            if let Some(ga) = slot(grads, nodes, a) {
                for (i, d) in ga.iter_mut().enumerate() {
                    *d += g[i / c];
                }
            }
        }
        Op::Stencil(a, taps) => {
            let c = out.shape()[1];
            if let Some(ga) = slot(grads, nodes, *a) {
                for (i, v) in g.iter().enumerate() {
                    let (j, k) = (i / c, i % c);
                    for &(off, w) in taps.iter() {
                        ga[(j + off) * c + k] += w * v;
                    }
                }
            }
        }
        &Op::SoftmaxRows(a) => {
            let c = *out.shape().last().expect("softmax input has rank >= 1");
            if let Some(ga) = slot(grads, nodes, a) {
                let y = out.data();
                for r in 0..y.len() / c {
                    let row = r * c..(r + 1) * c;
                    let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        &Op::Conv { input, kernel, bias, shape, pad } => {
            let x = Rc::clone(&nodes[input].value);
            let w = Rc::clone(&nodes[kernel].value);
            // each slot is taken separately to satisfy the borrow checker
            let mut di = nodes[input].requires_grad.then(|| vec![0.0; x.len()]);
            let mut dk = nodes[kernel].requires_grad.then(|| vec![0.0; w.len()]);
            let mut db = nodes[bias].requires_grad.then(|| vec![0.0; nodes[bias].value.len()]);
            conv1d_backward(
                shape,
                pad,
                x.data(),
                w.data(),
                g,
                di.as_deref_mut(),
                dk.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (id, d) in [(input, di), (kernel, dk), (bias, db)] {
                if let (Some(d), Some(acc)) = (d, slot(grads, nodes, id)) {
                    acc.iter_mut().zip(d).for_each(|(a, v)| *a += v);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shaped like its node"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.tape.nodes.borrow()[self.id].value.dims2()
    }

    fn same_tape(&self, o: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, o.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands live on different tapes"))
        }
    }

    fn unary_op(self, value: Tensor, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(self.id);
        self.tape.push(value, op, tracked)
    }

    fn binary(self, o: Var<'t>, kind: fn(usize, usize, Bcast) -> Op, f: fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let a = self.value();
        let b = o.value();
        let bc = Bcast::resolve(a.shape(), b.shape(), b.len()).ok_or_else(|| {
            Error::shape(format!("cannot combine {:?} with {:?}", a.shape(), b.shape()))
        })?;
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[bc.index(i)])).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(o.id);
        Ok(self.tape.push(value, kind(self.id, o.id, bc), tracked))
    }

    /// Elementwise sum; `o` may broadcast as a scalar, a column or a row.
    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        if self.len() == 1 && o.len() != 1 {
            return o.add(self);
        }
        self.binary(o, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        if self.len() == 1 && o.len() != 1 {
            return o.mul(self);
        }
        self.binary(o, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.mul(o.recip())
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value();
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect()).unwrap();
        self.unary_op(value, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        let v = self.value();
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect()).unwrap();
        self.unary_op(value, Op::Offset(self.id))
    }

    fn map(self, u: Unary) -> Var<'t> {
        let v = self.value();
        let f = |x: f64| match u {
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Recip => 1.0 / x,
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Powf(p) => x.powf(p),
        };
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap();
        self.unary_op(value, Op::Unary(self.id, u))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Unary::Tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(Unary::Ln)
    }

    pub fn recip(self) -> Var<'t> {
        self.map(Unary::Recip)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(Unary::Sqrt)
    }

    pub fn abs(self) -> Var<'t> {
        self.map(Unary::Abs)
    }

    pub fn square(self) -> Var<'t> {
        self.map(Unary::Square)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        if p == 2.0 {
            return self.square();
        }
        self.map(Unary::Powf(p))
    }

    /// Elementwise maximum of equally shaped operands; ties go to `self`.
    pub fn max(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let a = self.value();
        let b = o.value();
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("max of {:?} and {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| if x >= y { *x } else { *y }).collect();
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(o.id);
        Ok(self.tape.push(Tensor::new(a.shape().to_vec(), data)?, Op::Max(self.id, o.id), tracked))
    }

    /// `out[i] = self[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(format!("{} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape(format!("index {bad} out of range for {} values", v.len())));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        Ok(self.unary_op(Tensor::new(shape, data)?, Op::Gather(self.id, index)))
    }

    /// Selects rows of a matrix by index.
    pub fn rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (_, c) = self.dims2()?;
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..c).map(move |k| r * c + k)).collect();
        self.gather(Rc::new(idx), vec![rows.len(), c])
    }

    /// Columns `range` of a matrix.
    pub fn cols(self, range: std::ops::Range<usize>) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        if range.end > c || range.start >= range.end {
            return Err(Error::shape(format!("columns {range:?} of a {r}x{c} matrix")));
        }
        let w = range.len();
        let idx: Vec<usize> = (0..r).flat_map(|i| range.clone().map(move |k| i * c + k)).collect();
        self.gather(Rc::new(idx), vec![r, w])
    }

    pub fn col(self, k: usize) -> Result<Var<'t>> {
        self.cols(k..k + 1)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let n = self.len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape())));
        }
        self.gather(Rc::new((0..n).collect()), shape)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let tape = first.tape;
        let mut rows = None;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p)?;
            let (r, c) = p.dims2()?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concatenated parts differ in row count"));
            }
            dims.push(c);
        }
        let rows = rows.unwrap_or(0);
        let cols: usize = dims.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for (p, &pc) in parts.iter().zip(&dims) {
            let v = p.value();
            for r in 0..rows {
                data[r * cols + off..r * cols + off + pc].copy_from_slice(&v.data()[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        let tracked = parts.iter().any(|p| tape.tracked(p.id));
        Ok(tape.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            tracked,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary_op(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.unary_op(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Row sums of a matrix, as an `R x 1` column.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        let v = self.value();
        let data = (0..r).map(|i| v.data()[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.unary_op(Tensor::new(vec![r, 1], data)?, Op::SumCols(self.id)))
    }

    /// `out[j, c] = sum_t w_t * self[j + o_t, c]` for `j < rows`.
    pub fn stencil(self, taps: Rc<Vec<(usize, f64)>>, rows: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        let reach = taps.iter().map(|t| t.0).max().unwrap_or(0);
        if rows + reach > r {
            return Err(Error::shape(format!("stencil reaching {reach} rows past {rows} outputs on {r} rows")));
        }
        let v = self.value();
        let x = v.data();
        let mut data = vec![0.0; rows * c];
        for j in 0..rows {
            for k in 0..c {
                data[j * c + k] = taps.iter().map(|&(o, w)| w * x[(j + o) * c + k]).sum();
            }
        }
        Ok(self.unary_op(Tensor::new(vec![rows, c], data)?, Op::Stencil(self.id, taps)))
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let c = *v.shape().last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Ok(self.unary_op(Tensor::new(v.shape().to_vec(), data)?, Op::SoftmaxRows(self.id)))
    }

    fn conv_impl(self, kernel: Var<'t>, bias: Var<'t>, pad: Padding, local: bool) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        self.same_tape(&bias)?;
        let (x, w, b) = (self.value(), kernel.value(), bias.value());
        let shape = ConvShape::infer(x.shape(), w.shape(), b.shape(), local)?;
        let out = conv1d_forward(shape, pad, x.data(), w.data(), b.data());
        let tape = self.tape;
        let tracked = [self.id, kernel.id, bias.id].iter().any(|&i| tape.tracked(i));
        Ok(tape.push(
            Tensor::new(vec![shape.len, shape.c_out], out)?,
            Op::Conv { input: self.id, kernel: kernel.id, bias: bias.id, shape, pad },
            tracked,
        ))
    }

    /// Length-preserving convolution with one kernel `K x C_in x C_out`.
    pub fn conv1d(self, kernel: Var<'t>, bias: Var<'t>, pad: Padding) -> Result<Var<'t>> {
        self.conv_impl(kernel, bias, pad, false)
    }

    /// Convolution with per-position kernels `L x K x C_in x C_out` and biases `L x C_out`.
    pub fn conv1d_local(self, kernel: Var<'t>, bias: Var<'t>, pad: Padding) -> Result<Var<'t>> {
        self.conv_impl(kernel, bias, pad, true)
    }
}
