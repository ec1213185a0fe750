use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node in a [`Graph`].
///
/// Handles are only meaningful for the graph that created them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The elementwise primitives. `Add`, `Sub`, `Mul` and `Div` are binary and
/// accept equal shapes or a one-element operand on either side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Square,
    Abs,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div
        )
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Div => "div",
            Elementwise::Exp => "exp",
            Elementwise::Log => "log",
            Elementwise::Tanh => "tanh",
            Elementwise::Square => "square",
            Elementwise::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var, Broadcast),
    Unary(Elementwise, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Clamp(Var, f64, f64),
    Sum(Var),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so [`Graph::backward`] is a single reverse sweep that visits every
/// node once. A fresh graph is built for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    replay: Option<Replay>,
}

#[derive(Debug)]
struct Replay {
    values: Vec<Tensor>,
    next: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose `stop_gradient` nodes, in creation order, take the given
    /// values instead of their inputs' values.
    ///
    /// Finite-difference checks use this to hold frozen quantities at the
    /// unperturbed point, which is what the analytic gradient assumes.
    pub fn with_frozen(values: Vec<Tensor>) -> Self {
        Graph {
            replay: Some(Replay { values, next: 0 }),
            ..Graph::default()
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
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`.
    /// `None` before backward has run or when `v` does not require grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Values of every `stop_gradient` node, in creation order.
    pub fn stopped_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let value = Tensor::from_op("matmul", vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Applies an elementwise primitive. Binary ops take two operands,
    /// unary ops one.
    pub fn elementwise(&mut self, op: Elementwise, operands: &[Var]) -> Result<Var> {
        match (op.is_binary(), operands) {
            (true, &[a, b]) => self.binary(op, a, b),
            (false, &[a]) => self.unary(op, a),
            _ => Err(Error::shape(
                op.name(),
                format!("wrong operand count {}", operands.len()),
            )),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = if av.shape() == bv.shape() {
            Broadcast::Same
        } else if av.len() == 1 {
            Broadcast::LeftScalar
        } else if bv.len() == 1 {
            Broadcast::RightScalar
        } else {
            return Err(Error::shape(
                op.name(),
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        };
        let shape = match bc {
            Broadcast::LeftScalar => bv.shape().to_vec(),
            _ => av.shape().to_vec(),
        };
        let n = shape.iter().product::<usize>();
        let ad = av.data();
        let bd = bv.data();
        let get_a = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let get_b = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        if op == Elementwise::Div && bd.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            Elementwise::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        let data = (0..n).map(|i| f(get_a(i), get_b(i))).collect();
        let value = Tensor::from_op(op.name(), shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b, bc), rg))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let av = self.value(a);
        if op == Elementwise::Log {
            if let Some(bad) = av.data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match op {
            Elementwise::Exp => f64::exp,
            Elementwise::Log => f64::ln,
            Elementwise::Tanh => f64::tanh,
            Elementwise::Square => |x| x * x,
            Elementwise::Abs => f64::abs,
            _ => unreachable!(),
        };
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_op(op.name(), av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Abs, a)
    }

    /// `a * factor` for a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_op("scale", av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x + c).collect();
        let value = Tensor::from_op("add_scalar", av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (sa, sr) = (av.shape(), rv.shape());
        if sa.len() != 2 || sr.len() != 2 || sr[0] != 1 || sr[1] != sa[1] {
            return Err(Error::shape("add_row", format!("{sa:?} + {sr:?}")));
        }
        let n = sa[1];
        let rd = rv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rd[i % n])
            .collect();
        let value = Tensor::from_op("add_row", sa.to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Concatenates along `axis`. All other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "empty list"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_op("concat", shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let chunk = s[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * chunk + start * inner;
            data.extend_from_slice(&av.data()[off..off + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::from_op("narrow", shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Narrow { input: a, axis, start }, rg))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor::from_op("clamp", av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Clamp(a, lo, hi), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let value = Tensor::from_op("sum", vec![], vec![s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Identity on values, blocks all gradient flow into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = match &mut self.replay {
            Some(replay) => {
                let v = replay.values.get(replay.next).cloned().ok_or_else(|| {
                    Error::shape("stop_gradient", "replay shorter than graph")
                })?;
                replay.next += 1;
                if v.shape() != self.nodes[a.0].value.shape() {
                    return Err(Error::shape("stop_gradient", "replay shape differs"));
                }
                v
            }
            None => self.value(a).clone(),
        };
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Reverse sweep from a scalar root. Afterwards every node that requires
    /// grad holds d root / d node (zeros if the root does not depend on it).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| Tensor::zeros(n.value.shape())))
            .collect();
        if let Some(g) = grads[root.0].as_mut() {
            g.data_mut()[0] = 1.0;
        }
        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &upstream, &mut grads);
            grads[i] = Some(upstream);
        }
        if let Some(bad) = grads
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.data().iter().any(|x| !x.is_finite())))
        {
            self.grads.clear();
            return Err(Error::NonFinite {
                op: if bad == root.0 { "backward" } else { "backward (adjoint)" },
            });
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let ud = up.data();
        let mut acc = |v: Var, contrib: &[f64]| {
            if let Some(g) = grads[v.0].as_mut() {
                g.add_assign(contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                if self.node(*a).requires_grad {
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let urow = &ud[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] = urow.iter().zip(brow).map(|(u, b)| u * b).sum();
                        }
                    }
                    acc(*a, &da);
                }
                if self.node(*b).requires_grad {
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let urow = &ud[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for (d, u) in db[p * n..(p + 1) * n].iter_mut().zip(urow) {
                                *d += arp * u;
                            }
                        }
                    }
                    acc(*b, &db);
                }
            }
            Op::Binary(op, a, b, bc) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let get = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                let (da, db): (Vec<f64>, Vec<f64>) = ud
                    .iter()
                    .enumerate()
                    .map(|(j, &u)| {
                        let (x, y) = (get(ad, j), get(bd, j));
                        match op {
                            Elementwise::Add => (u, u),
                            Elementwise::Sub => (u, -u),
                            Elementwise::Mul => (u * y, u * x),
                            Elementwise::Div => (u / y, -u * x / (y * y)),
                            _ => unreachable!(),
                        }
                    })
                    .unzip();
                let reduce = |d: Vec<f64>, scalar: bool| {
                    if scalar {
                        vec![d.iter().sum()]
                    } else {
                        d
                    }
                };
                let ls = matches!(bc, Broadcast::LeftScalar);
                let rs = matches!(bc, Broadcast::RightScalar);
                acc(*a, &reduce(da, ls));
                acc(*b, &reduce(db, rs));
            }
            Op::Unary(op, a) => {
                let ad = self.value(*a).data();
                let out = node.value.data();
                let d: Vec<f64> = ud
                    .iter()
                    .enumerate()
                    .map(|(j, &u)| match op {
                        Elementwise::Exp => u * out[j],
                        Elementwise::Log => u / ad[j],
                        Elementwise::Tanh => u * (1.0 - out[j] * out[j]),
                        Elementwise::Square => 2.0 * ad[j] * u,
                        Elementwise::Abs => {
                            if ad[j] > 0.0 {
                                u
                            } else if ad[j] < 0.0 {
                                -u
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    })
                    .collect();
                acc(*a, &d);
            }
            Op::Scale(a, f) => {
                let d: Vec<f64> = ud.iter().map(|u| u * f).collect();
                acc(*a, &d);
            }
            Op::AddScalar(a) => acc(*a, ud),
            Op::AddRow(a, row) => {
                acc(*a, ud);
                let n = self.value(*row).len();
                let mut dr = vec![0.0; n];
                for (j, u) in ud.iter().enumerate() {
                    dr[j % n] += u;
                }
                acc(*row, &dr);
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).shape()[*axis] * inner;
                    if self.node(*p).requires_grad {
                        let mut d = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            let s = o * row + offset;
                            d.extend_from_slice(&ud[s..s + width]);
                        }
                        acc(*p, &d);
                    }
                    offset += width;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = self.value(*input).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let chunk = s[*axis] * inner;
                let len = node.value.shape()[*axis] * inner;
                let mut d = vec![0.0; self.value(*input).len()];
                for o in 0..outer {
                    let dst = o * chunk + start * inner;
                    d[dst..dst + len].copy_from_slice(&ud[o * len..(o + 1) * len]);
                }
                acc(*input, &d);
            }
            Op::Clamp(a, lo, hi) => {
                let ad = self.value(*a).data();
                let d: Vec<f64> = ud
                    .iter()
                    .zip(ad)
                    .map(|(u, x)| if x >= lo && x <= hi { *u } else { 0.0 })
                    .collect();
                acc(*a, &d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, &vec![ud[0]; n]);
            }
        }
    }
}
