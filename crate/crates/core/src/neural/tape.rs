//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records each operation with its value; [`Tape::backward`]
//! walks the records in reverse and accumulates adjoints. Besides the
//! neural-network primitives, the tape understands the state-space model's
//! transition, measurement and measurement-Jacobian maps, so gradients flow
//! through an entire filtering recursion.

use std::rc::Rc;

use super::tensor::{matmul_nt_acc, matmul_tn_acc, Tensor2};
use crate::error::{Error, Result};
use crate::slam_model::normalize_angle;
use crate::system::StateSpaceModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Node, Node),
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Sigmoid(Node),
    Tanh(Node),
    OneMinus(Node),
    Reshape(Node),
    Transpose(Node),
    Concat(Vec<Node>),
    /// `(x − shift) ⊙ scale`
    Affine { x: Node, scale: Rc<[f64]> },
    Scale(Node, f64),
    /// Wraps the listed entries to `[−π, π)`; derivative is one everywhere.
    Wrap(Node),
    SumSquares(Node),
    Transition { x: Node, control: Vec<f64> },
    Observe { x: Node, jacobian: Tensor2 },
    ObservationJacobian(Node),
}

struct Entry {
    value: Tensor2,
    op: Op,
    grad: bool,
}

pub struct Tape<'m> {
    entries: Vec<Entry>,
    model: Option<&'m dyn StateSpaceModel>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'m> Tape<'m> {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), model: None }
    }

    pub fn with_model(model: &'m dyn StateSpaceModel) -> Self {
        Tape { entries: Vec::new(), model: Some(model) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn model(&self) -> Result<&'m dyn StateSpaceModel> {
        self.model.ok_or_else(|| Error::invalid("tape has no state-space model attached"))
    }

    fn push(&mut self, value: Tensor2, op: Op, grad: bool) -> Node {
        self.entries.push(Entry { value, op, grad });
        Node(self.entries.len() - 1)
    }

    fn needs(&self, nodes: &[Node]) -> bool {
        nodes.iter().any(|n| self.entries[n.0].grad)
    }

    pub fn value(&self, n: Node) -> &Tensor2 {
        &self.entries[n.0].value
    }

    pub fn requires_grad(&self, n: Node) -> bool {
        self.entries[n.0].grad
    }

    /// A differentiable input (parameter).
    pub fn variable(&mut self, value: Tensor2) -> Node {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no adjoint is propagated into it.
    pub fn constant(&mut self, value: Tensor2) -> Node {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    fn zip_with(&mut self, a: Node, b: Node, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Node> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::invalid(format!("{name} shape mismatch {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let v = Tensor2::from_vec(va.rows(), va.cols(), data)?;
        let g = self.needs(&[a, b]);
        Ok(self.push(v, op, g))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        let v = self.value(a).map(sigmoid);
        let g = self.needs(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        let v = self.value(a).map(f64::tanh);
        let g = self.needs(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn one_minus(&mut self, a: Node) -> Node {
        let v = self.value(a).map(|x| 1.0 - x);
        let g = self.needs(&[a]);
        self.push(v, Op::OneMinus(a), g)
    }

    pub fn scale(&mut self, a: Node, k: f64) -> Node {
        let v = self.value(a).scale(k);
        let g = self.needs(&[a]);
        self.push(v, Op::Scale(a, k), g)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Node, rows: usize, cols: usize) -> Result<Node> {
        let v = self.value(a).clone().reshaped(rows, cols)?;
        let g = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), g))
    }

    pub fn transpose(&mut self, a: Node) -> Node {
        let v = self.value(a).transpose();
        let g = self.needs(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    /// Stacks column vectors (or any tensors with equal column counts) vertically.
    pub fn concat(&mut self, parts: &[Node]) -> Result<Node> {
        let cols = parts.first().map(|p| self.value(*p).cols()).unwrap_or(1);
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::invalid("concat operands have different column counts"));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let v = Tensor2::from_vec(rows, cols, data)?;
        let g = self.needs(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), g))
    }

    /// `(x − shift) ⊙ scale`, elementwise with per-entry constants.
    pub fn affine(&mut self, x: Node, shift: &[f64], scale: Rc<[f64]>) -> Result<Node> {
        let vx = self.value(x);
        if shift.len() != vx.len() || scale.len() != vx.len() {
            return Err(Error::invalid(format!(
                "affine constants of length {}/{} for a tensor of {} entries",
                shift.len(),
                scale.len(),
                vx.len()
            )));
        }
        let data = vx.data().iter().zip(shift).zip(scale.iter()).map(|((v, s), k)| (v - s) * k).collect();
        let v = Tensor2::from_vec(vx.rows(), vx.cols(), data)?;
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::Affine { x, scale }, g))
    }

    /// Wraps the entries at `indices` (flat positions) to `[−π, π)`.
    pub fn wrap(&mut self, a: Node, indices: &[usize]) -> Node {
        let mut v = self.value(a).clone();
        for &i in indices {
            let d = v.data_mut();
            d[i] = normalize_angle(d[i]);
        }
        let g = self.needs(&[a]);
        self.push(v, Op::Wrap(a), g)
    }

    pub fn sum_squares(&mut self, a: Node) -> Node {
        let v = Tensor2::column(vec![self.value(a).norm_squared()]);
        let g = self.needs(&[a]);
        self.push(v, Op::SumSquares(a), g)
    }

    /// Noise-free state transition `f(x, u)` of the attached model.
    pub fn transition(&mut self, x: Node, control: &[f64]) -> Result<Node> {
        let model = self.model()?;
        let out = model.transition(&self.value(x).to_dvector(), control)?;
        let g = self.needs(&[x]);
        Ok(self.push(Tensor2::from_dvector(&out), Op::Transition { x, control: control.to_vec() }, g))
    }

    /// Measurement prediction `h(x)` of the attached model.
    pub fn observe(&mut self, x: Node) -> Result<Node> {
        let model = self.model()?;
        let xv = self.value(x).to_dvector();
        let out = model.observe(&xv)?;
        let g = self.needs(&[x]);
        let jacobian = if g { Tensor2::from_dmatrix(&model.observation_jacobian(&xv)?) } else { Tensor2::zeros(0, 0) };
        Ok(self.push(Tensor2::from_dvector(&out), Op::Observe { x, jacobian }, g))
    }

    /// Measurement Jacobian `H(x)` of the attached model, differentiable in `x`.
    pub fn observation_jacobian(&mut self, x: Node) -> Result<Node> {
        let model = self.model()?;
        let h = model.observation_jacobian(&self.value(x).to_dvector())?;
        let g = self.needs(&[x]);
        Ok(self.push(Tensor2::from_dmatrix(&h), Op::ObservationJacobian(x), g))
    }

    /// Reverse pass from a scalar node with unit seed.
    pub fn backward(&self, root: Node) -> Result<Adjoints> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid("backward needs a scalar root; use backward_seeded"));
        }
        self.backward_seeded(&[(root, Tensor2::column(vec![1.0]))])
    }

    /// Reverse pass with explicit adjoints for any number of nodes.
    pub fn backward_seeded(&self, seeds: &[(Node, Tensor2)]) -> Result<Adjoints> {
        let mut adj: Vec<Option<Tensor2>> = vec![None; self.entries.len()];
        let mut top = 0;
        for (n, seed) in seeds {
            if seed.shape() != self.value(*n).shape() {
                return Err(Error::invalid(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    self.value(*n).shape()
                )));
            }
            accumulate(&mut adj[n.0], seed.clone());
            top = top.max(n.0 + 1);
        }
        for i in (0..top).rev() {
            let entry = &self.entries[i];
            if !entry.grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Adjoints { adj })
    }

    fn propagate(&self, i: usize, g: &Tensor2, adj: &mut [Option<Tensor2>]) -> Result<()> {
        let entry = &self.entries[i];
        let out = &entry.value;
        match &entry.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(g.data(), vb.data(), &mut ga, m, n, k);
                    accumulate(&mut adj[a.0], Tensor2::from_vec(m, k, ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(va.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut adj[b.0], Tensor2::from_vec(k, n, gb)?);
                }
            }
            Op::Add(a, b) => {
                self.send(*a, g.clone(), adj);
                self.send(*b, g.clone(), adj);
            }
            Op::Sub(a, b) => {
                self.send(*a, g.clone(), adj);
                self.send(*b, g.scale(-1.0), adj);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.send(*a, hadamard(g, self.value(*b)), adj);
                }
                if self.requires_grad(*b) {
                    self.send(*b, hadamard(g, self.value(*a)), adj);
                }
            }
            Op::Sigmoid(a) => {
                let d = zip(g, out, |gv, s| gv * s * (1.0 - s));
                self.send(*a, d, adj);
            }
            Op::Tanh(a) => {
                let d = zip(g, out, |gv, t| gv * (1.0 - t * t));
                self.send(*a, d, adj);
            }
            Op::OneMinus(a) => self.send(*a, g.scale(-1.0), adj),
            Op::Scale(a, k) => self.send(*a, g.scale(*k), adj),
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.send(*a, g.clone().reshaped(r, c)?, adj);
            }
            Op::Transpose(a) => self.send(*a, g.transpose(), adj),
            Op::Concat(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let len = r * c;
                    if self.requires_grad(*p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.send(*p, Tensor2::from_vec(r, cols.max(c), slice)?, adj);
                    }
                    offset += len;
                }
            }
            Op::Affine { x, scale } => {
                let data = g.data().iter().zip(scale.iter()).map(|(gv, k)| gv * k).collect();
                self.send(*x, Tensor2::from_vec(g.rows(), g.cols(), data)?, adj);
            }
            Op::Wrap(a) => self.send(*a, g.clone(), adj),
            Op::SumSquares(a) => {
                let s = g.data()[0];
                self.send(*a, self.value(*a).scale(2.0 * s), adj);
            }
            Op::Transition { x, control } => {
                let model = self.model()?;
                let f = model.transition_jacobian(&self.value(*x).to_dvector(), control)?;
                let gx = f.transpose() * g.to_dvector();
                self.send(*x, Tensor2::from_dvector(&gx), adj);
            }
            Op::Observe { x, jacobian } => {
                let (p, n) = jacobian.shape();
                let mut gx = vec![0.0; n];
                matmul_tn_acc(jacobian.data(), g.data(), &mut gx, p, n, 1);
                self.send(*x, Tensor2::column(gx), adj);
            }
            Op::ObservationJacobian(x) => {
                let model = self.model()?;
                let gx = model.observation_jacobian_vjp(&self.value(*x).to_dvector(), &g.to_dmatrix())?;
                self.send(*x, Tensor2::from_dvector(&gx), adj);
            }
        }
        Ok(())
    }

    fn send(&self, n: Node, g: Tensor2, adj: &mut [Option<Tensor2>]) {
        if self.requires_grad(n) {
            accumulate(&mut adj[n.0], g);
        }
    }
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).expect("zip of equal shapes")
}

fn hadamard(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    zip(a, b, |x, y| x * y)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by a reverse pass.
pub struct Adjoints {
    adj: Vec<Option<Tensor2>>,
}

impl Adjoints {
    /// Adjoint of `n`, or `None` if nothing flowed into it.
    pub fn get(&self, n: Node) -> Option<&Tensor2> {
        self.adj.get(n.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `n`, zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, n: Node, rows: usize, cols: usize) -> Tensor2 {
        self.get(n).cloned().unwrap_or_else(|| Tensor2::zeros(rows, cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slam_model::RangeBearingModel;
    use crate::system::StateSpaceModel;
    use nalgebra::DVector;

    fn fd_check<F>(x0: &Tensor2, f: F, analytic: &Tensor2, tol: f64)
    where
        F: Fn(&Tensor2) -> f64,
    {
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= tol * (1.0 + fd.abs()), "entry {i}: fd {fd} vs analytic {a}");
        }
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let w0 = Tensor2::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let x = Tensor2::column(vec![0.4, -0.2, 0.9, 0.1]);
        let eval = |w: &Tensor2| -> (f64, Option<Tensor2>) {
            let mut t = Tape::new();
            let wn = t.variable(w.clone());
            let xn = t.constant(x.clone());
            let a = t.matmul(wn, xn).unwrap();
            let s = t.sigmoid(a);
            let th = t.tanh(a);
            let m = t.mul(s, th).unwrap();
            let om = t.one_minus(m);
            let c = t.concat(&[om, a]).unwrap();
            let r = t.reshape(c, 2, 3).unwrap();
            let tr = t.transpose(r);
            let sc = t.scale(tr, 1.7);
            let aff = t.affine(sc, &[0.1; 6], Rc::from(vec![0.5, 1.0, 2.0, -1.0, 3.0, 0.2])).unwrap();
            let loss = t.sum_squares(aff);
            let grads = t.backward(loss).unwrap();
            (t.value(loss).data()[0], grads.get(wn).cloned())
        };
        let (_, g) = eval(&w0);
        fd_check(&w0, |w| eval(w).0, &g.unwrap(), 1e-6);
    }

    #[test]
    fn model_ops_match_finite_differences() {
        let model = RangeBearingModel::new(2).unwrap();
        let x0 = Tensor2::column(vec![0.5, -1.0, 0.7, 6.0, 3.0, -4.0, 5.0]);
        let weights = Tensor2::from_fn(4, 7, |r, c| ((r + 2 * c) % 5) as f64 * 0.2 - 0.3);
        let eval = |x: &Tensor2| -> (f64, Option<Tensor2>) {
            let mut t = Tape::with_model(&model);
            let xn = t.variable(x.clone());
            let fx = t.transition(xn, &[1.5, 0.3]).unwrap();
            let hx = t.observe(fx).unwrap();
            let jac = t.observation_jacobian(fx).unwrap();
            let wn = t.constant(weights.clone());
            let prod = t.mul(jac, wn).unwrap();
            let flat = t.reshape(prod, 28, 1).unwrap();
            let wrapped = t.wrap(hx, &[1, 3]);
            let c = t.concat(&[flat, wrapped]).unwrap();
            let loss = t.sum_squares(c);
            let g = t.backward(loss).unwrap();
            (t.value(loss).data()[0], g.get(xn).cloned())
        };
        let (_, g) = eval(&x0);
        fd_check(&x0, |x| eval(x).0, &g.unwrap(), 1e-6);
        // sanity: the model pieces agree with the direct model calls
        let f = model.transition(&x0.to_dvector(), &[1.5, 0.3]).unwrap();
        assert!(model.observe(&f).is_ok());
        let _ = DVector::<f64>::zeros(1);
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut t = Tape::new();
        let a = t.constant(Tensor2::column(vec![1.0, 2.0]));
        let b = t.variable(Tensor2::column(vec![3.0, 4.0]));
        let s = t.mul(a, b).unwrap();
        let l = t.sum_squares(s);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0 * 3.0 * 1.0, 2.0 * 8.0 * 2.0]);
    }

    #[test]
    fn model_ops_require_a_model() {
        let mut t = Tape::new();
        let x = t.variable(Tensor2::column(vec![0.0; 5]));
        assert!(t.observe(x).is_err());
    }
}
