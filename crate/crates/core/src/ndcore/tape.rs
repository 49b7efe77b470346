//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node to the tape; nodes are therefore stored in a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};

use super::matrix::{Lu, Matrix};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Solve(Var, Var, Box<Lu>),
    HCat(Var, Var),
    SelectRows(Var, Vec<usize>),
    ReverseGrad(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_margin: f64,
    solve_count: usize,
}

/// Gradients of a scalar output with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, lhs: &Matrix, rhs: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_margin: f64::INFINITY,
            solve_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |input| seen by any relu on this tape; used to keep
    /// finite-difference checks away from the kink.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    pub fn solve_count(&self) -> usize {
        self.solve_count
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copy of `v` as a constant: the backward pass stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// `a + 1·row`, broadcasting a 1 x m row over the n rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (o, r) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("sub_row", av, rv));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (o, r) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *o -= r;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::SubRow(a, row), ng))
    }

    /// Scales row i of `a` by `col[i]` (col is n x 1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("mul_col", av, cv));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            let s = cv.data()[i];
            value.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(value, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// relu with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let margin = input.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let value = input.map(|v| v.max(0.0));
        self.relu_margin = self.relu_margin.min(margin);
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Column sums, 1 x m.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Column means, 1 x m.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows().max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, n x 1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), 1);
        for i in 0..av.rows() {
            value.data_mut()[i] = av.row(i).iter().sum();
        }
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// `A⁻¹ B` via LU; the adjoint reuses the factorization.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let lu = Lu::factor(self.value(a))?;
        let value = lu.solve(self.value(b))?;
        self.solve_count += 1;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Solve(a, b, Box::new(lu)), ng))
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hcat(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::HCat(a, b), ng))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(value, Op::SelectRows(a, idx.to_vec()), ng)
    }

    /// Identity forward; negates the gradient flowing back.
    pub fn reverse_grad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        let ng = self.ng(a);
        self.push(value, Op::ReverseGrad(a), ng)
    }

    /// Dense layer `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Reverse sweep from a 1x1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // Only leaves keep meaningful gradients for callers; interior values are kept too
        // since `wrt` may be asked about intermediates (e.g. representations).
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b))?);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.hadamard(val(*b))?);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.hadamard(val(*a))?);
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*r) {
                    self.accumulate(grads, *r, g.sum_rows());
                }
            }
            Op::SubRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*r) {
                    self.accumulate(grads, *r, g.sum_rows().scale(-1.0));
                }
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = cv.data()[i];
                        ga.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*c) {
                    let av = val(*a);
                    let mut gc = Matrix::zeros(cv.rows(), 1);
                    for i in 0..gc.rows() {
                        gc.data_mut()[i] = g.row(i).iter().zip(av.row(i)).map(|(p, q)| p * q).sum();
                    }
                    self.accumulate(grads, *c, gc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = node.value.map(|s| s * (1.0 - s));
                self.accumulate(grads, *a, g.hadamard(&d)?);
            }
            Op::Tanh(a) => {
                let d = node.value.map(|t| 1.0 - t * t);
                self.accumulate(grads, *a, g.hadamard(&d)?);
            }
            Op::Relu(a) => {
                let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.hadamard(&d)?);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(&node.value)?),
            Op::Log(a) => {
                let d = val(*a).map(|x| 1.0 / x);
                self.accumulate(grads, *a, g.hadamard(&d)?);
            }
            Op::Softplus(a) => {
                let d = val(*a).map(sigmoid);
                self.accumulate(grads, *a, g.hadamard(&d)?);
            }
            Op::Square(a) => {
                let d = val(*a).scale(2.0);
                self.accumulate(grads, *a, g.hadamard(&d)?);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item() / n));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(g.data());
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let s = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|v| *v = s);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Solve(a, b, lu) => {
                // X = A⁻¹B:  B̄ = A⁻ᵀ X̄,  Ā = −B̄ Xᵀ
                let gb = lu.solve_transposed(g)?;
                if self.ng(*a) {
                    let ga = gb.matmul_t(&node.value)?.scale(-1.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::HCat(a, b) => {
                let ca = val(*a).cols();
                let (ga, gb) = g.split_cols(ca);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SelectRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ReverseGrad(a) => self.accumulate(grads, *a, g.scale(-1.0)),
        }
        Ok(())
    }
}
