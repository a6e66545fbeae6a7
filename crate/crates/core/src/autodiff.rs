//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation as it is evaluated, in topological
//! order. [`Tape::backward`] seeds a scalar (1×1) output with gradient 1 and
//! walks the nodes in reverse, accumulating vector-Jacobian products into
//! the inputs. Constants never receive gradients, and nodes whose inputs are
//! all constant are skipped during the reverse sweep.
//!
//! Spectral nodes use the fact that both transforms are unitary: the adjoint
//! of the forward map is the inverse map and vice versa. On the DFT path the
//! real and imaginary parts are handled as two real-linear maps.

use crate::error::{FouraError, Result};
use crate::matrix::Matrix;
use crate::spectral::{self, Axis, TransformKind};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

/// Probabilities are clamped to `[EPS, 1-EPS]` when differentiating the entropy.
const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `x[i, j] * m[0, j]`.
    MulColumns(Var, Var),
    /// `x[i, j] + b[0, j]`.
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    MeanRows(Var),
    SpectralForward {
        x: Var,
        kind: TransformKind,
        axis: Axis,
        part: Part,
    },
    SpectralInverse {
        re: Var,
        im: Option<Var>,
        kind: TransformKind,
        axis: Axis,
    },
    /// Forward: `soft > τ`; backward: identity.
    StraightThrough(Var),
    /// Mean squared error against a constant target.
    Mse(Var, Matrix),
    Entropy(Var),
    HalfSumSquares(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` if nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, true)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(Op::Transpose(x), v, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(Op::Scale(x, s), v, ng)
    }

    /// Multiplies column `j` of `x` by `m[0, j]`; `m` must be `1 × cols`.
    pub fn mul_columns(&mut self, x: Var, m: Var) -> Result<Var> {
        let mv = self.value(m);
        if mv.rows() != 1 {
            return Err(FouraError::shape("column multiplier must be a row vector"));
        }
        let v = self.value(x).scale_columns(mv.data())?;
        let ng = self.needs(x) || self.needs(m);
        Ok(self.push(Op::MulColumns(x, m), v, ng))
    }

    /// Adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(FouraError::shape(format!(
                "cannot broadcast {:?} over {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            for (o, &bb) in v.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddRow(x, b), v, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(Op::Tanh(x), v, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(crate::adapter::sigmoid);
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), v, ng)
    }

    /// Mean over rows, giving a `1 × cols` node.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = Matrix::row_vector(&self.value(x).mean_rows());
        let ng = self.needs(x);
        self.push(Op::MeanRows(x), v, ng)
    }

    pub fn spectral_forward(&mut self, x: Var, kind: TransformKind, axis: Axis, part: Part) -> Result<Var> {
        let s = spectral::forward(self.value(x), kind, axis)?;
        let v = match part {
            Part::Re => s.re,
            Part::Im => s.im,
        };
        let ng = self.needs(x);
        Ok(self.push(Op::SpectralForward { x, kind, axis, part }, v, ng))
    }

    /// Real part of the inverse transform. `im` must be `None` for the DCT.
    pub fn spectral_inverse(&mut self, re: Var, im: Option<Var>, kind: TransformKind, axis: Axis) -> Result<Var> {
        if kind == TransformKind::Dct && im.is_some() {
            return Err(FouraError::invalid("DCT inverse takes no imaginary part"));
        }
        let v = spectral::inverse_parts(self.value(re), im.map(|i| self.value(i)), kind, axis)?;
        let ng = self.needs(re) || im.is_some_and(|i| self.needs(i));
        Ok(self.push(Op::SpectralInverse { re, im, kind, axis }, v, ng))
    }

    /// Hard threshold with a straight-through gradient.
    pub fn straight_through(&mut self, soft: Var, threshold: f64) -> Var {
        let v = self.value(soft).map(|m| if m > threshold { 1.0 } else { 0.0 });
        let ng = self.needs(soft);
        self.push(Op::StraightThrough(soft), v, ng)
    }

    /// `mean((x - target)²)` as a 1×1 node.
    pub fn mse(&mut self, x: Var, target: &Matrix) -> Result<Var> {
        let diff = self.value(x).sub(target)?;
        let n = diff.data().len() as f64;
        let v = Matrix::row_vector(&[diff.sum_squares() / n]);
        let ng = self.needs(x);
        Ok(self.push(Op::Mse(x, target.clone()), v, ng))
    }

    /// Binary entropy summed over all entries, as a 1×1 node.
    pub fn entropy(&mut self, m: Var) -> Result<Var> {
        let h = crate::adapter::gate_entropy_penalty(self.value(m).data())?;
        let ng = self.needs(m);
        Ok(self.push(Op::Entropy(m), Matrix::row_vector(&[h]), ng))
    }

    /// `‖x‖²/2` as a 1×1 node.
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let v = Matrix::row_vector(&[0.5 * self.value(x).sum_squares()]);
        let ng = self.needs(x);
        self.push(Op::HalfSumSquares(x), v, ng)
    }

    /// Sum of 1×1 nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| FouraError::invalid("sum of no terms"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).shape() != (1, 1) {
            return Err(FouraError::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::row_vector(&[1.0]));

        for idx in (0..=out.0).rev() {
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
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Matrix| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul(&self.value(*b).transpose())?)?;
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).transpose().matmul(g)?)?;
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s))?,
            Op::MulColumns(x, m) => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                if self.needs(*x) {
                    acc(*x, g.scale_columns(mv.data())?)?;
                }
                if self.needs(*m) {
                    acc(*m, Matrix::row_vector(&column_sums(&g.hadamard(xv)?)))?;
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone())?;
                acc(*b, Matrix::row_vector(&column_sums(g)))?;
            }
            Op::Tanh(x) => {
                let d = node.value.map(|y| 1.0 - y * y);
                acc(*x, g.hadamard(&d)?)?;
            }
            Op::Sigmoid(x) => {
                let d = node.value.map(|y| y * (1.0 - y));
                acc(*x, g.hadamard(&d)?)?;
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows() as f64;
                acc(*x, Matrix::from_fn(xv.rows(), xv.cols(), |_, j| g.get(0, j) / n))?;
            }
            Op::SpectralForward { x, kind, axis, part } => {
                let back = match (kind, part) {
                    (TransformKind::Dct, Part::Im) => return Ok(()),
                    (_, Part::Re) => spectral::inverse_parts(g, None, *kind, *axis)?,
                    (TransformKind::Dft, Part::Im) => {
                        let zero = Matrix::zeros(g.rows(), g.cols());
                        spectral::inverse_parts(&zero, Some(g), *kind, *axis)?
                    }
                };
                acc(*x, back)?;
            }
            Op::SpectralInverse { re, im, kind, axis } => {
                let s = spectral::forward(g, *kind, *axis)?;
                acc(*re, s.re)?;
                if let Some(im) = im {
                    acc(*im, s.im)?;
                }
            }
            Op::StraightThrough(x) => acc(*x, g.clone())?,
            Op::Mse(x, target) => {
                let diff = self.value(*x).sub(target)?;
                let n = diff.data().len() as f64;
                acc(*x, diff.scale(2.0 * g.get(0, 0) / n))?;
            }
            Op::Entropy(m) => {
                let s = g.get(0, 0);
                let d = self.value(*m).map(|p| {
                    let p = p.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
                    s * ((1.0 - p) / p).ln()
                });
                acc(*m, d)?;
            }
            Op::HalfSumSquares(x) => acc(*x, self.value(*x).scale(g.get(0, 0)))?,
        }
        Ok(())
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, &x) in out.iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}
