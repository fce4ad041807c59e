//! Wengert-list reverse-mode differentiation over dense real matrices.
//!
//! Every tensor is two-dimensional; scalars are `1x1` and vectors are
//! columns unless stated otherwise. Complex quantities travel as pairs of
//! real tensors (`re`, `im`), and the two complex-valued ops return their
//! result column-stacked as `[re | im]`.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Operation kinds accepted by [`Tape::record`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Sum,
    /// Sum over rows, producing a `1 x cols` row.
    SumRows,
    /// Sum over columns, producing a `rows x 1` column.
    SumCols,
    Exp,
    Log,
    Softplus,
    Sqrt,
    Negate,
    Scale(f64),
    /// Concatenation along rows (`axis = 0`) or columns (`axis = 1`).
    Concat { axis: usize },
    Slice { rows: (usize, usize), cols: (usize, usize) },
    /// Picks flat (row-major) entries of the input into a new `shape`.
    Gather { index: Rc<Vec<usize>>, shape: (usize, usize) },
    /// Diagonal of a square matrix as a column.
    Diag,
    Cholesky,
    /// Solves `L X = B` (or `Lᵀ X = B` when `transpose`) for lower-triangular `L`.
    TriangularSolve { transpose: bool },
    /// `(eᵃ cos b, eᵃ sin b)` element-wise, returned as `[re | im]`.
    ComplexExpPair,
    /// Complex linear recurrence `x_k = a x_{k-1} + b_k` with `x_{-1} = 0`,
    /// per column. Inputs `a_re, a_im` (`1 x c`), `b_re, b_im` (`n x c`);
    /// output `n x 2c` as `[re | im]`.
    CumulativeScan,
    /// Pairwise squared Euclidean distances between the rows of two matrices.
    SqDist,
    /// Unit Matern-3/2 profile `(1 + √3 r) e^{-√3 r}` of squared distances `r²`.
    Matern32,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::SumRows => "sum_rows",
            OpKind::SumCols => "sum_cols",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Sqrt => "sqrt",
            OpKind::Negate => "negate",
            OpKind::Scale(_) => "scale",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Gather { .. } => "gather",
            OpKind::Diag => "diag",
            OpKind::Cholesky => "cholesky",
            OpKind::TriangularSolve { .. } => "triangular_solve",
            OpKind::ComplexExpPair => "complex_exp_pair",
            OpKind::CumulativeScan => "cumulative_scan",
            OpKind::SqDist => "sq_dist",
            OpKind::Matern32 => "matern32",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::TriangularSolve { .. }
            | OpKind::ComplexExpPair
            | OpKind::SqDist => Some(2),
            OpKind::CumulativeScan => Some(4),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Leaf,
    Constant,
    Op(OpTag),
}

/// Lightweight tag of the op that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpTag(&'static str);

impl OpTag {
    pub fn name(&self) -> &'static str {
        self.0
    }
}

struct Node {
    value: Matrix,
    kind: Option<OpKind>,
    inputs: Vec<usize>,
    requires_grad: bool,
    leaf: bool,
}

/// Records operations in execution order. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.rows(), v.cols())
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Matrix>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(&var.id)
    }

    /// Gradient for `var`, or zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        match self.grads.get(&var.id) {
            Some(g) => g.clone(),
            None => {
                let v = var.value();
                Matrix::zeros(v.rows(), v.cols())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn broadcast_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(shape_err(
            op,
            format!("cannot broadcast {}x{} with {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        )),
    }
}

#[inline]
fn bget(m: &Matrix, i: usize, j: usize) -> f64 {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    m[(r, c)]
}

fn broadcast_apply(a: &Matrix, b: &Matrix, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    Matrix::from_fn(shape.0, shape.1, |i, j| f(bget(a, i, j), bget(b, i, j)))
}

/// Sums a broadcast gradient back down to `target` shape.
fn reduce_to(g: Matrix, rows: usize, cols: usize) -> Matrix {
    if g.rows() == rows && g.cols() == cols {
        return g;
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if rows == 1 { 0 } else { i };
            let c = if cols == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

fn forward(kind: &OpKind, vals: &[&Matrix], check_domain: bool) -> Result<Matrix> {
    let name = kind.name();
    if let Some(n) = kind.arity() {
        if vals.len() != n {
            return Err(shape_err(name, format!("expected {n} inputs, got {}", vals.len())));
        }
    }
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (vals[0], vals[1]);
            let shape = broadcast_shape(name, a, b)?;
            match kind {
                OpKind::Add => broadcast_apply(a, b, shape, |x, y| x + y),
                OpKind::Sub => broadcast_apply(a, b, shape, |x, y| x - y),
                OpKind::Mul => broadcast_apply(a, b, shape, |x, y| x * y),
                _ => {
                    if check_domain && b.as_slice().iter().any(|&v| v == 0.0) {
                        return Err(Error::Domain { op: name, detail: "division by zero".into() });
                    }
                    broadcast_apply(a, b, shape, |x, y| x / y)
                }
            }
        }
        OpKind::MatMul => {
            let (a, b) = (vals[0], vals[1]);
            if a.cols() != b.rows() {
                return Err(shape_err(
                    name,
                    format!("{}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                ));
            }
            a.matmul(b)
        }
        OpKind::Transpose => vals[0].transpose(),
        OpKind::Sum => Matrix::scalar(vals[0].sum()),
        OpKind::SumRows => {
            let a = vals[0];
            let mut out = Matrix::zeros(1, a.cols());
            for i in 0..a.rows() {
                for (o, v) in out.as_mut_slice().iter_mut().zip(a.row_slice(i)) {
                    *o += v;
                }
            }
            out
        }
        OpKind::SumCols => {
            let a = vals[0];
            Matrix::column((0..a.rows()).map(|i| a.row_slice(i).iter().sum()).collect())
        }
        OpKind::Exp => vals[0].map(f64::exp),
        OpKind::Log => {
            if check_domain && vals[0].as_slice().iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain { op: name, detail: "logarithm of a non-positive value".into() });
            }
            vals[0].map(f64::ln)
        }
        OpKind::Softplus => vals[0].map(softplus),
        OpKind::Sqrt => {
            if check_domain && vals[0].as_slice().iter().any(|&v| v < 0.0) {
                return Err(Error::Domain { op: name, detail: "square root of a negative value".into() });
            }
            vals[0].map(|v| v.max(0.0).sqrt())
        }
        OpKind::Negate => vals[0].map(|v| -v),
        OpKind::Scale(s) => vals[0].scale(*s),
        OpKind::Concat { axis } => {
            if vals.is_empty() {
                return Err(shape_err(name, "nothing to concatenate".into()));
            }
            match axis {
                0 => {
                    let c = vals[0].cols();
                    if vals.iter().any(|v| v.cols() != c) {
                        return Err(shape_err(name, "column counts differ".into()));
                    }
                    let rows: usize = vals.iter().map(|v| v.rows()).sum();
                    let mut data = Vec::with_capacity(rows * c);
                    for v in vals {
                        data.extend_from_slice(v.as_slice());
                    }
                    Matrix::new(rows, c, data)
                }
                1 => {
                    let r = vals[0].rows();
                    if vals.iter().any(|v| v.rows() != r) {
                        return Err(shape_err(name, "row counts differ".into()));
                    }
                    let cols: usize = vals.iter().map(|v| v.cols()).sum();
                    let mut data = Vec::with_capacity(r * cols);
                    for i in 0..r {
                        for v in vals {
                            data.extend_from_slice(v.row_slice(i));
                        }
                    }
                    Matrix::new(r, cols, data)
                }
                _ => return Err(shape_err(name, format!("axis {axis} out of range"))),
            }
        }
        OpKind::Slice { rows, cols } => {
            let a = vals[0];
            if rows.0 > rows.1 || rows.1 > a.rows() || cols.0 > cols.1 || cols.1 > a.cols() {
                return Err(shape_err(
                    name,
                    format!("range {rows:?} x {cols:?} outside {}x{}", a.rows(), a.cols()),
                ));
            }
            Matrix::from_fn(rows.1 - rows.0, cols.1 - cols.0, |i, j| a[(rows.0 + i, cols.0 + j)])
        }
        OpKind::Gather { index, shape } => {
            let a = vals[0];
            if index.len() != shape.0 * shape.1 {
                return Err(shape_err(name, "index length does not match output shape".into()));
            }
            if let Some(&bad) = index.iter().find(|&&k| k >= a.len()) {
                return Err(shape_err(name, format!("index {bad} out of bounds for {} entries", a.len())));
            }
            let src = a.as_slice();
            Matrix::new(shape.0, shape.1, index.iter().map(|&k| src[k]).collect())
        }
        OpKind::Diag => {
            let a = vals[0];
            if a.rows() != a.cols() {
                return Err(shape_err(name, "diagonal of a non-square matrix".into()));
            }
            Matrix::column(a.diagonal())
        }
        OpKind::Cholesky => {
            let a = vals[0];
            if a.rows() != a.cols() {
                return Err(shape_err(name, "cholesky of a non-square matrix".into()));
            }
            match a.cholesky() {
                Ok(l) => l,
                Err(pivot) => {
                    if check_domain {
                        return Err(Error::NotPositiveDefinite { pivot });
                    }
                    Matrix::filled(a.rows(), a.cols(), f64::NAN)
                }
            }
        }
        OpKind::TriangularSolve { transpose } => {
            let (l, b) = (vals[0], vals[1]);
            if l.rows() != l.cols() || b.rows() != l.rows() {
                return Err(shape_err(
                    name,
                    format!("factor {}x{} with right-hand side {}x{}", l.rows(), l.cols(), b.rows(), b.cols()),
                ));
            }
            if check_domain && l.diagonal().iter().any(|&d| d == 0.0) {
                return Err(Error::Domain { op: name, detail: "zero on the triangular diagonal".into() });
            }
            if *transpose {
                l.solve_lower_transpose(b)
            } else {
                l.solve_lower(b)
            }
        }
        OpKind::ComplexExpPair => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(name, "real and imaginary parts differ in shape".into()));
            }
            let (r, c) = (a.rows(), a.cols());
            let mut out = Matrix::zeros(r, 2 * c);
            for i in 0..r {
                for j in 0..c {
                    let m = a[(i, j)].exp();
                    let (s, co) = b[(i, j)].sin_cos();
                    out[(i, j)] = m * co;
                    out[(i, c + j)] = m * s;
                }
            }
            out
        }
        OpKind::CumulativeScan => {
            let (are, aim, bre, bim) = (vals[0], vals[1], vals[2], vals[3]);
            let c = are.cols();
            if are.rows() != 1 || aim.shape() != are.shape() || bre.cols() != c || bim.shape() != bre.shape() {
                return Err(shape_err(name, "expected 1xc coefficients and nxc drives".into()));
            }
            let n = bre.rows();
            let mut out = Matrix::zeros(n, 2 * c);
            for j in 0..c {
                let (ar, ai) = (are[(0, j)], aim[(0, j)]);
                let (mut xr, mut xi) = (0.0, 0.0);
                for k in 0..n {
                    let nr = ar * xr - ai * xi + bre[(k, j)];
                    let ni = ar * xi + ai * xr + bim[(k, j)];
                    xr = nr;
                    xi = ni;
                    out[(k, j)] = xr;
                    out[(k, c + j)] = xi;
                }
            }
            out
        }
        OpKind::SqDist => {
            let (x, z) = (vals[0], vals[1]);
            if x.cols() != z.cols() {
                return Err(shape_err(name, format!("point dimensions {} and {}", x.cols(), z.cols())));
            }
            Matrix::from_fn(x.rows(), z.rows(), |i, j| {
                x.row_slice(i).iter().zip(z.row_slice(j)).map(|(a, b)| (a - b) * (a - b)).sum()
            })
        }
        OpKind::Matern32 => vals[0].map(|d2| {
            let r = SQRT3 * d2.max(0.0).sqrt();
            (1.0 + r) * (-r).exp()
        }),
    };
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(Node { value, kind: None, inputs: Vec::new(), requires_grad: true, leaf: true })
    }

    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(Node { value, kind: None, inputs: Vec::new(), requires_grad: false, leaf: false })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    pub fn provenance(&self, var: Var<'_>) -> Provenance {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        match &node.kind {
            Some(k) => Provenance::Op(OpTag(k.name())),
            None if node.leaf => Provenance::Leaf,
            None => Provenance::Constant,
        }
    }

    /// Checked entry point: validates operand shapes and the op's domain
    /// before appending the node.
    pub fn record<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        self.apply(kind, inputs, true)
    }

    fn apply<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>], check_domain: bool) -> Result<Var<'t>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::Contract("operand belongs to another tape".into()));
            }
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Matrix> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = forward(&kind, &vals, check_domain)?;
            (value, inputs.iter().any(|v| nodes[v.id].requires_grad))
        };
        Ok(self.push(Node {
            value,
            kind: Some(kind),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            leaf: false,
        }))
    }

    /// Unchecked-domain variant used by the ergonomic helpers. Shape errors
    /// are programming errors and panic.
    fn op<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Var<'t> {
        match self.apply(kind, inputs, false) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        self.op(OpKind::Concat { axis }, parts)
    }

    pub fn cumulative_scan<'t>(&'t self, a_re: Var<'t>, a_im: Var<'t>, b_re: Var<'t>, b_im: Var<'t>) -> Var<'t> {
        self.op(OpKind::CumulativeScan, &[a_re, a_im, b_re, b_im])
    }

    /// Reverse sweep from a `1x1` output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.rows() != 1 || out.value.cols() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {}x{}",
                out.value.rows(),
                out.value.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        grads[output.id] = Some(Matrix::scalar(1.0));
        let mut result = Gradients::default();
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(kind) = &node.kind else {
                if node.leaf {
                    result.grads.insert(id, g);
                }
                continue;
            };
            let contributions = backward_rule(kind, &nodes, node, &g);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    if !nodes[*input].requires_grad {
                        continue;
                    }
                    match &mut grads[*input] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        Ok(result)
    }
}

fn backward_rule(kind: &OpKind, nodes: &[Node], node: &Node, g: &Matrix) -> Vec<Option<Matrix>> {
    let input = |k: usize| &nodes[node.inputs[k]].value;
    let wants = |k: usize| nodes[node.inputs[k]].requires_grad;
    let y = &node.value;
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (input(0), input(1));
            let shape = (y.rows(), y.cols());
            let ga = wants(0).then(|| {
                let full = match kind {
                    OpKind::Add | OpKind::Sub => g.clone(),
                    OpKind::Mul => broadcast_apply(g, b, shape, |gv, bv| gv * bv),
                    _ => broadcast_apply(g, b, shape, |gv, bv| gv / bv),
                };
                reduce_to(full, a.rows(), a.cols())
            });
            let gb = wants(1).then(|| {
                let full = match kind {
                    OpKind::Add => g.clone(),
                    OpKind::Sub => g.scale(-1.0),
                    OpKind::Mul => broadcast_apply(g, a, shape, |gv, av| gv * av),
                    _ => Matrix::from_fn(shape.0, shape.1, |i, j| {
                        let bv = bget(b, i, j);
                        -g[(i, j)] * bget(a, i, j) / (bv * bv)
                    }),
                };
                reduce_to(full, b.rows(), b.cols())
            });
            vec![ga, gb]
        }
        OpKind::MatMul => {
            let (a, b) = (input(0), input(1));
            let ga = wants(0).then(|| g.matmul(&b.transpose()));
            let gb = wants(1).then(|| a.transpose().matmul(g));
            vec![ga, gb]
        }
        OpKind::Transpose => vec![Some(g.transpose())],
        OpKind::Sum => {
            let a = input(0);
            vec![Some(Matrix::filled(a.rows(), a.cols(), g.item()))]
        }
        OpKind::SumRows => {
            let a = input(0);
            vec![Some(Matrix::from_fn(a.rows(), a.cols(), |_, j| g[(0, j)]))]
        }
        OpKind::SumCols => {
            let a = input(0);
            vec![Some(Matrix::from_fn(a.rows(), a.cols(), |i, _| g[(i, 0)]))]
        }
        OpKind::Exp => vec![Some(g.zip_map(y, |gv, yv| gv * yv))],
        OpKind::Log => vec![Some(g.zip_map(input(0), |gv, xv| gv / xv))],
        OpKind::Softplus => vec![Some(g.zip_map(input(0), |gv, xv| gv * sigmoid(xv)))],
        OpKind::Sqrt => vec![Some(g.zip_map(y, |gv, yv| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 }))],
        OpKind::Negate => vec![Some(g.scale(-1.0))],
        OpKind::Scale(s) => vec![Some(g.scale(*s))],
        OpKind::Concat { axis } => {
            let mut out = Vec::with_capacity(node.inputs.len());
            let mut offset = 0;
            for k in 0..node.inputs.len() {
                let part = input(k);
                let piece = if *axis == 0 {
                    Matrix::from_fn(part.rows(), part.cols(), |i, j| g[(offset + i, j)])
                } else {
                    Matrix::from_fn(part.rows(), part.cols(), |i, j| g[(i, offset + j)])
                };
                offset += if *axis == 0 { part.rows() } else { part.cols() };
                out.push(wants(k).then_some(piece));
            }
            out
        }
        OpKind::Slice { rows, cols } => {
            let a = input(0);
            let mut ga = Matrix::zeros(a.rows(), a.cols());
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    ga[(rows.0 + i, cols.0 + j)] = g[(i, j)];
                }
            }
            vec![Some(ga)]
        }
        OpKind::Gather { index, .. } => {
            let a = input(0);
            let mut ga = Matrix::zeros(a.rows(), a.cols());
            let dst = ga.as_mut_slice();
            for (&k, &gv) in index.iter().zip(g.as_slice()) {
                dst[k] += gv;
            }
            vec![Some(ga)]
        }
        OpKind::Diag => {
            let n = input(0).rows();
            let mut ga = Matrix::zeros(n, n);
            for i in 0..n {
                ga[(i, i)] = g[(i, 0)];
            }
            vec![Some(ga)]
        }
        OpKind::Cholesky => {
            // S = L⁻ᵀ Φ(Lᵀ Ḡ) L⁻¹ with Φ the lower triangle with halved diagonal;
            // the forward pass reads sym(A), so the gradient is sym(S).
            let l = y;
            let n = l.rows();
            let mut p = l.transpose().matmul(g);
            for i in 0..n {
                for j in 0..n {
                    if j > i {
                        p[(i, j)] = 0.0;
                    } else if j == i {
                        p[(i, j)] *= 0.5;
                    }
                }
            }
            let right = l.solve_lower_transpose(&p.transpose()).transpose();
            let s = l.solve_lower_transpose(&right);
            vec![Some(s.symmetrized())]
        }
        OpKind::TriangularSolve { transpose } => {
            let l = input(0);
            let x = y;
            if *transpose {
                let gb = l.solve_lower(g);
                let gl = wants(0).then(|| x.matmul(&gb.transpose()).lower_triangle().scale(-1.0));
                vec![gl, wants(1).then_some(gb)]
            } else {
                let gb = l.solve_lower_transpose(g);
                let gl = wants(0).then(|| gb.matmul(&x.transpose()).lower_triangle().scale(-1.0));
                vec![gl, wants(1).then_some(gb)]
            }
        }
        OpKind::ComplexExpPair => {
            let c = input(0).cols();
            let r = input(0).rows();
            let mut ga = Matrix::zeros(r, c);
            let mut gb = Matrix::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    let (re, im) = (y[(i, j)], y[(i, c + j)]);
                    let (gr, gi) = (g[(i, j)], g[(i, c + j)]);
                    ga[(i, j)] = gr * re + gi * im;
                    gb[(i, j)] = -gr * im + gi * re;
                }
            }
            vec![Some(ga), Some(gb)]
        }
        OpKind::CumulativeScan => {
            let (are, aim) = (input(0), input(1));
            let c = are.cols();
            let n = y.rows();
            let mut g_are = Matrix::zeros(1, c);
            let mut g_aim = Matrix::zeros(1, c);
            let mut g_bre = Matrix::zeros(n, c);
            let mut g_bim = Matrix::zeros(n, c);
            for j in 0..c {
                // adjoint in the Re + i·Im convention: s_k = ĝ_k + conj(a) s_{k+1}
                let (ar, ai) = (are[(0, j)], aim[(0, j)]);
                let (mut sr, mut si) = (0.0, 0.0);
                let (mut acc_r, mut acc_i) = (0.0, 0.0);
                for k in (0..n).rev() {
                    let nr = g[(k, j)] + ar * sr + ai * si;
                    let ni = g[(k, c + j)] + ar * si - ai * sr;
                    sr = nr;
                    si = ni;
                    g_bre[(k, j)] = sr;
                    g_bim[(k, j)] = si;
                    if k > 0 {
                        // ā += s_k · conj(x_{k-1})
                        let (xr, xi) = (y[(k - 1, j)], y[(k - 1, c + j)]);
                        acc_r += sr * xr + si * xi;
                        acc_i += si * xr - sr * xi;
                    }
                }
                g_are[(0, j)] = acc_r;
                g_aim[(0, j)] = acc_i;
            }
            vec![
                wants(0).then_some(g_are),
                wants(1).then_some(g_aim),
                wants(2).then_some(g_bre),
                wants(3).then_some(g_bim),
            ]
        }
        OpKind::SqDist => {
            let (x, z) = (input(0), input(1));
            let gx = wants(0).then(|| {
                let gz = g.matmul(z);
                Matrix::from_fn(x.rows(), x.cols(), |i, k| {
                    let rs: f64 = g.row_slice(i).iter().sum();
                    2.0 * (rs * x[(i, k)] - gz[(i, k)])
                })
            });
            let gzz = wants(1).then(|| {
                let gtx = g.transpose().matmul(x);
                let mut colsum = vec![0.0; z.rows()];
                for i in 0..g.rows() {
                    for (cs, v) in colsum.iter_mut().zip(g.row_slice(i)) {
                        *cs += v;
                    }
                }
                Matrix::from_fn(z.rows(), z.cols(), |j, k| 2.0 * (colsum[j] * z[(j, k)] - gtx[(j, k)]))
            });
            vec![gx, gzz]
        }
        OpKind::Matern32 => {
            let d2 = input(0);
            vec![Some(g.zip_map(d2, |gv, dv| {
                let r = SQRT3 * dv.max(0.0).sqrt();
                -1.5 * gv * (-r).exp()
            }))]
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value. Do not hold across new `record` calls.
    pub fn value(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_matrix(&self) -> Matrix {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, kind: OpKind) -> Var<'t> {
        self.tape.op(kind, &[self])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(OpKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(OpKind::Log)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(OpKind::Softplus)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(OpKind::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(OpKind::Scale(s))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(OpKind::Transpose)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(OpKind::Sum)
    }

    pub fn sum_rows(self) -> Var<'t> {
        self.unary(OpKind::SumRows)
    }

    pub fn sum_cols(self) -> Var<'t> {
        self.unary(OpKind::SumCols)
    }

    pub fn diag(self) -> Var<'t> {
        self.unary(OpKind::Diag)
    }

    pub fn cholesky(self) -> Var<'t> {
        self.unary(OpKind::Cholesky)
    }

    pub fn matern32(self) -> Var<'t> {
        self.unary(OpKind::Matern32)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape.op(OpKind::MatMul, &[self, other])
    }

    /// `L⁻¹ B` (or `L⁻ᵀ B`) with `self` as the lower-triangular factor.
    pub fn solve_lower(self, rhs: Var<'t>, transpose: bool) -> Var<'t> {
        self.tape.op(OpKind::TriangularSolve { transpose }, &[self, rhs])
    }

    pub fn sq_dist(self, other: Var<'t>) -> Var<'t> {
        self.tape.op(OpKind::SqDist, &[self, other])
    }

    pub fn slice(self, rows: (usize, usize), cols: (usize, usize)) -> Var<'t> {
        self.unary(OpKind::Slice { rows, cols })
    }

    pub fn cols_range(self, start: usize, end: usize) -> Var<'t> {
        let r = self.rows();
        self.slice((0, r), (start, end))
    }

    pub fn rows_range(self, start: usize, end: usize) -> Var<'t> {
        let c = self.cols();
        self.slice((start, end), (0, c))
    }

    pub fn gather(self, index: Rc<Vec<usize>>, shape: (usize, usize)) -> Var<'t> {
        self.unary(OpKind::Gather { index, shape })
    }

    /// `(eᵃ cos b, eᵃ sin b)` with `self = a`; returns `(re, im)`.
    pub fn complex_exp(self, b: Var<'t>) -> (Var<'t>, Var<'t>) {
        let stacked = self.tape.op(OpKind::ComplexExpPair, &[self, b]);
        let c = stacked.cols() / 2;
        (stacked.cols_range(0, c), stacked.cols_range(c, 2 * c))
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.op($kind, &[self, rhs])
            }
        }
    };
}

binary_op!(Add, add, OpKind::Add);
binary_op!(Sub, sub, OpKind::Sub);
binary_op!(Mul, mul, OpKind::Mul);
binary_op!(Div, div, OpKind::Div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(OpKind::Negate)
    }
}
