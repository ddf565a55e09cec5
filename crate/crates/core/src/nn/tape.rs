//! Vector-valued reverse-mode tape.
//!
//! Every node holds a vector. Weights are read from a borrowed flat
//! parameter slice by offset, so the backward pass produces one gradient
//! vector aligned with the parameter store.

use nalgebra::{DMatrixView, DMatrixViewMut};

use crate::gaussmath::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { offset: usize },
    // y = W x (+ b); W row-major `rows x cols` at `w`.
    Affine { w: usize, b: Option<usize>, rows: usize, cols: usize, x: Var },
    // y = A x with A a node holding a row-major `rows x cols` matrix.
    MatVec { a: Var, x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    // y = a ⊙ x + b with constant a, b.
    Scale { x: Var, a: Vector },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sin(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Dot(Var, Var),
    SumSq(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    // Arbitrary map with caller-supplied Jacobians (one per parent).
    Local(Vec<(Var, Matrix)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vector,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass.
pub struct Gradients {
    /// `∂out/∂θ`, aligned with the parameter store.
    pub params: Vec<f64>,
    nodes: Vec<Option<Vector>>,
}

impl Gradients {
    /// Adjoint of an input node (zero when it does not reach the output).
    pub fn wrt(&self, v: Var, len: usize) -> Vector {
        self.nodes[v.0].clone().unwrap_or_else(|| Vector::zeros(len))
    }
}

fn w_view(params: &[f64], offset: usize, rows: usize, cols: usize) -> DMatrixView<'_, f64> {
    // Row-major rows x cols is column-major cols x rows, i.e. Wᵀ.
    DMatrixView::from_slice(&params[offset..offset + rows * cols], cols, rows)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vector, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Vector {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Constant (non-parameter) input.
    pub fn input(&mut self, value: Vector) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter slice `[offset, offset + len)` as a node.
    pub fn param(&mut self, offset: usize, len: usize) -> Var {
        let value = Vector::from_column_slice(&self.params[offset..offset + len]);
        self.push(value, Op::Param { offset })
    }

    pub fn affine(&mut self, w: usize, b: Option<usize>, rows: usize, cols: usize, x: Var) -> Var {
        assert_eq!(self.value(x).len(), cols, "affine input length");
        let mut y = w_view(self.params, w, rows, cols).tr_mul(self.value(x));
        if let Some(b) = b {
            for (yi, bi) in y.iter_mut().zip(&self.params[b..b + rows]) {
                *yi += bi;
            }
        }
        self.push(y, Op::Affine { w, b, rows, cols, x })
    }

    pub fn matvec(&mut self, a: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).len(), rows * cols, "matvec matrix length");
        assert_eq!(self.value(x).len(), cols, "matvec input length");
        let y = DMatrixView::from_slice(self.value(a).as_slice(), cols, rows).tr_mul(self.value(x));
        self.push(y, Op::MatVec { a, x, rows, cols })
    }

    fn same_len(&self, a: Var, b: Var) {
        assert_eq!(self.value(a).len(), self.value(b).len(), "elementwise operand lengths");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let y = self.value(a) - self.value(b);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let y = self.value(a).component_mul(self.value(b));
        self.push(y, Op::Mul(a, b))
    }

    /// `a ⊙ x + b` for constant vectors.
    pub fn scale_shift(&mut self, x: Var, a: &Vector, b: &Vector) -> Var {
        assert_eq!(self.value(x).len(), a.len());
        let y = self.value(x).component_mul(a) + b;
        self.push(y, Op::Scale { x, a: a.clone() })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let n = self.value(x).len();
        self.scale_shift(x, &Vector::from_element(n, c), &Vector::zeros(n))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.scale_shift(x, &Vector::from_element(n, -1.0), &Vector::from_element(n, 1.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        self.push(y, Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::sin);
        self.push(y, Op::Sin(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(y, Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Vector::from_element(1, self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let y = Vector::from_element(1, self.value(a).dot(self.value(b)));
        self.push(y, Op::Dot(a, b))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let y = Vector::from_element(1, self.value(x).norm_squared());
        self.push(y, Op::SumSq(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|p| self.value(*p).len()).sum();
        let mut y = Vector::zeros(total);
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            y.rows_mut(at, v.len()).copy_from(v);
            at += v.len();
        }
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).rows(start, len).into_owned();
        self.push(y, Op::Slice { x, start })
    }

    /// Node with a caller-computed value and Jacobians `∂y/∂parent`.
    pub fn local(&mut self, value: Vector, parents: Vec<(Var, Matrix)>) -> Var {
        for (p, j) in &parents {
            assert_eq!(j.nrows(), value.len(), "local Jacobian rows");
            assert_eq!(j.ncols(), self.value(*p).len(), "local Jacobian cols");
        }
        self.push(value, Op::Local(parents))
    }

    /// Backward pass from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward from a non-scalar node");
        self.backward_with_seed(out, Vector::from_element(1, 1.0))
    }

    /// Vector-Jacobian product `seedᵀ ∂out/∂(·)`.
    pub fn backward_with_seed(&self, out: Var, seed: Vector) -> Gradients {
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Vector>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(seed);

        fn acc(adj: &mut [Option<Vector>], v: Var, g: Vector) {
            match &mut adj[v.0] {
                Some(a) => *a += g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => adj[i] = Some(g),
                Op::Param { offset } => {
                    for (d, gi) in grad[*offset..*offset + g.len()].iter_mut().zip(g.iter()) {
                        *d += gi;
                    }
                }
                Op::Affine { w, b, rows, cols, x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = w_view(self.params, *w, *rows, *cols) * &g;
                    {
                        let mut dw = DMatrixViewMut::from_slice(&mut grad[*w..*w + rows * cols], *cols, *rows);
                        dw.ger(1.0, xv, &g, 1.0);
                    }
                    if let Some(b) = b {
                        for (d, gi) in grad[*b..*b + rows].iter_mut().zip(g.iter()) {
                            *d += gi;
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::MatVec { a, x, rows, cols } => {
                    let av = &self.nodes[a.0].value;
                    let xv = &self.nodes[x.0].value;
                    let dx = DMatrixView::from_slice(av.as_slice(), *cols, *rows) * &g;
                    let mut da = Vector::zeros(rows * cols);
                    {
                        let mut view = DMatrixViewMut::from_slice(da.as_mut_slice(), *cols, *rows);
                        view.ger(1.0, xv, &g, 0.0);
                    }
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = g.component_mul(&self.nodes[b.0].value);
                    let db = g.component_mul(&self.nodes[a.0].value);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Scale { x, a } => acc(&mut adj, *x, g.component_mul(a)),
                Op::Sigmoid(x) => {
                    let d = node.value.zip_map(&g, |y, gi| gi * y * (1.0 - y));
                    acc(&mut adj, *x, d);
                }
                Op::Tanh(x) => {
                    let d = node.value.zip_map(&g, |y, gi| gi * (1.0 - y * y));
                    acc(&mut adj, *x, d);
                }
                Op::Relu(x) => {
                    let d = self.nodes[x.0]
                        .value
                        .zip_map(&g, |v, gi| if v > 0.0 { gi } else { 0.0 });
                    acc(&mut adj, *x, d);
                }
                Op::Exp(x) => acc(&mut adj, *x, node.value.component_mul(&g)),
                Op::Sin(x) => {
                    let d = self.nodes[x.0].value.zip_map(&g, |v, gi| gi * v.cos());
                    acc(&mut adj, *x, d);
                }
                Op::Clamp { x, lo, hi } => {
                    let d = self.nodes[x.0]
                        .value
                        .zip_map(&g, |v, gi| if v > *lo && v < *hi { gi } else { 0.0 });
                    acc(&mut adj, *x, d);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    acc(&mut adj, *x, Vector::from_element(n, g[0]));
                }
                Op::Dot(a, b) => {
                    let da = &self.nodes[b.0].value * g[0];
                    let db = &self.nodes[a.0].value * g[0];
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::SumSq(x) => acc(&mut adj, *x, &self.nodes[x.0].value * (2.0 * g[0])),
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        acc(&mut adj, *p, g.rows(at, n).into_owned());
                        at += n;
                    }
                }
                Op::Slice { x, start } => {
                    let mut d = Vector::zeros(self.nodes[x.0].value.len());
                    d.rows_mut(*start, g.len()).copy_from(&g);
                    acc(&mut adj, *x, d);
                }
                Op::Local(parents) => {
                    for (p, j) in parents {
                        acc(&mut adj, *p, j.tr_mul(&g));
                    }
                }
            }
        }
        Gradients { params: grad, nodes: adj }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_dense_product() {
        // W = [[1,2,3],[4,5,6]], b = [0.5, -1]
        let params = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -1.0];
        let mut tape = Tape::new(&params);
        let x = tape.input(Vector::from_vec(vec![1.0, -1.0, 2.0]));
        let y = tape.affine(0, Some(6), 2, 3, x);
        assert_eq!(tape.value(y).as_slice(), &[5.5, 10.0]);
        let g = tape.backward_with_seed(y, Vector::from_vec(vec![1.0, 2.0]));
        assert_eq!(&g.params[..6], &[1.0, -1.0, 2.0, 2.0, -2.0, 4.0]);
        assert_eq!(&g.params[6..], &[1.0, 2.0]);
        assert_eq!(g.wrt(x, 3).as_slice(), &[9.0, 12.0, 15.0]);
    }

    #[test]
    fn matvec_gradients() {
        let params: [f64; 0] = [];
        let mut tape = Tape::new(&params);
        let a = tape.input(Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let x = tape.input(Vector::from_vec(vec![-1.0, 0.5]));
        let y = tape.matvec(a, x, 2, 2);
        assert_eq!(tape.value(y).as_slice(), &[0.0, -1.0]);
        let g = tape.backward_with_seed(y, Vector::from_vec(vec![1.0, 3.0]));
        assert_eq!(g.wrt(a, 4).as_slice(), &[-1.0, 0.5, -3.0, 1.5]);
        assert_eq!(g.wrt(x, 2).as_slice(), &[10.0, 14.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let params = [3.0];
        let mut tape = Tape::new(&params);
        let p = tape.param(0, 1);
        let y = tape.mul(p, p);
        let z = tape.add(y, p);
        let g = tape.backward(z);
        assert_eq!(tape.scalar(z), 12.0);
        assert_eq!(g.params, vec![7.0]);
    }
}
