//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Graph`] records every operation of one forward computation together
//! with its value; [`Graph::backward`] walks the record in reverse and
//! returns exact gradients for every node, including parameter leaves.

use std::collections::HashMap;

use super::params::{Matrix, ParamGrads, ParamId, ParamStore};
use crate::geom::{PointCloud, SpatialIndex};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var),
    MeanRows(Var),
    ScaleRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SmoothL1(Var),
    XLogX(Var),
    RowNorms(Var),
    ChamferL2Sq {
        a: Var,
        b: Var,
        a_to_b: Vec<usize>,
        b_to_a: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Knee of the smoothed correspondence penalty.
pub const SMOOTH_L1_KNEE: f64 = 0.1;

/// `5e²` for `|e| ≤ 0.1`, `|e| − 0.05` otherwise. Both branches equal 0.05 at
/// the knee and have slope ±1 there.
pub fn smooth_l1(e: f64) -> f64 {
    let a = e.abs();
    if a <= SMOOTH_L1_KNEE {
        5.0 * e * e
    } else {
        a - 0.05
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() <= SMOOTH_L1_KNEE {
        10.0 * e
    } else {
        e.signum()
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.nrows() {
        let mut row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// A recorded forward computation.
#[derive(Debug)]
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn points(&mut self, pc: &PointCloud) -> Var {
        self.input(pc.to_matrix())
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul {:?} × {:?}", va.shape(), vb.shape());
        let v = va * vb;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_t {:?} × {:?}ᵀ", va.shape(), vb.shape());
        let v = va * vb.transpose();
        self.push(v, Op::MatMulTransB(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul");
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a row vector");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width");
        let mut v = va.clone();
        for mut r in v.row_iter_mut() {
            r += vr;
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).add_scalar(k);
        self.push(v, Op::Offset(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols rows");
        let (n, ca, cb) = (va.nrows(), va.ncols(), vb.ncols());
        let mut v = Matrix::zeros(n, ca + cb);
        v.columns_mut(0, ca).copy_from(va);
        v.columns_mut(ca, cb).copy_from(vb);
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Stacks a `1×c` row `n` times.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Var {
        let vr = self.value(row);
        assert_eq!(vr.nrows(), 1, "repeat_rows expects a row vector");
        let v = Matrix::from_fn(n, vr.ncols(), |_, c| vr[(0, c)]);
        self.push(v, Op::RepeatRows(row))
    }

    /// Average over rows, producing `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.nrows() as f64;
        let v = Matrix::from_fn(1, va.ncols(), |_, c| va.column(c).iter().sum::<f64>() / n);
        self.push(v, Op::MeanRows(a))
    }

    /// Multiplies row `i` of `a` by `g[i]` (`g` is `n×1`).
    pub fn scale_rows(&mut self, a: Var, g: Var) -> Var {
        let (va, vg) = (self.value(a), self.value(g));
        assert_eq!(vg.shape(), (va.nrows(), 1), "scale_rows factor shape");
        let v = Matrix::from_fn(va.nrows(), va.ncols(), |r, c| vg[(r, 0)] * va[(r, c)]);
        self.push(v, Op::ScaleRows(a, g))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let v = va.select_rows(idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Elementwise smoothed-L1 penalty (see [`smooth_l1`]).
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let v = self.value(a).map(smooth_l1);
        self.push(v, Op::SmoothL1(a))
    }

    /// Elementwise `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let v = self.value(a).map(xlogx);
        self.push(v, Op::XLogX(a))
    }

    /// Euclidean norm of each row, `n×1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::from_fn(va.nrows(), 1, |r, _| va.row(r).norm());
        self.push(v, Op::RowNorms(a))
    }

    /// Squared-L2 Chamfer distance between two `N×3` point matrices, with
    /// per-direction mean reduction. Nearest assignments are held fixed for
    /// the backward pass.
    pub fn chamfer_l2sq(&mut self, a: Var, b: Var) -> Var {
        let pa = PointCloud::from_matrix(self.value(a)).expect("chamfer input must be N×3 finite");
        let pb = PointCloud::from_matrix(self.value(b)).expect("chamfer input must be N×3 finite");
        let (ia, ib) = (SpatialIndex::build(&pa), SpatialIndex::build(&pb));
        let fwd: Vec<(usize, f64)> = pa.iter().map(|p| ib.nearest(p)).collect();
        let bwd: Vec<(usize, f64)> = pb.iter().map(|p| ia.nearest(p)).collect();
        let f = fwd.iter().map(|x| x.1).sum::<f64>() / pa.len() as f64;
        let g = bwd.iter().map(|x| x.1).sum::<f64>() / pb.len() as f64;
        let v = Matrix::from_element(1, 1, f + g);
        self.push(
            v,
            Op::ChamferL2Sq {
                a,
                b,
                a_to_b: fwd.into_iter().map(|x| x.0).collect(),
                b_to_a: bwd.into_iter().map(|x| x.0).collect(),
            },
        )
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(cur) => *cur += g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, &gout * vb.transpose());
                    acc(&mut grads, *b, va.tr_mul(&gout));
                }
                Op::MatMulTransB(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, &gout * vb);
                    acc(&mut grads, *b, gout.tr_mul(va));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, -&gout);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, gout.component_mul(vb));
                    acc(&mut grads, *b, gout.component_mul(va));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, column_sums(&gout));
                    acc(&mut grads, *a, gout.clone());
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &gout * *k),
                Op::Offset(a) => acc(&mut grads, *a, gout.clone()),
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let g = gout.zip_map(x, |g, x| if x > 0.0 { g } else { slope * g });
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, gout.zip_map(y, |g, y| g * (1.0 - y * y)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = gout.component_mul(y);
                    for r in 0..g.nrows() {
                        let dot: f64 = g.row(r).iter().sum();
                        for c in 0..g.ncols() {
                            g[(r, c)] -= y[(r, c)] * dot;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    let cb = self.value(*b).ncols();
                    acc(&mut grads, *a, gout.columns(0, ca).into_owned());
                    acc(&mut grads, *b, gout.columns(ca, cb).into_owned());
                }
                Op::RepeatRows(row) => acc(&mut grads, *row, column_sums(&gout)),
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let g = Matrix::from_fn(n, gout.ncols(), |_, c| gout[(0, c)] / n as f64);
                    acc(&mut grads, *a, g);
                }
                Op::ScaleRows(a, gv) => {
                    let (va, vg) = (self.value(*a), self.value(*gv));
                    let da = Matrix::from_fn(va.nrows(), va.ncols(), |r, c| vg[(r, 0)] * gout[(r, c)]);
                    let dg = Matrix::from_fn(va.nrows(), 1, |r, _| gout.row(r).dot(&va.row(r)));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *gv, dg);
                }
                Op::GatherRows(a, idx) => {
                    let va = self.value(*a);
                    let mut g = Matrix::zeros(va.nrows(), va.ncols());
                    for (k, &src) in idx.iter().enumerate() {
                        let mut row = g.row_mut(src);
                        row += gout.row(k);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::from_element(r, c, gout[(0, 0)]));
                }
                Op::SmoothL1(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, gout.zip_map(x, |g, e| g * smooth_l1_grad(e)));
                }
                Op::XLogX(a) => {
                    let x = self.value(*a);
                    let g = gout.zip_map(x, |g, x| g * (x.max(f64::MIN_POSITIVE).ln() + 1.0));
                    acc(&mut grads, *a, g);
                }
                Op::RowNorms(a) => {
                    let va = self.value(*a);
                    let norms = &node.value;
                    let g = Matrix::from_fn(va.nrows(), va.ncols(), |r, c| {
                        let n = norms[(r, 0)];
                        if n > 0.0 {
                            gout[(r, 0)] * va[(r, c)] / n
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::ChamferL2Sq { a, b, a_to_b, b_to_a } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let s = gout[(0, 0)];
                    let mut ga = Matrix::zeros(va.nrows(), 3);
                    let mut gb = Matrix::zeros(vb.nrows(), 3);
                    let ka = 2.0 * s / va.nrows() as f64;
                    for (i, &j) in a_to_b.iter().enumerate() {
                        for c in 0..3 {
                            let d = ka * (va[(i, c)] - vb[(j, c)]);
                            ga[(i, c)] += d;
                            gb[(j, c)] -= d;
                        }
                    }
                    let kb = 2.0 * s / vb.nrows() as f64;
                    for (j, &i) in b_to_a.iter().enumerate() {
                        for c in 0..3 {
                            let d = kb * (vb[(j, c)] - va[(i, c)]);
                            gb[(j, c)] += d;
                            ga[(i, c)] -= d;
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
            }
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    Matrix::from_fn(1, m.ncols(), |_, c| m.column(c).iter().sum())
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all stored parameters; zeros for parameters the
    /// computation never touched.
    pub fn params(&self, graph: &Graph<'_>, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (id, v) in &graph.params {
            if let Some(g) = self.wrt(*v) {
                out.0[id.index()] = g.clone();
            }
        }
        out
    }
}
