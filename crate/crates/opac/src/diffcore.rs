//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is a define-by-run Wengert list: forward ops append nodes whose
//! parents always have smaller indices, and [`Tape::backward`] sweeps the list
//! once in reverse, accumulating vector-Jacobian products. Tapes are rebuilt
//! per forward pass, which keeps varying batch shapes trivial.
//!
//! The op set is exactly what the networks and losses here need: matmul,
//! add (same shape, or a broadcast bias row), elementwise mul, tanh, relu,
//! exp, log, square, sum, mean, scalar scale, and clamp. No general
//! broadcasting, no convolutions.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expects a rank-2 array, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: input {value} outside the op's domain")]
    Domain { op: &'static str, value: f64 },
    #[error("backward root must be scalar-shaped, got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        DiffArray { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        DiffArray::new(vec![1], vec![v])
    }

    /// A 1 x n row, the layout used for bias vectors and single observations.
    pub fn row(data: Vec<f64>) -> Self {
        DiffArray::new(vec![1, data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        DiffArray::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DiffArray::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar contents of a one-element array.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize), DiffError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(DiffError::NotMatrix {
                op,
                shape: self.shape.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// Same-shape add, or rhs broadcast as a 1 x n bias row over lhs rows.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    Clamp(NodeId, f64, f64),
}

struct Node {
    value: DiffArray,
    op: Op,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DiffArray {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DiffArray, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DiffArray) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(DiffArray::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (m, ka) = self.value(a).rank2("matmul")?;
        let (kb, n) = self.value(b).rank2("matmul")?;
        if ka != kb {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            ka,
            n,
        );
        Ok(self.push(DiffArray::matrix(m, n, out), Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let bias_row = sa.len() == 2 && sb == [1, sa[1]] && sa[0] > 1;
        if sa != sb && !bias_row {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % bv.len()])
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(DiffArray::new(shape, out), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(DiffArray::new(shape, out), Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.map_values(x, f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.map_values(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.map_values(x, f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(DiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        let out = self.map_values(x, f64::ln);
        Ok(self.push(out, Op::Log(x)))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out = self.map_values(x, |v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(DiffArray::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(DiffArray::scalar(s / n), Op::Mean(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.map_values(x, |v| c * v);
        self.push(out, Op::Scale(x, c))
    }

    /// Clamp to [lo, hi]. Sub-gradient is 1 inside the range (inclusive) and
    /// 0 outside; no straight-through pass.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi);
        let out = self.map_values(x, |v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    fn map_values(&self, x: NodeId, f: impl Fn(f64) -> f64) -> DiffArray {
        let v = self.value(x);
        DiffArray::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients; nodes the
    /// root does not depend on have no entry.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap, DiffError> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<DiffArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(DiffArray::new(root_val.shape().to_vec(), vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn apply_vjp(&self, i: usize, g: &DiffArray, grads: &mut [Option<DiffArray>]) {
        let accumulate = |grads: &mut [Option<DiffArray>], id: NodeId, contrib: DiffArray| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                // dA = dC . B^T
                let mut da = vec![0.0; m * k];
                matmul_nt(g.data(), self.value(b).data(), &mut da, m, n, k);
                accumulate(grads, a, DiffArray::matrix(m, k, da));
                // dB = A^T . dC
                let mut db = vec![0.0; k * n];
                matmul_tn(self.value(a).data(), g.data(), &mut db, m, k, n);
                accumulate(grads, b, DiffArray::matrix(k, n, db));
            }
            Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                if self.value(b).shape() == self.value(a).shape() {
                    accumulate(grads, b, g.clone());
                } else {
                    // Bias row: sum the upstream gradient over batch rows.
                    let n = self.value(b).numel();
                    let mut db = vec![0.0; n];
                    for (j, &gv) in g.data().iter().enumerate() {
                        db[j % n] += gv;
                    }
                    accumulate(grads, b, DiffArray::row(db));
                }
            }
            Op::Mul(a, b) => {
                let da = hadamard(g.data(), self.value(b).data());
                let db = hadamard(g.data(), self.value(a).data());
                accumulate(grads, a, self.like(a, da));
                accumulate(grads, b, self.like(b, db));
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                accumulate(grads, x, self.like(x, dx));
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x, self.like(x, dx));
            }
            Op::Exp(x) => {
                let y = &self.nodes[i].value;
                let dx = hadamard(g.data(), y.data());
                accumulate(grads, x, self.like(x, dx));
            }
            Op::Log(x) => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                accumulate(grads, x, self.like(x, dx));
            }
            Op::Square(x) => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| gv * 2.0 * xv)
                    .collect();
                accumulate(grads, x, self.like(x, dx));
            }
            Op::Sum(x) => {
                let gv = g.item();
                let n = self.value(x).numel();
                accumulate(grads, x, self.like(x, vec![gv; n]));
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                let gv = g.item() / n as f64;
                accumulate(grads, x, self.like(x, vec![gv; n]));
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.data().iter().map(|&gv| c * gv).collect();
                accumulate(grads, x, self.like(x, dx));
            }
            Op::Clamp(x, lo, hi) => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x, self.like(x, dx));
            }
        }
    }

    fn like(&self, id: NodeId, data: Vec<f64>) -> DiffArray {
        DiffArray::new(self.value(id).shape().to_vec(), data)
    }
}

/// Gradients produced by one backward sweep, indexed by node id.
pub struct GradientMap {
    grads: Vec<Option<DiffArray>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&DiffArray> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of `shape` if the root did not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> DiffArray {
        match self.get(id) {
            Some(g) => g.clone(),
            None => DiffArray::zeros(shape.to_vec()),
        }
    }
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// c += a . b with a: m x k, b: k x n (c must be zeroed by the caller).
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c += a . b^T with a: m x n, b: k x n, c: m x k.
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c += a^T . b with a: m x k, b: m x n, c: k x n.
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for row in 0..m {
        let a_row = &a[row * k..(row + 1) * k];
        let b_row = &b[row * n..(row + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Central finite differences of `f` at `params`: the independent oracle the
/// analytic gradients are checked against.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    step: f64,
) -> Vec<f64> {
    assert!(step > 0.0);
    let mut p = params.to_vec();
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let hi = f(&p);
        p[i] = orig - step;
        let lo = f(&p);
        p[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Elementwise comparison of an analytic gradient against a finite-difference
/// reference: relative error where the magnitudes are meaningful, absolute
/// below 1e-6. Returns the largest discrepancy.
pub fn max_grad_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let scale = a.abs().max(r.abs());
            if scale < 1e-6 {
                (a - r).abs()
            } else {
                (a - r).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
