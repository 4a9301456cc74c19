//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its forward
//! value and the indices of its operands, so node order is already a valid
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters live in a [`ParamStore`]. A graph binds a parameter once (the
//! value is copied onto the tape) and, after `backward`, hands the gradients
//! back as a [`Grads`] set that the caller reduces across examples and feeds
//! to [`Adam`].

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Floating point scalar usable on the tape (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = beta * c + a · b` with explicit strides, as in BLAS gemm.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product with optional transposition of either operand.
/// `a` is stored as `ar × ac`, `b` as `br × bc`; `out` receives the logical
/// product and is overwritten unless `accumulate` is set.
#[allow(clippy::too_many_arguments)]
fn gemm<F: Real>(
    a: &[F],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[F],
    (br, bc): (usize, usize),
    tb: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac as isize) } else { (ar, ac, ac as isize, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths checked above; `out` is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array (row-major).
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadData { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); len] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: &[F]) -> Self {
        Tensor { shape: vec![1, data.len()], data: data.to_vec() }
    }

    /// Uniform Glorot initialisation for a `rows × cols` matrix.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as a matrix: rank 1 is a single row, higher ranks fold leading dims.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lit(x.as_f64())).collect(),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

static STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Named trainable parameters with gradient accumulators.
pub struct ParamStore<F> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    grads: Vec<Vec<F>>,
    index: HashMap<String, ParamId>,
    frozen: bool,
}

impl<F: Real> std::fmt::Debug for ParamStore<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("params", &self.names.len()).field("scalars", &self.num_scalars()).finish()
    }
}

impl<F: Real> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            grads: self.grads.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            uid: STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.grads.push(vec![F::zero(); tensor.len()]);
        self.tensors.push(tensor);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// ‖Θ‖² over every tensor in the store.
    pub fn sum_sq(&self) -> F {
        self.tensors.iter().map(Tensor::sum_sq).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn accumulate(&mut self, grads: &Grads<F>) {
        assert_eq!(grads.store_uid, self.uid, "gradients belong to another store");
        for (slot, g) in self.grads.iter_mut().zip(&grads.bufs) {
            if let Some(g) = g {
                for (a, &b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale_grads(&mut self, factor: F) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Bitwise snapshot, used to assert frozen parameters never move.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().map(|x| x.as_f64().to_bits()))
            .collect()
    }

    /// Same store converted to another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.add(name, t.cast()).expect("names are unique");
        }
        out.frozen = self.frozen;
        out
    }

    pub fn copy_values_from(&mut self, other: &ParamStore<F>) {
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.copy_from_slice(&src.data);
        }
    }
}

/// Per-parameter gradients gathered from one graph.
#[derive(Clone)]
pub struct Grads<F> {
    store_uid: u64,
    bufs: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn empty(store: &ParamStore<F>) -> Self {
        Grads { store_uid: store.uid, bufs: vec![None; store.len()] }
    }

    pub fn add(&mut self, other: &Grads<F>) {
        assert_eq!(self.store_uid, other.store_uid);
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            match (dst.as_mut(), src) {
                (_, None) => {}
                (None, Some(s)) => *dst = Some(s.clone()),
                (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(a, &b)| *a += b),
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.bufs[id.0].as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Log(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    MeanRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    GatherElems(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    Dropout(usize, Vec<f64>),
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    bound: HashMap<(u64, ParamId), Var>,
    leaf_grads: HashMap<usize, Vec<F>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<F: Real> Graph<F> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            leaf_grads: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode tape with its own dropout stream.
    pub fn training(seed: u64) -> Self {
        Graph { train: true, rng: ChaCha8Rng::seed_from_u64(seed), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = self.node(v);
        Tensor { shape: vec![n.rows, n.cols], data: n.value.clone() }
    }

    /// Row `r` of a node's value.
    pub fn row_value(&self, v: Var, r: usize) -> &[F] {
        let n = self.node(v);
        &n.value[r * n.cols..(r + 1) * n.cols]
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        TensorError::ShapeMismatch { op, left: vec![ar, ac], right: vec![br, bc] }
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(TensorError::BadData { shape: vec![rows, cols], len: data.len() });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Differentiable free leaf; its gradient is read back with [`Graph::grad`].
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data.clone(), Op::Leaf, true)
    }

    /// Binds a stored parameter (once per graph).
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(store.uid, id)) {
            return v;
        }
        let t = store.get(id);
        let (r, c) = t.dims2();
        let v = self.push(r, c, t.data.clone(), Op::Param, !store.frozen);
        self.bound.insert((store.uid, id), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![F::zero(); ar * bc];
        gemm(self.value(a), (ar, ac), false, self.value(b), (br, bc), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(ar, bc, out, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![F::zero(); ar * br];
        gemm(self.value(a), (ar, ac), false, self.value(b), (br, bc), true, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(ar, br, out, Op::MatMulT(a.0, b.0), rg))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc || (ar != br && ar != 1 && br != 1) {
            return Err(self.mismatch(op, a, b));
        }
        Ok((ar.max(br), ac))
    }

    fn zip_broadcast(&self, a: Var, b: Var, rows: usize, cols: usize, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (na, nb) = (self.node(a), self.node(b));
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ra = if na.rows == 1 { 0 } else { r };
            let rb = if nb.rows == 1 { 0 } else { r };
            let xa = &na.value[ra * cols..(ra + 1) * cols];
            let xb = &nb.value[rb * cols..(rb + 1) * cols];
            out.extend(xa.iter().zip(xb).map(|(&x, &y)| f(x, y)));
        }
        out
    }

    /// Elementwise sum; an operand with a single row broadcasts over the other's rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.broadcast_shape("add", a, b)?;
        let out = self.zip_broadcast(a, b, r, c, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.broadcast_shape("sub", a, b)?;
        let out = self.zip_broadcast(a, b, r, c, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.broadcast_shape("mul", a, b)?;
        let out = self.zip_broadcast(a, b, r, c, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = F::lit(s);
        let n = self.node(a);
        let (r, c, rg) = (n.rows, n.cols, n.requires_grad);
        let out = n.value.iter().map(|&x| x * k).collect();
        self.push(r, c, out, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let k = F::lit(s);
        let n = self.node(a);
        let (r, c, rg) = (n.rows, n.cols, n.requires_grad);
        let out = n.value.iter().map(|&x| x + k).collect();
        self.push(r, c, out, Op::AddScalar(a.0), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(F) -> F) -> Var {
        let n = self.node(a);
        let (r, c, rg) = (n.rows, n.cols, n.requires_grad);
        let out = n.value.iter().map(|&x| f(x)).collect();
        self.push(r, c, out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| if x > F::zero() { x } else { F::zero() })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), |x| x.ln())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, out, Op::SoftmaxRows(a.0), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "log_softmax" });
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, out, Op::LogSoftmaxRows(a.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().copied().sum::<F>() / F::lit(n.value.len() as f64);
        let rg = n.requires_grad;
        self.push(1, 1, vec![s], Op::Mean(a.0), rg)
    }

    /// Column sums: `r × c → 1 × c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![F::zero(); c];
        for row in self.value(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let _ = r;
        let rg = self.rg(&[a]);
        self.push(1, c, out, Op::SumRows(a.0), rg)
    }

    /// Column means: `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let inv = F::one() / F::lit(r as f64);
        let mut out = vec![F::zero(); c];
        for row in self.value(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(&[a]);
        self.push(1, c, out, Op::MeanRows(a.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        };
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.row_value(p, r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.iter().map(|v| v.0).collect()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyAxis { op: "concat_rows" });
        };
        let cols = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            rows += self.shape(p).0;
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.iter().map(|v| v.0).collect()), rg))
    }

    /// Row gather; with an embedding table as `a` this is the embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.is_empty() {
            return Err(TensorError::EmptyAxis { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::OutOfRange { op: "gather_rows", index: i, extent: r });
            }
            out.extend_from_slice(self.row_value(a, i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a.0, idx.to_vec()), rg))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather_rows(a, &[i])
    }

    /// Picks flat (row-major) entries into a `1 × idx.len()` row.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(TensorError::EmptyAxis { op: "gather_elems" });
        }
        let len = self.value(a).len();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= len {
                return Err(TensorError::OutOfRange { op: "gather_elems", index: i, extent: len });
            }
            out.push(self.value(a)[i]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(1, idx.len(), out, Op::GatherElems(a.0, idx.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(TensorError::OutOfRange { op: "slice_cols", index: end, extent: c });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in self.value(a).chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, w, out, Op::SliceCols(a.0, start, end), rg))
    }

    /// Inverted dropout; identity at evaluation time or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.node(a).value.len();
        let mask: Vec<f64> =
            (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let node = self.node(a);
        let (r, c, rg) = (node.rows, node.cols, node.requires_grad);
        let out = node.value.iter().zip(&mask).map(|(&x, &m)| x * F::lit(m)).collect();
        self.push(r, c, out, Op::Dropout(a.0, mask), rg)
    }

    /// `x W + b` with `W: in × out`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// `-Σ target ⊙ log_softmax(logits)` over all rows.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<F>) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if target.dims2() != (r, c) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![r, c],
                right: target.shape.clone(),
            });
        }
        let lp = self.log_softmax_rows(logits)?;
        let t = self.constant(target);
        let prod = self.mul(lp, t)?;
        let s = self.sum(prod);
        Ok(self.scale(s, -1.0))
    }

    /// Reverse sweep from a scalar loss. Leaf and parameter gradients
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if r != 1 || c != 1 {
            return Err(TensorError::NonScalarLoss { shape: vec![r, c] });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param => {
                    let slot = self.leaf_grads.entry(i).or_insert_with(|| vec![F::zero(); g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                op => self.propagate(i, op.clone(), &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, op: Op, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        let nodes = &self.nodes;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[j].requires_grad {
                return;
            }
            let len = nodes[j].value.len();
            let slot = grads[j].get_or_insert_with(|| vec![F::zero(); len]);
            f(slot);
        };
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (ar, ac) = (nodes[a].rows, nodes[a].cols);
                let (br, bc) = (nodes[b].rows, nodes[b].cols);
                acc(a, &mut |s| gemm(g, (rows, cols), false, &nodes[b].value, (br, bc), true, s, true));
                acc(b, &mut |s| gemm(&nodes[a].value, (ar, ac), true, g, (rows, cols), false, s, true));
            }
            Op::MatMulT(a, b) => {
                let (ar, ac) = (nodes[a].rows, nodes[a].cols);
                let (br, bc) = (nodes[b].rows, nodes[b].cols);
                acc(a, &mut |s| gemm(g, (rows, cols), false, &nodes[b].value, (br, bc), false, s, true));
                acc(b, &mut |s| gemm(g, (rows, cols), true, &nodes[a].value, (ar, ac), false, s, true));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -F::one() } else { F::one() };
                acc(a, &mut |s| reduce_broadcast(s, g, cols, F::one()));
                acc(b, &mut |s| reduce_broadcast(s, g, cols, sign));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                let (ra, rb) = (nodes[a].rows, nodes[b].rows);
                acc(a, &mut |s| {
                    for r in 0..rows {
                        let ib = if rb == 1 { 0 } else { r };
                        let ia = if ra == 1 { 0 } else { r };
                        for k in 0..cols {
                            s[ia * cols + k] += g[r * cols + k] * vb[ib * cols + k];
                        }
                    }
                });
                acc(b, &mut |s| {
                    for r in 0..rows {
                        let ia = if ra == 1 { 0 } else { r };
                        let ib = if rb == 1 { 0 } else { r };
                        for k in 0..cols {
                            s[ib * cols + k] += g[r * cols + k] * va[ia * cols + k];
                        }
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = F::lit(k);
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d += x * k));
            }
            Op::AddScalar(a) => acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d += x)),
            Op::Sigmoid(a) => acc(a, &mut |s| {
                for ((d, &x), &yv) in s.iter_mut().zip(g).zip(y) {
                    *d += x * yv * (F::one() - yv);
                }
            }),
            Op::Tanh(a) => acc(a, &mut |s| {
                for ((d, &x), &yv) in s.iter_mut().zip(g).zip(y) {
                    *d += x * (F::one() - yv * yv);
                }
            }),
            Op::Relu(a) => acc(a, &mut |s| {
                for ((d, &x), &yv) in s.iter_mut().zip(g).zip(y) {
                    if yv > F::zero() {
                        *d += x;
                    }
                }
            }),
            Op::Log(a) => {
                let xa = &nodes[a].value;
                acc(a, &mut |s| {
                    for ((d, &x), &v) in s.iter_mut().zip(g).zip(xa) {
                        *d += x / v;
                    }
                })
            }
            Op::SoftmaxRows(a) => acc(a, &mut |s| {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for k in 0..cols {
                        s[r * cols + k] += yr[k] * (gr[k] - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => acc(a, &mut |s| {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: F = gr.iter().copied().sum();
                    for k in 0..cols {
                        s[r * cols + k] += gr[k] - yr[k].exp() * total;
                    }
                }
            }),
            Op::Sum(a) => acc(a, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let k = g[0] / F::lit(nodes[a].value.len() as f64);
                acc(a, &mut |s| s.iter_mut().for_each(|d| *d += k));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let k = if matches!(op, Op::MeanRows(_)) {
                    F::one() / F::lit(nodes[a].rows as f64)
                } else {
                    F::one()
                };
                acc(a, &mut |s| {
                    for row in s.chunks_mut(cols) {
                        row.iter_mut().zip(g).for_each(|(d, &x)| *d += x * k);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = nodes[p].cols;
                    acc(p, &mut |s| {
                        for r in 0..rows {
                            for k in 0..w {
                                s[r * w + k] += g[r * cols + off + k];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |s| s.iter_mut().zip(&g[off..off + len]).for_each(|(d, &x)| *d += x));
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => acc(a, &mut |s| {
                for (r, &src) in idx.iter().enumerate() {
                    for k in 0..cols {
                        s[src * cols + k] += g[r * cols + k];
                    }
                }
            }),
            Op::GatherElems(a, idx) => acc(a, &mut |s| {
                for (k, &src) in idx.iter().enumerate() {
                    s[src] += g[k];
                }
            }),
            Op::SliceCols(a, start, _end) => {
                let ac = nodes[a].cols;
                acc(a, &mut |s| {
                    for r in 0..rows {
                        for k in 0..cols {
                            s[r * ac + start + k] += g[r * cols + k];
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => acc(a, &mut |s| {
                for ((d, &x), &m) in s.iter_mut().zip(g).zip(&mask) {
                    *d += x * F::lit(m);
                }
            }),
        }
    }

    /// Accumulated gradient of a leaf or bound parameter.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of every parameter of `store` bound on this graph.
    pub fn param_grads(&self, store: &ParamStore<F>) -> Grads<F> {
        let mut out = Grads::empty(store);
        for (&(uid, id), v) in &self.bound {
            if uid != store.uid {
                continue;
            }
            if let Some(g) = self.leaf_grads.get(&v.0) {
                out.bufs[id.0] = Some(g.clone());
            }
        }
        out
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_broadcast<F: Real>(slot: &mut [F], g: &[F], cols: usize, sign: F) {
    if slot.len() == g.len() {
        slot.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
    } else {
        for row in g.chunks(cols) {
            slot.iter_mut().zip(row).for_each(|(d, &x)| *d += sign * x);
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / z);
}

/// Adam optimiser state for one [`ParamStore`].
#[derive(Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    skipped: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<F>> = store.tensors.iter().map(|t| vec![F::zero(); t.len()]).collect();
        Adam { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros, skipped: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of updates skipped because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update from the store's accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        assert_eq!(self.m.len(), store.len(), "optimiser state does not match parameters");
        if store.grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient, skipping update ({} so far)", self.skipped);
            store.zero_grads();
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::one() - F::lit(self.beta1.powi(t));
        let c2 = F::one() - F::lit(self.beta2.powi(t));
        let (lr, eps) = (F::lit(self.lr), F::lit(self.eps));
        for ((tensor, grad), (m, v)) in
            store.tensors.iter_mut().zip(&store.grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), mi), vi) in tensor.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * g;
                *vi = b2 * *vi + (F::one() - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}
