//! Neural encoders: Child-Sum and N-ary TreeLSTMs (bidirectional), gated GCNs,
//! the stacked BiLSTM student, task heads, the arc/label scorer and the span
//! scorer. Every component only stores [`ParamId`]s; values live in a
//! [`ParamStore`] and forward passes record onto a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structures::{all_spans, BinTree};
use crate::syntax_data::{ConstNode, ConstTree, DepTree};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {node} has {got} children but the cell takes at most {max}")]
    TooManyChildren { node: usize, got: usize, max: usize },
    #[error("tree is not connected or contains a cycle")]
    Cyclic,
    #[error("graph node {0} has no neighbours (missing self-loop)")]
    Isolated(usize),
    #[error("expected {expected} classes, got {got}")]
    ClassCount { expected: usize, got: usize },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Architecture sizes. [`ModelDims::default`] carries the published
/// configuration; desk-scale runs shrink it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub emb: usize,
    pub student_hidden: usize,
    pub student_layers: usize,
    pub teacher_hidden: usize,
    pub teacher_layers: usize,
    /// Common width of the feature-distillation projections.
    pub proj: usize,
    pub arc: usize,
    pub label: usize,
    pub span_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            emb: 300,
            student_hidden: 350,
            student_layers: 3,
            teacher_hidden: 300,
            teacher_layers: 2,
            proj: 300,
            arc: 300,
            label: 100,
            span_hidden: 250,
            head_hidden: 300,
            dropout: 0.4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.emb,
            self.student_hidden,
            self.student_layers,
            self.teacher_hidden,
            self.teacher_layers,
            self.proj,
            self.arc,
            self.label,
            self.span_hidden,
            self.head_hidden,
        ];
        if sizes.contains(&0) {
            return Err(EncoderError::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Registers parameters under a name prefix.
pub struct Init<'a, F, R> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, F: Real, R: Rng> Init<'a, F, R> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut R) -> Self {
        Init { store, rng, prefix: String::new() }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, F, R>) -> Result<T>) -> Result<T> {
        let prefix = format!("{}{name}/", self.prefix);
        let mut inner = Init { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    fn add(&mut self, name: &str, t: Tensor<F>) -> Result<ParamId> {
        Ok(self.store.add(format!("{}{name}", self.prefix), t)?)
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = Tensor::glorot(rows, cols, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = Tensor::uniform(rows, cols, 0.5, self.rng);
        self.add(name, t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, name: &str, input: usize, output: usize) -> Result<Self> {
        init.scoped(name, |i| Ok(Linear { w: i.matrix("W", input, output)?, b: i.zeros("b", 1, output)? }))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.linear(x, w, b)?)
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<F: Real, R: Rng>(
        init: &mut Init<'_, F, R>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Mlp { hidden: Linear::new(i, "hidden", input, hidden)?, out: Linear::new(i, "out", hidden, output)? })
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

/// Hidden and memory state of one tree or sequence node.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

impl CellState {
    pub fn zeros<F: Real>(g: &mut Graph<F>, dim: usize) -> Self {
        let z = g.constant(&Tensor::zeros(&[1, dim]));
        CellState { h: z, c: z }
    }
}

#[derive(Debug, Clone, Copy)]
struct GateParams {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl GateParams {
    fn new<F: Real, R: Rng>(
        init: &mut Init<'_, F, R>,
        gate: &str,
        input: usize,
        u_rows: usize,
        u_cols: usize,
        bias_cols: usize,
    ) -> Result<Self> {
        Ok(GateParams {
            w: init.matrix(&format!("W_{gate}"), input, bias_cols.min(u_cols))?,
            u: init.matrix(&format!("U_{gate}"), u_rows, u_cols)?,
            b: init.zeros(&format!("b_{gate}"), 1, bias_cols.min(u_cols))?,
        })
    }
}

/// Child-Sum TreeLSTM cell (order-invariant over children).
#[derive(Debug, Clone, Copy)]
pub struct ChildSumCell {
    i: GateParams,
    f: GateParams,
    o: GateParams,
    u: GateParams,
    pub input: usize,
    pub hidden: usize,
}

impl ChildSumCell {
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        init.scoped(name, |s| {
            Ok(ChildSumCell {
                i: GateParams::new(s, "i", input, hidden, hidden, hidden)?,
                f: GateParams::new(s, "f", input, hidden, hidden, hidden)?,
                o: GateParams::new(s, "o", input, hidden, hidden, hidden)?,
                u: GateParams::new(s, "u", input, hidden, hidden, hidden)?,
                input,
                hidden,
            })
        })
    }

    /// One node update: gates read the summed child state `h̄`, and each child
    /// gets its own forget gate computed from its own `h_k`.
    pub fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        children: &[CellState],
    ) -> Result<CellState> {
        let gate = |g: &mut Graph<F>, p: &GateParams, hsum: Option<Var>| -> Result<Var> {
            let w = g.param(store, p.w);
            let b = g.param(store, p.b);
            let mut z = g.linear(x, w, b)?;
            if let Some(h) = hsum {
                let u = g.param(store, p.u);
                let uh = g.matmul(h, u)?;
                z = g.add(z, uh)?;
            }
            Ok(z)
        };
        let (hs, cs) = if children.is_empty() {
            (None, None)
        } else {
            // canonical order so the sums are bitwise independent of argument order
            let mut order: Vec<&CellState> = children.iter().collect();
            order.sort_by(|a, b| {
                let key = |s: &CellState| g.value(s.h).iter().chain(g.value(s.c)).map(|v| v.as_f64()).collect::<Vec<_>>();
                let (ka, kb) = (key(a), key(b));
                ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            });
            let hs: Vec<Var> = order.iter().map(|s| s.h).collect();
            let cs: Vec<Var> = order.iter().map(|s| s.c).collect();
            (Some(g.concat_rows(&hs)?), Some(g.concat_rows(&cs)?))
        };
        let hsum = hs.map(|h| g.sum_rows(h));
        let zi = gate(g, &self.i, hsum)?;
        let zo = gate(g, &self.o, hsum)?;
        let zu = gate(g, &self.u, hsum)?;
        let i = g.sigmoid(zi);
        let o = g.sigmoid(zo);
        let u = g.tanh(zu);
        let mut c = g.mul(i, u)?;
        if let (Some(h), Some(cm)) = (hs, cs) {
            // f_jk for every child at once: rows of H U_f share the x W_f + b term.
            let wf = g.param(store, self.f.w);
            let bf = g.param(store, self.f.b);
            let uf = g.param(store, self.f.u);
            let xw = g.linear(x, wf, bf)?;
            let hu = g.matmul(h, uf)?;
            let zf = g.add(hu, xw)?;
            let f = g.sigmoid(zf);
            let fc = g.mul(f, cm)?;
            let fc = g.sum_rows(fc);
            c = g.add(c, fc)?;
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(CellState { h, c })
    }
}

/// N-ary TreeLSTM cell with per-branch recurrent matrices.
///
/// `U_i`, `U_o`, `U_u` are stored stacked as `(N·d) × d` (block `q` is
/// `U_q`); `U_f` is `(N·d) × (N·d)` with block `(q, k)` holding `U_kq`.
#[derive(Debug, Clone, Copy)]
pub struct NaryCell {
    i: GateParams,
    f: GateParams,
    o: GateParams,
    u: GateParams,
    pub arity: usize,
    pub input: usize,
    pub hidden: usize,
}

impl NaryCell {
    pub fn new<F: Real, R: Rng>(
        init: &mut Init<'_, F, R>,
        name: &str,
        arity: usize,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        if arity == 0 {
            return Err(EncoderError::Config("N-ary cell needs N >= 1".into()));
        }
        let nd = arity * hidden;
        init.scoped(name, |s| {
            Ok(NaryCell {
                i: GateParams::new(s, "i", input, nd, hidden, hidden)?,
                f: GateParams::new(s, "f", input, nd, nd, hidden)?,
                o: GateParams::new(s, "o", input, nd, hidden, hidden)?,
                u: GateParams::new(s, "u", input, nd, hidden, hidden)?,
                arity,
                input,
                hidden,
            })
        })
    }

    /// `children[q]` is branch `q`; `None` (or a short list) is a zero state.
    pub fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        children: &[Option<CellState>],
        node: usize,
    ) -> Result<CellState> {
        if children.len() > self.arity {
            return Err(EncoderError::TooManyChildren { node, got: children.len(), max: self.arity });
        }
        let zero = CellState::zeros(g, self.hidden);
        let states: Vec<CellState> =
            (0..self.arity).map(|q| children.get(q).copied().flatten().unwrap_or(zero)).collect();
        let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
        let cs: Vec<Var> = states.iter().map(|s| s.c).collect();
        let hcat = g.concat_cols(&hs)?;
        let ccat = g.concat_cols(&cs)?;
        let gate = |g: &mut Graph<F>, p: &GateParams| -> Result<Var> {
            let w = g.param(store, p.w);
            let b = g.param(store, p.b);
            let u = g.param(store, p.u);
            let z = g.linear(x, w, b)?;
            let uh = g.matmul(hcat, u)?;
            Ok(g.add(z, uh)?)
        };
        let zi = gate(g, &self.i)?;
        let zo = gate(g, &self.o)?;
        let zu = gate(g, &self.u)?;
        let i = g.sigmoid(zi);
        let o = g.sigmoid(zo);
        let u = g.tanh(zu);
        let wf = g.param(store, self.f.w);
        let bf = g.param(store, self.f.b);
        let uf = g.param(store, self.f.u);
        let xw = g.linear(x, wf, bf)?;
        let xw_tiled = g.concat_cols(&vec![xw; self.arity])?;
        let hu = g.matmul(hcat, uf)?;
        let zf = g.add(hu, xw_tiled)?;
        let f = g.sigmoid(zf);
        let fc = g.mul(f, ccat)?;
        let mut c = g.mul(i, u)?;
        for q in 0..self.arity {
            let block = g.slice_cols(fc, q * self.hidden, (q + 1) * self.hidden)?;
            c = g.add(c, block)?;
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(CellState { h, c })
    }
}

/// Rooted ordered tree over encoder nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub children: Vec<Vec<usize>>,
    pub parent: Vec<Option<usize>>,
    /// Children before parents.
    pub post_order: Vec<usize>,
    /// Node carrying each token, in token order.
    pub terminals: Vec<usize>,
}

impl Topology {
    pub fn new(children: Vec<Vec<usize>>, terminals: Vec<usize>) -> Result<Self> {
        let m = children.len();
        let mut parent = vec![None; m];
        for (p, cs) in children.iter().enumerate() {
            for &c in cs {
                if c >= m || parent[c].is_some() {
                    return Err(EncoderError::Cyclic);
                }
                parent[c] = Some(p);
            }
        }
        let roots: Vec<usize> = (0..m).filter(|&v| parent[v].is_none()).collect();
        if roots.len() != 1 {
            return Err(EncoderError::Cyclic);
        }
        let mut post_order = Vec::with_capacity(m);
        let mut stack = vec![(roots[0], false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                post_order.push(v);
                continue;
            }
            stack.push((v, true));
            for &c in children[v].iter().rev() {
                stack.push((c, false));
            }
            if stack.len() > 2 * m + 2 {
                return Err(EncoderError::Cyclic);
            }
        }
        if post_order.len() != m {
            return Err(EncoderError::Cyclic);
        }
        Ok(Topology { children, parent, post_order, terminals })
    }

    /// Tokens are nodes; dependents are children in surface order.
    pub fn from_dep(dep: &DepTree) -> Result<Self> {
        Self::new(dep.children(), (0..dep.len()).collect())
    }

    /// Nodes are the spans of a binary tree in pre-order.
    pub fn from_bintree(bt: &BinTree) -> Result<Self> {
        let spans = bt.spans();
        let mut children = vec![Vec::new(); spans.len()];
        let mut terminals = vec![0; bt.n()];
        fn walk(spans: &[crate::structures::LabeledSpan], pos: &mut usize, children: &mut [Vec<usize>], terminals: &mut [usize]) -> usize {
            let me = *pos;
            *pos += 1;
            let s = spans[me];
            if s.end - s.start == 1 {
                terminals[s.start] = me;
            } else {
                let l = walk(spans, pos, children, terminals);
                let r = walk(spans, pos, children, terminals);
                children[me] = vec![l, r];
            }
            me
        }
        walk(spans, &mut 0, &mut children, &mut terminals);
        Self::new(children, terminals)
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn root(&self) -> usize {
        *self.post_order.last().unwrap()
    }

    /// Position of `v` among its parent's children.
    pub fn slot(&self, v: usize) -> usize {
        self.parent[v].map_or(0, |p| self.children[p].iter().position(|&c| c == v).unwrap())
    }
}

/// What feeds a node's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeInput {
    Word(usize),
    Label(usize),
    WordLabel(usize, usize),
}

/// Builds the `m × emb` node-input matrix from word and label tables.
pub fn node_inputs<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    words: ParamId,
    labels: Option<ParamId>,
    inputs: &[NodeInput],
    dropout: f64,
) -> Result<Var> {
    let wid: Vec<usize> = inputs
        .iter()
        .map(|x| match *x {
            NodeInput::Word(w) | NodeInput::WordLabel(w, _) => w,
            NodeInput::Label(_) => 0,
        })
        .collect();
    let table = g.param(store, words);
    let wrows = g.gather_rows(table, &wid)?;
    let has_label = inputs.iter().any(|x| !matches!(x, NodeInput::Word(_)));
    let out = if let (true, Some(labels)) = (has_label, labels) {
        let lid: Vec<usize> = inputs
            .iter()
            .map(|x| match *x {
                NodeInput::Label(l) | NodeInput::WordLabel(_, l) => l,
                NodeInput::Word(_) => 0,
            })
            .collect();
        let (m, d) = g.shape(wrows);
        let mut wmask = Vec::with_capacity(m * d);
        let mut lmask = Vec::with_capacity(m * d);
        for x in inputs {
            let (a, b) = match x {
                NodeInput::Word(_) => (1.0, 0.0),
                NodeInput::Label(_) => (0.0, 1.0),
                NodeInput::WordLabel(..) => (1.0, 1.0),
            };
            wmask.extend(std::iter::repeat_n(F::lit(a), d));
            lmask.extend(std::iter::repeat_n(F::lit(b), d));
        }
        let ltable = g.param(store, labels);
        let lrows = g.gather_rows(ltable, &lid)?;
        let wm = g.constant_rows(m, d, wmask)?;
        let lm = g.constant_rows(m, d, lmask)?;
        let a = g.mul(wrows, wm)?;
        let b = g.mul(lrows, lm)?;
        g.add(a, b)?
    } else {
        wrows
    };
    Ok(g.dropout(out, dropout))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    BottomUp,
    TopDown,
    Both,
}

/// Tree-LSTM cell of either flavour.
#[derive(Debug, Clone, Copy)]
pub enum TreeCell {
    ChildSum(ChildSumCell),
    Nary(NaryCell),
}

impl TreeCell {
    fn step_bottom_up<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        kids: &[CellState],
        node: usize,
    ) -> Result<CellState> {
        match self {
            TreeCell::ChildSum(c) => c.step(g, store, x, kids),
            TreeCell::Nary(c) => {
                let kids: Vec<Option<CellState>> = kids.iter().copied().map(Some).collect();
                c.step(g, store, x, &kids, node)
            }
        }
    }

    /// Top-down: the parent state is the node's single "child"; N-ary cells
    /// place it in the branch slot the node occupies under its parent.
    fn step_top_down<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        parent: Option<CellState>,
        slot: usize,
        node: usize,
    ) -> Result<CellState> {
        match self {
            TreeCell::ChildSum(c) => c.step(g, store, x, parent.as_slice()),
            TreeCell::Nary(c) => {
                let mut kids = vec![None; c.arity];
                if let Some(p) = parent {
                    kids[slot.min(c.arity - 1)] = Some(p);
                }
                c.step(g, store, x, &kids, node)
            }
        }
    }
}

/// Runs one tree layer; returns an `m × d` (or `m × 2d` for `Both`) matrix in node order.
pub fn tree_encode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    up: &TreeCell,
    down: &TreeCell,
    topo: &Topology,
    inputs: Var,
    direction: Direction,
) -> Result<Var> {
    let m = topo.len();
    let xs: Vec<Var> = (0..m).map(|v| g.row(inputs, v)).collect::<std::result::Result<_, _>>()?;
    let mut parts = Vec::new();
    if matches!(direction, Direction::BottomUp | Direction::Both) {
        let mut st: Vec<Option<CellState>> = vec![None; m];
        for &v in &topo.post_order {
            let kids: Vec<CellState> = topo.children[v].iter().map(|&c| st[c].unwrap()).collect();
            st[v] = Some(up.step_bottom_up(g, store, xs[v], &kids, v)?);
        }
        let hs: Vec<Var> = st.iter().map(|s| s.unwrap().h).collect();
        parts.push(g.concat_rows(&hs)?);
    }
    if matches!(direction, Direction::TopDown | Direction::Both) {
        let mut st: Vec<Option<CellState>> = vec![None; m];
        for &v in topo.post_order.iter().rev() {
            let parent = topo.parent[v].map(|p| st[p].unwrap());
            st[v] = Some(down.step_top_down(g, store, xs[v], parent, topo.slot(v), v)?);
        }
        let hs: Vec<Var> = st.iter().map(|s| s.unwrap().h).collect();
        parts.push(g.concat_rows(&hs)?);
    }
    Ok(if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? })
}

/// Stacked bidirectional TreeLSTM.
#[derive(Debug, Clone)]
pub struct TreeLstm {
    pub layers: Vec<(TreeCell, TreeCell)>,
    pub hidden: usize,
}

impl TreeLstm {
    /// `arity == None` builds Child-Sum cells, `Some(n)` N-ary cells.
    pub fn new<F: Real, R: Rng>(
        init: &mut Init<'_, F, R>,
        arity: Option<usize>,
        input: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { 2 * hidden };
            let make = |init: &mut Init<'_, F, R>, dir: &str| -> Result<TreeCell> {
                let name = format!("layer{l}/{dir}");
                Ok(match arity {
                    None => TreeCell::ChildSum(ChildSumCell::new(init, &name, inp, hidden)?),
                    Some(n) => TreeCell::Nary(NaryCell::new(init, &name, n, inp, hidden)?),
                })
            };
            let up = make(init, "up")?;
            let down = make(init, "down")?;
            out.push((up, down));
        }
        Ok(TreeLstm { layers: out, hidden })
    }

    /// Per-node `[h↑; h↓]` of the top layer (`m × 2·hidden`).
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, topo: &Topology, inputs: Var) -> Result<Var> {
        let mut h = inputs;
        for (up, down) in &self.layers {
            h = tree_encode(g, store, up, down, topo, h, Direction::Both)?;
        }
        Ok(h)
    }
}

/// Symmetric neighbourhood matrix with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    m: usize,
    dense: Vec<f64>,
}

impl Adjacency {
    /// Undirected edges; `self_loops` adds `(v, v)` for every node.
    pub fn new(m: usize, edges: &[(usize, usize)], self_loops: bool) -> Result<Self> {
        let mut dense = vec![0.0; m * m];
        for &(a, b) in edges {
            if a >= m || b >= m {
                return Err(EncoderError::Config(format!("edge ({a}, {b}) outside {m} nodes")));
            }
            dense[a * m + b] = 1.0;
            dense[b * m + a] = 1.0;
        }
        if self_loops {
            for v in 0..m {
                dense[v * m + v] = 1.0;
            }
        }
        for v in 0..m {
            if dense[v * m..(v + 1) * m].iter().all(|&x| x == 0.0) {
                return Err(EncoderError::Isolated(v));
            }
        }
        Ok(Adjacency { m, dense })
    }

    /// Head↔dependent (or parent↔child) edges plus self-loops.
    pub fn from_topology(topo: &Topology) -> Result<Self> {
        let edges: Vec<(usize, usize)> =
            topo.parent.iter().enumerate().filter_map(|(v, p)| p.map(|p| (p, v))).collect();
        Self::new(topo.len(), &edges, true)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn constant<F: Real>(&self, g: &mut Graph<F>) -> Var {
        let data = self.dense.iter().map(|&x| F::lit(x)).collect();
        g.constant_rows(self.m, self.m, data).expect("square adjacency")
    }
}

/// Gated graph convolution: `g_i = σ(W h_i + b)`, `h_j = ReLU(Σ_{i∈N(j)} h_i ⊙ g_i)`.
#[derive(Debug, Clone, Copy)]
pub struct GcnLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl GcnLayer {
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |i| Ok(GcnLayer { w: i.matrix("W", dim, dim)?, b: i.zeros("b", 1, dim)? }))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, adj: Var, h: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let z = g.linear(h, w, b)?;
        let gate = g.sigmoid(z);
        let msg = g.mul(h, gate)?;
        let agg = g.matmul(adj, msg)?;
        Ok(g.relu(agg))
    }
}

#[derive(Debug, Clone)]
pub struct Gcn {
    pub input: Option<Linear>,
    pub layers: Vec<GcnLayer>,
    pub hidden: usize,
}

impl Gcn {
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        let proj = if input != hidden { Some(Linear::new(init, "input", input, hidden)?) } else { None };
        let layers =
            (0..layers).map(|l| GcnLayer::new(init, &format!("layer{l}"), hidden)).collect::<Result<Vec<_>>>()?;
        Ok(Gcn { input: proj, layers, hidden })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, adj: &Adjacency, inputs: Var) -> Result<Var> {
        let a = adj.constant(g);
        let mut h = match &self.input {
            Some(p) => p.forward(g, store, inputs)?,
            None => inputs,
        };
        for layer in &self.layers {
            h = layer.forward(g, store, a, h)?;
        }
        Ok(h)
    }
}

/// Standard LSTM cell, gate blocks ordered `[i, f, o, u]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        init.scoped(name, |i| {
            let b = i.zeros("b", 1, 4 * hidden)?;
            // forget-gate bias starts at 1
            for x in &mut i.store.get_mut(b).data_mut()[hidden..2 * hidden] {
                *x = F::one();
            }
            Ok(LstmCell { w: i.matrix("W", input, 4 * hidden)?, u: i.matrix("U", hidden, 4 * hidden)?, b, hidden })
        })
    }

    /// Runs over all rows of `inputs`, forwards or backwards; returns `n × hidden`.
    pub fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        inputs: Var,
        reverse: bool,
    ) -> Result<Var> {
        let n = g.shape(inputs).0;
        let d = self.hidden;
        let w = g.param(store, self.w);
        let u = g.param(store, self.u);
        let b = g.param(store, self.b);
        let xw = g.linear(inputs, w, b)?;
        let mut state: Option<CellState> = None;
        let mut hs = vec![None; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let mut z = g.row(xw, t)?;
            if let Some(s) = state {
                let hu = g.matmul(s.h, u)?;
                z = g.add(z, hu)?;
            }
            let ifo = g.slice_cols(z, 0, 3 * d)?;
            let ifo = g.sigmoid(ifo);
            let zu = g.slice_cols(z, 3 * d, 4 * d)?;
            let cand = g.tanh(zu);
            let i = g.slice_cols(ifo, 0, d)?;
            let o = g.slice_cols(ifo, 2 * d, 3 * d)?;
            let mut c = g.mul(i, cand)?;
            if let Some(s) = state {
                let f = g.slice_cols(ifo, d, 2 * d)?;
                let fc = g.mul(f, s.c)?;
                c = g.add(c, fc)?;
            }
            let tc = g.tanh(c);
            let h = g.mul(o, tc)?;
            state = Some(CellState { h, c });
            hs[t] = Some(h);
        }
        let hs: Vec<Var> = hs.into_iter().map(Option::unwrap).collect();
        Ok(g.concat_rows(&hs)?)
    }
}

/// Stacked bidirectional LSTM.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

/// Output of [`BiLstm::forward`].
#[derive(Debug, Clone, Copy)]
pub struct SeqReps {
    /// `n × 2·hidden`, forward half first.
    pub reps: Var,
    /// Top-layer forward-direction states, `n × hidden`.
    pub forward_top: Var,
}

impl BiLstm {
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { 2 * hidden };
            let f = LstmCell::new(init, &format!("layer{l}/fwd"), inp, hidden)?;
            let b = LstmCell::new(init, &format!("layer{l}/bwd"), inp, hidden)?;
            out.push((f, b));
        }
        Ok(BiLstm { layers: out, hidden })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, inputs: Var) -> Result<SeqReps> {
        let mut h = inputs;
        let mut fwd = inputs;
        for (f, b) in &self.layers {
            fwd = f.run(g, store, h, false)?;
            let bwd = b.run(g, store, h, true)?;
            h = g.concat_cols(&[fwd, bwd])?;
        }
        Ok(SeqReps { reps: h, forward_top: fwd })
    }
}

/// Task-specific output layer.
#[derive(Debug, Clone)]
pub enum TaskHead {
    /// Mean-pooled sentence vector → class logits.
    Classify { mlp: Mlp, classes: usize },
    /// `[u; v; u⊙v; u−v; u+v]` → class logits.
    Pair { mlp: Mlp, classes: usize },
    /// Per-token `[r; e(is_predicate)]` → tag logits.
    Tag { mlp: Mlp, predicate: ParamId, tags: usize },
}

pub const PREDICATE_EMB: usize = 16;

impl TaskHead {
    pub fn classify<F: Real, R: Rng>(init: &mut Init<'_, F, R>, rep: usize, hidden: usize, classes: usize) -> Result<Self> {
        Ok(TaskHead::Classify { mlp: Mlp::new(init, "classify", rep, hidden, classes)?, classes })
    }

    pub fn pair<F: Real, R: Rng>(init: &mut Init<'_, F, R>, rep: usize, hidden: usize, classes: usize) -> Result<Self> {
        Ok(TaskHead::Pair { mlp: Mlp::new(init, "pair", 5 * rep, hidden, classes)?, classes })
    }

    pub fn tag<F: Real, R: Rng>(init: &mut Init<'_, F, R>, rep: usize, hidden: usize, tags: usize) -> Result<Self> {
        let predicate = init.embedding("tag/predicate", 2, PREDICATE_EMB)?;
        Ok(TaskHead::Tag { mlp: Mlp::new(init, "tag", rep + PREDICATE_EMB, hidden, tags)?, predicate, tags })
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            TaskHead::Classify { classes, .. } | TaskHead::Pair { classes, .. } => *classes,
            TaskHead::Tag { tags, .. } => *tags,
        }
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if self.num_outputs() != classes {
            return Err(EncoderError::ClassCount { expected: self.num_outputs(), got: classes });
        }
        Ok(())
    }

    /// Sentence classification from token representations (mean pooled).
    pub fn classify_forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, reps: Var) -> Result<Var> {
        let TaskHead::Classify { mlp, .. } = self else {
            return Err(EncoderError::Config("not a classification head".into()));
        };
        let pooled = g.mean_rows(reps);
        mlp.forward(g, store, pooled)
    }

    pub fn pair_forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, a: Var, b: Var) -> Result<Var> {
        let TaskHead::Pair { mlp, .. } = self else {
            return Err(EncoderError::Config("not a pair head".into()));
        };
        let u = g.mean_rows(a);
        let v = g.mean_rows(b);
        let feat = pair_features(g, u, v)?;
        mlp.forward(g, store, feat)
    }

    pub fn tag_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        reps: Var,
        predicate: usize,
    ) -> Result<Var> {
        let TaskHead::Tag { mlp, predicate: table, .. } = self else {
            return Err(EncoderError::Config("not a tagging head".into()));
        };
        let n = g.shape(reps).0;
        let flags: Vec<usize> = (0..n).map(|i| usize::from(i == predicate)).collect();
        let t = g.param(store, *table);
        let e = g.gather_rows(t, &flags)?;
        let x = g.concat_cols(&[reps, e])?;
        mlp.forward(g, store, x)
    }
}

/// `[u; v; u⊙v; u−v; u+v]`.
pub fn pair_features<F: Real>(g: &mut Graph<F>, u: Var, v: Var) -> Result<Var> {
    let prod = g.mul(u, v)?;
    let diff = g.sub(u, v)?;
    let sum = g.add(u, v)?;
    Ok(g.concat_cols(&[u, v, prod, diff, sum])?)
}

/// Biaffine-style dependency scorer; candidate head 0 is the virtual root.
#[derive(Debug, Clone, Copy)]
pub struct ArcLabelScorer {
    root: ParamId,
    dep: Linear,
    head: Linear,
    bilinear: ParamId,
    head_bias: ParamId,
    label_dep: Linear,
    label_head: Linear,
    label_w_dep: ParamId,
    label_w_head: ParamId,
    label_b: ParamId,
    pub labels: usize,
}

/// Scores of one sentence: `arc` is `n × (n+1)` logits.
#[derive(Debug, Clone, Copy)]
pub struct ArcScores {
    pub arc: Var,
    label_dep: Var,
    label_head: Var,
    label_b: Var,
}

impl ArcLabelScorer {
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, rep: usize, arc: usize, label: usize, labels: usize) -> Result<Self> {
        init.scoped("arc", |i| {
            Ok(ArcLabelScorer {
                root: i.embedding("root", 1, rep)?,
                dep: Linear::new(i, "dep", rep, arc)?,
                head: Linear::new(i, "head", rep, arc)?,
                bilinear: i.zeros("U", arc, arc)?,
                head_bias: i.zeros("w_head", 1, arc)?,
                label_dep: Linear::new(i, "label_dep", rep, label)?,
                label_head: Linear::new(i, "label_head", rep, label)?,
                label_w_dep: i.matrix("label_W_dep", label, labels)?,
                label_w_head: i.matrix("label_W_head", label, labels)?,
                label_b: i.zeros("label_b", 1, labels)?,
                labels,
            })
        })
    }

    /// `s(i, j) = d_iᵀ U h_j + wᵀ h_j` over candidate heads `j ∈ {root} ∪ tokens`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, reps: Var) -> Result<ArcScores> {
        let root = g.param(store, self.root);
        let cand = g.concat_rows(&[root, reps])?;
        let d = self.dep.forward(g, store, reps)?;
        let d = g.relu(d);
        let h = self.head.forward(g, store, cand)?;
        let h = g.relu(h);
        let u = g.param(store, self.bilinear);
        let du = g.matmul(d, u)?;
        let bil = g.matmul_t(du, h)?;
        let w = g.param(store, self.head_bias);
        let lin = g.matmul_t(w, h)?;
        let arc = g.add(bil, lin)?;

        let ld = self.label_dep.forward(g, store, reps)?;
        let ld = g.relu(ld);
        let lh = self.label_head.forward(g, store, cand)?;
        let lh = g.relu(lh);
        let wd = g.param(store, self.label_w_dep);
        let wh = g.param(store, self.label_w_head);
        let label_dep = g.matmul(ld, wd)?;
        let label_head = g.matmul(lh, wh)?;
        let label_b = g.param(store, self.label_b);
        Ok(ArcScores { arc, label_dep, label_head, label_b })
    }
}

impl ArcScores {
    /// Label logits for `(dependent, candidate head)` pairs (`p × |L|`);
    /// head 0 is the root.
    pub fn label_logits<F: Real>(&self, g: &mut Graph<F>, pairs: &[(usize, usize)]) -> Result<Var> {
        let deps: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let heads: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = g.gather_rows(self.label_dep, &deps)?;
        let b = g.gather_rows(self.label_head, &heads)?;
        let s = g.add(a, b)?;
        Ok(g.add(s, self.label_b)?)
    }

    /// All `n·(n+1)` label rows, dependent-major.
    pub fn all_label_logits<F: Real>(&self, g: &mut Graph<F>) -> Result<Var> {
        let (n, m) = g.shape(self.arc);
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
        self.label_logits(g, &pairs)
    }
}

/// Feed-forward span scorer over endpoint features `[r_e − r_s; r_s; r_e]`,
/// with `s` the first and `e` the last token of the span.
#[derive(Debug, Clone, Copy)]
pub struct SpanScorer {
    pub mlp: Mlp,
    pub labels: usize,
}

impl SpanScorer {
    /// `labels` counts the null label.
    pub fn new<F: Real, R: Rng>(init: &mut Init<'_, F, R>, rep: usize, hidden: usize, labels: usize) -> Result<Self> {
        Ok(SpanScorer { mlp: Mlp::new(init, "span", 3 * rep, hidden, labels)?, labels })
    }

    /// `num_spans(n) × labels`, rows in span-index order.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, reps: Var) -> Result<Var> {
        let n = g.shape(reps).0;
        let spans = all_spans(n);
        let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let ends: Vec<usize> = spans.iter().map(|s| s.1 - 1).collect();
        let rs = g.gather_rows(reps, &starts)?;
        let re = g.gather_rows(reps, &ends)?;
        let diff = g.sub(re, rs)?;
        let feat = g.concat_cols(&[diff, rs, re])?;
        self.mlp.forward(g, store, feat)
    }
}

/// GCN node set for a constituency tree: internal nodes (labels) and leaves (words).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstGraph {
    pub topo: Topology,
    /// Label-id of each node, or the token index for leaves.
    pub nodes: Vec<ConstGraphNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstGraphNode {
    Phrase(usize),
    Token(usize),
}

impl ConstGraph {
    pub fn new(tree: &ConstTree, label_id: impl Fn(&str) -> usize) -> Result<Self> {
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut nodes = Vec::new();
        let mut terminals = vec![0; tree.len()];
        fn walk(
            node: &ConstNode,
            children: &mut Vec<Vec<usize>>,
            nodes: &mut Vec<ConstGraphNode>,
            terminals: &mut [usize],
            label_id: &dyn Fn(&str) -> usize,
        ) -> usize {
            let me = nodes.len();
            children.push(Vec::new());
            match node {
                ConstNode::Leaf(i) => {
                    nodes.push(ConstGraphNode::Token(*i));
                    terminals[*i] = me;
                }
                ConstNode::Node { label, children: kids } => {
                    nodes.push(ConstGraphNode::Phrase(label_id(label)));
                    let ids: Vec<usize> =
                        kids.iter().map(|k| walk(k, children, nodes, terminals, label_id)).collect();
                    children[me] = ids;
                }
            }
            me
        }
        walk(tree.root(), &mut children, &mut nodes, &mut terminals, &label_id);
        Ok(ConstGraph { topo: Topology::new(children, terminals)?, nodes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore<f64>) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn childsum_zero_params_leaf_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = ChildSumCell::new(&mut Init::new(&mut store, &mut rng), "cs", 3, 4).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::row(&[1.0, -2.0, 0.5]));
        let s = cell.step(&mut g, &store, x, &[]).unwrap();
        assert!(g.value(s.h).iter().all(|&v| v == 0.0));
        assert!(g.value(s.c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nary_rejects_extra_children_and_is_order_sensitive() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = NaryCell::new(&mut Init::new(&mut store, &mut rng), "nary", 2, 3, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::row(&[0.1, 0.2, 0.3]));
        let a = CellState { h: g.constant(&Tensor::row(&[0.5, -0.1, 0.2])), c: g.constant(&Tensor::row(&[0.3, 0.3, -0.4])) };
        let b = CellState { h: g.constant(&Tensor::row(&[-0.2, 0.4, 0.1])), c: g.constant(&Tensor::row(&[0.0, 0.1, 0.2])) };
        assert!(matches!(
            cell.step(&mut g, &store, x, &[Some(a), Some(b), Some(a)], 7),
            Err(EncoderError::TooManyChildren { node: 7, got: 3, max: 2 })
        ));
        let ab = cell.step(&mut g, &store, x, &[Some(a), Some(b)], 0).unwrap();
        let ba = cell.step(&mut g, &store, x, &[Some(b), Some(a)], 0).unwrap();
        assert_ne!(g.value(ab.h), g.value(ba.h));
    }

    #[test]
    fn gcn_zero_weights_halve_neighbour_sum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = GcnLayer::new(&mut Init::new(&mut store, &mut rng), "gcn", 2).unwrap();
        zero_all(&mut store);
        let adj = Adjacency::new(3, &[(0, 1), (1, 2)], true).unwrap();
        let mut g = Graph::new();
        let a = adj.constant(&mut g);
        let h = g.constant(&Tensor::matrix(3, 2, vec![1.0, -1.0, 2.0, 0.5, -4.0, 3.0]).unwrap());
        let out = layer.forward(&mut g, &store, a, h).unwrap();
        let expect: [f64; 6] = [(1.0 + 2.0) * 0.5, (-1.0 + 0.5) * 0.5, (1.0 + 2.0 - 4.0) * 0.5, (-1.0 + 0.5 + 3.0) * 0.5, (2.0 - 4.0) * 0.5, (0.5 + 3.0) * 0.5];
        for (o, e) in g.value(out).iter().zip(expect) {
            assert!((o - e.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_node_rejected() {
        assert!(matches!(Adjacency::new(2, &[], false), Err(EncoderError::Isolated(0))));
    }

    #[test]
    fn arc_scores_uniform_at_zero_and_span_table_size() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut store, &mut rng);
        let arc = ArcLabelScorer::new(&mut init, 4, 5, 3, 6).unwrap();
        let span = SpanScorer::new(&mut init, 4, 5, 4).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let reps = g.constant(&Tensor::uniform(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(9)));
        let s = arc.forward(&mut g, &store, reps).unwrap();
        let p = g.softmax_rows(s.arc).unwrap();
        assert_eq!(g.shape(p), (3, 4));
        assert!(g.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let labels = s.all_label_logits(&mut g).unwrap();
        assert_eq!(g.shape(labels), (12, 6));
        let table = span.forward(&mut g, &store, reps).unwrap();
        assert_eq!(g.value(table).len(), 6 * 4);
    }

    #[test]
    fn pair_features_width_and_zero_difference() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(&Tensor::row(&[1.0, 2.0, 3.0]));
        let f = pair_features(&mut g, u, u).unwrap();
        assert_eq!(g.shape(f), (1, 15));
        assert_eq!(&g.value(f)[9..12], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn topology_from_dep_and_bintree() {
        let dep = DepTree::new(vec![2, 0, 2], vec!["a".into(), "root".into(), "b".into()]).unwrap();
        let t = Topology::from_dep(&dep).unwrap();
        assert_eq!(t.root(), 1);
        assert_eq!(t.post_order, vec![0, 2, 1]);
        assert!(Topology::new(vec![vec![1], vec![0]], vec![0, 1]).is_err());
    }
}
