//! Chart algorithms over labelled binary bracketings: binarisation, CYK
//! maximisation and its Hamming-augmented variant.
//!
//! Spans are half-open `[start, end)`. A [`BinTree`] over `n` tokens holds all
//! `2n - 1` spans of a full binary bracketing, leaf spans included. Label id 0
//! is the null label used for binarisation artifacts.

use std::collections::HashSet;

use thiserror::Error;

use crate::par;
use crate::syntax_data::{ConstNode, ConstTree, LabelSet, NULL_LABEL};

pub const NULL: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructError {
    #[error("empty sentence")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid binary tree: {0}")]
    InvalidTree(String),
    #[error("unknown span label `{0}`")]
    UnknownLabel(String),
    #[error("non-finite span score at ({start}, {end}, {label})")]
    NonFinite { start: usize, end: usize, label: usize },
}

pub type Result<T> = std::result::Result<T, StructError>;

/// Number of spans `(i, j)` with `0 <= i < j <= n`.
pub fn num_spans(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of span `(i, j)` in start-major, end-minor order.
pub fn span_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j <= n);
    i * n - (i * i.saturating_sub(1)) / 2 + (j - i - 1)
}

/// All spans in [`span_index`] order.
pub fn all_spans(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(num_spans(n));
    for i in 0..n {
        for j in i + 1..=n {
            out.push((i, j));
        }
    }
    out
}

/// Complete score table `f(i, j, l)` over spans and labels (null included).
#[derive(Debug, Clone, PartialEq)]
pub struct SpanScores {
    n: usize,
    num_labels: usize,
    scores: Vec<f64>,
}

impl SpanScores {
    /// `scores` is span-major in [`span_index`] order, `num_labels` per span.
    pub fn new(n: usize, num_labels: usize, scores: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(StructError::Empty);
        }
        let expect = num_spans(n) * num_labels;
        if scores.len() != expect || num_labels == 0 {
            return Err(StructError::LengthMismatch { left: scores.len(), right: expect });
        }
        for (k, &v) in scores.iter().enumerate() {
            if !v.is_finite() {
                let (start, end) = all_spans(n)[k / num_labels];
                return Err(StructError::NonFinite { start, end, label: k % num_labels });
            }
        }
        Ok(SpanScores { n, num_labels, scores })
    }

    pub fn from_fn(n: usize, num_labels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut scores = Vec::with_capacity(num_spans(n) * num_labels);
        for (i, j) in all_spans(n) {
            for l in 0..num_labels {
                scores.push(f(i, j, l));
            }
        }
        Self::new(n, num_labels, scores)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.scores[self.flat_index(i, j, l)]
    }

    /// Row-major position of `(i, j, l)` in the underlying table.
    pub fn flat_index(&self, i: usize, j: usize, l: usize) -> usize {
        span_index(self.n, i, j) * self.num_labels + l
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// Full binary bracketing; spans kept in pre-order (start asc, end desc).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinTree {
    n: usize,
    spans: Vec<LabeledSpan>,
}

impl BinTree {
    pub fn new(n: usize, mut spans: Vec<LabeledSpan>) -> Result<Self> {
        if n == 0 {
            return Err(StructError::Empty);
        }
        spans.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
        if spans.len() != 2 * n - 1 {
            return Err(StructError::InvalidTree(format!("{} spans for n = {n}", spans.len())));
        }
        if (spans[0].start, spans[0].end) != (0, n) {
            return Err(StructError::InvalidTree("root span must cover the sentence".into()));
        }
        let mut pos = 0;
        check_binary(&spans, &mut pos, 0, n)?;
        Ok(BinTree { n, spans })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spans(&self) -> &[LabeledSpan] {
        &self.spans
    }

    pub fn contains(&self, s: &LabeledSpan) -> bool {
        self.spans.binary_search_by(|x| x.start.cmp(&s.start).then(s.end.cmp(&x.end))).is_ok_and(|k| {
            self.spans[k].label == s.label
        })
    }

    /// Label of span `(i, j)` if it is a constituent of this tree.
    pub fn label_of(&self, i: usize, j: usize) -> Option<usize> {
        self.spans
            .binary_search_by(|x| x.start.cmp(&i).then(j.cmp(&x.end)))
            .ok()
            .map(|k| self.spans[k].label)
    }

    /// Split point of each internal span, in pre-order.
    pub fn splits(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (k, s) in self.spans.iter().enumerate() {
            if s.end - s.start > 1 {
                let left = self.spans[k + 1];
                out.push((s.start, left.end, s.end));
            }
        }
        out
    }

    /// `Scr(t)`: sum of each span's score under its assigned label.
    pub fn score(&self, s: &SpanScores) -> f64 {
        self.spans.iter().map(|sp| s.get(sp.start, sp.end, sp.label)).sum()
    }

    /// Bracketed rendering; leaf spans print `(label word)` or the bare word.
    pub fn render(&self, words: &[String], labels: &LabelSet) -> String {
        fn walk(t: &BinTree, pos: &mut usize, words: &[String], labels: &LabelSet, out: &mut String) {
            let s = t.spans[*pos];
            *pos += 1;
            let name = labels.name(s.label);
            if s.end - s.start == 1 {
                if s.label == NULL {
                    out.push_str(&words[s.start]);
                } else {
                    out.push_str(&format!("({name} {})", words[s.start]));
                }
                return;
            }
            out.push('(');
            out.push_str(name);
            out.push(' ');
            walk(t, pos, words, labels, out);
            out.push(' ');
            walk(t, pos, words, labels, out);
            out.push(')');
        }
        let mut out = String::new();
        walk(self, &mut 0, words, labels, &mut out);
        out
    }
}

fn check_binary(spans: &[LabeledSpan], pos: &mut usize, start: usize, end: usize) -> Result<()> {
    let Some(s) = spans.get(*pos) else {
        return Err(StructError::InvalidTree("missing spans".into()));
    };
    if (s.start, s.end) != (start, end) {
        return Err(StructError::InvalidTree(format!(
            "expected span ({start}, {end}), found ({}, {})",
            s.start, s.end
        )));
    }
    *pos += 1;
    if end - start == 1 {
        return Ok(());
    }
    let Some(left) = spans.get(*pos) else {
        return Err(StructError::InvalidTree(format!("span ({start}, {end}) has no children")));
    };
    let mid = left.end;
    if left.start != start || mid >= end {
        return Err(StructError::InvalidTree(format!("span ({start}, {end}) is not binary")));
    }
    check_binary(spans, pos, start, mid)?;
    check_binary(spans, pos, mid, end)
}

/// Adds every span label (unary chains joined with `+`) of `tree` to `labels`.
pub fn collect_span_labels(tree: &ConstTree, labels: &mut LabelSet) {
    let mut out = Vec::new();
    binarize_node(tree.root(), &mut out);
    for (_, _, l) in out {
        if let Some(l) = l {
            labels.intern(&l);
        }
    }
}

fn binarize_node(node: &ConstNode, out: &mut Vec<(usize, usize, Option<String>)>) {
    match node {
        ConstNode::Leaf(i) => out.push((*i, i + 1, None)),
        ConstNode::Node { .. } => {
            let mut chain = Vec::new();
            let mut cur = node;
            while let ConstNode::Node { label, children } = cur {
                chain.push(label.as_str());
                if children.len() == 1 {
                    cur = &children[0];
                    if let ConstNode::Leaf(i) = cur {
                        out.push((*i, i + 1, Some(chain.join("+"))));
                        return;
                    }
                } else {
                    break;
                }
            }
            let ConstNode::Node { children, .. } = cur else { unreachable!() };
            let (start, end) = cur.span();
            out.push((start, end, Some(chain.join("+"))));
            binarize_children(children, out);
        }
    }
}

fn binarize_children(children: &[ConstNode], out: &mut Vec<(usize, usize, Option<String>)>) {
    binarize_node(&children[0], out);
    let rest = &children[1..];
    if rest.len() == 1 {
        binarize_node(&rest[0], out);
    } else {
        out.push((rest[0].span().0, rest[rest.len() - 1].span().1, None));
        binarize_children(rest, out);
    }
}

/// Right-branching binarisation; introduced nodes get the null label and
/// unary chains collapse into one `+`-joined label.
pub fn binarize(tree: &ConstTree, labels: &LabelSet) -> Result<BinTree> {
    let mut raw = Vec::new();
    binarize_node(tree.root(), &mut raw);
    let spans = raw
        .into_iter()
        .map(|(start, end, l)| {
            let label = match l {
                None => NULL,
                Some(name) => labels.get(&name).ok_or(StructError::UnknownLabel(name))?,
            };
            Ok(LabeledSpan { start, end, label })
        })
        .collect::<Result<Vec<_>>>()?;
    BinTree::new(tree.len(), spans)
}

/// Inverse of [`binarize`]: null spans are spliced into their parent and
/// joined labels are expanded back into unary chains.
pub fn unbinarize(bt: &BinTree, labels: &LabelSet) -> ConstTree {
    fn wrap(label: &str, inner: Vec<ConstNode>) -> ConstNode {
        let mut parts = label.split('+').rev();
        let mut node = ConstNode::node(parts.next().unwrap(), inner);
        for p in parts {
            node = ConstNode::node(p, vec![node]);
        }
        node
    }
    fn build(bt: &BinTree, pos: &mut usize, labels: &LabelSet) -> Vec<ConstNode> {
        let s = bt.spans[*pos];
        *pos += 1;
        let inner = if s.end - s.start == 1 {
            vec![ConstNode::Leaf(s.start)]
        } else {
            let mut kids = build(bt, pos, labels);
            kids.extend(build(bt, pos, labels));
            kids
        };
        if s.label == NULL {
            inner
        } else {
            vec![wrap(labels.name(s.label), inner)]
        }
    }
    let mut nodes = build(bt, &mut 0, labels);
    let root = if nodes.len() == 1 && matches!(nodes[0], ConstNode::Node { .. }) {
        nodes.pop().unwrap()
    } else {
        ConstNode::node(NULL_LABEL, nodes)
    };
    ConstTree::new(root).expect("binary tree covers the sentence")
}

/// Number of labelled spans of `t` missing from `reference`.
pub fn hamming(t: &BinTree, reference: &BinTree) -> Result<usize> {
    if t.n != reference.n {
        return Err(StructError::LengthMismatch { left: t.n, right: reference.n });
    }
    let r: HashSet<&LabeledSpan> = reference.spans.iter().collect();
    Ok(t.spans.iter().filter(|s| !r.contains(s)).count())
}

/// Highest-scoring binary tree and its score, `O(n³·|L|)`.
pub fn cyk_max(s: &SpanScores) -> Result<(BinTree, f64)> {
    cyk(s, None)
}

/// `argmax_t Scr(t) + Δ(t, reference)` with the Hamming cost folded into the chart.
pub fn cyk_augmented(s: &SpanScores, reference: &BinTree) -> Result<(BinTree, f64)> {
    if reference.n != s.n {
        return Err(StructError::LengthMismatch { left: s.n, right: reference.n });
    }
    cyk(s, Some(reference))
}

fn cyk(s: &SpanScores, reference: Option<&BinTree>) -> Result<(BinTree, f64)> {
    let n = s.n;
    if n == 0 {
        return Err(StructError::Empty);
    }
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    let mut ref_label = vec![None; (n + 1) * (n + 1)];
    if let Some(r) = reference {
        for sp in &r.spans {
            ref_label[idx(sp.start, sp.end)] = Some(sp.label);
        }
    }
    let mut best = vec![f64::NEG_INFINITY; (n + 1) * (n + 1)];
    let mut label = vec![0usize; (n + 1) * (n + 1)];
    let mut split = vec![0usize; (n + 1) * (n + 1)];
    for len in 1..=n {
        for i in 0..=n - len {
            let j = i + len;
            let (mut bl, mut bs) = (0, f64::NEG_INFINITY);
            for l in 0..s.num_labels {
                let mut v = s.get(i, j, l);
                if reference.is_some() && ref_label[idx(i, j)] != Some(l) {
                    v += 1.0;
                }
                if v > bs {
                    bs = v;
                    bl = l;
                }
            }
            let mut total = bs;
            if len > 1 {
                let (mut bk, mut bv) = (i + 1, f64::NEG_INFINITY);
                for k in i + 1..j {
                    let v = best[idx(i, k)] + best[idx(k, j)];
                    if v > bv {
                        bv = v;
                        bk = k;
                    }
                }
                split[idx(i, j)] = bk;
                total += bv;
            }
            best[idx(i, j)] = total;
            label[idx(i, j)] = bl;
        }
    }
    let mut spans = Vec::with_capacity(2 * n - 1);
    let mut stack = vec![(0, n)];
    while let Some((i, j)) = stack.pop() {
        spans.push(LabeledSpan { start: i, end: j, label: label[idx(i, j)] });
        if j - i > 1 {
            let k = split[idx(i, j)];
            stack.push((k, j));
            stack.push((i, k));
        }
    }
    Ok((BinTree::new(n, spans)?, best[idx(0, n)]))
}

/// [`cyk_max`] over many sentences, data-parallel when enabled.
pub fn cyk_max_batch(tables: &[SpanScores]) -> Vec<Result<(BinTree, f64)>> {
    par::map(tables, cyk_max)
}
