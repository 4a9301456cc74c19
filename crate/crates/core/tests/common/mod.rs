//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use syndistill::structures::{num_spans, BinTree, LabeledSpan, SpanScores};
use syndistill::{Graph, ParamStore, Var};

/// Central finite differences of a scalar loss over every parameter scalar,
/// in store order.
pub fn fd_grad<L>(store: &ParamStore<f64>, loss: L, h: f64) -> Vec<f64>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let v = loss(&mut g, s);
        g.scalar(v)
    };
    let mut work = store.clone();
    let ids: Vec<_> = work.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        for k in 0..work.get(id).len() {
            let x = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = x + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[k] = x - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[k] = x;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Reverse-mode gradient, flattened in store order (absent params are zero).
pub fn ad_grad<L>(store: &ParamStore<f64>, loss: L) -> Vec<f64>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let v = loss(&mut g, store);
    g.backward(v).unwrap();
    let grads = g.param_grads(store);
    let mut out = Vec::new();
    for id in store.ids() {
        match grads.get(id) {
            Some(x) => out.extend_from_slice(x),
            None => out.extend(std::iter::repeat_n(0.0, store.get(id).len())),
        }
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

/// `−Σ target·log softmax(logits)` for one row.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    log_softmax(logits).iter().zip(target).map(|(l, t)| -t * l).sum()
}

/// Every binary bracketing of `[i, j)`, split points ascending, then left
/// shapes, then right shapes.
pub fn shapes(i: usize, j: usize) -> Vec<Vec<(usize, usize)>> {
    if j - i == 1 {
        return vec![vec![(i, j)]];
    }
    let mut out = Vec::new();
    for k in i + 1..j {
        let left = shapes(i, k);
        let right = shapes(k, j);
        for l in &left {
            for r in &right {
                let mut s = vec![(i, j)];
                s.extend_from_slice(l);
                s.extend_from_slice(r);
                out.push(s);
            }
        }
    }
    out
}

pub fn catalan(n: usize) -> usize {
    let mut c = 1usize;
    for k in 0..n {
        c = c * 2 * (2 * k + 1) / (k + 2);
    }
    c
}

/// Exhaustive search over bracketings. Labels are chosen per span (the score
/// is a sum over spans); ties go to the lowest label, and between trees to the
/// first in [`shapes`] order. With `reference`, every span whose labelled
/// version is absent from the reference earns +1.
pub fn brute_force(table: &SpanScores, reference: Option<&BinTree>) -> (Vec<LabeledSpan>, f64) {
    let n = table.n();
    let span_best = |i: usize, j: usize| -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for l in 0..table.num_labels() {
            let mut v = table.get(i, j, l);
            if let Some(r) = reference {
                if !r.contains(&LabeledSpan { start: i, end: j, label: l }) {
                    v += 1.0;
                }
            }
            if v > best.1 {
                best = (l, v);
            }
        }
        best
    };
    let mut best: Option<(Vec<LabeledSpan>, f64)> = None;
    for shape in shapes(0, n) {
        let mut total = 0.0;
        let mut spans = Vec::with_capacity(shape.len());
        for &(i, j) in &shape {
            let (l, v) = span_best(i, j);
            total += v;
            spans.push(LabeledSpan { start: i, end: j, label: l });
        }
        if best.as_ref().is_none_or(|b| total > b.1) {
            best = Some((spans, total));
        }
    }
    let (mut spans, score) = best.unwrap();
    spans.sort();
    (spans, score)
}

/// Random score table; `integer` tables have frequent exact ties.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize, labels: usize, integer: bool) -> SpanScores {
    let data: Vec<f64> = (0..num_spans(n) * labels)
        .map(|_| if integer { rng.gen_range(-2..=2) as f64 } else { rng.gen_range(-3.0..3.0) })
        .collect();
    SpanScores::new(n, labels, data).unwrap()
}

/// Random bracketing with random labels, for use as a reference tree.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize, labels: usize) -> BinTree {
    let all = shapes(0, n);
    let shape = &all[rng.gen_range(0..all.len())];
    let spans = shape.iter().map(|&(i, j)| LabeledSpan { start: i, end: j, label: rng.gen_range(0..labels) }).collect();
    BinTree::new(n, spans).unwrap()
}

pub fn sorted_spans(t: &BinTree) -> Vec<LabeledSpan> {
    let mut s = t.spans().to_vec();
    s.sort();
    s
}
