//! Finite-difference verification of every encoder and loss on toy sizes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::{
    con_inject_loss, dep_inject_loss, feat_distill, output_distill_loss, reg_loss, semantic_lm_loss, total_loss,
    DepTarget, DistillConfig, LossParts,
};
use crate::encoders::{
    Adjacency, ArcLabelScorer, BiLstm, CellState, ChildSumCell, Direction, GcnLayer, Init, Linear, NaryCell,
    SpanScorer, Topology, TreeCell, tree_encode,
};
use crate::structures::{BinTree, LabeledSpan};
use crate::syntax_data::DepTree;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, String> + Send + Sync>;

/// A scalar function of a parameter store.
pub struct GradCase {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub loss: LossFn,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub rel_err: f64,
    pub scalars: usize,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Reverse-mode gradient, flattened in parameter order.
pub fn analytic(case: &GradCase) -> Result<Vec<f64>, String> {
    let mut g = Graph::new();
    let loss = (case.loss)(&mut g, &case.store)?;
    g.backward(loss).map_err(|e| e.to_string())?;
    let grads = g.param_grads(&case.store);
    let mut out = Vec::with_capacity(case.store.num_scalars());
    for id in case.store.ids() {
        match grads.get(id) {
            Some(gr) => out.extend_from_slice(gr),
            None => out.extend(std::iter::repeat_n(0.0, case.store.get(id).len())),
        }
    }
    Ok(out)
}

fn value(case: &GradCase, store: &ParamStore<f64>) -> Result<f64, String> {
    let mut g = Graph::new();
    let loss = (case.loss)(&mut g, store)?;
    Ok(g.scalar(loss))
}

/// Central differences with step `h`, same layout as [`analytic`].
pub fn numeric(case: &GradCase, h: f64) -> Result<Vec<f64>, String> {
    let mut store = case.store.clone();
    let mut out = Vec::with_capacity(store.num_scalars());
    for id in store.ids().collect::<Vec<_>>() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = value(case, &store)?;
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = value(case, &store)?;
            store.get_mut(id).data_mut()[k] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

pub fn check(case: &GradCase, h: f64) -> Result<CheckResult, String> {
    let a = analytic(case)?;
    let n = numeric(case, h)?;
    Ok(CheckResult { name: case.name, rel_err: rel_err(&a, &n), scalars: a.len() })
}

/// Families covered by the suite.
pub const FAMILIES: [&str; 14] = [
    "childsum_step",
    "nary_step",
    "tree_encode_childsum",
    "tree_encode_nary",
    "gcn_layer",
    "bilstm",
    "arc_label_scorer",
    "span_scorer",
    "output_distill",
    "feat_distill",
    "semantic_lm",
    "dep_inject",
    "con_inject",
    "reg",
];

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::uniform(r, c, 1.0, rng)
}

fn rand_dist(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|x| x / s));
    }
    out
}

/// Random dependency tree over `n` tokens.
pub fn random_dep(rng: &mut ChaCha8Rng, n: usize) -> DepTree {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut heads = vec![0; n];
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        heads[order[k]] = parent + 1;
    }
    DepTree::new(heads, vec!["dep".into(); n]).expect("random tree is valid")
}

/// Random binary bracketing with random labels.
pub fn random_bintree(rng: &mut ChaCha8Rng, n: usize, labels: usize) -> BinTree {
    fn walk(rng: &mut ChaCha8Rng, i: usize, j: usize, labels: usize, out: &mut Vec<LabeledSpan>) {
        out.push(LabeledSpan { start: i, end: j, label: rng.gen_range(0..labels) });
        if j - i > 1 {
            let k = rng.gen_range(i + 1..j);
            walk(rng, i, k, labels, out);
            walk(rng, k, j, labels, out);
        }
    }
    let mut spans = Vec::new();
    walk(rng, 0, n, labels, &mut spans);
    BinTree::new(n, spans).expect("random bracketing is valid")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// One random instance of `family`; sizes satisfy `d ≤ 6`, `n ≤ 5`.
pub fn make_case(family: &str, rng: &mut ChaCha8Rng) -> Option<GradCase> {
    let d = rng.gen_range(2..=6);
    let n = rng.gen_range(2..=5);
    let mut store = ParamStore::<f64>::new();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
    let loss: LossFn = match family {
        "childsum_step" => {
            let k = rng.gen_range(0..=3);
            let mut init = Init::new(&mut store, &mut prng);
            let cell = ChildSumCell::new(&mut init, "cs", d, d).ok()?;
            let x = init.store.add("x", rand_tensor(rng, 1, d)).ok()?;
            let kids: Vec<_> = (0..k)
                .map(|q| {
                    let h = init.store.add(format!("h{q}"), rand_tensor(rng, 1, d)).unwrap();
                    let c = init.store.add(format!("c{q}"), rand_tensor(rng, 1, d)).unwrap();
                    (h, c)
                })
                .collect();
            Box::new(move |g, s| {
                let xv = g.param(s, x);
                let states: Vec<CellState> =
                    kids.iter().map(|&(h, c)| CellState { h: g.param(s, h), c: g.param(s, c) }).collect();
                let out = cell.step(g, s, xv, &states).map_err(err)?;
                let both = g.concat_cols(&[out.h, out.c]).map_err(err)?;
                let sq = g.mul(both, both).map_err(err)?;
                Ok(g.sum(sq))
            })
        }
        "nary_step" => {
            let mut init = Init::new(&mut store, &mut prng);
            let cell = NaryCell::new(&mut init, "nary", 2, d, d).ok()?;
            let x = init.store.add("x", rand_tensor(rng, 1, d)).ok()?;
            let present = rng.gen_range(0..=2);
            let kids: Vec<_> = (0..present)
                .map(|q| {
                    let h = init.store.add(format!("h{q}"), rand_tensor(rng, 1, d)).unwrap();
                    let c = init.store.add(format!("c{q}"), rand_tensor(rng, 1, d)).unwrap();
                    (h, c)
                })
                .collect();
            Box::new(move |g, s| {
                let xv = g.param(s, x);
                let states: Vec<Option<CellState>> =
                    kids.iter().map(|&(h, c)| Some(CellState { h: g.param(s, h), c: g.param(s, c) })).collect();
                let out = cell.step(g, s, xv, &states, 0).map_err(err)?;
                let sq = g.mul(out.h, out.c).map_err(err)?;
                Ok(g.sum(sq))
            })
        }
        "tree_encode_childsum" | "tree_encode_nary" => {
            let (topo, up, down, m) = {
                let mut init = Init::new(&mut store, &mut prng);
                if family == "tree_encode_childsum" {
                    let topo = Topology::from_dep(&random_dep(rng, n)).ok()?;
                    let up = TreeCell::ChildSum(ChildSumCell::new(&mut init, "up", d, d).ok()?);
                    let down = TreeCell::ChildSum(ChildSumCell::new(&mut init, "down", d, d).ok()?);
                    (topo, up, down, n)
                } else {
                    let topo = Topology::from_bintree(&random_bintree(rng, n, 2)).ok()?;
                    let up = TreeCell::Nary(NaryCell::new(&mut init, "up", 2, d, d).ok()?);
                    let down = TreeCell::Nary(NaryCell::new(&mut init, "down", 2, d, d).ok()?);
                    (topo, up, down, 2 * n - 1)
                }
            };
            let x = store.add("x", rand_tensor(rng, m, d)).ok()?;
            let w = rand_tensor(rng, m, 2 * d);
            Box::new(move |g, s| {
                let xv = g.param(s, x);
                let h = tree_encode(g, s, &up, &down, &topo, xv, Direction::Both).map_err(err)?;
                let wv = g.constant(&w);
                let p = g.mul(h, wv).map_err(err)?;
                Ok(g.sum(p))
            })
        }
        "gcn_layer" => {
            let mut init = Init::new(&mut store, &mut prng);
            let l1 = GcnLayer::new(&mut init, "l1", d).ok()?;
            let l2 = GcnLayer::new(&mut init, "l2", d).ok()?;
            let topo = Topology::from_dep(&random_dep(rng, n)).ok()?;
            let adj = Adjacency::from_topology(&topo).ok()?;
            let x = store.add("x", rand_tensor(rng, n, d)).ok()?;
            let w = rand_tensor(rng, n, d);
            Box::new(move |g, s| {
                let a = adj.constant(g);
                let xv = g.param(s, x);
                let h = l1.forward(g, s, a, xv).map_err(err)?;
                let h = l2.forward(g, s, a, h).map_err(err)?;
                let wv = g.constant(&w);
                let p = g.mul(h, wv).map_err(err)?;
                Ok(g.sum(p))
            })
        }
        "bilstm" => {
            let mut init = Init::new(&mut store, &mut prng);
            let lstm = BiLstm::new(&mut init, d, d, 2).ok()?;
            let x = store.add("x", rand_tensor(rng, n, d)).ok()?;
            let w = rand_tensor(rng, n, 2 * d);
            Box::new(move |g, s| {
                let xv = g.param(s, x);
                let r = lstm.forward(g, s, xv).map_err(err)?;
                let wv = g.constant(&w);
                let p = g.mul(r.reps, wv).map_err(err)?;
                let f = g.sum(p);
                let t = g.sum(r.forward_top);
                g.add(f, t).map_err(err)
            })
        }
        "arc_label_scorer" | "dep_inject" => {
            let labels = rng.gen_range(2..=4);
            let mut init = Init::new(&mut store, &mut prng);
            let scorer = ArcLabelScorer::new(&mut init, d, d, d, labels).ok()?;
            // non-zero bilinear weights so every path carries gradient
            for name in ["arc/U", "arc/w_head", "arc/label_b"] {
                let id = store.id(name).ok()?;
                let (r, c) = store.get(id).dims2();
                *store.get_mut(id) = rand_tensor(rng, r, c);
            }
            let reps = store.add("reps", rand_tensor(rng, n, d)).ok()?;
            if family == "arc_label_scorer" {
                let w = rand_tensor(rng, n, n + 1);
                Box::new(move |g, s| {
                    let r = g.param(s, reps);
                    let sc = scorer.forward(g, s, r).map_err(err)?;
                    let p = g.log_softmax_rows(sc.arc).map_err(err)?;
                    let wv = g.constant(&w);
                    let m = g.mul(p, wv).map_err(err)?;
                    let a = g.sum(m);
                    let l = sc.all_label_logits(g).map_err(err)?;
                    let l = g.tanh(l);
                    let b = g.sum(l);
                    g.add(a, b).map_err(err)
                })
            } else {
                let k = rng.gen_range(1..=2);
                let targets: Vec<DepTarget> = (0..k)
                    .map(|_| {
                        let arcs = rand_dist(rng, n, n + 1);
                        let all = rand_dist(rng, n * (n + 1), labels);
                        DepTarget::from_distributions(n, arcs, &all, labels)
                    })
                    .collect();
                Box::new(move |g, s| {
                    let r = g.param(s, reps);
                    let sc = scorer.forward(g, s, r).map_err(err)?;
                    let refs: Vec<&DepTarget> = targets.iter().collect();
                    dep_inject_loss(g, &sc, &refs).map_err(err)
                })
            }
        }
        "span_scorer" | "con_inject" => {
            let labels = rng.gen_range(1..=3);
            let mut init = Init::new(&mut store, &mut prng);
            let scorer = SpanScorer::new(&mut init, d, d, labels).ok()?;
            let bias = store.id("span/out/b").ok()?;
            *store.get_mut(bias) = rand_tensor(rng, 1, labels);
            let reps = store.add("reps", rand_tensor(rng, n, d)).ok()?;
            if family == "span_scorer" {
                let row = rng.gen_range(0..crate::structures::num_spans(n));
                Box::new(move |g, s| {
                    let r = g.param(s, reps);
                    let t = scorer.forward(g, s, r).map_err(err)?;
                    let one = g.row(t, row).map_err(err)?;
                    let sq = g.mul(one, one).map_err(err)?;
                    Ok(g.sum(sq))
                })
            } else {
                let k = rng.gen_range(1..=2);
                let refs: Vec<BinTree> = (0..k).map(|_| random_bintree(rng, n, labels)).collect();
                Box::new(move |g, s| {
                    let r = g.param(s, reps);
                    let t = scorer.forward(g, s, r).map_err(err)?;
                    let rr: Vec<&BinTree> = refs.iter().collect();
                    con_inject_loss(g, t, &rr).map_err(err)
                })
            }
        }
        "output_distill" => {
            let classes = rng.gen_range(2..=5);
            let rows = rng.gen_range(1..=n);
            let logits = store.add("logits", rand_tensor(rng, rows, classes)).ok()?;
            let gold: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
            let teachers: Vec<Vec<f64>> = (0..rng.gen_range(1..=4)).map(|_| rand_dist(rng, rows, classes)).collect();
            let alpha = rng.gen_range(0.0..1.0);
            let temp = if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.5..3.0) };
            Box::new(move |g, s| {
                let l = g.param(s, logits);
                let refs: Vec<&[f64]> = teachers.iter().map(Vec::as_slice).collect();
                output_distill_loss(g, l, &gold, &refs, alpha, temp).map_err(err)
            })
        }
        "feat_distill" => {
            let mut init = Init::new(&mut store, &mut prng);
            let proj = Linear::new(&mut init, "fs", d, d).ok()?;
            let reps = store.add("reps", rand_tensor(rng, n, d)).ok()?;
            let teacher = rand_tensor(rng, n, d);
            Box::new(move |g, s| {
                let r = g.param(s, reps);
                let p = proj.forward(g, s, r).map_err(err)?;
                let t = g.constant(&teacher);
                feat_distill(g, t, p).map_err(err)
            })
        }
        "semantic_lm" => {
            let vocab = rng.gen_range(3..=8);
            let mut init = Init::new(&mut store, &mut prng);
            let lm = Linear::new(&mut init, "lm", d, vocab).ok()?;
            let fwd = store.add("fwd", rand_tensor(rng, n, d)).ok()?;
            let bos = store.add("bos", rand_tensor(rng, 1, d)).ok()?;
            let positions = crate::distill::sample_mask(n, 0.4, rng).ok()?;
            let targets: Vec<usize> = positions.iter().map(|_| rng.gen_range(0..vocab)).collect();
            Box::new(move |g, s| {
                let f = g.param(s, fwd);
                let b = g.param(s, bos);
                semantic_lm_loss(g, s, f, b, &lm, &positions, &targets).map_err(err)?.ok_or_else(|| "empty mask".into())
            })
        }
        "reg" => {
            for k in 0..rng.gen_range(1..=3) {
                let (r, c) = (rng.gen_range(1..=d), rng.gen_range(1..=d));
                store.add(format!("theta{k}"), rand_tensor(rng, r, c)).ok()?;
            }
            let zeta = rng.gen_range(0.01..1.0);
            let logits = store.add("logits", rand_tensor(rng, 1, 3)).ok()?;
            let teacher = rand_dist(rng, 1, 3);
            let syn = rand_tensor(rng, 1, d);
            let cfg = DistillConfig { zeta, ..DistillConfig::default() };
            Box::new(move |g, s| {
                let l = g.param(s, logits);
                let out = output_distill_loss(g, l, &[0], &[&teacher], 0.3, 1.0).map_err(err)?;
                let sv = g.constant(&syn);
                let syn_term = g.mul(l, l).map_err(err)?;
                let syn_term = g.sum(syn_term);
                let sem = g.sum(sv);
                let reg = reg_loss(g, s, cfg.zeta).map_err(err)?;
                let parts = LossParts { output: Some(out), syn: Some(syn_term), sem: Some(sem), reg: Some(reg) };
                total_loss(g, parts, &cfg).map_err(err)
            })
        }
        _ => return None,
    };
    Some(GradCase { name: FAMILIES.iter().copied().find(|f| *f == family)?, store, loss })
}

/// Checks `instances` random cases of every family.
pub fn suite(instances: usize, seed: u64, h: f64) -> Vec<Result<CheckResult, String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<GradCase> = FAMILIES
        .iter()
        .flat_map(|f| (0..instances).map(|_| make_case(f, &mut rng).expect("known family")).collect::<Vec<_>>())
        .collect();
    crate::par::map(&cases, |c| check(c, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_passes_once() {
        for r in suite(1, 3, 1e-5) {
            let r = r.unwrap();
            assert!(r.rel_err < 1e-5, "{} rel err {}", r.name, r.rel_err);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::row(&[0.3, -0.7])).unwrap();
        // relu at a kink-free point, then a stop-gradient via constant copy
        let case = GradCase {
            name: "reg",
            store,
            loss: Box::new(move |g, s| {
                let v = g.param(s, x);
                let c = g.constant(&g.to_tensor(v));
                let p = g.mul(v, c).map_err(err)?;
                Ok(g.sum(p))
            }),
        };
        assert!(check(&case, 1e-5).unwrap().rel_err > 0.1);
    }
}
