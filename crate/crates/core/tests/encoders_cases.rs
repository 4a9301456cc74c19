mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use syndistill::encoders::{
    pair_features, tree_encode, Adjacency, ArcLabelScorer, BiLstm, CellState, ChildSumCell, Direction, GcnLayer, Init,
    LstmCell, NaryCell, SpanScorer, TaskHead, Topology, TreeCell,
};
use syndistill::structures::{cyk_max, SpanScores};
use syndistill::{Graph, ParamStore, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn set_all(store: &mut ParamStore<f64>, weight: f64, bias: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let is_bias = store.name(id).rsplit('/').next().unwrap().starts_with('b');
        store.get_mut(id).data_mut().fill(if is_bias { bias } else { weight });
    }
}

#[test]
fn child_sum_scalar_hand_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let cell = ChildSumCell::new(&mut Init::new(&mut store, &mut rng), "cell", 1, 1).unwrap();
    set_all(&mut store, 1.0, 0.0);
    let mut g = Graph::new();
    let x = g.constant(&Tensor::row(&[1.0]));
    let kid = CellState { h: g.constant(&Tensor::row(&[0.5])), c: g.constant(&Tensor::row(&[0.5])) };
    let out = cell.step(&mut g, &store, x, &[kid]).unwrap();
    let gate = sigmoid(1.5);
    let c = gate * 1.5f64.tanh() + gate * 0.5;
    let h = gate * c.tanh();
    assert!((g.value(out.c)[0] - c).abs() < 1e-12);
    assert!((g.value(out.h)[0] - h).abs() < 1e-12);

    // zero params on a leaf give h = 0
    set_all(&mut store, 0.0, 0.0);
    let mut g = Graph::new();
    let x = g.constant(&Tensor::row(&[1.0]));
    let leaf = cell.step(&mut g, &store, x, &[]).unwrap();
    assert_eq!(g.value(leaf.h), &[0.0]);
}

#[test]
fn nary_zero_params_leaf_and_order_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let cell = NaryCell::new(&mut Init::new(&mut store, &mut rng), "cell", 2, 3, 4).unwrap();
    let mut g = Graph::new();
    let x = g.constant(&Tensor::uniform(1, 3, 1.0, &mut rng));
    let a = CellState { h: g.constant(&Tensor::uniform(1, 4, 1.0, &mut rng)), c: g.constant(&Tensor::uniform(1, 4, 1.0, &mut rng)) };
    let b = CellState { h: g.constant(&Tensor::uniform(1, 4, 1.0, &mut rng)), c: g.constant(&Tensor::uniform(1, 4, 1.0, &mut rng)) };
    let ab = cell.step(&mut g, &store, x, &[Some(a), Some(b)], 0).unwrap();
    let ba = cell.step(&mut g, &store, x, &[Some(b), Some(a)], 0).unwrap();
    assert_ne!(g.value(ab.h), g.value(ba.h));
    assert!(cell.step(&mut g, &store, x, &[Some(a), Some(b), Some(a)], 0).is_err());

    set_all(&mut store, 0.0, 0.0);
    let mut g = Graph::new();
    let x = g.constant(&Tensor::uniform(1, 3, 1.0, &mut rng));
    let leaf = cell.step(&mut g, &store, x, &[None, None], 0).unwrap();
    assert_eq!(g.value(leaf.h), &[0.0; 4]);
}

#[test]
fn chain_tree_equals_sequential_lstm() {
    let (d_in, d) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tree_store = ParamStore::<f64>::new();
    let cell = ChildSumCell::new(&mut Init::new(&mut tree_store, &mut rng), "cell", d_in, d).unwrap();
    for id in tree_store.ids().collect::<Vec<_>>() {
        if tree_store.name(id).contains("/b_") {
            tree_store.get_mut(id).data_mut().fill(0.3);
        }
    }
    // the same numbers laid out as one LSTM with gates [i, f, o, u]
    let mut seq_store = ParamStore::<f64>::new();
    let lstm = LstmCell::new(&mut Init::new(&mut seq_store, &mut rng), "lstm", d_in, d).unwrap();
    for (kind, target, rows) in [("W", lstm.w, d_in), ("U", lstm.u, d), ("b", lstm.b, 1)] {
        let mut data = vec![0.0; rows * 4 * d];
        for (q, gate) in ["i", "f", "o", "u"].iter().enumerate() {
            let src = tree_store.get(tree_store.id(&format!("cell/{kind}_{gate}")).unwrap()).data().to_vec();
            for r in 0..rows {
                data[r * 4 * d + q * d..r * 4 * d + (q + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        seq_store.get_mut(target).data_mut().copy_from_slice(&data);
    }
    let n = 6;
    let inputs = Tensor::uniform(n, d_in, 1.0, &mut rng);
    // node k has node k-1 as its only child, so node 0 is read first
    let children: Vec<Vec<usize>> = (0..n).map(|k| if k == 0 { vec![] } else { vec![k - 1] }).collect();
    let topo = Topology::new(children, (0..n).collect()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(&inputs);
    let up = TreeCell::ChildSum(cell);
    let tree = tree_encode(&mut g, &tree_store, &up, &up, &topo, x, Direction::BottomUp).unwrap();
    let both = tree_encode(&mut g, &tree_store, &up, &up, &topo, x, Direction::Both).unwrap();
    assert_eq!(g.shape(both), (n, 2 * d));
    let tree = g.value(tree).to_vec();
    let mut g = Graph::new();
    let x = g.constant(&inputs);
    let seq = lstm.run(&mut g, &seq_store, x, false).unwrap();
    let diff = tree.iter().zip(g.value(seq)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn sibling_permutation_child_sum_invariant_nary_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let (cs, nary) = {
        let mut init = Init::new(&mut store, &mut rng);
        (ChildSumCell::new(&mut init, "cs", 3, 4).unwrap(), NaryCell::new(&mut init, "nary", 2, 3, 4).unwrap())
    };
    let inputs = Tensor::uniform(3, 3, 1.0, &mut rng);
    let run = |cell: TreeCell, kids: Vec<usize>| {
        let topo = Topology::new(vec![kids, vec![], vec![]], vec![1, 2]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(&inputs);
        let h = tree_encode(&mut g, &store, &cell, &cell, &topo, x, Direction::BottomUp).unwrap();
        g.value(h).to_vec()
    };
    assert_eq!(run(TreeCell::ChildSum(cs), vec![1, 2]), run(TreeCell::ChildSum(cs), vec![2, 1]));
    assert_ne!(run(TreeCell::Nary(nary), vec![1, 2]), run(TreeCell::Nary(nary), vec![2, 1]));
}

#[test]
fn gcn_self_loop_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let layer = GcnLayer::new(&mut Init::new(&mut store, &mut rng), "gcn", 3).unwrap();
    let h = [0.4, -0.7, 1.2];
    let mut g = Graph::new();
    let adj = Adjacency::new(1, &[], true).unwrap().constant(&mut g);
    let x = g.constant(&Tensor::row(&h));
    let out = layer.forward(&mut g, &store, adj, x).unwrap();
    let w = store.get(layer.w).data();
    for j in 0..3 {
        let z: f64 = (0..3).map(|k| h[k] * w[k * 3 + j]).sum();
        let expect = (h[j] * sigmoid(z)).max(0.0);
        assert!((g.value(out)[j] - expect).abs() < 1e-12);
    }
    assert!(Adjacency::new(2, &[], false).is_err());

    // path 0-1-2 with zero parameters: g = 0.5 everywhere
    set_all(&mut store, 0.0, 0.0);
    let rows = [[1.0, -2.0, 0.5], [0.5, 0.5, 0.5], [-1.0, 3.0, 2.0]];
    let mut g = Graph::new();
    let adj = Adjacency::new(3, &[(0, 1), (1, 2)], true).unwrap().constant(&mut g);
    let x = g.constant(&Tensor::matrix(3, 3, rows.concat()).unwrap());
    let out = layer.forward(&mut g, &store, adj, x).unwrap();
    let nbrs = [vec![0, 1], vec![0, 1, 2], vec![1, 2]];
    for (v, ns) in nbrs.iter().enumerate() {
        for k in 0..3 {
            let expect = (0.5 * ns.iter().map(|&u| rows[u][k]).sum::<f64>()).max(0.0);
            assert!((g.value(out)[v * 3 + k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gcn_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let layer = GcnLayer::new(&mut Init::new(&mut store, &mut rng), "gcn", 4).unwrap();
    let adj = Adjacency::new(4, &[(0, 1), (1, 2), (1, 3)], true).unwrap();
    let x = Tensor::uniform(4, 4, 1.0, &mut rng);
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let a = adj.constant(g);
        let xv = g.constant(&x);
        let h = layer.forward(g, s, a, xv).unwrap();
        let sq = g.mul(h, h).unwrap();
        g.sum(sq)
    };
    let ad = common::ad_grad(&store, loss);
    let fd = common::fd_grad(&store, loss, 1e-5);
    assert!(common::rel_err(&ad, &fd) < 1e-6);
}

#[test]
fn bilstm_reversal_swaps_directions_under_tied_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let lstm = BiLstm::new(&mut Init::new(&mut store, &mut rng), 3, 5, 1).unwrap();
    let (f, b) = lstm.layers[0];
    for (src, dst) in [(f.w, b.w), (f.u, b.u), (f.b, b.b)] {
        let v = store.get(src).clone();
        *store.get_mut(dst) = v;
    }
    let n = 5;
    let x = Tensor::uniform(n, 3, 1.0, &mut rng);
    let rev: Vec<f64> = (0..n).rev().flat_map(|t| x.data()[t * 3..(t + 1) * 3].to_vec()).collect();
    let run = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let r = lstm.forward(&mut g, &store, v).unwrap();
        (g.shape(r.reps), g.value(r.reps).to_vec())
    };
    let (shape, a) = run(&x);
    let (_, r) = run(&Tensor::matrix(n, 3, rev).unwrap());
    assert_eq!(shape, (n, 10));
    for t in 0..n {
        let (row, mirror) = (&a[t * 10..(t + 1) * 10], &r[(n - 1 - t) * 10..(n - t) * 10]);
        assert_eq!(row[..5], mirror[5..]);
        assert_eq!(row[5..], mirror[..5]);
    }
    // palindromic input: halves mirror within one run
    let pal = Tensor::matrix(3, 3, [x.data()[..3].to_vec(), x.data()[3..6].to_vec(), x.data()[..3].to_vec()].concat()).unwrap();
    let (_, p) = run(&pal);
    for t in 0..3 {
        assert_eq!(p[t * 10..t * 10 + 5], p[(2 - t) * 10 + 5..(3 - t) * 10]);
    }
    // one token: both directions read the same token from a zero state
    let (shape, one) = run(&Tensor::matrix(1, 3, x.data()[..3].to_vec()).unwrap());
    assert_eq!(shape, (1, 10));
    assert_eq!(one[..5], one[5..]);
}

#[test]
fn student_width_with_hidden_350() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let lstm = BiLstm::new(&mut Init::new(&mut store, &mut rng), 16, 350, 3).unwrap();
    let mut g = Graph::new();
    let x = g.constant(&Tensor::<f64>::uniform(4, 16, 1.0, &mut rng).cast());
    let r = lstm.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(r.reps), (4, 700));
    assert_eq!(g.shape(r.forward_top), (4, 350));
}

#[test]
fn pair_and_tag_head_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::<f64>::new();
    let u = g.constant(&Tensor::uniform(1, 6, 1.0, &mut rng));
    let f = pair_features(&mut g, u, u).unwrap();
    assert_eq!(g.shape(f), (1, 30));
    assert!(g.value(f)[18..24].iter().all(|&x| x == 0.0));

    let mut store = ParamStore::<f64>::new();
    let head = TaskHead::tag(&mut Init::new(&mut store, &mut rng), 6, 8, 5).unwrap();
    assert!(head.check_classes(5).is_ok());
    assert!(head.check_classes(4).is_err());
    let reps = g.constant(&Tensor::uniform(7, 6, 1.0, &mut rng));
    let logits = head.tag_forward(&mut g, &store, reps, 2).unwrap();
    assert_eq!(g.shape(logits), (7, 5));
}

fn relu_affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    (0..cols).map(|j| (b[j] + x.iter().enumerate().map(|(k, v)| v * w[k * cols + j]).sum::<f64>()).max(0.0)).collect()
}

#[test]
fn arc_scores_n2_hand_computation() {
    let (r, a) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let scorer = ArcLabelScorer::new(&mut Init::new(&mut store, &mut rng), r, a, 2, 3).unwrap();
    // give every parameter, including the zero-initialised ones, a random value
    for id in store.ids().collect::<Vec<_>>() {
        let (rows, cols) = store.get(id).dims2();
        *store.get_mut(id) = Tensor::uniform(rows, cols, 1.0, &mut rng);
    }
    let reps = Tensor::uniform(2, r, 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(&reps);
    let scores = scorer.forward(&mut g, &store, x).unwrap();
    let probs = g.softmax_rows(scores.arc).unwrap();
    let p = |name: &str| store.get(store.id(&format!("arc/{name}")).unwrap()).data().to_vec();
    let root = p("root");
    let cand: Vec<&[f64]> = vec![&root, &reps.data()[..r], &reps.data()[r..]];
    let heads: Vec<Vec<f64>> = cand.iter().map(|c| relu_affine(c, &p("head/W"), &p("head/b"))).collect();
    let u = p("U");
    let w = p("w_head");
    for i in 0..2 {
        let d = relu_affine(&reps.data()[i * r..(i + 1) * r], &p("dep/W"), &p("dep/b"));
        let s: Vec<f64> = heads
            .iter()
            .map(|h| {
                let bil: f64 = (0..a).flat_map(|x| (0..a).map(move |y| (x, y))).map(|(x, y)| d[x] * u[x * a + y] * h[y]).sum();
                bil + w.iter().zip(h).map(|(p, q)| p * q).sum::<f64>()
            })
            .collect();
        let ls = common::log_softmax(&s);
        for j in 0..3 {
            assert!((g.value(probs)[i * 3 + j] - ls[j].exp()).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_span_scorer_gives_bias_and_tie_break_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let scorer = SpanScorer::new(&mut Init::new(&mut store, &mut rng), 4, 6, 3).unwrap();
    set_all(&mut store, 0.0, 0.0);
    store.get_mut(scorer.mlp.out.b).data_mut().copy_from_slice(&[0.2, 0.7, 0.7]);
    let n = 5;
    let mut g = Graph::new();
    let reps = g.constant(&Tensor::uniform(n, 4, 1.0, &mut rng));
    let table = scorer.forward(&mut g, &store, reps).unwrap();
    assert_eq!(g.value(table).len(), n * (n + 1) / 2 * 3);
    for row in g.value(table).chunks(3) {
        assert_eq!(row, [0.2, 0.7, 0.7]);
    }
    let scores = SpanScores::new(n, 3, g.value(table).to_vec()).unwrap();
    let (tree, _) = cyk_max(&scores).unwrap();
    let (spans, _) = common::brute_force(&scores, None);
    assert_eq!(common::sorted_spans(&tree), spans);
    // lowest split everywhere: right-branching, first of the tied labels
    assert!(tree.spans().iter().all(|s| s.label == 1));
    assert!(tree.splits().iter().all(|&(i, k, _)| k == i + 1));
}
