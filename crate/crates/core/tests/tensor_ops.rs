mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use syndistill::{Adam, Graph, ParamStore, Tensor};

#[test]
fn scalar_nonlinearities() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::row(&[0.0, -3.0, 2.5]));
    let s = g.sigmoid(x);
    let r = g.relu(x);
    assert_eq!(g.value(s)[0], 0.5);
    assert_eq!(&g.value(r)[1..], &[0.0, 2.5]);
}

#[test]
fn linear_and_square_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::row(&[0.3, -1.0, 7.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::row(&[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn tanh_sum_matches_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::row(&[0.1, 0.2])).unwrap();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let x = g.param(s, id);
        let t = g.tanh(x);
        g.sum(t)
    };
    let ad = common::ad_grad(&store, loss);
    let fd = common::fd_grad(&store, loss, 1e-4);
    assert!(common::rel_err(&ad, &fd) < 1e-6);
    for (a, x) in ad.iter().zip([0.1f64, 0.2]) {
        assert!((a - (1.0 - x.tanh().powi(2))).abs() < 1e-12);
    }
}

fn five_op_store<F: syndistill::Real>(seed: u64) -> ParamStore<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<F>::new();
    store.add("a", Tensor::<f64>::uniform(2, 3, 1.0, &mut rng).cast()).unwrap();
    store.add("b", Tensor::<f64>::uniform(3, 2, 1.0, &mut rng).cast()).unwrap();
    store.add("c", Tensor::<f64>::uniform(2, 2, 1.0, &mut rng).cast()).unwrap();
    store
}

// matmul, add, sigmoid, mul, log_softmax then a weighted sum
fn five_op_loss<F: syndistill::Real>(g: &mut Graph<F>, s: &ParamStore<F>) -> syndistill::Var {
    let a = g.param(s, s.id("a").unwrap());
    let b = g.param(s, s.id("b").unwrap());
    let c = g.param(s, s.id("c").unwrap());
    let ab = g.matmul(a, b).unwrap();
    let z = g.add(ab, c).unwrap();
    let sg = g.sigmoid(z);
    let m = g.mul(sg, z).unwrap();
    let ls = g.log_softmax_rows(m).unwrap();
    let picked = g.gather_elems(ls, &[1, 2]).unwrap();
    let total = g.sum(picked);
    g.scale(total, -1.0)
}

#[test]
fn random_graph_gradients_f64_and_f32() {
    for seed in 0..5 {
        let store = five_op_store::<f64>(seed);
        let ad = common::ad_grad(&store, five_op_loss);
        let fd = common::fd_grad(&store, five_op_loss, 1e-5);
        assert!(common::rel_err(&ad, &fd) < 1e-6, "seed {seed}");

        // f32 tape against the f64 finite-difference oracle
        let s32 = five_op_store::<f32>(seed);
        let mut g = Graph::<f32>::new();
        let v = five_op_loss(&mut g, &s32);
        g.backward(v).unwrap();
        let grads = g.param_grads(&s32);
        let ad32: Vec<f64> = s32.ids().flat_map(|id| grads.get(id).unwrap().iter().map(|&x| x as f64).collect::<Vec<_>>()).collect();
        assert!(common::rel_err(&ad32, &fd) < 1e-3, "seed {seed}");
    }
}

#[test]
fn shape_errors_and_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = g.constant(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("2×3") || msg.contains("[2, 3]") || msg.contains("2x3"), "{msg}");
    assert!(g.backward(a).is_err());
    // an empty softmax axis cannot even be built
    assert!(Tensor::<f64>::matrix(2, 0, vec![]).is_err());
}

fn adam_after_one_step(grad: f64) -> (f64, u64) {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::row(&[1.0])).unwrap();
    let mut adam = Adam::new(&store, 0.1);
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let loss = g.scale(p, grad);
    g.backward(loss).unwrap();
    store.accumulate(&g.param_grads(&store));
    adam.step(&mut store);
    (store.get(id).data()[0], adam.skipped())
}

#[test]
fn adam_first_step_and_noop() {
    let (p, _) = adam_after_one_step(1.0);
    assert!((p - 0.9).abs() < 1e-6);
    let (p, _) = adam_after_one_step(0.0);
    assert_eq!(p, 1.0);
    let (p, skipped) = adam_after_one_step(f64::NAN);
    assert_eq!((p, skipped), (1.0, 1));
}

#[test]
fn dropout_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::<f64>::uniform(4, 8, 1.0, &mut rng);
    let run = |seed| {
        let mut g = Graph::training(seed);
        let x = g.constant(&t);
        let d = g.dropout(x, 0.5);
        g.value(d).to_vec()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}
