mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use syndistill::distill::{
    anneal_alpha, combine_syn, combine_syn_value, con_inject_loss, dep_inject_loss, feat_distill, mix_target, tree_score_indices,
    output_distill_loss, reg_loss, semantic_lm_loss, total_loss, total_value, DepTarget, DistillConfig, LossParts,
};
use syndistill::encoders::{ArcLabelScorer, Init, Linear};
use syndistill::structures::{cyk_augmented, hamming, num_spans, SpanScores};
use syndistill::{Graph, ParamStore, Tensor};

#[test]
fn anneal_schedule_points() {
    assert_eq!(anneal_alpha(0, 10).unwrap(), 0.0);
    assert_eq!(anneal_alpha(10, 10).unwrap(), 1.0);
    assert_eq!(anneal_alpha(5, 10).unwrap(), 0.5);
    assert!(anneal_alpha(0, 0).is_err());
}

#[test]
fn output_loss_half_alpha_against_uniform_student() {
    assert_eq!(mix_target(&[0], &[&[0.6, 0.4]], 2, 0.5).unwrap(), vec![0.8, 0.2]);
    let mut g = Graph::<f64>::new();
    let z = g.constant(&Tensor::row(&[0.0, 0.0]));
    let l = output_distill_loss(&mut g, z, &[0], &[&[0.6, 0.4]], 0.5, 1.0).unwrap();
    assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);
    assert!(mix_target(&[0], &[&[0.6, 0.3]], 2, 0.5).is_err());
}

#[test]
fn output_loss_endpoints_ignore_or_use_teachers() {
    let logits = [1.3, -0.2, 0.4];
    let mut g = Graph::<f64>::new();
    let z = g.constant(&Tensor::row(&logits));
    let hard = output_distill_loss(&mut g, z, &[1], &[&[0.7, 0.2, 0.1], &[0.1, 0.1, 0.8]], 1.0, 1.0).unwrap();
    assert!((g.scalar(hard) - common::cross_entropy(&logits, &[0.0, 1.0, 0.0])).abs() < 1e-12);
    let soft = output_distill_loss(&mut g, z, &[1], &[&[0.7, 0.2, 0.1]], 0.0, 1.0).unwrap();
    assert!((g.scalar(soft) - common::cross_entropy(&logits, &[0.7, 0.2, 0.1])).abs() < 1e-12);
}

#[test]
fn feature_loss_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 3.0]).unwrap());
    let same = feat_distill(&mut g, a, a).unwrap();
    assert_eq!(g.scalar(same), 0.0);
    let one = feat_distill(&mut g, a, b).unwrap();
    assert_eq!(g.scalar(one), 1.0);
    let short = g.constant(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    assert!(feat_distill(&mut g, a, short).is_err());
}

#[test]
fn syntax_mix() {
    assert_eq!(combine_syn_value(2.0, 4.0, 0.5), 3.0);
    let mut g = Graph::<f64>::new();
    let d = g.constant(&Tensor::row(&[2.0]));
    let c = g.constant(&Tensor::row(&[4.0]));
    let half = combine_syn(&mut g, Some(d), Some(c), 0.5).unwrap();
    assert_eq!(g.scalar(half), 3.0);
    let dep_only = combine_syn(&mut g, Some(d), Some(c), 1.0).unwrap();
    assert_eq!(g.scalar(dep_only), 2.0);
}

#[test]
fn masked_lm_uniform_predictor() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let out = Linear::new(&mut Init::new(&mut store, &mut rng), "lm", 4, 50).unwrap();
    store.get_mut(out.w).data_mut().fill(0.0);
    let mut g = Graph::new();
    let fwd = g.constant(&Tensor::uniform(5, 4, 1.0, &mut rng));
    let bos = g.constant(&Tensor::uniform(1, 4, 1.0, &mut rng));
    let l = semantic_lm_loss(&mut g, &store, fwd, bos, &out, &[0, 2, 4], &[7, 3, 49]).unwrap().unwrap();
    assert!((g.scalar(l) - 3.0 * 50f64.ln()).abs() < 1e-10);
    assert!(semantic_lm_loss(&mut g, &store, fwd, bos, &out, &[], &[]).unwrap().is_none());
}

#[test]
fn dependency_injection_uniform_student() {
    let labels = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let scorer = ArcLabelScorer::new(&mut Init::new(&mut store, &mut rng), 3, 4, 4, labels).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let reps = g.constant(&Tensor::uniform(2, 3, 1.0, &mut rng));
    let scores = scorer.forward(&mut g, &store, reps).unwrap();
    let target = DepTarget::hard(&[2, 0], &[1, 3], labels);
    let l = dep_inject_loss(&mut g, &scores, &[&target]).unwrap();
    // arc term 2·ln 3 plus a uniform label term 2·ln |L|
    assert!((g.scalar(l) - (2.0 * 3f64.ln() + 2.0 * (labels as f64).ln())).abs() < 1e-10);
}

#[test]
fn dependency_injection_matching_student_hits_entropy_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let scorer = ArcLabelScorer::new(&mut Init::new(&mut store, &mut rng), 3, 4, 4, 2).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.get(id).dims2();
        *store.get_mut(id) = Tensor::uniform(r, c, 1.0, &mut rng);
    }
    let mut g = Graph::new();
    let reps = g.constant(&Tensor::uniform(3, 3, 1.0, &mut rng));
    let scores = scorer.forward(&mut g, &store, reps).unwrap();
    let arc_probs = g.softmax_rows(scores.arc).unwrap();
    let arcs = g.value(arc_probs).to_vec();
    let all_labels = scores.all_label_logits(&mut g).unwrap();
    let label_probs = g.softmax_rows(all_labels).unwrap();
    let target = DepTarget::from_distributions(3, arcs.clone(), g.value(label_probs), 2);
    let l = dep_inject_loss(&mut g, &scores, &[&target]).unwrap();
    let entropy = |p: &[f64]| -p.iter().map(|x| x * x.ln()).sum::<f64>();
    let floor = entropy(&arcs) + entropy(&target.labels);
    assert!((g.scalar(l) - floor).abs() < 1e-9);
}

#[test]
fn constituency_hinge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..=6 {
        let reference = common::random_tree(&mut rng, n, 3);
        let mut g = Graph::<f64>::new();
        let mut table = vec![0.0; num_spans(n) * 3];
        for k in tree_score_indices(&reference, 3) {
            table[k] = 10.0;
        }
        let scores = g.constant(&Tensor::matrix(num_spans(n), 3, table).unwrap());
        let l = con_inject_loss(&mut g, scores, &[&reference]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
    let zero = SpanScores::new(3, 1, vec![0.0; 6]).unwrap();
    for _ in 0..5 {
        let reference = common::random_tree(&mut rng, 3, 1);
        let mut g = Graph::<f64>::new();
        let scores = g.constant(&Tensor::matrix(6, 1, vec![0.0; 6]).unwrap());
        let l = con_inject_loss(&mut g, scores, &[&reference]).unwrap();
        let (pred, _) = cyk_augmented(&zero, &reference).unwrap();
        let (_, oracle) = common::brute_force(&zero, Some(&reference));
        assert_eq!(g.scalar(l), hamming(&pred, &reference).unwrap() as f64);
        assert_eq!(g.scalar(l), oracle);
    }
}

#[test]
fn regulariser_and_total() {
    let mut g = Graph::<f64>::new();
    let mut store = ParamStore::<f64>::new();
    store.add("a", Tensor::zeros(&[2, 3])).unwrap();
    let r = reg_loss(&mut g, &store, 0.5).unwrap();
    assert_eq!(g.scalar(r), 0.0);

    let no_aux = DistillConfig { lambda1: 0.0, lambda2: 0.0, ..DistillConfig::default() };
    let o = g.constant(&Tensor::row(&[1.7]));
    let s = g.constant(&Tensor::row(&[5.0]));
    let parts = LossParts { output: Some(o), syn: Some(s), sem: Some(s), reg: None };
    let t = total_loss(&mut g, parts, &no_aux).unwrap();
    assert_eq!(g.scalar(t), 1.7);
    assert_eq!(total_value(1.7, 5.0, 5.0, 0.0, &no_aux), 1.7);

    let nan = g.constant(&Tensor::row(&[f64::NAN]));
    let parts = LossParts { output: Some(o), syn: Some(nan), sem: None, reg: None };
    assert!(total_loss(&mut g, parts, &DistillConfig::default()).is_err());
}

#[test]
fn dependency_injection_gradient_on_three_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let scorer = ArcLabelScorer::new(&mut Init::new(&mut store, &mut rng), 3, 4, 3, 2).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.get(id).dims2();
        *store.get_mut(id) = Tensor::uniform(r, c, 1.0, &mut rng);
    }
    let reps = Tensor::uniform(3, 3, 1.0, &mut rng);
    let target = DepTarget::hard(&[2, 0, 2], &[0, 1, 1], 2);
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let x = g.constant(&reps);
        let scores = scorer.forward(g, s, x).unwrap();
        dep_inject_loss(g, &scores, &[&target]).unwrap()
    };
    let ad = common::ad_grad(&store, loss);
    let fd = common::fd_grad(&store, loss, 1e-5);
    assert!(common::rel_err(&ad, &fd) < 1e-6);
}
