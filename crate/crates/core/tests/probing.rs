use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use syndistill::cli::RunConfig;
use syndistill::models::{Prepared, Student, Vocabs};
use syndistill::probe::{probe_train_eval, ProbeConfig, ProbeKind, ProbeReport};
use syndistill::syntax_data::{gen_synthetic, SynthConfig, TaskKind};
use syndistill::ParamStore;

struct Data {
    vocabs: Vocabs,
    train: Vec<Prepared>,
    test: Vec<Prepared>,
}

fn data() -> &'static Data {
    static D: OnceLock<Data> = OnceLock::new();
    D.get_or_init(|| {
        let all = gen_synthetic(&SynthConfig { n_examples: 600, seed: 31, ..SynthConfig::default() }).unwrap();
        let (train, test) = all.split_at(400);
        let vocabs = Vocabs::build(TaskKind::Classify, train, &[test]);
        Data { train: Prepared::batch(train, &vocabs).unwrap(), test: Prepared::batch(test, &vocabs).unwrap(), vocabs }
    })
}

fn probe(zero_backbone: bool, seed: u64, kind: ProbeKind) -> ProbeReport {
    let d = data();
    let mut store = ParamStore::<f32>::new();
    let student = Student::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), &RunConfig::desk().dims, &d.vocabs).unwrap();
    if zero_backbone {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
    let classes = match kind {
        ProbeKind::DependencyLabeling => d.vocabs.dep_labels.len(),
        ProbeKind::ConstituentLabeling => d.vocabs.span_labels.len(),
    };
    probe_train_eval(&student, &store, kind, &d.train, &d.test, classes, &ProbeConfig { seed, ..ProbeConfig::default() }).unwrap()
}

#[test]
fn input_independent_features_probe_at_majority() {
    for kind in [ProbeKind::DependencyLabeling, ProbeKind::ConstituentLabeling] {
        let r = probe(true, 0, kind);
        assert_eq!(r.accuracy, r.majority, "{kind:?}");
        assert!(r.backbone_unchanged);
        assert!(r.test_items > 500);
    }
}

#[test]
fn random_backbone_probe_is_not_below_majority() {
    // lexical identity survives random recurrent features, so untrained
    // backbones already score well above the majority label here
    for seed in 0..3 {
        for kind in [ProbeKind::DependencyLabeling, ProbeKind::ConstituentLabeling] {
            let r = probe(false, seed, kind);
            assert!(r.accuracy >= r.majority, "{kind:?} {} < {}", r.accuracy, r.majority);
            assert!(r.backbone_unchanged);
        }
    }
}
