//! Linear probes on frozen student representations and the per-example
//! dependency-versus-constituency dominance analysis.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Init;
use crate::models::{Prepared, Student};
use crate::structures::NULL;
use crate::tensor::{Adam, Graph, ParamStore, Tensor};
use crate::train::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Label of a multi-token constituent from `[r_e − r_s; r_s; r_e]`.
    ConstituentLabeling,
    /// Relation of a head-dependent pair from `[r_head; r_dep]`.
    DependencyLabeling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 30, batch: 64, lr: 1e-2, seed: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent training label.
    pub majority: f64,
    pub train_items: usize,
    pub test_items: usize,
    pub backbone_unchanged: bool,
}

/// Top-layer token representations of the frozen student.
pub fn student_features(student: &Student, store: &ParamStore<f32>, data: &[Prepared]) -> Result<Vec<Tensor<f32>>> {
    crate::par::map(data, |ex| {
        let mut g = Graph::new();
        let r = student.encode(&mut g, store, &ex.sent.ids, 0.0)?;
        Ok(g.to_tensor(r.reps))
    })
    .into_iter()
    .collect()
}

/// Probe inputs and labels for one split.
pub fn probe_items(kind: ProbeKind, feats: &[Tensor<f32>], data: &[Prepared]) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (f, ex) in feats.iter().zip(data) {
        let (_, d) = f.dims2();
        let row = |i: usize| &f.data()[i * d..(i + 1) * d];
        match kind {
            ProbeKind::DependencyLabeling => {
                for (i, &h) in ex.sent.heads.iter().enumerate() {
                    if h == 0 {
                        continue;
                    }
                    let mut x = row(h - 1).to_vec();
                    x.extend_from_slice(row(i));
                    xs.push(x);
                    ys.push(ex.sent.rels[i]);
                }
            }
            ProbeKind::ConstituentLabeling => {
                for s in ex.sent.bin.spans() {
                    if s.end - s.start < 2 || s.label == NULL {
                        continue;
                    }
                    let (a, b) = (row(s.start), row(s.end - 1));
                    let mut x: Vec<f32> = b.iter().zip(a).map(|(e, s)| e - s).collect();
                    x.extend_from_slice(a);
                    x.extend_from_slice(b);
                    xs.push(x);
                    ys.push(s.label);
                }
            }
        }
    }
    (xs, ys)
}

/// Trains a softmax-linear probe and returns `(test accuracy, majority baseline)` in percent.
pub fn train_linear_probe(
    train: (&[Vec<f32>], &[usize]),
    test: (&[Vec<f32>], &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    let (xtr, ytr) = train;
    let (xte, yte) = test;
    if xtr.is_empty() || xte.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let d = xtr[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let (w, b) = {
        let mut init = Init::new(&mut store, &mut rng);
        (init.zeros("probe/W", d, classes)?, init.zeros("probe/b", 1, classes)?)
    };
    let mut adam = Adam::new(&store, cfg.lr);
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    let matrix = |idx: &[usize], xs: &[Vec<f32>]| {
        Tensor::matrix(idx.len(), d, idx.iter().flat_map(|&i| xs[i].iter().copied()).collect()).expect("rows")
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut g = Graph::new();
            let x = g.constant(&matrix(chunk, xtr));
            let wv = g.param(&store, w);
            let bv = g.param(&store, b);
            let logits = g.linear(x, wv, bv)?;
            let mut t = vec![0.0f32; chunk.len() * classes];
            for (r, &i) in chunk.iter().enumerate() {
                t[r * classes + ytr[i]] = 1.0;
            }
            let loss = g.cross_entropy(logits, &Tensor::matrix(chunk.len(), classes, t)?)?;
            let loss = g.scale(loss, 1.0 / chunk.len() as f64);
            g.backward(loss)?;
            store.accumulate(&g.param_grads(&store));
            adam.step(&mut store);
        }
    }
    let all: Vec<usize> = (0..xte.len()).collect();
    let mut g = Graph::new();
    let x = g.constant(&matrix(&all, xte));
    let wv = g.param(&store, w);
    let bv = g.param(&store, b);
    let logits = g.linear(x, wv, bv)?;
    let correct = g
        .value(logits)
        .chunks(classes)
        .zip(yte)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    let mut counts = vec![0usize; classes];
    ytr.iter().for_each(|&y| counts[y] += 1);
    let majority = (0..classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
    let maj_correct = yte.iter().filter(|&&y| y == majority).count();
    Ok((100.0 * correct as f64 / yte.len() as f64, 100.0 * maj_correct as f64 / yte.len() as f64))
}

/// Probes the frozen student's top layer; the backbone is checked bitwise
/// before and after.
pub fn probe_train_eval(
    student: &Student,
    store: &ParamStore<f32>,
    kind: ProbeKind,
    train: &[Prepared],
    test: &[Prepared],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let before = store.fingerprint();
    let ftr = student_features(student, store, train)?;
    let fte = student_features(student, store, test)?;
    let (xtr, ytr) = probe_items(kind, &ftr, train);
    let (xte, yte) = probe_items(kind, &fte, test);
    let (accuracy, majority) = train_linear_probe((&xtr, &ytr), (&xte, &yte), classes, cfg)?;
    Ok(ProbeReport {
        kind,
        accuracy,
        majority,
        train_items: xtr.len(),
        test_items: xte.len(),
        backbone_unchanged: before == store.fingerprint(),
    })
}

/// Dominance of dependency over constituency syntax per example, in `[0, 1]`.
///
/// A drop is a correctness flip (full model right, ablated model wrong).
/// `without_dep` comes from the model trained with the dependency term
/// removed (`η = 0`), `without_con` from `η = 1`. The raw score
/// `drop_dep − drop_con ∈ [−1, 1]` is mapped linearly onto `[0, 1]`.
pub fn syntax_distribution(full: &[bool], without_dep: &[bool], without_con: &[bool]) -> Result<Vec<f64>> {
    if full.len() != without_dep.len() || full.len() != without_con.len() {
        return Err(TrainError::Config("per-example results differ in length".into()));
    }
    Ok(full
        .iter()
        .zip(without_dep.iter().zip(without_con))
        .map(|(&f, (&d, &c))| {
            let drop_dep = f64::from(u8::from(f && !d));
            let drop_con = f64::from(u8::from(f && !c));
            dominance(drop_dep, drop_con)
        })
        .collect())
}

/// `(drop_dep − drop_con + 1) / 2` for drops in `[0, 1]`.
pub fn dominance(drop_dep: f64, drop_con: f64) -> f64 {
    ((drop_dep - drop_con + 1.0) / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[0, 1]`; 1.0 falls in the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<HistBin> {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    for &s in scores {
        let k = ((s * bins as f64) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistBin { lo: k as f64 / bins as f64, hi: (k + 1) as f64 / bins as f64, count })
        .collect()
}

pub fn histogram_csv(hist: &[HistBin]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for b in hist {
        out.push_str(&format!("{:.3},{:.3},{}\n", b.lo, b.hi, b.count));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub examples: usize,
    pub mean: f64,
    pub dependency_leaning: usize,
    pub constituency_leaning: usize,
    pub balanced: usize,
}

pub fn summarize(scores: &[f64]) -> DistributionSummary {
    let n = scores.len();
    DistributionSummary {
        examples: n,
        mean: if n == 0 { 0.0 } else { scores.iter().sum::<f64>() / n as f64 },
        dependency_leaning: scores.iter().filter(|&&s| s > 0.5).count(),
        constituency_leaning: scores.iter().filter(|&&s| s < 0.5).count(),
        balanced: scores.iter().filter(|&&s| s == 0.5).count(),
    }
}
