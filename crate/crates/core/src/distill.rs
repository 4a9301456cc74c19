//! Distillation objectives: annealed output distillation, feature regression,
//! masked language modelling, arc/label injection, the CYK hinge, the weight
//! penalty and their weighted combination.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{ArcScores, Linear};
use crate::structures::{cyk_augmented, span_index, BinTree, SpanScores, StructError};
use crate::tensor::{Graph, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Struct(#[from] StructError),
    #[error("row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("annealing horizon must be positive")]
    ZeroHorizon,
    #[error("empty sentence")]
    EmptySentence,
    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// How syntax reaches the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectMode {
    /// Regression onto projected teacher token features.
    A,
    /// Arc/label distributions and the span hinge.
    B,
}

/// Arc/label targets: teacher head predictions or one-hot input parses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherDist {
    Soft,
    Hard,
}

/// Reference tree for the span hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeSource {
    /// The binarised input parse.
    Gold,
    /// CYK argmax of each constituency teacher's span scorer.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub zeta: f64,
    pub mode: InjectMode,
    pub teacher_dist: TeacherDist,
    pub tree_source: TreeSource,
    pub mask_ratio: f64,
    pub temperature: f64,
    /// `None` anneals α linearly over the run; `Some(a)` pins it.
    pub fixed_alpha: Option<f64>,
    pub no_sem: bool,
    pub no_syn: bool,
    pub no_reg: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            eta: 0.5,
            lambda1: 0.6,
            lambda2: 0.2,
            zeta: 0.2,
            mode: InjectMode::B,
            teacher_dist: TeacherDist::Soft,
            tree_source: TreeSource::Gold,
            mask_ratio: 0.15,
            temperature: 1.0,
            fixed_alpha: None,
            no_sem: false,
            no_syn: false,
            no_reg: false,
        }
    }
}

impl DistillConfig {
    /// Plain supervised training expressed as a distillation config.
    pub fn no_distill() -> Self {
        DistillConfig { lambda1: 0.0, lambda2: 0.0, fixed_alpha: Some(1.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(DistillError::Config(format!("{name}={v} outside [0, 1]")))
            }
        };
        unit("eta", self.eta)?;
        if let Some(a) = self.fixed_alpha {
            unit("alpha", a)?;
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("zeta", self.zeta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DistillError::Config(format!("{name}={v} must be >= 0")));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(DistillError::Config(format!("mask_ratio={} outside (0, 1)", self.mask_ratio)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DistillError::Config(format!("temperature={} must be > 0", self.temperature)));
        }
        Ok(())
    }

    /// Effective weight on the syntax term (0 when ablated).
    pub fn syn_weight(&self) -> f64 {
        if self.no_syn {
            0.0
        } else {
            self.lambda1
        }
    }

    pub fn sem_weight(&self) -> f64 {
        if self.no_sem {
            0.0
        } else {
            self.lambda2
        }
    }

    /// The penalty only accompanies an active syntax term.
    pub fn reg_weight(&self) -> f64 {
        if self.no_reg || self.syn_weight() == 0.0 {
            0.0
        } else {
            self.zeta
        }
    }

    pub fn alpha(&self, t: usize, total: usize) -> Result<f64> {
        match self.fixed_alpha {
            Some(a) => Ok(a),
            None => anneal_alpha(t, total),
        }
    }
}

/// Linear teacher annealing `t / T`.
pub fn anneal_alpha(t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(DistillError::ZeroHorizon);
    }
    Ok(t.min(total) as f64 / total as f64)
}

fn check_rows(probs: &[f64], cols: usize) -> Result<()> {
    for (row, r) in probs.chunks(cols).enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-4 || r.iter().any(|&p| p < 0.0) {
            return Err(DistillError::NotNormalized { row, sum });
        }
    }
    Ok(())
}

/// `α·onehot(gold) + (1−α)·mean(teachers)`, row by row.
pub fn mix_target(gold: &[usize], teachers: &[&[f64]], classes: usize, alpha: f64) -> Result<Vec<f64>> {
    let rows = gold.len();
    for t in teachers {
        if t.len() != rows * classes {
            return Err(DistillError::LengthMismatch { left: t.len(), right: rows * classes });
        }
        check_rows(t, classes)?;
    }
    let mut out = vec![0.0; rows * classes];
    if alpha < 1.0 {
        if teachers.is_empty() {
            return Err(DistillError::Config("alpha < 1 needs at least one teacher".into()));
        }
        let w = (1.0 - alpha) / teachers.len() as f64;
        for t in teachers {
            for (o, &p) in out.iter_mut().zip(t.iter()) {
                *o += w * p;
            }
        }
    }
    for (r, &g) in gold.iter().enumerate() {
        if g >= classes {
            return Err(DistillError::LengthMismatch { left: g, right: classes });
        }
        out[r * classes + g] += alpha;
    }
    Ok(out)
}

/// Cross-entropy of the student's logits against the annealed target,
/// summed over rows (one row per sentence or per token).
pub fn output_distill_loss<F: Real>(
    g: &mut Graph<F>,
    logits: Var,
    gold: &[usize],
    teachers: &[&[f64]],
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    let (r, c) = g.shape(logits);
    if r != gold.len() {
        return Err(DistillError::LengthMismatch { left: r, right: gold.len() });
    }
    let target = mix_target(gold, teachers, c, alpha)?;
    let t = Tensor::matrix(r, c, target.into_iter().map(F::lit).collect())?;
    let z = if temperature == 1.0 { logits } else { g.scale(logits, 1.0 / temperature) };
    Ok(g.cross_entropy(z, &t)?)
}

/// `½ Σ_j ‖teacher_j − student_j‖²` over already projected features.
pub fn feat_distill<F: Real>(g: &mut Graph<F>, teacher: Var, student: Var) -> Result<Var> {
    let (a, b) = (g.shape(teacher), g.shape(student));
    if a != b {
        return Err(DistillError::LengthMismatch { left: a.0, right: b.0 });
    }
    let d = g.sub(student, teacher)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5))
}

/// `η·dep + (1−η)·con`; an endpoint drops the other term entirely.
pub fn combine_syn<F: Real>(g: &mut Graph<F>, dep: Option<Var>, con: Option<Var>, eta: f64) -> Option<Var> {
    let dep = dep.filter(|_| eta > 0.0).map(|v| if eta == 1.0 { v } else { g.scale(v, eta) });
    let con = con.filter(|_| eta < 1.0).map(|v| if eta == 0.0 { v } else { g.scale(v, 1.0 - eta) });
    match (dep, con) {
        (Some(a), Some(b)) => Some(g.add(a, b).expect("scalar losses")),
        (a, b) => a.or(b),
    }
}

pub fn combine_syn_value(dep: f64, con: f64, eta: f64) -> f64 {
    if eta == 1.0 {
        dep
    } else if eta == 0.0 {
        con
    } else {
        eta * dep + (1.0 - eta) * con
    }
}

/// Positions to mask: `max(1, round(ratio·n))` distinct indices, ascending.
pub fn sample_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(DistillError::EmptySentence);
    }
    let m = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut idx = sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Masked-word prediction from the forward state just before each masked
/// position; position 0 reads the learned begin-of-sentence state.
/// `forward_top` must come from the masked input. Returns the summed
/// cross-entropy, or `None` when nothing is masked.
pub fn semantic_lm_loss<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    forward_top: Var,
    bos: Var,
    out: &Linear,
    positions: &[usize],
    targets: &[usize],
) -> Result<Option<Var>> {
    let n = g.shape(forward_top).0;
    if n == 0 {
        return Err(DistillError::EmptySentence);
    }
    if positions.len() != targets.len() {
        return Err(DistillError::LengthMismatch { left: positions.len(), right: targets.len() });
    }
    if positions.is_empty() {
        return Ok(None);
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= n) {
        return Err(DistillError::LengthMismatch { left: p, right: n });
    }
    let states = g.concat_rows(&[bos, forward_top])?;
    let prior = g.gather_rows(states, positions)?;
    let logits = out.forward(g, store, prior).map_err(|e| match e {
        crate::encoders::EncoderError::Tensor(t) => DistillError::Tensor(t),
        other => DistillError::Config(other.to_string()),
    })?;
    let v = g.shape(logits).1;
    let mut t = vec![F::zero(); positions.len() * v];
    for (r, &w) in targets.iter().enumerate() {
        if w >= v {
            return Err(DistillError::LengthMismatch { left: w, right: v });
        }
        t[r * v + w] = F::one();
    }
    let t = Tensor::matrix(positions.len(), v, t)?;
    Ok(Some(g.cross_entropy(logits, &t)?))
}

/// One dependency teacher's view of a sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DepTarget {
    /// `n × (n+1)` head distribution per dependent.
    pub arcs: Vec<f64>,
    /// Highest-probability head per dependent (0 = root).
    pub best_head: Vec<usize>,
    /// `n × |L|` label distribution at `best_head`.
    pub labels: Vec<f64>,
    pub num_labels: usize,
}

impl DepTarget {
    /// One-hot target at the input parse (`heads` 1-based, 0 = root).
    pub fn hard(heads: &[usize], labels: &[usize], num_labels: usize) -> Self {
        let n = heads.len();
        let mut arcs = vec![0.0; n * (n + 1)];
        let mut lab = vec![0.0; n * num_labels];
        for i in 0..n {
            arcs[i * (n + 1) + heads[i]] = 1.0;
            lab[i * num_labels + labels[i]] = 1.0;
        }
        DepTarget { arcs, best_head: heads.to_vec(), labels: lab, num_labels }
    }

    /// Builds from a head distribution and a full `n·(n+1) × |L|` label table.
    pub fn from_distributions(n: usize, arcs: Vec<f64>, all_labels: &[f64], num_labels: usize) -> Self {
        let best_head: Vec<usize> = arcs
            .chunks(n + 1)
            .map(|r| {
                let mut best = 0;
                for (j, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let mut labels = Vec::with_capacity(n * num_labels);
        for (i, &h) in best_head.iter().enumerate() {
            let row = i * (n + 1) + h;
            labels.extend_from_slice(&all_labels[row * num_labels..(row + 1) * num_labels]);
        }
        DepTarget { arcs, best_head, labels, num_labels }
    }

    pub fn len(&self) -> usize {
        self.best_head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.best_head.is_empty()
    }
}

/// Arc and label cross-entropies against the given teachers, averaged.
/// The label term is evaluated at each teacher's best head only.
pub fn dep_inject_loss<F: Real>(g: &mut Graph<F>, student: &ArcScores, teachers: &[&DepTarget]) -> Result<Var> {
    let (n, m) = g.shape(student.arc);
    if teachers.is_empty() {
        return Err(DistillError::Config("no dependency teacher".into()));
    }
    let mut arc_target = vec![0.0; n * m];
    let w = 1.0 / teachers.len() as f64;
    for t in teachers {
        if t.arcs.len() != n * m {
            return Err(DistillError::LengthMismatch { left: t.arcs.len(), right: n * m });
        }
        check_rows(&t.arcs, m)?;
        check_rows(&t.labels, t.num_labels)?;
        for (a, &p) in arc_target.iter_mut().zip(&t.arcs) {
            *a += w * p;
        }
    }
    let arc_t = Tensor::matrix(n, m, arc_target.into_iter().map(F::lit).collect())?;
    let mut loss = g.cross_entropy(student.arc, &arc_t)?;
    for t in teachers {
        let pairs: Vec<(usize, usize)> = t.best_head.iter().enumerate().map(|(i, &h)| (i, h)).collect();
        let logits = student.label_logits(g, &pairs).map_err(|e| DistillError::Config(e.to_string()))?;
        if g.shape(logits).1 != t.num_labels {
            return Err(DistillError::LengthMismatch { left: g.shape(logits).1, right: t.num_labels });
        }
        let lt = Tensor::matrix(n, t.num_labels, t.labels.iter().map(|&p| F::lit(p)).collect())?;
        let ce = g.cross_entropy(logits, &lt)?;
        let ce = g.scale(ce, w);
        loss = g.add(loss, ce)?;
    }
    Ok(loss)
}

/// Flat indices of a tree's spans into a `num_spans(n) × L` score table.
pub fn tree_score_indices(tree: &BinTree, num_labels: usize) -> Vec<usize> {
    tree.spans().iter().map(|s| span_index(tree.n(), s.start, s.end) * num_labels + s.label).collect()
}

/// Structured hinge `max(0, max_t[Scr(t) + Δ(t, T*)] − Scr(T*))` averaged over
/// the reference trees. `scores` is the span scorer output for an `n`-token
/// sentence.
pub fn con_inject_loss<F: Real>(g: &mut Graph<F>, scores: Var, references: &[&BinTree]) -> Result<Var> {
    let (rows, labels) = g.shape(scores);
    if references.is_empty() {
        return Err(DistillError::Config("no reference tree".into()));
    }
    let n = references[0].n();
    if rows != crate::structures::num_spans(n) {
        return Err(DistillError::LengthMismatch { left: rows, right: crate::structures::num_spans(n) });
    }
    let table = SpanScores::new(n, labels, g.value(scores).iter().map(|x| x.as_f64()).collect())?;
    let w = 1.0 / references.len() as f64;
    let mut total: Option<Var> = None;
    for reference in references {
        if reference.n() != n {
            return Err(DistillError::LengthMismatch { left: reference.n(), right: n });
        }
        let (pred, aug) = cyk_augmented(&table, reference)?;
        let margin = aug - reference.score(&table);
        let term = if margin > 0.0 && pred != **reference {
            let cost = crate::structures::hamming(&pred, reference)? as f64;
            let p = g.gather_elems(scores, &tree_score_indices(&pred, labels))?;
            let r = g.gather_elems(scores, &tree_score_indices(reference, labels))?;
            let ps = g.sum(p);
            let rs = g.sum(r);
            let d = g.sub(ps, rs)?;
            g.add_scalar(d, cost)
        } else {
            g.constant(&Tensor::zeros(&[1, 1]))
        };
        let term = if references.len() > 1 { g.scale(term, w) } else { term };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// `(ζ/2)·‖Θ‖²` over every parameter of `store`.
pub fn reg_loss<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, zeta: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for id in store.ids() {
        let p = g.param(store, id);
        let sq = g.mul(p, p)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(&Tensor::zeros(&[1, 1])));
    Ok(g.scale(total, zeta / 2.0))
}

pub fn reg_value<F: Real>(store: &ParamStore<F>, zeta: f64) -> f64 {
    zeta / 2.0 * store.sum_sq().as_f64()
}

/// Loss terms of one example.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub output: Option<Var>,
    pub syn: Option<Var>,
    pub sem: Option<Var>,
    pub reg: Option<Var>,
}

/// `L_output + λ1·L_syn + λ2·L_sem + L_reg`, skipping absent or zero-weight terms.
pub fn total_loss<F: Real>(g: &mut Graph<F>, parts: LossParts, cfg: &DistillConfig) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(o) = parts.output {
        terms.push(o);
    }
    for (v, w) in [(parts.syn, cfg.syn_weight()), (parts.sem, cfg.sem_weight())] {
        if let (Some(v), true) = (v, w > 0.0) {
            terms.push(g.scale(v, w));
        }
    }
    if let (Some(r), true) = (parts.reg, cfg.reg_weight() > 0.0) {
        terms.push(r);
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => g.constant(&Tensor::zeros(&[1, 1])),
    };
    for &t in terms.iter().skip(1) {
        acc = g.add(acc, t)?;
    }
    if !g.scalar(acc).as_f64().is_finite() {
        return Err(DistillError::NonFinite("total"));
    }
    Ok(acc)
}

pub fn total_value(output: f64, syn: f64, sem: f64, reg: f64, cfg: &DistillConfig) -> f64 {
    let r = if cfg.reg_weight() > 0.0 { reg } else { 0.0 };
    output + cfg.syn_weight() * syn + cfg.sem_weight() * sem + r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_schedule() {
        assert_eq!(anneal_alpha(0, 10).unwrap(), 0.0);
        assert_eq!(anneal_alpha(10, 10).unwrap(), 1.0);
        assert_eq!(anneal_alpha(5, 10).unwrap(), 0.5);
        assert!(anneal_alpha(1, 0).is_err());
    }

    #[test]
    fn output_loss_against_uniform_student() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&Tensor::row(&[0.0, 0.0]));
        let t = [0.6, 0.4];
        let l = output_distill_loss(&mut g, logits, &[0], &[&t], 0.5, 1.0).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            output_distill_loss(&mut g, logits, &[0], &[&[0.6, 0.6]], 0.5, 1.0),
            Err(DistillError::NotNormalized { .. })
        ));
    }

    #[test]
    fn feature_loss_hand_value() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let b = g.constant(&Tensor::zeros(&[2, 2]));
        let l = feat_distill(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let c = g.constant(&Tensor::zeros(&[3, 2]));
        assert!(feat_distill(&mut g, a, c).is_err());
    }

    #[test]
    fn combine_endpoints() {
        let mut g = Graph::<f64>::new();
        let d = g.constant(&Tensor::row(&[2.0]));
        let c = g.constant(&Tensor::row(&[4.0]));
        let mid = combine_syn(&mut g, Some(d), Some(c), 0.5).unwrap();
        assert_eq!(g.scalar(mid), 3.0);
        let one = combine_syn(&mut g, Some(d), Some(c), 1.0).unwrap();
        assert_eq!(g.scalar(one), 2.0);
        let zero = combine_syn(&mut g, Some(d), Some(c), 0.0).unwrap();
        assert_eq!(g.scalar(zero), 4.0);
    }

    #[test]
    fn mask_sampling_forces_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(2, 0.15, &mut rng).unwrap().len(), 1);
        assert_eq!(sample_mask(20, 0.15, &mut rng).unwrap().len(), 3);
        assert!(sample_mask(0, 0.15, &mut rng).is_err());
    }

    #[test]
    fn reg_and_total_hand_values() {
        let mut store = ParamStore::<f64>::new();
        store.add("theta", Tensor::row(&[3.0, 4.0])).unwrap();
        let mut g = Graph::new();
        let r = reg_loss(&mut g, &store, 0.2).unwrap();
        assert!((g.scalar(r) - 2.5).abs() < 1e-12);
        assert!((reg_value(&store, 0.2) - 2.5).abs() < 1e-12);
        let cfg = DistillConfig::default();
        assert!((total_value(1.0, 2.0, 3.0, 0.0, &cfg) - 2.8).abs() < 1e-12);
    }

    #[test]
    fn hard_dep_target_rows() {
        let t = DepTarget::hard(&[2, 0], &[1, 0], 3);
        assert_eq!(t.arcs, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.labels, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig { eta: 1.5, ..DistillConfig::default() };
        assert!(bad.validate().is_err());
        let nd = DistillConfig::no_distill();
        assert_eq!(nd.reg_weight(), 0.0);
    }
}
