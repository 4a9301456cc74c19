//! Teacher pre-training, the two-phase distillation schedule, evaluation,
//! checkpoints and run logs.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    self, combine_syn, con_inject_loss, dep_inject_loss, feat_distill, output_distill_loss, reg_loss,
    semantic_lm_loss, DepTarget, DistillConfig, DistillError, InjectMode, TeacherDist, TreeSource,
};
use crate::encoders::{EncoderError, ModelDims};
use crate::models::{Prepared, Student, TaskModel, Target, Teacher, TeacherKind, Vocabs};
use crate::structures::{cyk_max, BinTree, SpanScores};
use crate::syntax_data::MASK_ID;
use crate::tensor::{Adam, Graph, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: String },
    #[error("empty dataset")]
    EmptyData,
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimisation settings shared by teachers and students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total iterations `T` (one iteration = one mini-batch).
    pub iters: usize,
    /// Early-phase length `G1`.
    pub g1: usize,
    /// Syntax turn gap `G2`.
    pub g2: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iters: 10_000, g1: 300, g2: 128, batch: 32, lr: 1e-5, eval_every: 200, patience: 10, seed: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(TrainError::Config("batch, eval_every and patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr={} must be > 0", self.lr)));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.iters, self.g1, self.g2)
    }
}

/// Two-phase iteration plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub total: usize,
    pub g1: usize,
    pub g2: usize,
}

impl Schedule {
    pub fn new(total: usize, g1: usize, g2: usize) -> Result<Self> {
        if !(0 < g2 && g2 <= g1 && g1 <= total) {
            return Err(TrainError::Config(format!("need 0 < G2 <= G1 <= T, got G2={g2} G1={g1} T={total}")));
        }
        Ok(Schedule { total, g1, g2 })
    }

    pub fn early(&self, t: usize) -> bool {
        t <= self.g1
    }

    /// Dependency turn at 1-based iteration `t`; the flag flips after every
    /// iteration with `t mod G2 == 0`.
    pub fn dep_turn(&self, t: usize) -> bool {
        ((t - 1) / self.g2) % 2 == 0
    }
}

/// One optimiser step of the distillation schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Sem,
    Output(TeacherKind),
    Dep(TeacherKind),
    Con(TeacherKind),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: usize,
    pub step: Step,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Step::Sem => write!(f, "t={} sem", self.t),
            Step::Output(k) => write!(f, "t={} output {}", self.t, k.name()),
            Step::Dep(k) => write!(f, "t={} dep {}", self.t, k.name()),
            Step::Con(k) => write!(f, "t={} con {}", self.t, k.name()),
            Step::All => write!(f, "t={} all", self.t),
        }
    }
}

/// `{iteration, split, metric, value}` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, iteration: usize, split: &str, metric: &str, value: f64) {
        self.records.push(LogRecord { iteration, split: split.into(), metric: metric.into(), value });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn values(&self, split: &str, metric: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == split && r.metric == metric).map(|r| r.value).collect()
    }
}

const MAGIC: &[u8; 4] = b"SYD1";
const VERSION: u8 = 1;

/// Serialises every parameter as `(name, shape, f32 payload)` records.
pub fn write_checkpoint<W: Write>(store: &ParamStore<f32>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(store, &mut out).expect("in-memory write");
    out
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(store, BufWriter::new(fs::File::create(path)?))
}

/// Parsed checkpoint records.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let bad = |msg: &str| TrainError::Checkpoint(msg.to_string());
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(bad("missing SYD1 header"));
    }
    if bytes[4] != VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {}", bytes[4])));
    }
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return Err(TrainError::Checkpoint("truncated record".into()));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
    }
    let mut cur = Cursor { bytes, pos: 5 };
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = u32_at(cur.take(4)?);
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(cur.take(4)?));
        }
        let count: usize = shape.iter().product();
        let data = cur.take(4 * count)?.chunks(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from a checkpoint with matching names and shapes.
pub fn load_checkpoint(store: &mut ParamStore<f32>, bytes: &[u8]) -> Result<()> {
    let records = read_checkpoint(bytes)?;
    if records.len() != store.len() {
        return Err(TrainError::Checkpoint(format!("{} records for {} parameters", records.len(), store.len())));
    }
    for (name, t) in records {
        let id = store.id(&name).map_err(|_| TrainError::Checkpoint(format!("unknown parameter {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(TrainError::Checkpoint(format!("shape mismatch for {name}")));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

/// Evaluation summary; percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub token_f1: Option<f64>,
}

impl Metrics {
    /// Model-selection metric: token F1 for tagging, accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.token_f1.unwrap_or(self.accuracy)
    }
}

/// Accuracy and macro-averaged F1 over `classes` labels (classes never
/// predicted nor present are skipped).
pub fn classification_metrics(pred: &[usize], gold: &[usize], classes: usize) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != gold.len() {
        return Err(TrainError::EmptyData);
    }
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    let mut f1s = Vec::new();
    for c in 0..classes {
        let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count() as f64;
        let fp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g != c).count() as f64;
        let fn_ = pred.iter().zip(gold).filter(|&(&p, &g)| p != c && g == c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        f1s.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) });
    }
    let macro_f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    Ok((100.0 * correct as f64 / pred.len() as f64, 100.0 * macro_f1))
}

/// Micro F1 over tokens whose gold or predicted tag is not `outside`.
pub fn token_f1(pred: &[usize], gold: &[usize], outside: Option<usize>) -> f64 {
    let is_in = |t: usize| Some(t) != outside;
    let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == g && is_in(g)).count() as f64;
    let npred = pred.iter().filter(|&&p| is_in(p)).count() as f64;
    let ngold = gold.iter().filter(|&&g| is_in(g)).count() as f64;
    if npred + ngold == 0.0 {
        return 100.0;
    }
    100.0 * 2.0 * tp / (npred + ngold)
}

fn argmax_rows(values: &[f32], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Argmax outputs per example (one entry per output row).
pub fn predict<M: TaskModel + Sync>(model: &M, store: &ParamStore<f32>, data: &[Prepared]) -> Result<Vec<Vec<usize>>> {
    crate::par::map(data, |ex| {
        let mut g = Graph::new();
        let (logits, _) = model.task_forward(&mut g, store, ex, 0.0)?;
        Ok(argmax_rows(g.value(logits), g.shape(logits).1))
    })
    .into_iter()
    .collect()
}

pub fn evaluate<M: TaskModel + Sync>(
    model: &M,
    store: &ParamStore<f32>,
    data: &[Prepared],
    vocabs: &Vocabs,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let preds = predict(model, store, data)?;
    metrics_from(&preds, data, vocabs)
}

pub fn metrics_from(preds: &[Vec<usize>], data: &[Prepared], vocabs: &Vocabs) -> Result<Metrics> {
    let pred: Vec<usize> = preds.iter().flatten().copied().collect();
    let gold: Vec<usize> = data.iter().flat_map(|e| e.target.gold()).collect();
    let (accuracy, macro_f1) = classification_metrics(&pred, &gold, vocabs.num_outputs())?;
    let token = matches!(data[0].target, Target::Tags { .. }).then(|| token_f1(&pred, &gold, vocabs.tags.get("O")));
    Ok(Metrics { accuracy, macro_f1, token_f1: token })
}

/// Whether an example's prediction is fully correct.
pub fn correctness(preds: &[Vec<usize>], data: &[Prepared]) -> Vec<bool> {
    preds.iter().zip(data).map(|(p, e)| *p == e.target.gold()).collect()
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    h
}

/// Mean-over-batch gradient step. `loss_fn` builds one example's loss on a
/// fresh training graph (or `None` to skip it); `extra` adds a batch-level
/// term. Returns the summed per-example loss values.
fn batch_step<F, L>(
    store: &mut ParamStore<F>,
    adam: &mut Adam<F>,
    batch: &[usize],
    seed: u64,
    iteration: usize,
    what: &str,
    loss_fn: L,
    extra: Option<&dyn Fn(&mut Graph<F>, &ParamStore<F>) -> Result<Var>>,
) -> Result<f64>
where
    F: Real,
    L: Fn(usize, &mut Graph<F>, &ParamStore<F>) -> Result<Option<Var>> + Sync,
{
    let scale = 1.0 / batch.len() as f64;
    let frozen = &*store;
    let results = crate::par::map(batch, |&i| -> Result<Option<(f64, crate::tensor::Grads<F>)>> {
        let mut g = Graph::training(mix(seed, &[iteration as u64, i as u64]));
        let Some(loss) = loss_fn(i, &mut g, frozen)? else { return Ok(None) };
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFinite { iteration, what: format!("{what} loss on example {i}") });
        }
        let scaled = g.scale(loss, scale);
        g.backward(scaled)?;
        Ok(Some((value, g.param_grads(frozen))))
    });
    let mut total = 0.0;
    let mut grads = crate::tensor::Grads::empty(store);
    let mut any = false;
    for r in results {
        if let Some((v, gr)) = r? {
            total += v;
            grads.add(&gr);
            any = true;
        }
    }
    if let Some(f) = extra {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        total += g.scalar(loss).as_f64();
        g.backward(loss)?;
        grads.add(&g.param_grads(store));
        any = true;
    }
    if !any {
        return Ok(0.0);
    }
    if !grads.is_finite() {
        return Err(TrainError::NonFinite { iteration, what: format!("{what} gradient") });
    }
    store.accumulate(&grads);
    adam.step(store);
    Ok(total)
}

/// Epoch-wise shuffled mini-batches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batcher { order: (0..n).collect(), pos: n, batch: batch.min(n), rng: ChaCha8Rng::seed_from_u64(seed) };
        b.pos = b.order.len();
        b
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Dev-based early stopping that remembers the best parameters.
struct EarlyStop {
    best: f64,
    best_iter: usize,
    best_store: Option<ParamStore<f32>>,
    bad: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop { best: f64::NEG_INFINITY, best_iter: 0, best_store: None, bad: 0, patience }
    }

    /// Returns `true` when training should stop.
    fn observe(&mut self, score: f64, t: usize, store: &ParamStore<f32>) -> bool {
        if score > self.best {
            self.best = score;
            self.best_iter = t;
            match &mut self.best_store {
                Some(s) => s.copy_values_from(store),
                None => self.best_store = Some(store.clone()),
            }
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }

    fn restore(self, store: &mut ParamStore<f32>) -> usize {
        if let Some(s) = self.best_store {
            store.copy_values_from(&s);
        }
        self.best_iter
    }
}

/// A trained, frozen teacher.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub teacher: Teacher,
    pub store: ParamStore<f32>,
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub bundle: TeacherBundle,
    pub log: RunLog,
    pub best_iter: usize,
    pub dev: Metrics,
}

/// Task loss plus, when `co_train`, the teacher's own structure head fitted
/// to the input parse.
fn teacher_loss<F: Real>(
    t: &Teacher,
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    ex: &Prepared,
    dropout: f64,
    co_train: bool,
) -> Result<Var> {
    let (logits, reps) = t.task_forward(g, store, ex, dropout)?;
    let gold = ex.target.gold();
    let mut loss = output_distill_loss(g, logits, &gold, &[], 1.0, 1.0)?;
    if co_train {
        // structure heads sit on detached reps: the encoder only sees the task loss
        let reps = g.to_tensor(reps);
        let reps = g.constant(&reps);
        if let Some(arc) = &t.arc {
            let scores = arc.forward(g, store, reps)?;
            let target = DepTarget::hard(&ex.sent.heads, &ex.sent.rels, arc.labels);
            let l = dep_inject_loss(g, &scores, &[&target])?;
            loss = g.add(loss, l)?;
        }
        if let Some(span) = &t.span {
            let scores = span.forward(g, store, reps)?;
            let l = con_inject_loss(g, scores, &[&ex.sent.bin])?;
            loss = g.add(loss, l)?;
        }
    }
    Ok(loss)
}

/// Pre-trains one teacher on the end task with dev early stopping.
pub fn train_teacher(
    kind: TeacherKind,
    train: &[Prepared],
    dev: &[Prepared],
    vocabs: &Vocabs,
    dims: &ModelDims,
    cfg: &TrainConfig,
    co_train: bool,
) -> Result<TeacherRun> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let seed = mix(cfg.seed, &[0x7eac, kind as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let teacher = Teacher::new(kind, &mut store, &mut rng, dims, vocabs)?;
    let mut adam = Adam::new(&store, cfg.lr);
    let mut batches = Batcher::new(train.len(), cfg.batch, seed);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut log = RunLog::default();
    for t in 1..=cfg.iters {
        let batch = batches.next();
        let loss = batch_step(
            &mut store,
            &mut adam,
            &batch,
            seed,
            t,
            "teacher",
            |i, g, s| Ok(Some(teacher_loss(&teacher, g, s, &train[i], dims.dropout, co_train)?)),
            None,
        )?;
        log.push(t, "train", "loss", loss / batch.len() as f64);
        if t % cfg.eval_every == 0 || t == cfg.iters {
            let m = evaluate(&teacher, &store, dev, vocabs)?;
            log::info!("{} t={t} dev={:.2}", kind.name(), m.primary());
            log.push(t, "dev", "accuracy", m.primary());
            if stop.observe(m.primary(), t, &store) {
                break;
            }
        }
    }
    let best_iter = stop.restore(&mut store);
    store.freeze();
    let dev_m = evaluate(&teacher, &store, dev, vocabs)?;
    Ok(TeacherRun { bundle: TeacherBundle { teacher, store }, log, best_iter, dev: dev_m })
}

/// Everything the student needs from one frozen teacher on one example.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub kind: TeacherKind,
    /// Class (or per-token tag) distribution, row-major.
    pub probs: Vec<f64>,
    /// Projected token features (`n × proj`).
    pub feats: Tensor<f64>,
    pub dep: Option<DepTarget>,
    pub tree: Option<BinTree>,
}

/// Runs every teacher once over `data` in evaluation mode.
pub fn teacher_outputs(teachers: &[TeacherBundle], data: &[Prepared]) -> Result<Vec<Vec<TeacherOutput>>> {
    crate::par::map(data, |ex| {
        teachers
            .iter()
            .map(|b| {
                let (t, store) = (&b.teacher, &b.store);
                let mut g = Graph::<f32>::new();
                let (logits, reps) = t.task_forward(&mut g, store, ex, 0.0)?;
                let p = g.softmax_rows(logits)?;
                let probs = g.value(p).iter().map(|&x| x as f64).collect();
                let f = t.project(&mut g, store, reps)?;
                let feats = g.to_tensor(f).cast();
                let n = ex.sent.len();
                let dep = match &t.arc {
                    Some(arc) => {
                        let s = arc.forward(&mut g, store, reps)?;
                        let pa = g.softmax_rows(s.arc)?;
                        let arcs: Vec<f64> = g.value(pa).iter().map(|&x| x as f64).collect();
                        let all = s.all_label_logits(&mut g)?;
                        let pl = g.softmax_rows(all)?;
                        let labels: Vec<f64> = g.value(pl).iter().map(|&x| x as f64).collect();
                        Some(DepTarget::from_distributions(n, arcs, &labels, arc.labels))
                    }
                    None => None,
                };
                let tree = match &t.span {
                    Some(span) => {
                        let s = span.forward(&mut g, store, reps)?;
                        let table = SpanScores::new(n, span.labels, g.value(s).iter().map(|&x| x as f64).collect())
                            .map_err(|e| TrainError::Config(e.to_string()))?;
                        Some(cyk_max(&table).map_err(|e| TrainError::Config(e.to_string()))?.0)
                    }
                    None => None,
                };
                Ok(TeacherOutput { kind: t.kind, probs, feats, dep, tree })
            })
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

/// Result of a student run.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub student: Student,
    pub store: ParamStore<f32>,
    pub trace: Vec<TraceEvent>,
    pub log: RunLog,
    pub best_iter: usize,
    pub dev: Metrics,
}

/// Per-example syntax terms against a subset of teachers.
struct SynCtx<'a> {
    cfg: &'a DistillConfig,
    student: &'a Student,
    ex: &'a Prepared,
    outs: &'a [TeacherOutput],
}

impl SynCtx<'_> {
    fn dep<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, reps: Var, only: Option<TeacherKind>) -> Result<Option<Var>> {
        let outs: Vec<&TeacherOutput> =
            self.outs.iter().filter(|o| o.kind.is_dep() && only.is_none_or(|k| k == o.kind)).collect();
        if outs.is_empty() {
            return Ok(None);
        }
        match self.cfg.mode {
            InjectMode::A => self.feat(g, store, reps, &outs),
            InjectMode::B => {
                let scores = self.student.arc.forward(g, store, reps)?;
                let hard;
                let targets: Vec<&DepTarget> = match self.cfg.teacher_dist {
                    TeacherDist::Soft => outs.iter().filter_map(|o| o.dep.as_ref()).collect(),
                    TeacherDist::Hard => {
                        hard = DepTarget::hard(&self.ex.sent.heads, &self.ex.sent.rels, self.student.arc.labels);
                        vec![&hard]
                    }
                };
                if targets.is_empty() {
                    return Ok(None);
                }
                Ok(Some(dep_inject_loss(g, &scores, &targets)?))
            }
        }
    }

    fn con<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, reps: Var, only: Option<TeacherKind>) -> Result<Option<Var>> {
        let outs: Vec<&TeacherOutput> =
            self.outs.iter().filter(|o| !o.kind.is_dep() && only.is_none_or(|k| k == o.kind)).collect();
        if outs.is_empty() {
            return Ok(None);
        }
        match self.cfg.mode {
            InjectMode::A => self.feat(g, store, reps, &outs),
            InjectMode::B => {
                let scores = self.student.span.forward(g, store, reps)?;
                let refs: Vec<&BinTree> = match self.cfg.tree_source {
                    TreeSource::Gold => vec![&self.ex.sent.bin],
                    TreeSource::Teacher => outs.iter().filter_map(|o| o.tree.as_ref()).collect(),
                };
                if refs.is_empty() {
                    return Ok(None);
                }
                Ok(Some(con_inject_loss(g, scores, &refs)?))
            }
        }
    }

    /// Feature regression averaged over `outs`.
    fn feat<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, reps: Var, outs: &[&TeacherOutput]) -> Result<Option<Var>> {
        let proj = self.student.proj.forward(g, store, reps)?;
        let mut acc: Option<Var> = None;
        for o in outs {
            let t = g.constant(&o.feats.cast());
            let l = feat_distill(g, t, proj)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        Ok(acc.map(|a| if outs.len() > 1 { g.scale(a, 1.0 / outs.len() as f64) } else { a }))
    }
}

fn sem_loss<F: Real>(
    student: &Student,
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    ex: &Prepared,
    cfg: &DistillConfig,
    dropout: f64,
    seed: u64,
) -> Result<Option<Var>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = distill::sample_mask(ex.sent.len(), cfg.mask_ratio, &mut rng)?;
    let mut ids = ex.sent.ids.clone();
    let targets: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        ids[p] = MASK_ID;
    }
    let enc = student.encode(g, store, &ids, dropout)?;
    let bos = g.param(store, student.bos);
    Ok(semantic_lm_loss(g, store, enc.forward_top, bos, &student.lm, &positions, &targets)?)
}

/// Distils the teachers into a freshly initialised student following the
/// two-phase schedule. Teachers are only read through their precomputed
/// outputs. Pass `teachers = &[]` only with `cfg.fixed_alpha == Some(1.0)`
/// and zero syntax/semantic weights (plain supervised training).
pub fn distill_student(
    train: &[Prepared],
    dev: &[Prepared],
    vocabs: &Vocabs,
    dims: &ModelDims,
    teachers: &[TeacherBundle],
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<StudentRun> {
    let outs = teacher_outputs(teachers, train)?;
    distill_with_outputs(train, dev, vocabs, dims, &outs, dcfg, tcfg)
}

/// [`distill_student`] with teacher outputs already computed for `train`.
pub fn distill_with_outputs(
    train: &[Prepared],
    dev: &[Prepared],
    vocabs: &Vocabs,
    dims: &ModelDims,
    outs: &[Vec<TeacherOutput>],
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<StudentRun> {
    dcfg.validate()?;
    tcfg.validate()?;
    let sched = tcfg.schedule()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if outs.len() != train.len() {
        return Err(TrainError::Config("teacher outputs do not cover the training set".into()));
    }
    let kinds: Vec<TeacherKind> = outs[0].iter().map(|o| o.kind).collect();
    if kinds.is_empty() && (dcfg.fixed_alpha != Some(1.0) || dcfg.syn_weight() > 0.0) {
        return Err(TrainError::Config("distillation without teachers".into()));
    }
    let seed = mix(tcfg.seed, &[0x57d]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let student = Student::new(&mut store, &mut rng, dims, vocabs)?;
    let mut adam = Adam::new(&store, tcfg.lr);
    let mut batches = Batcher::new(train.len(), tcfg.batch, seed);
    let mut stop = EarlyStop::new(tcfg.patience);
    let mut log = RunLog::default();
    let mut trace = Vec::new();
    let dropout = dims.dropout;
    let reg_scale = dcfg.reg_weight() / train.len() as f64;
    let reg = move |g: &mut Graph<f32>, s: &ParamStore<f32>| -> Result<Var> { Ok(reg_loss(g, s, reg_scale)?) };
    let syn_w = dcfg.syn_weight();
    let sem_w = dcfg.sem_weight();

    for t in 1..=sched.total {
        let batch = batches.next();
        let alpha = dcfg.alpha(t, sched.total)?;
        let (mut l_out, mut l_syn, mut l_sem) = (0.0, 0.0, 0.0);
        let b = batch.len() as f64;
        if sched.early(t) {
            if sem_w > 0.0 {
                trace.push(TraceEvent { t, step: Step::Sem });
                let v = batch_step(&mut store, &mut adam, &batch, seed, t, "sem", |i, g, s| {
                    let l = sem_loss(&student, g, s, &train[i], dcfg, dropout, mix(seed, &[t as u64, i as u64, 1]))?;
                    Ok(l.map(|l| g.scale(l, sem_w)))
                }, None)?;
                l_sem += v / (b * sem_w);
            }
            let dep_turn = sched.dep_turn(t);
            for (k, &kind) in kinds.iter().enumerate() {
                trace.push(TraceEvent { t, step: Step::Output(kind) });
                l_out += batch_step(&mut store, &mut adam, &batch, seed, t, "output", |i, g, s| {
                    let ex = &train[i];
                    let (logits, _) = student.task_forward(g, s, ex, dropout)?;
                    let p = outs[i][k].probs.as_slice();
                    Ok(Some(output_distill_loss(g, logits, &ex.target.gold(), &[p], alpha, dcfg.temperature)?))
                }, None)? / (b * kinds.len() as f64);
                let (step, w) = if dep_turn && kind.is_dep() {
                    (Step::Dep(kind), syn_w * dcfg.eta)
                } else if !dep_turn && !kind.is_dep() {
                    (Step::Con(kind), syn_w * (1.0 - dcfg.eta))
                } else {
                    continue;
                };
                if w == 0.0 {
                    continue;
                }
                trace.push(TraceEvent { t, step });
                let v = batch_step(&mut store, &mut adam, &batch, seed, t, "syntax", |i, g, s| {
                    let ex = &train[i];
                    let ctx = SynCtx { cfg: dcfg, student: &student, ex, outs: &outs[i] };
                    let reps = student.encode(g, s, &ex.sent.ids, dropout)?.reps;
                    let l = if kind.is_dep() { ctx.dep(g, s, reps, Some(kind))? } else { ctx.con(g, s, reps, Some(kind))? };
                    Ok(l.map(|l| g.scale(l, w)))
                }, (reg_scale > 0.0).then_some(&reg as &dyn Fn(&mut Graph<f32>, &ParamStore<f32>) -> Result<Var>))?;
                l_syn += v / (b * w);
            }
        } else {
            trace.push(TraceEvent { t, step: Step::All });
            let parts = std::sync::Mutex::new(Vec::new());
            batch_step(&mut store, &mut adam, &batch, seed, t, "all", |i, g, s| {
                let ex = &train[i];
                let (logits, reps) = student.task_forward(g, s, ex, dropout)?;
                let probs: Vec<&[f64]> = outs[i].iter().map(|o| o.probs.as_slice()).collect();
                let out = output_distill_loss(g, logits, &ex.target.gold(), &probs, alpha, dcfg.temperature)?;
                let mut total = out;
                let (mut syn_v, mut sem_v) = (0.0, 0.0);
                if syn_w > 0.0 {
                    let ctx = SynCtx { cfg: dcfg, student: &student, ex, outs: &outs[i] };
                    let dep = if dcfg.eta > 0.0 { ctx.dep(g, s, reps, None)? } else { None };
                    let con = if dcfg.eta < 1.0 { ctx.con(g, s, reps, None)? } else { None };
                    if let Some(syn) = combine_syn(g, dep, con, dcfg.eta) {
                        syn_v = g.scalar(syn).as_f64();
                        let w = g.scale(syn, syn_w);
                        total = g.add(total, w)?;
                    }
                }
                if sem_w > 0.0 {
                    if let Some(sem) = sem_loss(&student, g, s, ex, dcfg, dropout, mix(seed, &[t as u64, i as u64, 1]))? {
                        sem_v = g.scalar(sem).as_f64();
                        let w = g.scale(sem, sem_w);
                        total = g.add(total, w)?;
                    }
                }
                parts.lock().unwrap().push((i, g.scalar(out).as_f64(), syn_v, sem_v));
                Ok(Some(total))
            }, (reg_scale > 0.0).then_some(&reg as &dyn Fn(&mut Graph<f32>, &ParamStore<f32>) -> Result<Var>))?;
            let mut parts = parts.into_inner().unwrap();
            parts.sort_by_key(|p| p.0);
            for (_, o, sy, se) in parts {
                l_out += o / b;
                l_syn += sy / b;
                l_sem += se / b;
            }
        }
        log.push(t, "train", "loss_output", l_out);
        log.push(t, "train", "loss_syn", l_syn);
        log.push(t, "train", "loss_sem", l_sem);
        if t % tcfg.eval_every == 0 || t == sched.total {
            let m = evaluate(&student, &store, dev, vocabs)?;
            log::info!("student t={t} dev={:.2}", m.primary());
            log.push(t, "dev", "accuracy", m.primary());
            if stop.observe(m.primary(), t, &store) {
                break;
            }
        }
    }
    let best_iter = stop.restore(&mut store);
    let dev_m = evaluate(&student, &store, dev, vocabs)?;
    Ok(StudentRun { student, store, trace, log, best_iter, dev: dev_m })
}

/// Hand-simulated control flow: the expected trace of a full-weight run.
pub fn expected_trace(sched: &Schedule, kinds: &[TeacherKind]) -> Vec<TraceEvent> {
    let mut out = Vec::new();
    for t in 1..=sched.total {
        if t > sched.g1 {
            out.push(TraceEvent { t, step: Step::All });
            continue;
        }
        out.push(TraceEvent { t, step: Step::Sem });
        let dep = sched.dep_turn(t);
        for &k in kinds {
            out.push(TraceEvent { t, step: Step::Output(k) });
            if dep && k.is_dep() {
                out.push(TraceEvent { t, step: Step::Dep(k) });
            } else if !dep && !k.is_dep() {
                out.push(TraceEvent { t, step: Step::Con(k) });
            }
        }
    }
    out
}
