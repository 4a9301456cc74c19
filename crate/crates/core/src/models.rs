//! Model assembly: vocabularies, per-example encoder inputs, the sequential
//! student and the four tree teachers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    Adjacency, ArcLabelScorer, BiLstm, ConstGraph, ConstGraphNode, EncoderError, Gcn, Init, Linear, ModelDims,
    NodeInput, SeqReps, SpanScorer, TaskHead, Topology, TreeLstm,
};
use crate::structures::{binarize, collect_span_labels, BinTree};
use crate::syntax_data::{ConstNode, ConstTree, DepTree, Example, LabelSet, Payload, TaskKind, Vocab};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Every inventory a model needs, fixed before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabs {
    pub task: TaskKind,
    pub words: Vocab,
    pub dep_labels: LabelSet,
    /// Dependency-teacher node labels: relation joined with the token's POS.
    pub dep_nodes: LabelSet,
    /// Binarised span labels, null at 0.
    pub span_labels: LabelSet,
    /// Raw phrase labels for the constituency graph.
    pub node_labels: LabelSet,
    pub tags: LabelSet,
    pub classes: usize,
}

impl Vocabs {
    /// Words come from `train` only; structure and tag inventories cover every
    /// split since parses are inputs, not predictions.
    pub fn build(task: TaskKind, train: &[Example], others: &[&[Example]]) -> Self {
        let all: Vec<&Example> = train.iter().chain(others.iter().flat_map(|s| s.iter())).collect();
        let sentences = |e: &'_ Example| -> Vec<(Vec<String>, DepTree, ConstTree)> {
            let mut v = vec![(e.tokens.clone(), e.dep.clone(), e.con.clone())];
            if let Payload::Pair { partner, .. } = &e.task {
                v.push((partner.tokens.clone(), partner.dep.clone(), partner.con.clone()));
            }
            v
        };
        let train_tokens: Vec<String> =
            train.iter().flat_map(|e| sentences(e).into_iter().flat_map(|s| s.0)).collect();
        let words = Vocab::build(train_tokens.iter().map(String::as_str));
        let mut dep = Vec::new();
        let mut dep_nodes = Vec::new();
        let mut nodes = Vec::new();
        let mut spans = LabelSet::with_null([]);
        let mut tags = Vec::new();
        let mut classes = 0;
        for e in &all {
            for (_, d, c) in sentences(e) {
                dep.extend(d.labels().iter().cloned());
                dep_nodes.extend(dep_node_labels(&d, &c));
                c.spans().iter().for_each(|s| nodes.push(s.label.clone()));
                collect_span_labels(&c, &mut spans);
            }
            match &e.task {
                Payload::Class(c) | Payload::Pair { class: c, .. } => classes = classes.max(c + 1),
                Payload::Tags { tags: t, .. } => tags.extend(t.iter().cloned()),
            }
        }
        let mut span_names: Vec<String> = spans.names()[1..].to_vec();
        span_names.sort();
        Vocabs {
            task,
            words,
            dep_labels: LabelSet::build(dep.iter().map(String::as_str)),
            dep_nodes: LabelSet::build(dep_nodes.iter().map(String::as_str)),
            span_labels: LabelSet::with_null(span_names.iter().map(String::as_str)),
            node_labels: LabelSet::build(nodes.iter().map(String::as_str)),
            tags: LabelSet::build(tags.iter().map(String::as_str)),
            classes: classes.max(2),
        }
    }

    /// Restores lookup tables after deserialisation.
    pub fn reindex(&mut self) {
        self.words.reindex();
        self.dep_labels.reindex();
        self.dep_nodes.reindex();
        self.span_labels.reindex();
        self.node_labels.reindex();
        self.tags.reindex();
    }

    pub fn num_outputs(&self) -> usize {
        match self.task {
            TaskKind::Tag => self.tags.len(),
            _ => self.classes,
        }
    }
}

/// Preterminal label of each token, if its parent is unary.
pub fn pos_tags(con: &ConstTree) -> Vec<Option<String>> {
    fn walk(node: &ConstNode, out: &mut [Option<String>]) {
        if let ConstNode::Node { label, children } = node {
            if let [ConstNode::Leaf(i)] = children.as_slice() {
                out[*i] = Some(label.clone());
            }
            children.iter().for_each(|c| walk(c, out));
        }
    }
    let mut out = vec![None; con.len()];
    walk(con.root(), &mut out);
    out
}

fn dep_node_labels(dep: &DepTree, con: &ConstTree) -> Vec<String> {
    dep.labels()
        .iter()
        .zip(pos_tags(con))
        .map(|(rel, pos)| format!("{rel}/{}", pos.as_deref().unwrap_or("-")))
        .collect()
}

/// Precomputed encoder inputs of one sentence.
#[derive(Debug, Clone)]
pub struct SentData {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// 1-based heads, 0 = root.
    pub heads: Vec<usize>,
    pub rels: Vec<usize>,
    pub dep_topo: Topology,
    pub dep_adj: Adjacency,
    /// Word plus relation/POS label per token.
    pub dep_inputs: Vec<NodeInput>,
    pub bin: BinTree,
    pub bin_topo: Topology,
    pub bin_inputs: Vec<NodeInput>,
    pub con: ConstTree,
    pub con_graph: ConstGraph,
    pub con_adj: Adjacency,
    pub con_inputs: Vec<NodeInput>,
}

impl SentData {
    pub fn new(tokens: &[String], dep: &DepTree, con: &ConstTree, v: &Vocabs) -> Result<Self> {
        let ids = v.words.encode(tokens);
        let rels: Vec<usize> = dep.labels().iter().map(|l| v.dep_labels.get(l).unwrap_or(0)).collect();
        let dep_inputs = ids
            .iter()
            .zip(dep_node_labels(dep, con))
            .map(|(&w, l)| NodeInput::WordLabel(w, v.dep_nodes.get(&l).unwrap_or(0)))
            .collect();
        let dep_topo = Topology::from_dep(dep)?;
        let dep_adj = Adjacency::from_topology(&dep_topo)?;
        let bin = binarize(con, &v.span_labels).map_err(|e| EncoderError::Config(e.to_string()))?;
        let bin_topo = Topology::from_bintree(&bin)?;
        let bin_inputs = bin
            .spans()
            .iter()
            .map(|s| {
                if s.end - s.start == 1 {
                    NodeInput::WordLabel(ids[s.start], s.label)
                } else {
                    NodeInput::Label(s.label)
                }
            })
            .collect();
        let con_graph = ConstGraph::new(con, |l| v.node_labels.get(l).unwrap_or(0))?;
        let con_adj = Adjacency::from_topology(&con_graph.topo)?;
        let con_inputs = con_graph
            .nodes
            .iter()
            .map(|n| match *n {
                ConstGraphNode::Phrase(l) => NodeInput::Label(l),
                ConstGraphNode::Token(i) => NodeInput::Word(ids[i]),
            })
            .collect();
        Ok(SentData {
            tokens: tokens.to_vec(),
            ids,
            heads: dep.heads().to_vec(),
            rels,
            dep_topo,
            dep_adj,
            dep_inputs,
            bin,
            bin_topo,
            bin_inputs,
            con: con.clone(),
            con_graph,
            con_adj,
            con_inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Tags { tags: Vec<usize>, predicate: usize },
}

impl Target {
    /// Gold index per output row.
    pub fn gold(&self) -> Vec<usize> {
        match self {
            Target::Class(c) => vec![*c],
            Target::Tags { tags, .. } => tags.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub sent: SentData,
    pub partner: Option<SentData>,
    pub target: Target,
}

impl Prepared {
    pub fn new(ex: &Example, v: &Vocabs) -> Result<Self> {
        let sent = SentData::new(&ex.tokens, &ex.dep, &ex.con, v)?;
        let (partner, target) = match &ex.task {
            Payload::Class(c) => (None, Target::Class(*c)),
            Payload::Pair { partner, class } => {
                (Some(SentData::new(&partner.tokens, &partner.dep, &partner.con, v)?), Target::Class(*class))
            }
            Payload::Tags { tags, predicate } => {
                let tags = tags.iter().map(|t| v.tags.get(t).unwrap_or(0)).collect();
                (None, Target::Tags { tags, predicate: *predicate })
            }
        };
        let expected = match v.task {
            TaskKind::Classify => matches!(ex.task, Payload::Class(_)),
            TaskKind::Pair => matches!(ex.task, Payload::Pair { .. }),
            TaskKind::Tag => matches!(ex.task, Payload::Tags { .. }),
        };
        if !expected {
            return Err(EncoderError::Config(format!("example payload does not match task {:?}", v.task)));
        }
        if let Target::Class(c) = target {
            if c >= v.classes {
                return Err(EncoderError::ClassCount { expected: v.classes, got: c + 1 });
            }
        }
        Ok(Prepared { sent, partner, target })
    }

    pub fn batch(examples: &[Example], v: &Vocabs) -> Result<Vec<Prepared>> {
        crate::par::map(examples, |e| Prepared::new(e, v)).into_iter().collect()
    }
}

fn task_head<F: Real, R: Rng>(init: &mut Init<'_, F, R>, v: &Vocabs, rep: usize, hidden: usize) -> Result<TaskHead> {
    match v.task {
        TaskKind::Classify => TaskHead::classify(init, rep, hidden, v.classes),
        TaskKind::Pair => TaskHead::pair(init, rep, hidden, v.classes),
        TaskKind::Tag => TaskHead::tag(init, rep, hidden, v.tags.len()),
    }
}

fn head_logits<F: Real>(
    head: &TaskHead,
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    ex: &Prepared,
    reps: Var,
    partner: Option<Var>,
) -> Result<Var> {
    match (&ex.target, partner) {
        (Target::Tags { predicate, .. }, _) => head.tag_forward(g, store, reps, *predicate),
        (Target::Class(_), Some(p)) => head.pair_forward(g, store, reps, p),
        (Target::Class(_), None) => head.classify_forward(g, store, reps),
    }
}

/// Anything with a task head over an example.
pub trait TaskModel {
    /// Returns the task logits and the main sentence's token representations.
    fn task_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ex: &Prepared,
        dropout: f64,
    ) -> Result<(Var, Var)>;
}

/// Sequential student: embeddings, stacked BiLSTM and all heads it is
/// trained through.
#[derive(Debug, Clone)]
pub struct Student {
    pub emb: ParamId,
    pub lstm: BiLstm,
    pub head: TaskHead,
    pub arc: ArcLabelScorer,
    pub span: SpanScorer,
    /// Masked-word predictor over forward states.
    pub lm: Linear,
    pub bos: ParamId,
    /// Feature projection into the shared regression space.
    pub proj: Linear,
    pub rep_dim: usize,
}

impl Student {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, d: &ModelDims, v: &Vocabs) -> Result<Self> {
        let mut init = Init::new(store, rng);
        init.scoped("student", |i| {
            let rep = 2 * d.student_hidden;
            Ok(Student {
                emb: i.embedding("emb", v.words.len(), d.emb)?,
                lstm: i.scoped("bilstm", |i| BiLstm::new(i, d.emb, d.student_hidden, d.student_layers))?,
                head: task_head(i, v, rep, d.head_hidden)?,
                arc: ArcLabelScorer::new(i, rep, d.arc, d.label, v.dep_labels.len())?,
                span: SpanScorer::new(i, rep, d.span_hidden, v.span_labels.len())?,
                lm: Linear::new(i, "lm", d.student_hidden, v.words.len())?,
                bos: i.embedding("bos", 1, d.student_hidden)?,
                proj: Linear::new(i, "proj", rep, d.proj)?,
                rep_dim: rep,
            })
        })
    }

    /// Reads token ids only.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, ids: &[usize], dropout: f64) -> Result<SeqReps> {
        let table = g.param(store, self.emb);
        let x = g.gather_rows(table, ids)?;
        let x = g.dropout(x, dropout);
        self.lstm.forward(g, store, x)
    }
}

impl TaskModel for Student {
    fn task_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ex: &Prepared,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let reps = self.encode(g, store, &ex.sent.ids, dropout)?.reps;
        let partner = match &ex.partner {
            Some(p) => Some(self.encode(g, store, &p.ids, dropout)?.reps),
            None => None,
        };
        Ok((head_logits(&self.head, g, store, ex, reps, partner)?, reps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    TreeLstmDep,
    GcnDep,
    TreeLstmCon,
    GcnCon,
}

impl TeacherKind {
    /// Fixed visiting order.
    pub const ALL: [TeacherKind; 4] =
        [TeacherKind::TreeLstmDep, TeacherKind::GcnDep, TeacherKind::TreeLstmCon, TeacherKind::GcnCon];

    pub fn is_dep(self) -> bool {
        matches!(self, TeacherKind::TreeLstmDep | TeacherKind::GcnDep)
    }

    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::TreeLstmDep => "treelstm-dep",
            TeacherKind::GcnDep => "gcn-dep",
            TeacherKind::TreeLstmCon => "treelstm-con",
            TeacherKind::GcnCon => "gcn-con",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone)]
pub enum TeacherEncoder {
    Tree(TreeLstm),
    Gcn(Gcn),
}

/// Tree-encoder teacher with a task head and a structure head of its own type.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub kind: TeacherKind,
    pub emb: ParamId,
    pub label_emb: Option<ParamId>,
    pub enc: TeacherEncoder,
    pub head: TaskHead,
    pub arc: Option<ArcLabelScorer>,
    pub span: Option<SpanScorer>,
    /// Fixed random map into the feature-regression space; never trained.
    pub proj: ParamId,
    pub rep_dim: usize,
}

impl Teacher {
    pub fn new<F: Real, R: Rng>(
        kind: TeacherKind,
        store: &mut ParamStore<F>,
        rng: &mut R,
        d: &ModelDims,
        v: &Vocabs,
    ) -> Result<Self> {
        let mut init = Init::new(store, rng);
        init.scoped(kind.name(), |i| {
            let emb = i.embedding("emb", v.words.len(), d.emb)?;
            let label_emb = match kind {
                TeacherKind::TreeLstmDep | TeacherKind::GcnDep => {
                    Some(i.embedding("label_emb", v.dep_nodes.len(), d.emb)?)
                }
                TeacherKind::TreeLstmCon => Some(i.embedding("label_emb", v.span_labels.len(), d.emb)?),
                TeacherKind::GcnCon => Some(i.embedding("label_emb", v.node_labels.len(), d.emb)?),
            };
            let (enc, rep) = match kind {
                TeacherKind::TreeLstmDep => (
                    TeacherEncoder::Tree(TreeLstm::new(i, None, d.emb, d.teacher_hidden, d.teacher_layers)?),
                    2 * d.teacher_hidden,
                ),
                TeacherKind::TreeLstmCon => (
                    TeacherEncoder::Tree(TreeLstm::new(i, Some(2), d.emb, d.teacher_hidden, d.teacher_layers)?),
                    2 * d.teacher_hidden,
                ),
                TeacherKind::GcnDep | TeacherKind::GcnCon => (
                    TeacherEncoder::Gcn(Gcn::new(i, d.emb, 2 * d.teacher_hidden, d.teacher_layers)?),
                    2 * d.teacher_hidden,
                ),
            };
            let head = task_head(i, v, rep, d.head_hidden)?;
            let (arc, span) = if kind.is_dep() {
                (Some(ArcLabelScorer::new(i, rep, d.arc, d.label, v.dep_labels.len())?), None)
            } else {
                (None, Some(SpanScorer::new(i, rep, d.span_hidden, v.span_labels.len())?))
            };
            let proj = i.matrix("proj", rep, d.proj)?;
            Ok(Teacher { kind, emb, label_emb, enc, head, arc, span, proj, rep_dim: rep })
        })
    }

    /// Token rows (`n × rep_dim`) of a sentence.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, s: &SentData, dropout: f64) -> Result<Var> {
        let (topo, inputs) = match self.kind {
            TeacherKind::TreeLstmDep | TeacherKind::GcnDep => {
                (&s.dep_topo, s.dep_inputs.clone())
            }
            TeacherKind::TreeLstmCon => (&s.bin_topo, s.bin_inputs.clone()),
            TeacherKind::GcnCon => (&s.con_graph.topo, s.con_inputs.clone()),
        };
        let x = crate::encoders::node_inputs(g, store, self.emb, self.label_emb, &inputs, dropout)?;
        let h = match (&self.enc, self.kind) {
            (TeacherEncoder::Tree(t), _) => t.forward(g, store, topo, x)?,
            (TeacherEncoder::Gcn(n), TeacherKind::GcnDep) => n.forward(g, store, &s.dep_adj, x)?,
            (TeacherEncoder::Gcn(n), _) => n.forward(g, store, &s.con_adj, x)?,
        };
        if topo.terminals.iter().enumerate().all(|(i, &t)| i == t) && topo.len() == s.len() {
            Ok(h)
        } else {
            Ok(g.gather_rows(h, &topo.terminals)?)
        }
    }

    pub fn project<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, reps: Var) -> Result<Var> {
        let w = g.param(store, self.proj);
        Ok(g.matmul(reps, w)?)
    }
}

impl TaskModel for Teacher {
    fn task_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ex: &Prepared,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let reps = self.encode(g, store, &ex.sent, dropout)?;
        let partner = match &ex.partner {
            Some(p) => Some(self.encode(g, store, p, dropout)?),
            None => None,
        };
        Ok((head_logits(&self.head, g, store, ex, reps, partner)?, reps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax_data::{gen_synthetic, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            emb: 6,
            student_hidden: 5,
            student_layers: 2,
            teacher_hidden: 4,
            teacher_layers: 2,
            proj: 3,
            arc: 4,
            label: 3,
            span_hidden: 4,
            head_hidden: 4,
            dropout: 0.0,
        }
    }

    #[test]
    fn every_model_returns_one_row_per_token() {
        let data = gen_synthetic(&SynthConfig { n_examples: 6, ..SynthConfig::default() }).unwrap();
        let v = Vocabs::build(TaskKind::Classify, &data, &[]);
        let prepared = Prepared::batch(&data, &v).unwrap();
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let student = Student::new(&mut store, &mut rng, &d, &v).unwrap();
        let teachers: Vec<Teacher> =
            TeacherKind::ALL.iter().map(|&k| Teacher::new(k, &mut store, &mut rng, &d, &v).unwrap()).collect();
        for ex in &prepared {
            let mut g = Graph::new();
            let (logits, reps) = student.task_forward(&mut g, &store, ex, 0.0).unwrap();
            assert_eq!(g.shape(logits), (1, 2));
            assert_eq!(g.shape(reps), (ex.sent.len(), 10));
            for t in &teachers {
                let (logits, reps) = t.task_forward(&mut g, &store, ex, 0.0).unwrap();
                assert_eq!(g.shape(logits), (1, 2));
                assert_eq!(g.shape(reps), (ex.sent.len(), 8), "{:?}", t.kind);
            }
        }
    }
}
