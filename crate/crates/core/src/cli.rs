//! Command-line surface: `gen-data | train-teacher | distill | eval | probe | induce | gradcheck`.
//!
//! Effective settings are resolved as defaults, then the JSON `--config`
//! file, then flags; every run writes them to `config.resolved.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{DistillConfig, InjectMode};
use crate::encoders::ModelDims;
use crate::gradcheck;
use crate::models::{Prepared, Student, TaskModel, Teacher, TeacherKind, Vocabs};
use crate::probe::{self, ProbeConfig, ProbeKind};
use crate::structures::{cyk_max, unbinarize, SpanScores};
use crate::syntax_data::{gen_synthetic, load_jsonl, save_jsonl, Example, SynthConfig, TaskKind};
use crate::tensor::{Graph, ParamStore};
use crate::train::{self, TeacherBundle, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("data: {0}")]
    Data(#[from] crate::syntax_data::DataError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("gradcheck: {0}")]
    GradCheck(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Train(_) => "train",
            CliError::GradCheck(_) => "gradcheck",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Data locations and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub max_len: usize,
    pub grammar_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "data/train.jsonl".into(),
            dev: "data/dev.jsonl".into(),
            test: "data/test.jsonl".into(),
            n_train: 1000,
            n_dev: 200,
            n_test: 200,
            max_len: 12,
            grammar_size: 20,
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub dims: ModelDims,
    pub distill: DistillConfig,
    /// Student schedule.
    pub training: TrainConfig,
    /// Teacher pre-training schedule (`g1`/`g2` unused).
    pub teacher_training: TrainConfig,
    /// Co-train teacher structure heads against the input parses.
    pub teacher_heads: bool,
    /// Directory with trained teachers for `distill`.
    pub teachers: PathBuf,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Classify,
            seed: 1,
            out: "runs/default".into(),
            data: DataConfig::default(),
            dims: ModelDims::default(),
            distill: DistillConfig::default(),
            training: TrainConfig::default(),
            teacher_training: TrainConfig::default(),
            teacher_heads: true,
            teachers: "runs/teachers".into(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small dimensions and a short schedule that finish on one CPU core in minutes.
    pub fn desk() -> Self {
        let dims = ModelDims {
            emb: 32,
            student_hidden: 32,
            student_layers: 1,
            teacher_hidden: 16,
            teacher_layers: 2,
            proj: 32,
            arc: 32,
            label: 16,
            span_hidden: 32,
            head_hidden: 32,
            dropout: 0.2,
        };
        let training =
            TrainConfig { iters: 600, g1: 30, g2: 8, batch: 32, lr: 1e-2, eval_every: 25, patience: 8, seed: 1 };
        let teacher_training = TrainConfig { iters: 800, patience: 20, ..training.clone() };
        RunConfig { dims, training, teacher_training, ..RunConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.distill.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.training.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.teacher_training.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(4..=20).contains(&self.data.max_len) {
            return Err(CliError::Config(format!("data.max_len={} outside [4, 20]", self.data.max_len)));
        }
        if self.data.grammar_size == 0 {
            return Err(CliError::Config("data.grammar_size must be positive".into()));
        }
        if self.probe.epochs == 0 || self.probe.batch == 0 || !(self.probe.lr > 0.0) {
            return Err(CliError::Config("probe epochs, batch and lr must be positive".into()));
        }
        Ok(())
    }

    /// Overlays a JSON config file onto `self`; keys absent from the file keep
    /// their current values, unknown keys are rejected.
    pub fn overlay(&self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let patch: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(self).expect("config serialises");
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("config.resolved.json");
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    /// Full-scale defaults (3-layer, hidden 350 student; 10k iterations).
    Full,
    /// Small dimensions and budgets that train in minutes on one core.
    Desk,
}

#[derive(Debug, Parser)]
#[command(name = "syndistill", about = "Distil tree-encoder teachers into a sequential student")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Base settings before `--config` and flags are applied.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// JSON run configuration, overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    /// Structure-injection mode: A (features) or B (arcs and spans).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<InjectMode>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    g1: Option<usize>,
    #[arg(long)]
    g2: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with `train.jsonl`, `dev.jsonl` and `test.jsonl`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    no_sem: bool,
    #[arg(long)]
    no_syn: bool,
    #[arg(long)]
    no_reg: bool,
    /// Keep α fixed at 1 (gold targets only) instead of annealing.
    #[arg(long)]
    no_anneal: bool,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    match s {
        "classify" => Ok(TaskKind::Classify),
        "pair" => Ok(TaskKind::Pair),
        "tag" => Ok(TaskKind::Tag),
        _ => Err(format!("unknown task `{s}` (classify|pair|tag)")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<InjectMode, String> {
    match s {
        "A" | "a" => Ok(InjectMode::A),
        "B" | "b" => Ok(InjectMode::B),
        _ => Err(format!("unknown mode `{s}` (A|B)")),
    }
}

fn parse_teacher(s: &str) -> std::result::Result<TeacherKind, String> {
    TeacherKind::parse(s).ok_or_else(|| format!("unknown teacher `{s}`"))
}

fn parse_probe(s: &str) -> std::result::Result<ProbeKind, String> {
    match s {
        "constituent" => Ok(ProbeKind::ConstituentLabeling),
        "dependency" => Ok(ProbeKind::DependencyLabeling),
        _ => Err(format!("unknown probe `{s}` (constituent|dependency)")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/dev/test JSONL files into `--out`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training examples (dev and test sizes come from the config).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Pre-train teachers (all four unless `--kind` is given).
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_teacher)]
        kind: Option<TeacherKind>,
    },
    /// Distil the trained teachers into a student.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Directory holding the teachers.
        #[arg(long)]
        teachers: Option<PathBuf>,
    },
    /// Print metrics of a trained model as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the configured test file.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Probe a student; with `--without-dep` and `--without-con` also emit the dominance histogram.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_probe)]
        kind: Option<ProbeKind>,
        #[arg(long)]
        without_dep: Option<PathBuf>,
        #[arg(long)]
        without_con: Option<PathBuf>,
    },
    /// Decode trees from the student's structure heads.
    Induce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every encoder and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 25)]
        instances: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainTeacher { common, .. }
            | Command::Distill { common, .. }
            | Command::Eval { common, .. }
            | Command::Probe { common, .. }
            | Command::Induce { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let base = match c.preset {
        Some(Preset::Desk) => RunConfig::desk(),
        Some(Preset::Full) | None => RunConfig::default(),
    };
    let mut cfg = match &c.config {
        Some(p) => base.overlay(p)?,
        None => base,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.task {
        cfg.task = t;
    }
    if let Some(m) = c.mode {
        cfg.distill.mode = m;
    }
    if let Some(v) = c.eta {
        cfg.distill.eta = v;
    }
    if let Some(v) = c.lambda1 {
        cfg.distill.lambda1 = v;
    }
    if let Some(v) = c.lambda2 {
        cfg.distill.lambda2 = v;
    }
    if let Some(v) = c.zeta {
        cfg.distill.zeta = v;
    }
    if let Some(v) = c.g1 {
        cfg.training.g1 = v;
    }
    if let Some(v) = c.g2 {
        cfg.training.g2 = v;
    }
    if let Some(v) = c.iters {
        cfg.training.iters = v;
    }
    if let Some(v) = c.batch {
        cfg.training.batch = v;
        cfg.teacher_training.batch = v;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &c.data_dir {
        cfg.data.train = d.join("train.jsonl");
        cfg.data.dev = d.join("dev.jsonl");
        cfg.data.test = d.join("test.jsonl");
    }
    cfg.distill.no_sem |= c.no_sem;
    cfg.distill.no_syn |= c.no_syn;
    cfg.distill.no_reg |= c.no_reg;
    if c.no_anneal {
        cfg.distill.fixed_alpha = Some(1.0);
    }
    cfg.training.seed = cfg.seed;
    cfg.teacher_training.seed = cfg.seed;
    cfg.probe.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(path: &Path) -> Result<Vec<Example>> {
    if !path.exists() {
        return Err(io_err(path, "no such file"));
    }
    Ok(load_jsonl(path)?)
}

struct Splits {
    vocabs: Vocabs,
    train: Vec<Prepared>,
    dev: Vec<Prepared>,
    test: Vec<Prepared>,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let train = load_split(&cfg.data.train)?;
    let dev = load_split(&cfg.data.dev)?;
    let test = load_split(&cfg.data.test)?;
    let vocabs = Vocabs::build(cfg.task, &train, &[&dev, &test]);
    let prep = |d: &[Example]| Prepared::batch(d, &vocabs).map_err(|e| CliError::Train(e.into()));
    Ok(Splits { train: prep(&train)?, dev: prep(&dev)?, test: prep(&test)?, vocabs })
}

/// Sidecar describing how to rebuild a saved model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    /// `student` or a teacher name.
    model: String,
    dims: ModelDims,
    vocabs: Vocabs,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn save_model(dir: &Path, stem: &str, meta: &ModelMeta, store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join(format!("{stem}.meta.json")), meta)?;
    let path = dir.join(format!("{stem}.syd"));
    train::save_checkpoint(store, &path)?;
    Ok(())
}

fn read_meta(dir: &Path, stem: &str) -> Result<ModelMeta> {
    let path = dir.join(format!("{stem}.meta.json"));
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut meta: ModelMeta = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    meta.vocabs.reindex();
    Ok(meta)
}

fn read_store(dir: &Path, stem: &str, store: &mut ParamStore<f32>) -> Result<()> {
    let path = dir.join(format!("{stem}.syd"));
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    train::load_checkpoint(store, &bytes)?;
    Ok(())
}

fn load_student(dir: &Path) -> Result<(Student, ParamStore<f32>, ModelMeta)> {
    let meta = read_meta(dir, "student")?;
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let student = Student::new(&mut store, &mut rng, &meta.dims, &meta.vocabs).map_err(|e| CliError::Train(e.into()))?;
    read_store(dir, "student", &mut store)?;
    Ok((student, store, meta))
}

fn load_teacher(dir: &Path, kind: TeacherKind) -> Result<(TeacherBundle, ModelMeta)> {
    let meta = read_meta(dir, kind.name())?;
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let teacher =
        Teacher::new(kind, &mut store, &mut rng, &meta.dims, &meta.vocabs).map_err(|e| CliError::Train(e.into()))?;
    read_store(dir, kind.name(), &mut store)?;
    store.freeze();
    Ok((TeacherBundle { teacher, store }, meta))
}

fn cmd_gen_data(cfg: &RunConfig, n: Option<usize>, max_len: Option<usize>) -> Result<serde_json::Value> {
    let n_train = n.unwrap_or(cfg.data.n_train);
    let max_len = max_len.unwrap_or(cfg.data.max_len);
    let total = n_train + cfg.data.n_dev + cfg.data.n_test;
    let all = gen_synthetic(&SynthConfig {
        task: cfg.task,
        grammar_size: cfg.data.grammar_size,
        n_examples: total,
        max_len,
        seed: cfg.seed,
    })?;
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let (train, rest) = all.split_at(n_train);
    let (dev, test) = rest.split_at(cfg.data.n_dev);
    for (name, split) in [("train", train), ("dev", dev), ("test", test)] {
        save_jsonl(split, cfg.out.join(format!("{name}.jsonl")))?;
    }
    Ok(serde_json::json!({"train": train.len(), "dev": dev.len(), "test": test.len()}))
}

fn cmd_train_teacher(cfg: &RunConfig, kind: Option<TeacherKind>) -> Result<serde_json::Value> {
    let s = load_splits(cfg)?;
    let kinds = kind.map_or(TeacherKind::ALL.to_vec(), |k| vec![k]);
    let mut report = serde_json::Map::new();
    for k in kinds {
        let run = train::train_teacher(k, &s.train, &s.dev, &s.vocabs, &cfg.dims, &cfg.teacher_training, cfg.teacher_heads)?;
        let test = train::evaluate(&run.bundle.teacher, &run.bundle.store, &s.test, &s.vocabs)?;
        let meta = ModelMeta { model: k.name().into(), dims: cfg.dims.clone(), vocabs: s.vocabs.clone() };
        save_model(&cfg.out, k.name(), &meta, &run.bundle.store)?;
        run.log.save(cfg.out.join(format!("{}.log.jsonl", k.name())))?;
        report.insert(
            k.name().into(),
            serde_json::json!({
                "dev": run.dev, "test": test, "best_iteration": run.best_iter,
                "parameters": run.bundle.store.num_scalars(), "layers": cfg.dims.teacher_layers,
            }),
        );
    }
    Ok(serde_json::Value::Object(report))
}

fn cmd_distill(cfg: &RunConfig) -> Result<serde_json::Value> {
    let s = load_splits(cfg)?;
    let mut bundles = Vec::new();
    let needs_teachers = cfg.distill.fixed_alpha != Some(1.0) || cfg.distill.syn_weight() > 0.0;
    if needs_teachers {
        for k in TeacherKind::ALL {
            let (b, meta) = load_teacher(&cfg.teachers, k)?;
            if meta.vocabs != s.vocabs {
                return Err(CliError::Config(format!("teacher {} was trained with a different vocabulary", k.name())));
            }
            bundles.push(b);
        }
    }
    let run = train::distill_student(&s.train, &s.dev, &s.vocabs, &cfg.dims, &bundles, &cfg.distill, &cfg.training)?;
    let test = train::evaluate(&run.student, &run.store, &s.test, &s.vocabs)?;
    let meta = ModelMeta { model: "student".into(), dims: cfg.dims.clone(), vocabs: s.vocabs.clone() };
    save_model(&cfg.out, "student", &meta, &run.store)?;
    run.log.save(cfg.out.join("log.jsonl"))?;
    let trace: String = run.trace.iter().map(|e| format!("{e}\n")).collect();
    fs::write(cfg.out.join("trace.txt"), trace).map_err(|e| io_err(&cfg.out, e))?;
    let report = serde_json::json!({"dev": run.dev, "test": test, "best_iteration": run.best_iter});
    write_json(&cfg.out.join("metrics.json"), &report)?;
    Ok(report)
}

fn model_data(cfg: &RunConfig, meta: &ModelMeta, data: Option<&PathBuf>) -> Result<Vec<Prepared>> {
    let path = data.unwrap_or(&cfg.data.test);
    let examples = load_split(path)?;
    Prepared::batch(&examples, &meta.vocabs).map_err(|e| CliError::Train(e.into()))
}

fn cmd_eval(cfg: &RunConfig, model: &Path, data: Option<&PathBuf>) -> Result<serde_json::Value> {
    if model.join("student.meta.json").exists() {
        let (student, store, meta) = load_student(model)?;
        let d = model_data(cfg, &meta, data)?;
        let m = train::evaluate(&student, &store, &d, &meta.vocabs)?;
        return Ok(serde_json::json!({"model": "student", "metrics": m}));
    }
    let mut out = serde_json::Map::new();
    for k in TeacherKind::ALL {
        if !model.join(format!("{}.meta.json", k.name())).exists() {
            continue;
        }
        let (b, meta) = load_teacher(model, k)?;
        let d = model_data(cfg, &meta, data)?;
        let m = train::evaluate(&b.teacher, &b.store, &d, &meta.vocabs)?;
        out.insert(k.name().into(), serde_json::to_value(m).expect("metrics serialise"));
    }
    if out.is_empty() {
        return Err(io_err(model, "no model metadata found"));
    }
    Ok(serde_json::Value::Object(out))
}

fn correct_flags<M: TaskModel + Sync>(m: &M, store: &ParamStore<f32>, data: &[Prepared]) -> Result<Vec<bool>> {
    let preds = train::predict(m, store, data)?;
    Ok(train::correctness(&preds, data))
}

fn cmd_probe(
    cfg: &RunConfig,
    model: &Path,
    kind: Option<ProbeKind>,
    without_dep: Option<&PathBuf>,
    without_con: Option<&PathBuf>,
) -> Result<serde_json::Value> {
    let (student, store, meta) = load_student(model)?;
    let train_data = model_data(cfg, &meta, Some(&cfg.data.train))?;
    let test_data = model_data(cfg, &meta, Some(&cfg.data.test))?;
    let kinds = kind.map_or(vec![ProbeKind::ConstituentLabeling, ProbeKind::DependencyLabeling], |k| vec![k]);
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let mut reports = Vec::new();
    for k in kinds {
        let classes = match k {
            ProbeKind::ConstituentLabeling => meta.vocabs.span_labels.len(),
            ProbeKind::DependencyLabeling => meta.vocabs.dep_labels.len(),
        };
        reports.push(probe::probe_train_eval(&student, &store, k, &train_data, &test_data, classes, &cfg.probe)?);
    }
    write_json(&cfg.out.join("probe.json"), &reports)?;
    let mut out = serde_json::json!({"probes": reports});
    match (without_dep, without_con) {
        (Some(dep_dir), Some(con_dir)) => {
            let full = correct_flags(&student, &store, &test_data)?;
            let (sd, sd_store, _) = load_student(dep_dir)?;
            let (sc, sc_store, _) = load_student(con_dir)?;
            let wd = correct_flags(&sd, &sd_store, &test_data)?;
            let wc = correct_flags(&sc, &sc_store, &test_data)?;
            let scores = probe::syntax_distribution(&full, &wd, &wc)?;
            let hist = probe::histogram(&scores, 10);
            let csv = cfg.out.join("dominance_hist.csv");
            fs::write(&csv, probe::histogram_csv(&hist)).map_err(|e| io_err(&csv, e))?;
            let summary = probe::summarize(&scores);
            write_json(&cfg.out.join("dominance_summary.json"), &summary)?;
            out["dominance"] = serde_json::to_value(summary).expect("summary serialises");
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--without-dep and --without-con must be given together".into())),
    }
    Ok(out)
}

fn cmd_induce(cfg: &RunConfig, model: &Path, data: Option<&PathBuf>) -> Result<serde_json::Value> {
    let (student, store, meta) = load_student(model)?;
    let d = model_data(cfg, &meta, data)?;
    let rows = crate::par::map(&d, |ex| -> Result<(String, String)> {
        let mut g = Graph::<f32>::new();
        let reps = student.encode(&mut g, &store, &ex.sent.ids, 0.0).map_err(|e| CliError::Train(e.into()))?.reps;
        let arcs = student.arc.forward(&mut g, &store, reps).map_err(|e| CliError::Train(e.into()))?;
        let n = ex.sent.len();
        let heads: Vec<String> = g
            .value(arcs.arc)
            .chunks(n + 1)
            .enumerate()
            .map(|(i, row)| {
                // column 0 is the root, never the token itself
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if j != i + 1 && v > row[best] {
                        best = j;
                    }
                }
                best.to_string()
            })
            .collect();
        let spans = student.span.forward(&mut g, &store, reps).map_err(|e| CliError::Train(e.into()))?;
        let table = SpanScores::new(n, student.span.labels, g.value(spans).iter().map(|&x| x as f64).collect())
            .map_err(|e| CliError::Config(e.to_string()))?;
        let (tree, _) = cyk_max(&table).map_err(|e| CliError::Config(e.to_string()))?;
        let con = unbinarize(&tree, &meta.vocabs.span_labels);
        Ok((con.render(&ex.sent.tokens), heads.join(" ")))
    });
    let mut trees = String::new();
    let mut heads = String::new();
    for r in rows {
        let (t, h) = r?;
        trees.push_str(&t);
        trees.push('\n');
        heads.push_str(&h);
        heads.push('\n');
    }
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let tp = cfg.out.join("induced_trees.txt");
    fs::write(&tp, trees).map_err(|e| io_err(&tp, e))?;
    let hp = cfg.out.join("induced_heads.txt");
    fs::write(&hp, heads).map_err(|e| io_err(&hp, e))?;
    Ok(serde_json::json!({"sentences": d.len(), "trees": tp, "heads": hp}))
}

fn cmd_gradcheck(cfg: &RunConfig, instances: usize) -> Result<serde_json::Value> {
    let results = gradcheck::suite(instances, cfg.seed, 1e-5);
    let mut worst: std::collections::BTreeMap<&str, f64> = std::collections::BTreeMap::new();
    let mut failures = 0;
    for r in &results {
        match r {
            Ok(c) => {
                let w = worst.entry(c.name).or_insert(0.0);
                *w = w.max(c.rel_err);
                if !(c.rel_err < 1e-5) {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let report = serde_json::json!({"instances": instances, "checks": results.len(), "failures": failures, "max_rel_err": worst});
    if failures > 0 {
        return Err(CliError::GradCheck(format!("{failures} of {} checks failed: {report}", results.len())));
    }
    Ok(report)
}

fn execute(cmd: &Command) -> Result<serde_json::Value> {
    let cfg = resolve(cmd.common())?;
    cfg.write_resolved(&cfg.out)?;
    match cmd {
        Command::GenData { n, max_len, .. } => cmd_gen_data(&cfg, *n, *max_len),
        Command::TrainTeacher { kind, .. } => cmd_train_teacher(&cfg, *kind),
        Command::Distill { teachers, .. } => {
            let mut cfg = cfg;
            if let Some(t) = teachers {
                cfg.teachers = t.clone();
                cfg.write_resolved(&cfg.out)?;
            }
            cmd_distill(&cfg)
        }
        Command::Eval { model, data, .. } => cmd_eval(&cfg, model, data.as_ref()),
        Command::Probe { model, kind, without_dep, without_con, .. } => {
            cmd_probe(&cfg, model, *kind, without_dep.as_ref(), without_con.as_ref())
        }
        Command::Induce { model, data, .. } => cmd_induce(&cfg, model, data.as_ref()),
        Command::Gradcheck { instances, .. } => cmd_gradcheck(&cfg, *instances),
    }
}

/// Runs the CLI and returns the process exit code. Results go to stdout as
/// JSON; failures print one JSON line `{"error": kind, "message": ...}` to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", serde_json::json!({"error": "usage", "message": first}));
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}
