//! Tree-annotated sentences: CoNLL dependency blocks, bracketed constituency
//! trees, JSONL datasets and a synthetic corpus whose labels depend on syntax.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<mask>"];

/// Label id 0 of a span label set: binarisation artifacts and bare leaves.
pub const NULL_LABEL: &str = "∅";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("conll line {line}: {msg}")]
    Conll { line: usize, msg: String },
    #[error("bracket offset {offset}: {msg}")]
    Bracket { offset: usize, msg: String },
    #[error("jsonl line {line}: {msg}")]
    Jsonl { line: usize, msg: String },
    #[error("invalid tree: {0}")]
    Tree(String),
    #[error("generator: {0}")]
    Generator(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Word vocabulary with reserved `<pad>`, `<unk>` and `<mask>` ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Frequency-ordered vocabulary; ties are broken lexicographically so the
    /// result only depends on the token multiset.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).map(|(w, _)| w.to_string()))
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Closed label inventory (dependency relations, span labels, tags).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelSet {
    /// Sorted unique labels.
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut names: Vec<String> = labels.into_iter().map(str::to_string).collect();
        names.sort();
        names.dedup();
        Self::from_names(names)
    }

    /// Like [`LabelSet::build`] with [`NULL_LABEL`] pinned at id 0.
    pub fn with_null<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut names: Vec<String> =
            labels.into_iter().filter(|l| *l != NULL_LABEL).map(str::to_string).collect();
        names.sort();
        names.dedup();
        names.insert(0, NULL_LABEL.to_string());
        Self::from_names(names)
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        LabelSet { names, index }
    }

    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Interns `name` if missing.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(i) = self.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Token sequence with vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl Sentence {
    pub fn new(tokens: &[String], vocab: &Vocab) -> Self {
        Sentence { tokens: tokens.to_vec(), ids: vocab.encode(tokens) }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Dependency tree over `n` tokens; `heads[i]` is 1-based, 0 is the virtual root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepTree {
    heads: Vec<usize>,
    labels: Vec<String>,
}

impl DepTree {
    pub fn new(heads: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        if heads.len() != labels.len() {
            return Err(DataError::Tree(format!(
                "{} heads but {} labels",
                heads.len(),
                labels.len()
            )));
        }
        validate_heads(&heads).map_err(DataError::Tree)?;
        Ok(DepTree { heads, labels })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// 0-based index of the token attached to the virtual root.
    pub fn root(&self) -> usize {
        self.heads.iter().position(|&h| h == 0).expect("validated tree has a root")
    }

    /// 0-based head of token `i`, `None` for the root token.
    pub fn head_of(&self, i: usize) -> Option<usize> {
        self.heads[i].checked_sub(1)
    }

    /// 0-based dependents of each token, in surface order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, &h) in self.heads.iter().enumerate() {
            if h > 0 {
                out[h - 1].push(i);
            }
        }
        out
    }
}

/// Checks single-rootedness and acyclicity; messages use 1-based token ids.
fn validate_heads(heads: &[usize]) -> std::result::Result<(), String> {
    let n = heads.len();
    if n == 0 {
        return Err("empty sentence".into());
    }
    for (i, &h) in heads.iter().enumerate() {
        if h > n {
            return Err(format!("head {h} of token {} out of range", i + 1));
        }
        if h == i + 1 {
            return Err(format!("cycle at token {}", i + 1));
        }
    }
    // 0 = unvisited, 1 = on current path, 2 = reaches the root
    let mut state = vec![0u8; n];
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            match state[cur] {
                2 => break,
                1 => {
                    let first = path.iter().skip_while(|&&p| p != cur).min().copied().unwrap_or(cur);
                    return Err(format!("cycle at token {}", first + 1));
                }
                _ => {}
            }
            state[cur] = 1;
            path.push(cur);
            match heads[cur] {
                0 => break,
                h => cur = h - 1,
            }
        }
        for p in path {
            state[p] = 2;
        }
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(format!("expected exactly one root, found {roots}"));
    }
    Ok(())
}

/// Constituency node; leaves carry the 0-based token index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstNode {
    Leaf(usize),
    Node { label: String, children: Vec<ConstNode> },
}

impl ConstNode {
    pub fn node(label: &str, children: Vec<ConstNode>) -> Self {
        ConstNode::Node { label: label.to_string(), children }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            ConstNode::Leaf(_) => None,
            ConstNode::Node { label, .. } => Some(label),
        }
    }

    /// Half-open token span covered by the node.
    pub fn span(&self) -> (usize, usize) {
        match self {
            ConstNode::Leaf(i) => (*i, i + 1),
            ConstNode::Node { children, .. } => {
                (children.first().unwrap().span().0, children.last().unwrap().span().1)
            }
        }
    }
}

/// Labelled span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstTree {
    root: ConstNode,
    n: usize,
}

impl ConstTree {
    /// Validates that leaves are `0..n` in order and every node has children.
    pub fn new(root: ConstNode) -> Result<Self> {
        fn walk(node: &ConstNode, next: &mut usize) -> std::result::Result<(), String> {
            match node {
                ConstNode::Leaf(i) => {
                    if *i != *next {
                        return Err(format!("leaf {i} out of order, expected {next}"));
                    }
                    *next += 1;
                }
                ConstNode::Node { label, children } => {
                    if children.is_empty() {
                        return Err(format!("node `{label}` has no children"));
                    }
                    for c in children {
                        walk(c, next)?;
                    }
                }
            }
            Ok(())
        }
        let mut n = 0;
        walk(&root, &mut n).map_err(DataError::Tree)?;
        Ok(ConstTree { root, n })
    }

    pub fn root(&self) -> &ConstNode {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Every internal node as a labelled span, in pre-order.
    pub fn spans(&self) -> Vec<Span> {
        fn walk(node: &ConstNode, out: &mut Vec<Span>) {
            if let ConstNode::Node { label, children } = node {
                let (start, end) = node.span();
                out.push(Span { start, end, label: label.clone() });
                for c in children {
                    walk(c, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    pub fn render(&self, words: &[String]) -> String {
        fn walk(node: &ConstNode, words: &[String], out: &mut String) {
            match node {
                ConstNode::Leaf(i) => out.push_str(&words[*i]),
                ConstNode::Node { label, children } => {
                    out.push('(');
                    out.push_str(label);
                    for c in children {
                        out.push(' ');
                        walk(c, words, out);
                    }
                    out.push(')');
                }
            }
        }
        let mut out = String::new();
        walk(&self.root, words, &mut out);
        out
    }
}

/// Reads CoNLL-style blocks. Four-column lines are `ID FORM HEAD DEPREL`;
/// ten-column CoNLL-X lines are also accepted. `#` lines are comments.
pub fn parse_conll_dep(text: &str) -> Result<Vec<(Vec<String>, DepTree)>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, Vec<&str>)> = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.is_empty() {
            if !block.is_empty() {
                out.push(finish_conll_block(&block)?);
                block.clear();
            }
            continue;
        }
        let cols: Vec<&str> =
            if line.contains('\t') { line.split('\t').collect() } else { trimmed.split_whitespace().collect() };
        block.push((i + 1, cols));
    }
    if !block.is_empty() {
        out.push(finish_conll_block(&block)?);
    }
    Ok(out)
}

fn finish_conll_block(block: &[(usize, Vec<&str>)]) -> Result<(Vec<String>, DepTree)> {
    let width = block[0].1.len();
    let (head_col, rel_col) = match width {
        4 => (2, 3),
        10 => (6, 7),
        w => {
            return Err(DataError::Conll {
                line: block[0].0,
                msg: format!("expected 4 or 10 columns, found {w}"),
            })
        }
    };
    let mut words = Vec::new();
    let mut heads = Vec::new();
    let mut labels = Vec::new();
    for (k, (line, cols)) in block.iter().enumerate() {
        if cols.len() != width {
            return Err(DataError::Conll {
                line: *line,
                msg: format!("ragged columns: {} instead of {width}", cols.len()),
            });
        }
        let id: usize = cols[0]
            .parse()
            .map_err(|_| DataError::Conll { line: *line, msg: format!("bad token id `{}`", cols[0]) })?;
        if id != k + 1 {
            return Err(DataError::Conll { line: *line, msg: format!("token id {id}, expected {}", k + 1) });
        }
        let head: usize = cols[head_col]
            .parse()
            .map_err(|_| DataError::Conll { line: *line, msg: format!("bad head `{}`", cols[head_col]) })?;
        words.push(cols[1].to_string());
        heads.push(head);
        labels.push(cols[rel_col].to_string());
    }
    let first = block[0].0;
    let tree = DepTree::new(heads, labels).map_err(|e| match e {
        DataError::Tree(msg) => DataError::Conll { line: first, msg },
        other => other,
    })?;
    Ok((words, tree))
}

pub fn render_conll(words: &[String], tree: &DepTree) -> String {
    let mut out = String::new();
    for (i, w) in words.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", i + 1, w, tree.heads[i], tree.labels[i]);
    }
    out
}

/// Parses whitespace-separated PTB-style trees. An unlabelled outer wrapper
/// around a single tree is removed.
pub fn parse_bracketed(text: &str) -> Result<Vec<(Vec<String>, ConstTree)>> {
    let mut p = BracketParser { text, bytes: text.as_bytes(), pos: 0, words: Vec::new() };
    let mut out = Vec::new();
    loop {
        p.skip_ws();
        if p.pos >= p.bytes.len() {
            break;
        }
        if p.bytes[p.pos] != b'(' {
            return Err(p.err(p.pos, "expected `(`"));
        }
        p.words.clear();
        let root = p.node()?;
        let root = match root {
            ConstNode::Node { label, mut children } if label.is_empty() => {
                if children.len() == 1 && matches!(children[0], ConstNode::Node { .. }) {
                    children.pop().unwrap()
                } else {
                    return Err(p.err(p.pos, "unlabelled node"));
                }
            }
            other => other,
        };
        let tree = ConstTree::new(root)?;
        out.push((std::mem::take(&mut p.words), tree));
    }
    Ok(out)
}

struct BracketParser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    words: Vec<String>,
}

impl BracketParser<'_> {
    fn err(&self, offset: usize, msg: &str) -> DataError {
        DataError::Bracket { offset, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn atom(&mut self) -> &str {
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn node(&mut self) -> Result<ConstNode> {
        let open = self.pos;
        self.pos += 1;
        self.skip_ws();
        let label = if self.pos < self.bytes.len() && !matches!(self.bytes[self.pos], b'(' | b')') {
            self.atom().to_string()
        } else {
            String::new()
        };
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            if self.pos >= self.bytes.len() {
                return Err(self.err(self.pos, "unbalanced parentheses"));
            }
            match self.bytes[self.pos] {
                b')' => {
                    self.pos += 1;
                    break;
                }
                b'(' => children.push(self.node()?),
                _ => {
                    let w = self.atom().to_string();
                    children.push(ConstNode::Leaf(self.words.len()));
                    self.words.push(w);
                }
            }
        }
        if children.is_empty() {
            return Err(self.err(open, "empty node"));
        }
        Ok(ConstNode::Node { label, children })
    }
}

/// Payload for the three task shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Class(usize),
    Pair { partner: Box<PairPartner>, class: usize },
    Tags { tags: Vec<String>, predicate: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairPartner {
    pub tokens: Vec<String>,
    pub dep: DepTree,
    pub con: ConstTree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub dep: DepTree,
    pub con: ConstTree,
    pub task: Payload,
}

impl Example {
    pub fn new(tokens: Vec<String>, dep: DepTree, con: ConstTree, task: Payload) -> Result<Self> {
        check_annotation(&tokens, &dep, &con)?;
        match &task {
            Payload::Tags { tags, predicate } => {
                if tags.len() != tokens.len() || *predicate >= tokens.len() {
                    return Err(DataError::Tree(format!(
                        "{} tags / predicate {predicate} for {} tokens",
                        tags.len(),
                        tokens.len()
                    )));
                }
            }
            Payload::Pair { partner, .. } => check_annotation(&partner.tokens, &partner.dep, &partner.con)?,
            Payload::Class(_) => {}
        }
        Ok(Example { tokens, dep, con, task })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn class(&self) -> Option<usize> {
        match &self.task {
            Payload::Class(c) | Payload::Pair { class: c, .. } => Some(*c),
            Payload::Tags { .. } => None,
        }
    }
}

fn check_annotation(tokens: &[String], dep: &DepTree, con: &ConstTree) -> Result<()> {
    if tokens.is_empty() {
        return Err(DataError::Tree("empty sentence".into()));
    }
    // tokens must survive the bracketed serialisation of the tree
    if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.chars().any(|c| c.is_whitespace() || c == '(' || c == ')')) {
        return Err(DataError::Tree(format!("token {t:?} is empty or contains whitespace or parentheses")));
    }
    if dep.len() != tokens.len() || con.len() != tokens.len() {
        return Err(DataError::Tree(format!(
            "{} tokens, {} dependency heads, {} constituency leaves",
            tokens.len(),
            dep.len(),
            con.len()
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AnnotatedRecord {
    tokens: Vec<String>,
    dep_heads: Vec<usize>,
    dep_labels: Vec<String>,
    con_tree: String,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    #[serde(flatten)]
    partner: AnnotatedRecord,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct SrlRecord {
    tags: Vec<String>,
    predicate: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    tokens: Vec<String>,
    dep_heads: Vec<usize>,
    dep_labels: Vec<String>,
    con_tree: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair: Option<PairRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    srl: Option<SrlRecord>,
}

fn annotated_from(
    tokens: Vec<String>,
    heads: Vec<usize>,
    labels: Vec<String>,
    con: &str,
) -> std::result::Result<(Vec<String>, DepTree, ConstTree), String> {
    if heads.len() != tokens.len() {
        return Err(format!("len(dep_heads) = {} but len(tokens) = {}", heads.len(), tokens.len()));
    }
    if labels.len() != tokens.len() {
        return Err(format!("len(dep_labels) = {} but len(tokens) = {}", labels.len(), tokens.len()));
    }
    let dep = DepTree::new(heads, labels).map_err(|e| e.to_string())?;
    let mut trees = parse_bracketed(con).map_err(|e| e.to_string())?;
    if trees.len() != 1 {
        return Err(format!("con_tree holds {} trees", trees.len()));
    }
    let (leaves, tree) = trees.pop().unwrap();
    if leaves != tokens {
        return Err("con_tree leaves differ from tokens".into());
    }
    Ok((tokens, dep, tree))
}

impl ExampleRecord {
    fn into_example(self) -> std::result::Result<Example, String> {
        let payloads = self.class.is_some() as usize + self.pair.is_some() as usize + self.srl.is_some() as usize;
        if payloads != 1 {
            return Err(format!("expected exactly one of class/pair/srl, found {payloads}"));
        }
        let (tokens, dep, con) = annotated_from(self.tokens, self.dep_heads, self.dep_labels, &self.con_tree)?;
        let task = if let Some(c) = self.class {
            Payload::Class(c)
        } else if let Some(p) = self.pair {
            let a = p.partner;
            let (ptoks, pdep, pcon) = annotated_from(a.tokens, a.dep_heads, a.dep_labels, &a.con_tree)?;
            Payload::Pair { partner: Box::new(PairPartner { tokens: ptoks, dep: pdep, con: pcon }), class: p.class }
        } else {
            let s = self.srl.unwrap();
            Payload::Tags { tags: s.tags, predicate: s.predicate }
        };
        Example::new(tokens, dep, con, task).map_err(|e| e.to_string())
    }

    fn from_example(ex: &Example) -> Self {
        let mut rec = ExampleRecord {
            tokens: ex.tokens.clone(),
            dep_heads: ex.dep.heads.clone(),
            dep_labels: ex.dep.labels.clone(),
            con_tree: ex.con.render(&ex.tokens),
            class: None,
            pair: None,
            srl: None,
        };
        match &ex.task {
            Payload::Class(c) => rec.class = Some(*c),
            Payload::Pair { partner, class } => {
                rec.pair = Some(PairRecord {
                    partner: AnnotatedRecord {
                        tokens: partner.tokens.clone(),
                        dep_heads: partner.dep.heads.clone(),
                        dep_labels: partner.dep.labels.clone(),
                        con_tree: partner.con.render(&partner.tokens),
                    },
                    class: *class,
                })
            }
            Payload::Tags { tags, predicate } => {
                rec.srl = Some(SrlRecord { tags: tags.clone(), predicate: *predicate })
            }
        }
        rec
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(line).map_err(|e| DataError::Jsonl { line: i + 1, msg: e.to_string() })?;
        out.push(rec.into_example().map_err(|msg| DataError::Jsonl { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&ExampleRecord::from_example(ex)).expect("serialisable"));
        out.push('\n');
    }
    out
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn save_jsonl(examples: &[Example], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(to_jsonl(examples).as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Task shape produced by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Pair,
    Tag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub task: TaskKind,
    /// Number of noun and verb stems drawn from the lexicon.
    pub grammar_size: usize,
    pub n_examples: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { task: TaskKind::Classify, grammar_size: 20, n_examples: 1000, max_len: 12, seed: 7 }
    }
}

const NOUNS: [(&str, &str); 40] = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("horse", "horses"),
    ("teacher", "teachers"),
    ("farmer", "farmers"),
    ("lawyer", "lawyers"),
    ("pilot", "pilots"),
    ("doctor", "doctors"),
    ("child", "children"),
    ("baker", "bakers"),
    ("singer", "singers"),
    ("writer", "writers"),
    ("driver", "drivers"),
    ("nurse", "nurses"),
    ("artist", "artists"),
    ("student", "students"),
    ("king", "kings"),
    ("queen", "queens"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("friend", "friends"),
    ("neighbor", "neighbors"),
    ("soldier", "soldiers"),
    ("sailor", "sailors"),
    ("actor", "actors"),
    ("author", "authors"),
    ("guard", "guards"),
    ("judge", "judges"),
    ("chef", "chefs"),
    ("clerk", "clerks"),
    ("dancer", "dancers"),
    ("hunter", "hunters"),
    ("miner", "miners"),
    ("monk", "monks"),
    ("poet", "poets"),
    ("priest", "priests"),
    ("tailor", "tailors"),
    ("waiter", "waiters"),
    ("wolf", "wolves"),
];
const TRANSITIVE: [(&str, &str); 20] = [
    ("sees", "see"),
    ("chases", "chase"),
    ("likes", "like"),
    ("knows", "know"),
    ("helps", "help"),
    ("follows", "follow"),
    ("watches", "watch"),
    ("admires", "admire"),
    ("hears", "hear"),
    ("loves", "love"),
    ("hates", "hate"),
    ("meets", "meet"),
    ("calls", "call"),
    ("visits", "visit"),
    ("thanks", "thank"),
    ("trusts", "trust"),
    ("blames", "blame"),
    ("greets", "greet"),
    ("praises", "praise"),
    ("avoids", "avoid"),
];
const INTRANSITIVE: [(&str, &str); 20] = [
    ("runs", "run"),
    ("sleeps", "sleep"),
    ("smiles", "smile"),
    ("waits", "wait"),
    ("laughs", "laugh"),
    ("swims", "swim"),
    ("sings", "sing"),
    ("dances", "dance"),
    ("jumps", "jump"),
    ("walks", "walk"),
    ("cries", "cry"),
    ("talks", "talk"),
    ("sits", "sit"),
    ("falls", "fall"),
    ("rests", "rest"),
    ("works", "work"),
    ("plays", "play"),
    ("shouts", "shout"),
    ("yawns", "yawn"),
    ("leaves", "leave"),
];
const DETS: [&str; 4] = ["the", "my", "our", "your"];
const ADJS: [&str; 6] = ["big", "small", "old", "young", "happy", "tall"];
const PREPS: [&str; 4] = ["near", "behind", "with", "beside"];

/// Grammatical number of a noun or finite verb in the synthetic lexicon.
pub fn word_number(word: &str) -> Option<bool> {
    let plural_noun = NOUNS.iter().find_map(|&(s, p)| {
        if word == s {
            Some(false)
        } else if word == p {
            Some(true)
        } else {
            None
        }
    });
    plural_noun.or_else(|| {
        TRANSITIVE.iter().chain(INTRANSITIVE.iter()).find_map(|&(s, p)| {
            if word == s {
                Some(false)
            } else if word == p {
                Some(true)
            } else {
                None
            }
        })
    })
}

fn noun_stem(word: &str) -> Option<usize> {
    NOUNS.iter().position(|&(s, p)| word == s || word == p)
}

/// Head-percolation table: preferred head-child labels per phrase label.
fn head_child(label: &str, children: &[ConstNode]) -> usize {
    let prefs: &[&str] = match label {
        "S" => &["VP"],
        "VP" => &["VBZ", "VBP", "VP"],
        "NP" => &["NN", "NNS", "NP"],
        "PP" => &["IN"],
        "SBAR" => &["VP", "S"],
        _ => &[],
    };
    for p in prefs {
        if let Some(i) = children.iter().position(|c| c.label() == Some(*p)) {
            return i;
        }
    }
    children.len() - 1
}

fn relation(parent: &str, dependent: &str) -> &'static str {
    match (parent, dependent) {
        ("S", "NP") => "nsubj",
        ("S", "PP") => "prep",
        ("NP", "DT") => "det",
        ("NP", "JJ") => "amod",
        ("NP", "PP") | ("VP", "PP") => "prep",
        ("NP", "SBAR") => "relcl",
        ("PP", "NP") => "pobj",
        ("SBAR", "WDT") => "mark",
        ("VP", "NP") => "obj",
        _ => "dep",
    }
}

/// Derives a dependency tree from a constituency tree by head percolation.
pub fn percolate_heads(tree: &ConstTree) -> DepTree {
    fn lexical_head(node: &ConstNode, heads: &mut [usize], labels: &mut [String]) -> usize {
        match node {
            ConstNode::Leaf(i) => *i,
            ConstNode::Node { label, children } => {
                let lex: Vec<usize> = children.iter().map(|c| lexical_head(c, heads, labels)).collect();
                let h = head_child(label, children);
                for (k, c) in children.iter().enumerate() {
                    if k != h {
                        heads[lex[k]] = lex[h] + 1;
                        labels[lex[k]] = relation(label, c.label().unwrap_or("")).to_string();
                    }
                }
                lex[h]
            }
        }
    }
    let n = tree.len();
    let mut heads = vec![0; n];
    let mut labels = vec![String::new(); n];
    let root = lexical_head(tree.root(), &mut heads, &mut labels);
    heads[root] = 0;
    labels[root] = "root".into();
    DepTree::new(heads, labels).expect("percolation yields a tree")
}

/// Task label of a synthetic classification sentence: 1 iff every finite
/// verb agrees in number with its `nsubj` dependent (or, for relative-clause
/// verbs, with the noun the clause modifies).
pub fn agreement_label(tokens: &[String], dep: &DepTree) -> usize {
    for (v, tok) in tokens.iter().enumerate() {
        let Some(vnum) = verb_number(tok) else { continue };
        let subj = (0..tokens.len())
            .find(|&d| dep.head_of(d) == Some(v) && dep.labels()[d] == "nsubj")
            .or_else(|| (dep.labels()[v] == "relcl").then(|| dep.head_of(v)).flatten());
        if let Some(s) = subj {
            if word_number(&tokens[s]) != Some(vnum) {
                return 0;
            }
        }
    }
    1
}

fn verb_number(word: &str) -> Option<bool> {
    TRANSITIVE.iter().chain(INTRANSITIVE.iter()).find_map(|&(s, p)| {
        if word == s {
            Some(false)
        } else if word == p {
            Some(true)
        } else {
            None
        }
    })
}

/// Subject head noun of the main clause.
pub fn main_subject(tokens: &[String], dep: &DepTree) -> Option<usize> {
    let root = dep.root();
    let _ = tokens;
    (0..dep.len()).find(|&d| dep.head_of(d) == Some(root) && dep.labels()[d] == "nsubj")
}

/// Pair label: 1 iff both main-clause subjects share a noun stem.
pub fn pair_label(a: (&[String], &DepTree), b: (&[String], &DepTree)) -> usize {
    let sa = main_subject(a.0, a.1).and_then(|i| noun_stem(&a.0[i]));
    let sb = main_subject(b.0, b.1).and_then(|i| noun_stem(&b.0[i]));
    usize::from(sa.is_some() && sa == sb)
}

/// BIO tags marking the subject (A0) and object (A1) phrases of the predicate.
pub fn srl_tags(con: &ConstTree, dep: &DepTree, predicate: usize) -> Vec<String> {
    let n = dep.len();
    let mut tags = vec!["O".to_string(); n];
    // phrase span of each token's maximal projection
    fn projections(node: &ConstNode, out: &mut [Option<(usize, usize)>]) -> usize {
        match node {
            ConstNode::Leaf(i) => *i,
            ConstNode::Node { label, children } => {
                let lex: Vec<usize> = children.iter().map(|c| projections(c, out)).collect();
                let h = lex[head_child(label, children)];
                out[h] = Some(node.span());
                h
            }
        }
    }
    let mut proj = vec![None; n];
    projections(con.root(), &mut proj);
    for d in 0..n {
        if dep.head_of(d) != Some(predicate) {
            continue;
        }
        let role = match dep.labels()[d].as_str() {
            "nsubj" => "A0",
            "obj" => "A1",
            _ => continue,
        };
        if let Some((s, e)) = proj[d] {
            for (k, tag) in tags.iter_mut().enumerate().take(e).skip(s) {
                *tag = format!("{}-{role}", if k == s { "B" } else { "I" });
            }
        }
    }
    tags
}

struct Generator<'a> {
    rng: ChaCha8Rng,
    nouns: &'a [(&'a str, &'a str)],
    trans: &'a [(&'a str, &'a str)],
    intrans: &'a [(&'a str, &'a str)],
    words: Vec<String>,
}

impl Generator<'_> {
    fn leaf(&mut self, tag: &str, word: &str) -> ConstNode {
        self.words.push(word.to_string());
        ConstNode::node(tag, vec![ConstNode::Leaf(self.words.len() - 1)])
    }

    fn np(&mut self, plural: bool, depth: usize) -> ConstNode {
        let det = *DETS.choose(&mut self.rng).unwrap();
        let mut kids = vec![self.leaf("DT", det)];
        if self.rng.gen_bool(0.25) {
            let adj = *ADJS.choose(&mut self.rng).unwrap();
            kids.push(self.leaf("JJ", adj));
        }
        let (s, p) = *self.nouns.choose(&mut self.rng).unwrap();
        kids.push(self.leaf(if plural { "NNS" } else { "NN" }, if plural { p } else { s }));
        let base = ConstNode::node("NP", kids);
        if depth >= 2 {
            return base;
        }
        let r: f64 = self.rng.gen();
        if r < 0.25 {
            let attractor = self.rng.gen_bool(0.5);
            let pp = self.pp(attractor, depth + 1);
            ConstNode::node("NP", vec![base, pp])
        } else if r < 0.45 {
            let that = self.leaf("WDT", "that");
            let vp = self.vp(plural, depth + 1, true);
            ConstNode::node("NP", vec![base, ConstNode::node("SBAR", vec![that, vp])])
        } else if r < 0.7 {
            // object relative: the clause has its own subject and a gapped object
            let that = self.leaf("WDT", "that");
            let inner_num = self.rng.gen_bool(0.5);
            let inner = self.np(inner_num, 2);
            let v = self.verb(inner_num, true);
            let clause = ConstNode::node("S", vec![inner, ConstNode::node("VP", vec![v])]);
            ConstNode::node("NP", vec![base, ConstNode::node("SBAR", vec![that, clause])])
        } else {
            base
        }
    }

    fn pp(&mut self, plural: bool, depth: usize) -> ConstNode {
        let prep = *PREPS.choose(&mut self.rng).unwrap();
        let p = self.leaf("IN", prep);
        let obj = self.np(plural, depth);
        ConstNode::node("PP", vec![p, obj])
    }

    fn verb(&mut self, plural: bool, transitive: bool) -> ConstNode {
        let pool = if transitive { self.trans } else { self.intrans };
        let (s, p) = *pool.choose(&mut self.rng).unwrap();
        self.leaf(if plural { "VBP" } else { "VBZ" }, if plural { p } else { s })
    }

    fn vp(&mut self, plural: bool, depth: usize, relative: bool) -> ConstNode {
        let transitive = self.rng.gen_bool(0.6);
        let v = self.verb(plural, transitive);
        if transitive {
            let obj_num = self.rng.gen_bool(0.5);
            let obj = self.np(obj_num, depth + usize::from(relative));
            ConstNode::node("VP", vec![v, obj])
        } else if !relative && self.rng.gen_bool(0.4) {
            let prep = *PREPS.choose(&mut self.rng).unwrap();
            let p = self.leaf("IN", prep);
            let obj_num = self.rng.gen_bool(0.5);
            let obj = self.np(obj_num, depth + 1);
            ConstNode::node("VP", vec![v, ConstNode::node("PP", vec![p, obj])])
        } else {
            ConstNode::node("VP", vec![v])
        }
    }

    /// One sentence; when `agree` is false the main verb's number is flipped.
    fn sentence(&mut self, agree: bool) -> (Vec<String>, ConstTree) {
        self.words.clear();
        let subj_num = self.rng.gen_bool(0.5);
        let mut kids = Vec::with_capacity(3);
        if self.rng.gen_bool(0.25) {
            let attractor = self.rng.gen_bool(0.5);
            kids.push(self.pp(attractor, 2));
        }
        kids.push(self.np(subj_num, 0));
        kids.push(self.vp(if agree { subj_num } else { !subj_num }, 0, false));
        let tree = ConstTree::new(ConstNode::node("S", kids)).expect("generated tree is valid");
        (std::mem::take(&mut self.words), tree)
    }
}

/// Synthetic corpus from a small agreement grammar. Class labels are computed
/// from the gold trees, and classes are balanced by rejection.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<Example>> {
    if cfg.grammar_size == 0 {
        return Err(DataError::Generator("grammar has no terminals".into()));
    }
    if cfg.max_len > 20 || cfg.max_len < 4 {
        return Err(DataError::Generator(format!("max_len {} outside [4, 20]", cfg.max_len)));
    }
    let k = cfg.grammar_size;
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        nouns: &NOUNS[..k.min(NOUNS.len())],
        trans: &TRANSITIVE[..k.min(TRANSITIVE.len())],
        intrans: &INTRANSITIVE[..k.min(INTRANSITIVE.len())],
        words: Vec::new(),
    };
    let quota = cfg.n_examples.div_ceil(2);
    let mut counts = [0usize; 2];
    let mut out = Vec::with_capacity(cfg.n_examples);
    let mut attempts = 0usize;
    while out.len() < cfg.n_examples {
        attempts += 1;
        if attempts > 1000 * cfg.n_examples.max(1) {
            return Err(DataError::Generator("could not satisfy length/balance constraints".into()));
        }
        let want = g.rng.gen_bool(0.5);
        let (tokens, con) = g.sentence(want || cfg.task != TaskKind::Classify);
        if tokens.len() > cfg.max_len {
            continue;
        }
        let dep = percolate_heads(&con);
        let ex = match cfg.task {
            TaskKind::Classify => {
                let label = agreement_label(&tokens, &dep);
                if counts[label] >= quota {
                    continue;
                }
                counts[label] += 1;
                Example::new(tokens, dep, con, Payload::Class(label))?
            }
            TaskKind::Pair => {
                let (ptoks, pcon) = loop {
                    let (t, c) = g.sentence(true);
                    if t.len() <= cfg.max_len {
                        break (t, c);
                    }
                };
                let pdep = percolate_heads(&pcon);
                let label = pair_label((&tokens, &dep), (&ptoks, &pdep));
                if counts[label] >= quota {
                    continue;
                }
                counts[label] += 1;
                let partner = Box::new(PairPartner { tokens: ptoks, dep: pdep, con: pcon });
                Example::new(tokens, dep, con, Payload::Pair { partner, class: label })?
            }
            TaskKind::Tag => {
                let predicate = dep.root();
                let tags = srl_tags(&con, &dep, predicate);
                Example::new(tokens, dep, con, Payload::Tags { tags, predicate })?
            }
        };
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &[&str]) -> Vec<String> {
        x.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn conll_minimal_tree() {
        let parsed = parse_conll_dep("1\tcats\t2\tnsubj\n2\tsleep\t0\troot\n").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].1.heads(), &[2, 0]);
        assert_eq!(parsed[0].0, s(&["cats", "sleep"]));
    }

    #[test]
    fn conll_cycle_rejected() {
        let err = parse_conll_dep("1 a 2 x\n2 b 1 y\n").unwrap_err();
        assert!(err.to_string().contains("cycle at token 1"), "{err}");
        let err = parse_conll_dep("1 a 0 root\n2 b 0 root\n").unwrap_err();
        assert!(err.to_string().contains("one root"), "{err}");
    }

    #[test]
    fn conll_ragged_rejected_with_line() {
        let err = parse_conll_dep("1 a 0 root\n2 b 1\n").unwrap_err();
        match err {
            DataError::Conll { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn bracket_spans() {
        let trees = parse_bracketed("(S (NP a) (VP b))").unwrap();
        let (words, tree) = &trees[0];
        assert_eq!(words, &s(&["a", "b"]));
        let mut spans: Vec<(usize, usize, String)> =
            tree.spans().into_iter().map(|sp| (sp.start, sp.end, sp.label)).collect();
        spans.sort();
        assert_eq!(
            spans,
            vec![(0, 1, "NP".into()), (0, 2, "S".into()), (1, 2, "VP".into())]
        );
    }

    #[test]
    fn bracket_errors_carry_offsets() {
        match parse_bracketed("((S a)").unwrap_err() {
            DataError::Bracket { offset, .. } => assert_eq!(offset, 6),
            other => panic!("{other}"),
        }
        match parse_bracketed("(S (NP) b)").unwrap_err() {
            DataError::Bracket { offset, msg } => {
                assert_eq!(offset, 3);
                assert!(msg.contains("empty"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn bracket_strips_unlabelled_wrapper() {
        let trees = parse_bracketed("( (S (NP a) (VP b)) )\n(X c)").unwrap();
        assert_eq!(trees.len(), 2);
        assert_eq!(trees[0].1.render(&trees[0].0), "(S (NP a) (VP b))");
    }

    #[test]
    fn vocab_is_order_independent() {
        let a = Vocab::build(["b", "a", "c", "a", "b"]);
        let b = Vocab::build(["a", "b", "b", "c", "a"]);
        assert_eq!(a.words(), b.words());
        assert_eq!(&a.words()[..3], &SPECIALS.map(String::from));
        assert_eq!(a.word(3), "a");
        assert_eq!(a.id("zzz"), UNK_ID);
    }

    #[test]
    fn synthetic_contract() {
        let cfg = SynthConfig { n_examples: 100, seed: 7, ..Default::default() };
        let data = gen_synthetic(&cfg).unwrap();
        assert_eq!(data.len(), 100);
        for ex in &data {
            assert!(ex.len() <= cfg.max_len);
            assert_eq!(ex.class(), Some(agreement_label(&ex.tokens, &ex.dep)));
            assert_eq!(percolate_heads(&ex.con), ex.dep);
        }
        let bad = SynthConfig { grammar_size: 0, ..cfg };
        assert!(gen_synthetic(&bad).is_err());
    }

    #[test]
    fn agreement_label_reads_the_tree() {
        let (words, tree) = parse_bracketed(
            "(S (NP (NP (DT the) (NN dog)) (PP (IN near) (NP (DT the) (NNS cats)))) (VP (VBP run)))",
        )
        .unwrap()
        .pop()
        .unwrap();
        let dep = percolate_heads(&tree);
        assert_eq!(dep.labels()[1], "nsubj");
        assert_eq!(dep.head_of(1), Some(5));
        assert_eq!(agreement_label(&words, &dep), 0);
        let fixed: Vec<String> = words.iter().map(|w| if w == "run" { "runs".into() } else { w.clone() }).collect();
        assert_eq!(agreement_label(&fixed, &dep), 1);
    }

    #[test]
    fn srl_tags_mark_subject_and_object() {
        let (_, tree) = parse_bracketed("(S (NP (DT the) (NN dog)) (VP (VBZ sees) (NP (DT a) (NNS cats))))")
            .unwrap()
            .pop()
            .unwrap();
        let dep = percolate_heads(&tree);
        let tags = srl_tags(&tree, &dep, dep.root());
        assert_eq!(tags, s(&["B-A0", "I-A0", "O", "B-A1", "I-A1"]));
    }

    #[test]
    fn jsonl_rejects_length_mismatch() {
        let line = r#"{"tokens":["a","b"],"dep_heads":[0],"dep_labels":["root"],"con_tree":"(S a b)","class":0}"#;
        match parse_jsonl(&format!("\n{line}\n")).unwrap_err() {
            DataError::Jsonl { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("dep_heads"), "{msg}");
            }
            other => panic!("{other}"),
        }
        let two = r#"{"tokens":["a"],"dep_heads":[0],"dep_labels":["root"],"con_tree":"(S a)","class":0,"srl":{"tags":["O"],"predicate":0}}"#;
        assert!(parse_jsonl(two).is_err());
    }
}
