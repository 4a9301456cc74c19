use std::collections::HashMap;

use syndistill::syntax_data::{
    agreement_label, gen_synthetic, load_jsonl, parse_bracketed, parse_conll_dep, parse_jsonl, save_jsonl, to_jsonl,
    ConstNode, ConstTree, DepTree, Example, Payload, SynthConfig, TaskKind,
};

#[test]
fn ten_sentence_fixture_matches_hand_count() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/ten.conll")).unwrap();
    let parsed = parse_conll_dep(&text).unwrap();
    let counts: Vec<usize> = parsed.iter().map(|(w, _)| w.len()).collect();
    assert_eq!(counts, [2, 3, 4, 5, 3, 6, 1, 4, 7, 5]);
    assert_eq!(parsed[5].1.heads(), &[2, 3, 4, 0, 6, 4]);
    assert_eq!(parsed[8].1.root(), 4);
    assert_eq!(parsed[6].0, ["run"]);
}

#[test]
fn conll_two_cycle_names_token() {
    let err = parse_conll_dep("1 a 2 x\n2 b 1 y\n").unwrap_err();
    assert!(err.to_string().contains("cycle at token 1"), "{err}");
}

#[test]
fn bracket_examples() {
    let (words, tree) = parse_bracketed("(S (NP a) (VP b))").unwrap().remove(0);
    assert_eq!(words, ["a", "b"]);
    let mut spans: Vec<(usize, usize, String)> =
        tree.spans().into_iter().map(|s| (s.start, s.end, s.label.clone())).collect();
    spans.sort();
    assert_eq!(spans, [(0, 1, "NP".into()), (0, 2, "S".into()), (1, 2, "VP".into())]);
    let err = parse_bracketed("((S a)").unwrap_err().to_string();
    assert!(err.contains("offset 6"), "{err}");
}

#[test]
fn bracket_render_round_trips_generated_trees() {
    let data = gen_synthetic(&SynthConfig { n_examples: 50, seed: 21, ..SynthConfig::default() }).unwrap();
    for ex in &data {
        let text = ex.con.render(&ex.tokens);
        let (words, tree) = parse_bracketed(&text).unwrap().remove(0);
        assert_eq!(words, ex.tokens);
        assert_eq!(tree, ex.con, "{text}");
    }
}

#[test]
fn generator_contract() {
    let cfg = SynthConfig { n_examples: 100, seed: 7, ..SynthConfig::default() };
    let data = gen_synthetic(&cfg).unwrap();
    assert_eq!(data.len(), 100);
    let mut classes = HashMap::new();
    for ex in &data {
        assert!(ex.len() <= cfg.max_len);
        // constructor re-validates both trees against the tokens
        let again = Example::new(ex.tokens.clone(), ex.dep.clone(), ex.con.clone(), ex.task.clone()).unwrap();
        assert_eq!(&again, ex);
        DepTree::new(ex.dep.heads().to_vec(), ex.dep.labels().to_vec()).unwrap();
        assert_eq!(ex.class(), Some(agreement_label(&ex.tokens, &ex.dep)));
        *classes.entry(ex.class().unwrap()).or_insert(0) += 1;
    }
    // both classes are well represented
    assert_eq!(classes.len(), 2);
    assert!(classes.values().all(|&c| c >= 30), "{classes:?}");
    assert_eq!(gen_synthetic(&cfg).unwrap(), data);
}

#[test]
fn other_task_shapes_generate() {
    for task in [TaskKind::Pair, TaskKind::Tag] {
        let data = gen_synthetic(&SynthConfig { task, n_examples: 20, seed: 3, ..SynthConfig::default() }).unwrap();
        assert_eq!(data.len(), 20);
        for ex in &data {
            match (&ex.task, task) {
                (Payload::Pair { .. }, TaskKind::Pair) | (Payload::Tags { .. }, TaskKind::Tag) => {}
                (p, t) => panic!("{t:?} produced {p:?}"),
            }
        }
    }
}

#[test]
fn degenerate_grammar_rejected() {
    assert!(gen_synthetic(&SynthConfig { grammar_size: 0, ..SynthConfig::default() }).is_err());
}

#[test]
fn jsonl_round_trip_with_unicode() {
    let mut data = gen_synthetic(&SynthConfig { n_examples: 20, seed: 4, ..SynthConfig::default() }).unwrap();
    let leaf = |w: usize| ConstNode::Leaf(w);
    let con = ConstTree::new(ConstNode::node("S", vec![ConstNode::node("NP", vec![leaf(0)]), ConstNode::node("VP", vec![leaf(1)])]))
        .unwrap();
    let dep = DepTree::new(vec![2, 0], vec!["nsubj".into(), "root".into()]).unwrap();
    data.push(Example::new(vec!["naïve".into(), "«zürich»→\"ß\"".into()], dep, con, Payload::Class(1)).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_jsonl(&data, &path).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), data);
    assert_eq!(to_jsonl(&data).lines().count(), data.len());
    let last = data.last().unwrap();
    let spaced = Example::new(vec!["a b".into(), "c".into()], last.dep.clone(), last.con.clone(), Payload::Class(0));
    assert!(spaced.is_err());
}

#[test]
fn jsonl_length_mismatch_names_line() {
    let data = gen_synthetic(&SynthConfig { n_examples: 3, seed: 4, ..SynthConfig::default() }).unwrap();
    let text = to_jsonl(&data);
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    let heads = v.get_mut("dep_heads").and_then(|h| h.as_array_mut()).expect("dep_heads field");
    heads.pop();
    lines[1] = v.to_string();
    let err = parse_jsonl(&lines.join("\n")).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
