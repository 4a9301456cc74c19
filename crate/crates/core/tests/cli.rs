use std::path::Path;
use std::process::{Command, Output};

use syndistill::syntax_data::{parse_bracketed, save_jsonl, DepTree, Example, Payload};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_syndistill"))
}

// runs from a scratch directory so default output paths stay out of the tree
fn run(args: &[&str]) -> Output {
    let cwd = tempfile::tempdir().unwrap();
    bin().current_dir(cwd.path()).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn one_line_error(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert!(v["error"].is_string() && v["message"].is_string(), "{v}");
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// small splits and short teacher training for end-to-end runs
const SMALL: &str = r#"{
  "data": {"n_dev": 40, "n_test": 40},
  "teacher_training": {"iters": 12, "g1": 6, "g2": 2, "eval_every": 6}
}"#;

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let v = ok(&["gen-data", "--seed", "7", "--n", "1000", "--out", s(out)]);
        assert_eq!(v["train"], 1000);
    }
    for split in ["train", "dev", "test"] {
        let f = format!("{split}.jsonl");
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
    }
}

#[test]
fn end_to_end_with_zero_lambdas_and_induce() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let (data, teachers, student) = (root.join("data"), root.join("teachers"), root.join("student"));
    let common = ["--preset", "desk", "--config", s(&cfg), "--data-dir", s(&data)];
    ok(&[&["gen-data", "--n", "120", "--out", s(&data)][..], &common].concat());
    let t = ok(&[&["train-teacher", "--out", s(&teachers)][..], &common].concat());
    assert_eq!(t.as_object().unwrap().len(), 4);
    assert_eq!(t["gcn-dep"]["layers"], 2);

    let args = ["distill", "--teachers", s(&teachers), "--out", s(&student), "--lambda1", "0", "--lambda2", "0"];
    let args = [&args[..], &common, &["--iters", "10", "--g1", "4", "--g2", "2"]].concat();
    ok(&args);
    let log = std::fs::read_to_string(student.join("log.jsonl")).unwrap();
    let mut aux = 0;
    for line in log.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        if r["metric"] == "loss_syn" || r["metric"] == "loss_sem" {
            assert_eq!(r["value"], 0.0, "{line}");
            aux += 1;
        }
    }
    assert_eq!(aux, 20);
    for f in ["student.syd", "student.meta.json", "trace.txt", "metrics.json"] {
        assert!(student.join(f).exists(), "{f}");
    }

    let e = ok(&[&["eval", "--model", s(&student)][..], &common].concat());
    assert!(e["metrics"]["accuracy"].is_number());

    // a two-token sentence has exactly one binary bracketing
    let (words, con) = parse_bracketed("(S (NP dogs) (VP sleep))").unwrap().remove(0);
    let dep = DepTree::new(vec![2, 0], vec!["nsubj".into(), "root".into()]).unwrap();
    let two = root.join("two.jsonl");
    save_jsonl(&[Example::new(words, dep, con, Payload::Class(0)).unwrap()], &two).unwrap();
    let induced = root.join("induced");
    ok(&[&["induce", "--model", s(&student), "--data", s(&two), "--out", s(&induced)][..], &common].concat());
    let trees = std::fs::read_to_string(induced.join("induced_trees.txt")).unwrap();
    assert_eq!(trees.lines().count(), 1);
    let (leaves, _) = parse_bracketed(trees.trim()).unwrap().remove(0);
    assert_eq!(leaves, ["dogs", "sleep"]);
    let heads = std::fs::read_to_string(induced.join("induced_heads.txt")).unwrap();
    let heads: Vec<usize> = heads.split_whitespace().map(|h| h.parse().unwrap()).collect();
    assert_eq!(heads.len(), 2);
    assert!(heads[0] != 1 && heads[1] != 2);

    // teachers built on other data carry another vocabulary
    let other = root.join("other");
    ok(&["gen-data", "--preset", "desk", "--config", s(&cfg), "--seed", "99", "--n", "60", "--out", s(&other)]);
    let out = run(&["distill", "--preset", "desk", "--config", s(&cfg), "--data-dir", s(&other), "--teachers", s(&teachers), "--out", s(&root.join("x")), "--iters", "10", "--g1", "4", "--g2", "2"]);
    let v = one_line_error(&out);
    assert_eq!(v["error"], "config");
}

#[test]
fn bad_invocations_exit_nonzero_with_one_json_line() {
    let out = run(&["distill", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(one_line_error(&out)["error"], "usage");

    let out = run(&["gen-data", "--lambda1", "-1", "--out", "/tmp/unused"]);
    one_line_error(&out);

    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--model", s(&dir.path().join("missing")), "--data-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    one_line_error(&out);
}

#[test]
fn gradcheck_command_reports_all_families() {
    let v = ok(&["gradcheck", "--instances", "2"]);
    assert_eq!(v["failures"], 0, "{v}");
}
