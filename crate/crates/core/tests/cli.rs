use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;

use valpat::data::{load_manifest, save_manifest, Dataset};
use valpat::evaluation::{embed_dataset, EmbeddingSet, Modality};
use valpat::imaging::FileImageLoader;
use valpat::synthetic::card_dataset;
use valpat::trainer::checkpoint::load_checkpoint;

fn valpat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_valpat"))
        .args(args)
        .env_remove("VALPAT_LOG_LEVEL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = card_dataset(None, 16).unwrap().samples;
        for s in samples.iter_mut() {
            s.attributes = None;
        }
        save_manifest(&Dataset::new(samples, None), &dir.path().join("cards.jsonl")).unwrap();
        std::fs::write(dir.path().join("run.cfg"), "profile = desk\nepochs = 2\n").unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, out: &str, log: &str) -> Output {
        valpat(&[
            "pretrain",
            "--config",
            s(&self.path("run.cfg")),
            "--manifest",
            s(&self.path("cards.jsonl")),
            "--vocab",
            s(&self.path("vocab.tsv")),
            "--seed",
            "3",
            "--out",
            s(&self.path(out)),
            "--log",
            s(&self.path(log)),
        ])
    }

    fn build_vocab(&self) -> Output {
        valpat(&[
            "build-vocab",
            "--manifest",
            s(&self.path("cards.jsonl")),
            "--m",
            "16",
            "--out",
            s(&self.path("vocab.tsv")),
        ])
    }
}

fn assert_single_error_line(o: &Output, kind: &str) {
    assert_eq!(o.status.code(), Some(1), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one line, got {err:?}");
    assert!(lines[0].starts_with(&format!("error kind={kind} message=\"")), "{err}");
}

#[test]
fn build_vocab_writes_m_rows() {
    let f = Fixture::new();
    let o = f.build_vocab();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(f.path("vocab.tsv")).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(text.lines().all(|l| l.split('\t').count() == 4), "{text}");
}

#[test]
fn mine_attributes_matches_manifest_labels() {
    let f = Fixture::new();
    assert!(f.build_vocab().status.success());
    let o = valpat(&[
        "mine-attributes",
        "--manifest",
        s(&f.path("cards.jsonl")),
        "--vocab",
        s(&f.path("vocab.tsv")),
        "--out",
        s(&f.path("labelled.jsonl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let vocab = valpat::mining::AttributeVocabulary::load(&f.path("vocab.tsv")).unwrap();
    let mined = load_manifest(&f.path("labelled.jsonl"), Some(vocab)).unwrap();
    let original = card_dataset(None, 16).unwrap();
    let a: Vec<_> = mined.samples.iter().map(|s| s.attributes.clone()).collect();
    let b: Vec<_> = original.samples.iter().map(|s| s.attributes.clone()).collect();
    assert_eq!(a, b);
}

#[test]
fn eval_reid_on_perfect_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let e = Array2::from_shape_fn((4, 4), |(i, j)| f64::from(u8::from(i == j)));
    let set = EmbeddingSet::new(e, vec![10, 11, 12, 13], Some(vec![0, 0, 0, 0])).unwrap();
    let q = dir.path().join("q.emb");
    let g = dir.path().join("g.emb");
    set.save(&q).unwrap();
    EmbeddingSet::new(set.embeddings().clone(), set.ids().to_vec(), Some(vec![1, 1, 1, 1]))
        .unwrap()
        .save(&g)
        .unwrap();
    let json = dir.path().join("r.json");
    let o = valpat(&["eval-reid", "--query", s(&q), "--gallery", s(&g), "--max-rank", "3", "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let first = out.lines().next().unwrap();
    assert!(first.contains("mAP=1.0000"), "{out}");
    assert!(first.contains("rank1=1.0000"), "{out}");
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(rec["task"], "reid");

    // Same camera on both sides makes every true match junk.
    let o = valpat(&["eval-reid", "--query", s(&q), "--gallery", s(&q)]);
    assert_single_error_line(&o, "invalid_input");
    assert!(stderr(&o).contains("0,1,2,3"));
}

#[test]
fn unknown_command_prints_usage_and_exits_2() {
    let o = valpat(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"), "{}", stderr(&o));
    assert_eq!(valpat(&[]).status.code(), Some(2));
    assert_eq!(valpat(&["eval-reid"]).status.code(), Some(2));
    assert_eq!(valpat(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_failures_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.emb");
    assert_single_error_line(&valpat(&["eval-reid", "--query", s(&missing)]), "io");

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"image_ref\": 5}\n").unwrap();
    assert_single_error_line(
        &valpat(&["build-vocab", "--manifest", s(&bad), "--m", "3", "--out", s(&dir.path().join("v.tsv"))]),
        "parse",
    );

    let ck = dir.path().join("x.ckpt");
    std::fs::write(&ck, b"VALPATCK\x01\x00\x00\x00short").unwrap();
    assert_single_error_line(&valpat(&["inspect-checkpoint", "--checkpoint", s(&ck)]), "corrupt");
}

#[test]
fn invalid_log_level_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_valpat"))
        .args(["inspect-checkpoint", "--checkpoint", "/nonexistent"])
        .env("VALPAT_LOG_LEVEL", "chatty")
        .output()
        .unwrap();
    assert_single_error_line(&o, "config");
}

#[test]
fn pretrain_is_reproducible_and_embed_matches_library() {
    let f = Fixture::new();
    assert!(f.build_vocab().status.success());
    for (out, log) in [("a.ckpt", "a.log"), ("b.ckpt", "b.log")] {
        let o = f.pretrain(out, log);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let la = std::fs::read(f.path("a.log")).unwrap();
    assert_eq!(la.iter().filter(|&&b| b == b'\n').count(), 2);
    assert_eq!(la, std::fs::read(f.path("b.log")).unwrap());
    assert_eq!(std::fs::read(f.path("a.ckpt")).unwrap(), std::fs::read(f.path("b.ckpt")).unwrap());

    let info = valpat(&["inspect-checkpoint", "--checkpoint", s(&f.path("a.ckpt"))]);
    assert!(stdout(&info).starts_with("format_version=1 step=2 "), "{}", stdout(&info));

    let o = valpat(&[
        "embed",
        "--checkpoint",
        s(&f.path("a.ckpt")),
        "--manifest",
        s(&f.path("cards.jsonl")),
        "--modality",
        "text",
        "--out",
        s(&f.path("t.emb")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let state = load_checkpoint(&f.path("a.ckpt")).unwrap();
    let ds = load_manifest(&f.path("cards.jsonl"), None).unwrap();
    let lib = embed_dataset(&state, &ds, Modality::Text, &FileImageLoader).unwrap();
    assert_eq!(std::fs::read(f.path("t.emb")).unwrap(), lib.to_bytes());
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let f = Fixture::new();
    assert!(f.build_vocab().status.success());
    assert!(f.pretrain("a.ckpt", "a.log").status.success());
    let o = valpat(&[
        "pretrain",
        "--config",
        s(&f.path("run.cfg")),
        "--manifest",
        s(&f.path("cards.jsonl")),
        "--vocab",
        s(&f.path("vocab.tsv")),
        "--seed",
        "4",
        "--out",
        s(&f.path("b.ckpt")),
        "--resume",
        s(&f.path("a.ckpt")),
    ]);
    assert_single_error_line(&o, "config");
}
