use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hatlab")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "task.train_utterances=12",
    "--set",
    "task.test_utterances=4",
    "--set",
    "task.lm_sentences=50",
    "--set",
    "train.epochs=1",
    "--set",
    "decode.lambda2_sweep=0,0.5",
];

#[test]
fn generate_train_decode_eval_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("task");
    let ckpt = dir.path().join("hat.ckpt");
    let nbest = dir.path().join("nbest.tsv");
    let diag = dir.path().join("diag");

    let out = ok(&hatlab(&[&["generate", "--out", p(&task)][..], &SMALL].concat()));
    assert!(out.contains("train\t12"));
    for f in ["train/manifest.tsv", "test/lexicon.txt", "lm_corpus.txt", "lm_words.arpa", "lm_labels.arpa", "config.txt"] {
        assert!(task.join(f).exists(), "{f}");
    }

    ok(&hatlab(&[&["train", "--data", p(&task.join("train")), "--out", p(&ckpt)][..], &SMALL].concat()));
    let log = fs::read_to_string(dir.path().join("hat.ckpt.log")).unwrap();
    assert!(log.starts_with("# hatlab train loss=hat"));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch\t")).count(), 2);

    let lm = task.join("lm_words.arpa");
    let report = ok(&hatlab(&[&["decode", "--checkpoint", p(&ckpt), "--data", p(&task.join("test")), "--lm", p(&lm), "--out", p(&nbest)][..], &SMALL].concat()));
    assert!(report.contains("unit\twords"));
    assert_eq!(fs::read_to_string(dir.path().join("nbest.tsv.wer")).unwrap(), report);
    assert!(fs::read_to_string(&nbest).unwrap().lines().count() > 4);

    let eval = ok(&hatlab(&["eval", "--checkpoint", p(&ckpt), "--data", p(&task.join("test"))]));
    assert!(eval.starts_with("loss\t"));

    let context = format!("inf:{}", p(&ckpt));
    let (test, log) = (task.join("test"), dir.path().join("hat.ckpt.log"));
    let args = ["diagnose", "--checkpoint", p(&ckpt), "--data", p(&test), "--lm", p(&lm), "--out", p(&diag), "--train-log", p(&log), "--context", &context];
    ok(&hatlab(&[&args[..], &SMALL].concat()));
    let sweep = fs::read_to_string(diag.join("lambda2_sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    for f in ["linearity.tsv", "prior_cost.tsv", "context.tsv"] {
        assert!(diag.join(f).exists(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");

    assert_eq!(hatlab(&["generate", "--out", p(dir.path()), "--set", "model.nope=1"]).status.code(), Some(2));
    assert_eq!(hatlab(&["generate", "--out", p(dir.path()), "--set", "model.loss=ctc", "--set", "train.mtl=true"]).status.code(), Some(2));
    assert_eq!(hatlab(&["eval", "--checkpoint", p(&missing), "--data", p(&missing)]).status.code(), Some(5));
    assert_eq!(hatlab(&["diagnose", "--data", p(&missing), "--out", p(dir.path())]).status.code(), Some(5));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, "# loss=hat\nnot a checkpoint\n").unwrap();
    assert_eq!(hatlab(&["eval", "--checkpoint", p(&bad), "--data", p(&missing)]).status.code(), Some(3));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.epochs = many\n").unwrap();
    assert_eq!(hatlab(&["generate", "--out", p(dir.path()), "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn selftest_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("selftest.txt");
    let out = ok(&hatlab(&["selftest", "--out", p(&report)]));
    assert_eq!(fs::read_to_string(&report).unwrap(), out);
    assert!(out.lines().all(|l| l.starts_with("PASS\t")));
    assert!(out.lines().count() >= 12);
}
