//! End-to-end runs of the `rrg` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.dim = 8
model.heads = 2
model.image_size = 16
model.patch_size = 8
model.regions = 3
model.repeats = 1
model.text_layers = 1
model.image_layers = 1
model.vtrans_layers = 1
model.decoder_layers = 1
train.epochs = 1
train.batch_size = 4
train.warmup_steps = 1
synth.n = 10
synth.fit_fraction = 1
rl.rollouts = 2
rl.iterations = 2
";

fn rrg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrg"))
        .args(args)
        .env("RRG_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn synth(&self, out: &str) {
        ok(&rrg(&["synth", "--config", &self.s("tiny.cfg"), "--out", &self.s(out)]));
    }

    fn train(&self, corpus: &str, out: &str) {
        ok(&rrg(&[
            "train",
            "--config",
            &self.s("tiny.cfg"),
            "--corpus",
            &self.s(corpus),
            "--out",
            &self.s(out),
        ]));
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_writes_manifests_deterministically() {
    let w = Workspace::new();
    w.synth("a");
    w.synth("b");
    for f in ["train.tsv", "val.tsv", "test.tsv", "fit.tsv", "images/train_00000.pgm"] {
        assert_eq!(read(&w.path("a").join(f)), read(&w.path("b").join(f)), "{f}");
    }
    let train = String::from_utf8(read(&w.path("a/train.tsv"))).unwrap();
    assert_eq!(train.lines().count(), 8);
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let w = Workspace::new();
    w.synth("corpus");
    w.train("corpus", "m1.ckpt");
    w.train("corpus", "m2.ckpt");
    assert_eq!(read(&w.path("m1.ckpt")), read(&w.path("m2.ckpt")));
    assert_eq!(read(&w.path("m1.ckpt.loss.csv")), read(&w.path("m2.ckpt.loss.csv")));
    let log = String::from_utf8(read(&w.path("m1.ckpt.loss.csv"))).unwrap();
    assert!(log.starts_with("epoch,train_total"));
    assert_eq!(log.lines().count(), 2);

    ok(&rrg(&[
        "eval",
        "--checkpoint",
        &w.s("m1.ckpt"),
        "--corpus",
        &w.s("corpus"),
        "--out",
        &w.s("metrics.csv"),
    ]));
    let csv = String::from_utf8(read(&w.path("metrics.csv"))).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    for name in ["bleu4", "rouge_l", "meteor", "ce_f1", "radcliq"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{name},"))), "{name} missing");
    }

    for out in ["r1.ckpt", "r2.ckpt"] {
        ok(&rrg(&[
            "rl",
            "--checkpoint",
            &w.s("m1.ckpt"),
            "--corpus",
            &w.s("corpus"),
            "--out",
            &w.s(out),
        ]));
    }
    assert_eq!(read(&w.path("r1.ckpt")), read(&w.path("r2.ckpt")));
    assert_eq!(read(&w.path("r1.ckpt.rl.csv")), read(&w.path("r2.ckpt.rl.csv")));
    assert_ne!(read(&w.path("r1.ckpt")), read(&w.path("m1.ckpt")));

    let out = rrg(&[
        "generate",
        "--checkpoint",
        &w.s("r1.ckpt"),
        "--image",
        &w.s("corpus/images/test_00000.pgm"),
        "--labels",
    ]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    for reserved in ["[PAD]", "[BOS]", "[EOS]", "[UNK]"] {
        assert!(!text.contains(reserved), "{text}");
    }
    assert_eq!(text.lines().count(), 1 + 5);
}

#[test]
fn zero_iteration_rl_keeps_parameters() {
    let w = Workspace::new();
    w.synth("corpus");
    w.train("corpus", "m.ckpt");
    ok(&rrg(&[
        "rl",
        "--checkpoint",
        &w.s("m.ckpt"),
        "--corpus",
        &w.s("corpus"),
        "--iterations",
        "0",
        "--out",
        &w.s("r.ckpt"),
    ]));
    let a = rrg_core::checkpoint::Checkpoint::load(&w.path("m.ckpt")).unwrap();
    let b = rrg_core::checkpoint::Checkpoint::load(&w.path("r.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    assert!(b.weights.is_some());
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = rrg(&["synth", "--config", "/nonexistent/dir/x.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/dir/x.cfg"));
}

#[test]
fn unknown_key_exits_2() {
    let w = Workspace::new();
    std::fs::write(w.path("bad.cfg"), "model.dimm = 8\n").unwrap();
    let out = rrg(&["synth", "--config", &w.s("bad.cfg"), "--out", &w.s("c")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.dimm"));
    assert!(!w.path("c").exists());
}

#[test]
fn invalid_log_level_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_rrg"))
        .args(["synth", "--n", "10"])
        .env("RRG_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn wrong_image_size_exits_4() {
    let w = Workspace::new();
    w.synth("corpus");
    w.train("corpus", "m.ckpt");
    std::fs::write(w.path("big.pgm"), {
        let mut b = b"P5\n32 32\n255\n".to_vec();
        b.extend(std::iter::repeat_n(40u8, 32 * 32));
        b
    })
    .unwrap();
    let out = rrg(&["generate", "--checkpoint", &w.s("m.ckpt"), "--image", &w.s("big.pgm")]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(w.path("junk.pgm"), b"not an image").unwrap();
    let out = rrg(&["generate", "--checkpoint", &w.s("m.ckpt"), "--image", &w.s("junk.pgm")]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_checkpoint_exits_3() {
    let out = rrg(&["eval", "--checkpoint", "/nonexistent/m.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}
