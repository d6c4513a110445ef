use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glmask::checkpoint::{file_sha256, Checkpoint};
use glmask::data::{load_data_dir, load_tsv, save_tsv};
use glmask::metrics::translate;
use tempfile::TempDir;

const TINY: &str = "\
data.n_train = 200
data.n_clean = 20
data.n_dev = 10
data.n_test = 10
data.vocab_size = 12
data.min_len = 2
data.max_len = 6
noise.copied = 0.2
noise.misaligned = 0.1
noise.junk = 0.1
model.num_layers = 1
model.num_heads = 2
model.d_model = 8
model.d_ff = 16
model.max_positions = 16
train.batch_size = 4
train.warmup_steps = 10
train.checkpoint_every = 10
train.eval_sentences = 5
";

fn glmask(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_glmask"));
    cmd.args(args).env_remove("GLMASK_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        let f = Fixture { dir };
        ok(glmask(&["gen-data", "--out", f.p("data").as_str(), "--config", f.p("tiny.cfg").as_str()], &[]));
        f
    }

    fn p(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let (out, cfg, data) = (self.p(out), self.p("tiny.cfg"), self.p("data"));
        let mut args = vec!["train", "--data-dir", &data, "--out", &out, "--config", &cfg];
        args.extend_from_slice(extra);
        ok(glmask(&args, &[]))
    }
}

fn provenance_counts(path: &Path) -> std::collections::HashMap<String, usize> {
    let mut m = std::collections::HashMap::new();
    for line in fs::read_to_string(path).unwrap().lines() {
        *m.entry(line.split('\t').nth(2).unwrap().to_string()).or_default() += 1;
    }
    m
}

#[test]
fn gen_data_writes_noise_counts_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let stdout = ok(glmask(
        &["gen-data", "--out", out.to_str().unwrap(), "--n", "10000", "--noise-copied", "0.2", "--seed", "3"],
        &[],
    ));
    assert!(stdout.contains("\"copied\":2000"), "{stdout}");
    assert_eq!(provenance_counts(&out.join("train.tsv"))["copied"], 2000);
    for f in ["train.tsv", "clean.tsv", "dev.tsv", "test.tsv", "src.vocab", "trg.vocab", "resolved.cfg"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn gen_data_is_seeded_and_guards_existing_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let args = |p: &PathBuf| vec!["gen-data".to_string(), "--out".into(), p.display().to_string(), "--n".into(), "300".into()];
    let run = |p: &PathBuf, env: &[(&str, &str)]| {
        let a = args(p);
        ok(glmask(&a.iter().map(String::as_str).collect::<Vec<_>>(), env))
    };
    run(&a, &[("GLMASK_SEED", "5")]);
    run(&b, &[("GLMASK_SEED", "5")]);
    run(&c, &[("GLMASK_SEED", "6")]);
    let read = |p: &PathBuf| fs::read(p.join("train.tsv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let again = args(&a);
    let again: Vec<&str> = again.iter().map(String::as_str).collect();
    assert_eq!(glmask(&again, &[]).status.code(), Some(1));
    let mut forced = again.clone();
    forced.push("--force");
    ok(glmask(&forced, &[]));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(glmask(&["gen-data", "--n", "10"], &[]).status.code(), Some(2));
    assert_eq!(glmask(&["check", "--trials", "0"], &[]).status.code(), Some(2));
    assert_eq!(
        glmask(&["train", "--mode", "bogus", "--data-dir", "x", "--out", "y"], &[]).status.code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = glmask(&["gen-data", "--out", out.to_str().unwrap(), "--set", "no.such.key=1"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_schedule_determinism_and_reproduction() {
    let f = Fixture::new();
    f.train("g", &["--mode", "glmask-word", "--total-steps", "1000", "--set", "train.checkpoint_every=500"]);
    let first = fs::read_to_string(f.p("g/alignment.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().starts_with("{\"step\":800,"), "{}", &first[..80]);
    assert_eq!(first.lines().count(), 200);

    let a = f.train("v1", &["--mode", "vanilla", "--total-steps", "30"]);
    f.train("v2", &["--mode", "vanilla", "--total-steps", "30"]);
    assert!(a.lines().next().unwrap().contains("dev_token_accuracy"));
    let hash = |d: &str| file_sha256(Path::new(&f.p(d)).join("final.ckpt").as_path()).unwrap();
    assert_eq!(hash("v1"), hash("v2"));
    assert!(a.contains(&hash("v1")));

    // The resolved config alone reproduces the run.
    let (resolved, data, out) = (f.p("v1/resolved.cfg"), f.p("data"), f.p("v3"));
    ok(glmask(&["train", "--data-dir", &data, "--out", &out, "--config", &resolved], &[]));
    assert_eq!(hash("v1"), hash("v3"));

    let (data, out) = (f.p("data"), f.p("ft"));
    let o = glmask(&["train", "--mode", "finetune", "--data-dir", &data, "--out", &out], &[]);
    assert_ne!(o.status.code(), Some(0));
    let init = f.p("v1/final.ckpt");
    f.train("ft", &["--mode", "finetune", "--total-steps", "30", "--init-checkpoint", &init]);
    let ft = Checkpoint::load(Path::new(&f.p("ft/final.ckpt"))).unwrap();
    assert_eq!(ft.state.unwrap().step, 33);
}

#[test]
fn eval_reports_metrics_without_touching_the_checkpoint() {
    let f = Fixture::new();
    f.train(
        "v",
        &[
            "--mode", "vanilla", "--total-steps", "600", "--set", "model.d_model=32", "--set", "model.d_ff=64",
            "--set", "train.peak_lr=0.003",
        ],
    );
    let ckpt = f.p("v/final.ckpt");
    let before = file_sha256(Path::new(&ckpt)).unwrap();

    // References set to the model's own output score perfectly.
    let model = Checkpoint::load(Path::new(&ckpt)).unwrap();
    let splits = load_data_dir(Path::new(&f.p("data"))).unwrap();
    let hyps = translate(&model.params, &model.config, &splits.test, 12).unwrap();
    let mut own = splits.test.with_pairs(Vec::new());
    for (pair, h) in splits.test.pairs.iter().zip(&hyps) {
        if !h.is_empty() && h.len() < 12 && h.iter().all(|&id| id >= 4) {
            let mut pair = pair.clone();
            pair.target = splits.test.decode_target(h);
            own.pairs.push(pair);
        }
    }
    assert!(!own.is_empty(), "{hyps:?}");
    let own_path = f.dir.path().join("own.tsv");
    save_tsv(&own, &own_path).unwrap();
    assert_eq!(load_tsv(&own_path).unwrap().len(), own.len());

    let out = ok(glmask(&["eval", "--checkpoint", &ckpt, "--data", own_path.to_str().unwrap(), "--metric", "bleu"], &[]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["bleu"]["bleu"].as_f64().unwrap(), 100.0);

    let test = f.p("data/test.tsv");
    let out = ok(glmask(&["eval", "--checkpoint", &ckpt, "--data", &test, "--metric", "both"], &[]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v.as_object().unwrap().len(), 2);
    assert!((0.0..=1.0).contains(&v["acc"].as_f64().unwrap()));
    assert_eq!(file_sha256(Path::new(&ckpt)).unwrap(), before);

    let o = glmask(&["eval", "--checkpoint", &f.p("v/none.ckpt"), "--data", &test], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_writes_the_bundle() {
    let f = Fixture::new();
    f.train("v", &["--mode", "vanilla", "--total-steps", "20"]);
    let (ckpt, data, out) = (f.p("v/final.ckpt"), f.p("data"), f.p("report"));
    let before = file_sha256(Path::new(&ckpt)).unwrap();
    let o = glmask(
        &[
            "analyze", "--checkpoint", &ckpt, "--data-dir", &data, "--out", &out, "--granularity", "sent",
            "--top-k", "100", "--min-count", "1", "--examples", "3",
        ],
        &[],
    );
    let stderr = String::from_utf8_lossy(&o.stderr).to_string();
    let stdout = ok(o);
    assert!(stdout.contains("\"provenance\":\"copied\""));
    assert!(stderr.to_lowercase().contains("warn"), "{stderr}");

    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.p("report/stats.json")).unwrap()).unwrap();
    let per_sentence = stats["per_sentence"].as_object().unwrap();
    assert_eq!(per_sentence.len(), 200);
    for s in per_sentence.values() {
        let x = s["unmasked_fraction"].as_f64().unwrap();
        assert!(x == 0.0 || x == 1.0);
    }
    let eligible = stats["per_word"].as_object().unwrap().len();
    let profiles = fs::read_to_string(f.p("report/word_profiles.csv")).unwrap();
    let top = profiles.lines().filter(|l| l.starts_with("top,")).count();
    assert_eq!(top, eligible);
    assert!(fs::read_to_string(f.p("report/provenance.csv")).unwrap().contains("copied"));
    let examples = fs::read_to_string(f.p("report/examples.txt")).unwrap();
    assert_eq!(examples.lines().filter(|l| l.starts_with('#')).count(), 3);
    assert!(Path::new(&f.p("report/resolved.cfg")).exists());
    assert_eq!(file_sha256(Path::new(&ckpt)).unwrap(), before);
}

#[test]
fn check_passes_and_repeats() {
    let a = ok(glmask(&["check", "--seed", "2", "--trials", "1"], &[]));
    assert_eq!(a.lines().count(), 6);
    assert!(a.lines().all(|l| l.starts_with("PASS ")), "{a}");
    let b = ok(glmask(&["check", "--trials", "1"], &[("GLMASK_SEED", "2")]));
    assert_eq!(a, b);
}
