use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = r#"
[sample]
train_per_type = 50
eval_per_type = 10
[pretrain]
dim = 32
epochs = 100
batch_size = 100
[encoder]
num_layers = 1
d1 = 16
num_heads = 2
dropout = 0.0
k_neg = 64
label_smoothing = 0.1
[train]
batch_size = 32
learning_rate = 0.002
steps = 60
eval_every = 30
"#;

/// Fully observed graph, one-hop training only: small enough to memorize.
const FIT: &str = r#"
[sample]
train_per_type = 60
eval_per_type = 0
[pretrain]
dim = 64
epochs = 200
batch_size = 100
reg_weight = 0.0
[encoder]
num_layers = 1
d1 = 32
num_heads = 2
dropout = 0.0
k_neg = 64
label_smoothing = 0.0
[train]
batch_size = 64
learning_rate = 0.003
steps = 300
eval_every = 0
types = ["1p"]
"#;

fn q2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_q2t"))
        .args(args)
        .env_remove("Q2T_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = q2t(args);
    assert!(
        out.status.success(),
        "q2t {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = q2t(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(code), "q2t {args:?}: {stderr}");
    assert_eq!(stderr.lines().count(), 1, "one-line error expected: {stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    root: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("cfg.toml"), config).unwrap();
        Run { root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn cfg(&self) -> String {
        s(&self.p("cfg.toml")).to_string()
    }

    fn synth(&self, extra: &[&str]) {
        let cfg = self.cfg();
        let data = self.p("data");
        let mut args = vec!["synth", "--config", &cfg, "--out", s(&data)];
        args.extend_from_slice(extra);
        ok(&args);
    }

    fn sample(&self) {
        ok(&["sample", "--config", &self.cfg(), "--data", s(&self.p("data")), "--out", s(&self.p("q"))]);
    }

    fn pretrain(&self, out: &str, seed: &str) {
        ok(&["pretrain", "--config", &self.cfg(), "--seed", seed, "--data", s(&self.p("data")), "--out", s(&self.p(out))]);
    }

    fn train(&self, kge: &str, out: &str) {
        ok(&["train", "--config", &self.cfg(), "--queries", s(&self.p("q")), "--kge", s(&self.p(kge)), "--out", s(&self.p(out))]);
    }

    fn eval(&self, kge: &str, enc: &str, out: &str) -> Output {
        q2t(&[
            "eval", "--config", &self.cfg(), "--queries", s(&self.p("q")), "--kge", s(&self.p(kge)),
            "--encoder", s(&self.p(enc)), "--out", s(&self.p(out)),
        ])
    }
}

fn toy_run() -> Run {
    let run = Run::new(TOY);
    run.synth(&["--entities", "60", "--relations", "5", "--triples", "500"]);
    run.sample();
    run.pretrain("kge", "0");
    run.train("kge", "enc");
    run
}

#[test]
fn pipeline_produces_fourteen_rows_and_reproducibility_files() {
    let run = toy_run();
    let out = run.eval("kge", "enc", "eval");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run.p("eval/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 14, "{csv}");
    assert!(rows[0].starts_with("1p,10,"));
    assert!(fs::read_to_string(run.p("eval/table.txt")).unwrap().contains("A_p"));
    for dir in ["data", "q", "kge", "enc", "eval"] {
        let cfg = fs::read_to_string(run.p(dir).join("config.toml")).unwrap();
        assert!(cfg.contains("[encoder]") && cfg.contains("d1 = 16"), "{dir}: {cfg}");
        assert!(!fs::read_to_string(run.p(dir).join("version.txt")).unwrap().trim().is_empty());
    }
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "stats.txt"] {
        assert!(run.p("q").join(f).exists(), "{f}");
    }
    for f in ["pretrain_log.csv", "link_prediction.csv", "manifest.txt"] {
        assert!(run.p("kge").join(f).exists(), "{f}");
    }

    let text = ok(&[
        "report", s(&run.p("eval/metrics.csv")), s(&run.p("enc/train_log.csv")), s(&run.p("kge/pretrain_log.csv")),
        "--out", s(&run.p("report")),
    ]);
    assert!(text.contains("eval/metrics"), "{text}");
    let svgs = fs::read_dir(run.p("report"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 2);
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    let run = toy_run();
    run.train("kge", "enc2");
    assert!(run.eval("kge", "enc", "e1").status.success());
    assert!(run.eval("kge", "enc2", "e2").status.success());
    let a = fs::read(run.p("e1/metrics.csv")).unwrap();
    let b = fs::read(run.p("e2/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(run.p("enc/train_log.csv")).unwrap(), fs::read(run.p("enc2/train_log.csv")).unwrap());
}

#[test]
fn encoder_refuses_a_different_link_predictor() {
    let run = toy_run();
    run.pretrain("other", "1");
    let out = run.eval("other", "enc", "eval");
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[integrity]:"));
}

#[test]
fn answer_is_topped_by_a_graph_tail() {
    let run = Run::new(FIT);
    run.synth(&["--entities", "30", "--relations", "4", "--triples", "300", "--valid-frac", "0", "--test-frac", "0"]);
    run.sample();
    run.pretrain("kge", "0");
    run.train("kge", "enc");
    let tails: Vec<String> = fs::read_to_string(run.p("data/full.tsv"))
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("7\t3\t").map(str::to_string))
        .collect();
    assert!(!tails.is_empty(), "fixture graph has no (7, 3, ?) edge");
    let text = ok(&[
        "answer", "(7,(3,))", "--kge", s(&run.p("kge")), "--encoder", s(&run.p("enc")),
        "--data", s(&run.p("data")), "-k", "5", "--out", s(&run.p("ans")),
    ]);
    let top: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert!(tails.contains(&top[1].to_string()), "top {top:?} not in {tails:?}\n{text}");
    assert_eq!(top[2], format!("e{}", top[1]));
    assert_eq!(top[4], "yes");
    assert_eq!(text.lines().count(), 6);
    assert!(run.p("ans/answers.tsv").exists());
}

#[test]
fn sweep_writes_one_complete_row_per_value() {
    let run = Run::new(TOY);
    run.synth(&["--entities", "60", "--relations", "5", "--triples", "500"]);
    run.sample();
    run.pretrain("kge", "0");
    let text = ok(&[
        "sweep", "--config", &run.cfg(), "--queries", s(&run.p("q")), "--kge", s(&run.p("kge")),
        "--axis", "ls", "--values", "0.0,0.4", "--set", "train.steps=20", "--out", s(&run.p("sw")),
    ]);
    let csv = fs::read_to_string(run.p("sw/sweep.csv")).unwrap();
    assert!(text.contains(&csv));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(!r.contains("NaN"), "{r}");
    }
    let report = ok(&["report", s(&run.p("sw/sweep.csv")), "--out", s(&run.p("rep"))]);
    assert!(report.contains("A_m"));
    assert!(run.p("rep/sw_sweep_sweep.svg").exists());
}

#[test]
fn ingest_reads_name_maps_and_dedupes() {
    let run = Run::new("");
    fs::write(run.p("ent.tsv"), "alice\t0\nbob\t1\ncarol\t2\n").unwrap();
    fs::write(run.p("rel.tsv"), "knows\t0\nlikes\t1\n").unwrap();
    fs::write(run.p("train.txt"), "0\t0\t1\n0\t0\t1\n1\t1\t2\n").unwrap();
    fs::write(run.p("valid.txt"), "2\t0\t0\n").unwrap();
    fs::write(run.p("test.txt"), "").unwrap();
    let files = |train: &str| {
        vec![
            "ingest".to_string(), "--train".into(), s(&run.p(train)).into(), "--valid".into(),
            s(&run.p("valid.txt")).into(), "--test".into(), s(&run.p("test.txt")).into(), "--entities".into(),
            s(&run.p("ent.tsv")).into(), "--relations".into(), s(&run.p("rel.tsv")).into(), "--out".into(),
            s(&run.p("data")).into(),
        ]
    };
    let args = files("train.txt");
    let text = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(text.contains("entities 3  relations 2  train 2  train+valid 3  full 3"), "{text}");
    assert_eq!(fs::read_to_string(run.p("data/entities.tsv")).unwrap(), "alice\t0\nbob\t1\ncarol\t2\n");

    fs::write(run.p("bad.txt"), "0\t0\t1\n0\t5\t1\n").unwrap();
    let args = files("bad.txt");
    let err = fails(&args.iter().map(String::as_str).collect::<Vec<_>>(), 4);
    assert!(err.contains("bad.txt:2"), "{err}");
}

#[test]
fn error_kinds_have_distinct_exit_codes() {
    let run = Run::new("[encoder]\nwidth = 3\n");
    let dir = run.p("x");
    let err = fails(&["synth", "--config", &run.cfg(), "--out", s(&dir)], 2);
    assert!(err.starts_with("error[config]:") && err.contains("width"), "{err}");
    fails(&["synth", "--set", "encoder.nope=1", "--out", s(&dir)], 2);
    fails(&["synth", "--device", "cuda", "--out", s(&dir)], 2);
    let err = fails(&["pretrain", "--data", s(&run.p("missing")), "--out", s(&dir)], 3);
    assert!(err.starts_with("error[io]:"), "{err}");

    fs::write(run.p("empty.csv"), "").unwrap();
    let err = fails(&["report", s(&run.p("empty.csv")), "--out", s(&dir)], 4);
    assert!(err.contains("no rows"), "{err}");
    fs::write(run.p("header_only.csv"), "type,queries,mrr,hits1,hits3,hits10\n").unwrap();
    let err = fails(&["report", s(&run.p("header_only.csv")), "--out", s(&dir)], 4);
    assert!(err.contains("no rows"), "{err}");

    let err = fails(&["answer", "(7,(3,)", "--kge", s(&dir), "--encoder", s(&dir)], 4);
    assert!(err.starts_with("error[data]:"), "{err}");
}

#[test]
fn data_dir_comes_from_the_environment() {
    let run = Run::new(TOY);
    run.synth(&["--entities", "40", "--relations", "3", "--triples", "300"]);
    let out = Command::new(env!("CARGO_BIN_EXE_q2t"))
        .args(["sample", "--config", &run.cfg(), "--out", s(&run.p("q"))])
        .env("Q2T_DATA_DIR", run.p("data"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.p("q/train.jsonl").exists());
}

#[test]
fn unfrozen_training_writes_and_binds_the_updated_link_predictor() {
    let run = toy_run();
    ok(&[
        "train", "--config", &run.cfg(), "--set", "train.freeze_kge=false", "--set", "train.steps=10",
        "--queries", s(&run.p("q")), "--kge", s(&run.p("kge")), "--out", s(&run.p("joint")),
    ]);
    assert!(run.p("joint/kge/manifest.txt").exists());
    assert!(run.eval("joint/kge", "joint", "e_joint").status.success());
    assert_eq!(run.eval("kge", "joint", "e_stale").status.code(), Some(5));
}
