use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use audiomamba::train::{write_synthetic_corpus, RunConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_audiomamba"));
    c.env_remove("AUDIOMAMBA_THREADS").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn audiomamba")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg")
}

fn toy_corpus(dir: &Path) -> PathBuf {
    let cfg = RunConfig::load(toy_config()).unwrap();
    write_synthetic_corpus(&dir.join("data"), 8, cfg.model.n_classes, &cfg.frontend(), 0).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn params_total(args: &[&str]) -> (usize, usize) {
    let mut full = vec!["params"];
    full.extend_from_slice(args);
    let o = run(&full);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut total = 0;
    let mut parts = 0;
    for line in text.lines() {
        let (k, v) = line.split_once(' ').unwrap();
        match k {
            "variant" => {}
            "total" => total = v.parse().unwrap(),
            _ => parts += v.parse::<usize>().unwrap(),
        }
    }
    (total, parts)
}

#[test]
fn toy_config_file_matches_library_preset() {
    assert_eq!(RunConfig::load(toy_config()).unwrap(), RunConfig::toy(8));
}

#[test]
fn variant_config_files_match_presets() {
    use audiomamba::model::ModelConfig;
    let dir = toy_config().parent().unwrap().to_path_buf();
    for (name, want) in [("tiny", ModelConfig::tiny()), ("micro", ModelConfig::micro()), ("nano", ModelConfig::nano())] {
        let cfg = RunConfig::load(dir.join(format!("{name}.cfg"))).unwrap();
        assert_eq!(cfg.model, want, "{name}");
        let (total, _) = params_total(&["--config", dir.join(format!("{name}.cfg")).to_str().unwrap()]);
        let text = fs::read_to_string(dir.join(format!("{name}.cfg"))).unwrap();
        assert!(text.lines().next().unwrap().contains(&format!(" {total} ")), "{name}: header lacks {total}");
    }
}

#[test]
fn params_budgets_and_breakdown() {
    let (nano, parts) = params_total(&["--set", "variant=nano"]);
    assert_eq!(nano, parts);
    assert!((nano as f64 / 5.2e6 - 1.0).abs() <= 0.15, "{nano}");
    let (micro, _) = params_total(&["--set", "variant=micro"]);
    let (tiny, parts) = params_total(&["--set", "variant=tiny"]);
    assert_eq!(tiny, parts);
    assert!(tiny > micro && micro > nano);
}

#[test]
fn config_errors_exit_one_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "variant=nano\n# comment\nlr=0.1\nnot_a_key=3\n").unwrap();
    let o = run(&["params", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.cfg:4"), "{}", stderr(&o));

    fs::write(&cfg, "lr 0.1\n").unwrap();
    let o = run(&["params", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.cfg:1"));

    assert_eq!(run(&["params", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path());
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        s(&toy_config()),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--set",
        "total_steps=80",
        "--set",
        "eval_every=40",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["last.amba", "last.state.amba", "best.amba", "train_log.csv", "run.log"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,grad_norm,lr"));
    assert_eq!(log.lines().count(), 81);
    let run_log = fs::read_to_string(out.join("run.log")).unwrap();
    for (k, v) in RunConfig::toy(8).echo() {
        let want = if k == "total_steps" || k == "eval_every" { None } else { Some(format!("{k}={v}")) };
        if let Some(line) = want {
            assert!(run_log.lines().any(|l| l == line), "run.log lacks {line}");
        }
    }

    let best = out.join("best.amba");
    let eval = |mode: &str| run(&["eval", "--checkpoint", s(&best), "--manifest", s(&manifest), "--mode", mode]);
    let a = eval("multilabel");
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).lines().any(|l| l == "mAP 1.000000"), "{}", stdout(&a));
    assert_eq!(a.stdout, eval("multilabel").stdout);

    let single = stdout(&eval("singlelabel"));
    for key in ["f1_micro ", "f1_macro ", "accuracy "] {
        assert!(single.lines().any(|l| l.starts_with(key)), "{single}");
    }

    let clip = manifest.parent().unwrap().join("clip_005.wav");
    let o = run(&["infer", "--checkpoint", s(&best), "--top", "1", s(&clip)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ranked = stdout(&o);
    let (_, top) = ranked.trim_end().split_once('\t').unwrap();
    assert!(top.starts_with("5:"), "{ranked}");
}

#[test]
fn resume_reproduces_the_uninterrupted_log() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path());
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let config = toy_config();
    let common = ["--config", s(&config), "--manifest", s(&manifest), "--set", "total_steps=6", "--set", "cutmix_prob=0.5"];
    let mut a = vec!["train", "--out", s(&full)];
    a.extend_from_slice(&common);
    assert!(run(&a).status.success());

    let mut b = vec!["train", "--out", s(&split), "--stop-at", "3"];
    b.extend_from_slice(&common);
    assert!(run(&b).status.success());
    let last = split.join("last.amba");
    let mut c = vec!["train", "--out", s(&split), "--checkpoint", s(&last)];
    c.extend_from_slice(&common);
    let o = run(&c);
    assert!(o.status.success(), "{}", stderr(&o));

    let la = fs::read_to_string(full.join("train_log.csv")).unwrap();
    let lb = fs::read_to_string(split.join("train_log.csv")).unwrap();
    assert_eq!(la, lb);
    assert_eq!(fs::read(full.join("last.amba")).unwrap(), fs::read(split.join("last.amba")).unwrap());
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path());
    let bad = dir.path().join("data/bad.csv");
    fs::write(&bad, "path,labels\nclip_000.wav,0\nclip_001.wav,99\n").unwrap();
    let o = run(&["train", "--config", s(&toy_config()), "--manifest", s(&bad), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));

    let junk = dir.path().join("junk.amba");
    fs::write(&junk, b"definitely not an archive").unwrap();
    let o = run(&["eval", "--checkpoint", s(&junk), "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("archive format error"), "{}", stderr(&o));

    let o = run(&["train", "--config", s(&toy_config()), "--manifest", "/nonexistent/m.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_emits_one_row_per_length() {
    let o = run(&["bench", "--lengths", "64", "--dim", "8", "--state", "4", "--reps", "1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = run(&["bench", "--lengths", "32,64,128", "--dim", "8", "--state", "4", "--reps", "1", "--out", s(&csv)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text, stdout(&o));
    assert_eq!(run(&["bench", "--lengths", "128,64"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_adjoint() {
    let o = run(&["gradcheck", "--scope", "scan"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let line = stdout(&o);
    let err: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{line}");

    let o = run(&["gradcheck", "--scope", "scan", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));

    let t = Instant::now();
    let o = run(&["gradcheck", "--scope", "model"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(t.elapsed().as_secs_f64() < 60.0);

    assert_eq!(run(&["gradcheck", "--scope", "everything"]).status.code(), Some(1));
}

#[test]
fn thread_cap_is_validated() {
    let o = bin().args(["params"]).env("AUDIOMAMBA_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().args(["params"]).env("AUDIOMAMBA_THREADS", "1").output().unwrap();
    assert!(o.status.success());
}
