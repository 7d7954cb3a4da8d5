use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use audiomamba::autodiff::sigmoid;
use audiomamba::bench::{growth_ratios, run_scaling, to_csv, BenchConfig};
use audiomamba::frontend::{wav_features, FeatureCache};
use audiomamba::gradcheck::{check_scope, GradScope};
use audiomamba::model::{count_params, load_checkpoint, param_breakdown, Model, Strictness};
use audiomamba::scan::set_adjoint_fault;
use audiomamba::train::{
    evaluate_manifest, fit, write_synthetic_corpus, Dataset, EvalMode, FitOptions, Manifest, RunConfig, Split,
    Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
};
use audiomamba::Error;

use crate::ConfigArgs;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

/// A failed command: message and process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::ConfigParse { .. } | Error::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure { code: EXIT_DATA, msg: format!("writing {}: {e}", path.display()) })
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
fn run_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cache(dir: Option<&Path>) -> Result<Option<FeatureCache>, Failure> {
    Ok(dir.map(FeatureCache::new).transpose()?)
}

pub struct TrainPaths {
    pub manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
}

pub fn train(args: &ConfigArgs, paths: &TrainPaths, mode: EvalMode, stop_at: Option<u64>) -> CmdResult {
    let (manifest, eval_manifest, checkpoint) = (paths.manifest.as_path(), paths.eval_manifest.as_deref(), paths.checkpoint.as_deref());
    let (out, cache_dir) = (paths.out.as_path(), paths.cache.as_deref());
    let mut cfg = run_config(args)?;
    let mut trainer = match checkpoint {
        Some(path) => {
            let t = Trainer::resume(path, cfg.train.clone())?;
            if t.model.config != cfg.model {
                log::warn!("checkpoint model configuration overrides the run configuration");
                cfg.model = t.model.config.clone();
            }
            t
        }
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let cache = cache(cache_dir)?;
    let frontend = cfg.frontend();
    let n_classes = cfg.model.n_classes;
    let train_set = Dataset::from_manifest(&Manifest::load(manifest, n_classes, Split::Train)?, &frontend, cache.as_ref(), cfg.data.skip_unreadable)?;
    report_skipped(&train_set);
    let eval_set = match eval_manifest {
        Some(p) => {
            let ds = Dataset::from_manifest(&Manifest::load(p, n_classes, Split::Eval)?, &frontend, cache.as_ref(), cfg.data.skip_unreadable)?;
            report_skipped(&ds);
            Some(ds)
        }
        None => None,
    };

    fs::create_dir_all(out).map_err(|e| Failure { code: EXIT_DATA, msg: format!("creating {}: {e}", out.display()) })?;
    let mut run_log = String::new();
    let _ = writeln!(run_log, "# command train");
    let _ = writeln!(run_log, "# manifest {}", manifest.display());
    if let Some(p) = checkpoint {
        let _ = writeln!(run_log, "# resumed_from {} at step {}", p.display(), trainer.step());
    }
    for (k, v) in cfg.echo() {
        let _ = writeln!(run_log, "{k}={v}");
    }
    let opts = FitOptions { out_dir: Some(out.to_path_buf()), eval_mode: mode, stop_at, ..Default::default() };
    let summary = fit(&mut trainer, &train_set, Some(eval_set.as_ref().unwrap_or(&train_set)), &opts)?;
    for (step, map) in &summary.evals {
        let _ = writeln!(run_log, "# eval step {step} mAP {map:.6}");
    }
    write(&out.join("run.log"), &run_log)?;

    println!("steps {}", trainer.step());
    if let Some(last) = summary.steps.last() {
        println!("final_loss {:.6}", last.loss);
    }
    if let Some(best) = summary.best_map {
        println!("best_mAP {best:.6}");
    }
    println!("log {}", out.join(LOG_FILE).display());
    println!("checkpoint {}", out.join(LAST_CHECKPOINT).display());
    println!("best_checkpoint {}", out.join(BEST_CHECKPOINT).display());
    Ok(())
}

fn report_skipped(ds: &Dataset) {
    for (row, why) in &ds.skipped {
        eprintln!("skipped row {row}: {why}");
    }
}

/// Run configuration whose model part comes from the checkpoint.
fn checkpoint_run(args: &ConfigArgs, checkpoint: &Path) -> Result<(Model<f32>, RunConfig), Failure> {
    let (model, _) = load_checkpoint::<f32>(checkpoint, Strictness::Strict)?;
    let mut cfg = run_config(args)?;
    cfg.model = model.config.clone();
    Ok((model, cfg))
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, manifest: &Path, mode: EvalMode, out: Option<&Path>, cache_dir: Option<&Path>) -> CmdResult {
    let (model, cfg) = checkpoint_run(args, checkpoint)?;
    let manifest = Manifest::load(manifest, cfg.model.n_classes, Split::Eval)?;
    let cache = cache(cache_dir)?;
    let (report, data) = evaluate_manifest(&model, &manifest, &cfg.frontend(), cache.as_ref(), cfg.data.skip_unreadable, mode)?;
    report_skipped(&data);
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure { code: EXIT_DATA, msg: format!("creating {}: {e}", dir.display()) })?;
        write(&dir.join("eval_report.txt"), &text)?;
    }
    Ok(())
}

pub fn infer(args: &ConfigArgs, checkpoint: &Path, mode: EvalMode, top: usize, files: &[PathBuf]) -> CmdResult {
    let (model, cfg) = checkpoint_run(args, checkpoint)?;
    let frontend = cfg.frontend();
    for path in files {
        let mel = wav_features(path, &frontend, None)?;
        let logits = model.predict(&mel.values)?;
        let scores = match mode {
            EvalMode::MultiLabel => logits.data().iter().map(|&z| sigmoid(z as f64)).collect(),
            EvalMode::SingleLabel => softmax(logits.data()),
        };
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let shown: Vec<String> = ranked.iter().take(top).map(|(c, s)| format!("{c}:{s:.6}")).collect();
        println!("{}\t{}", path.display(), shown.join(" "));
    }
    Ok(())
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn params(args: &ConfigArgs) -> CmdResult {
    let cfg = run_config(args)?;
    let m = &cfg.model;
    println!("variant {}", m.variant);
    println!("total {}", count_params(m));
    for (group, n) in param_breakdown(m) {
        println!("{group} {n}");
    }
    Ok(())
}

pub fn bench(lengths: &[usize], dim: usize, state: usize, reps: usize, out: Option<&Path>) -> CmdResult {
    let cfg = BenchConfig { dim, state, reps, ..Default::default() };
    let rows = run_scaling(lengths, &cfg)?;
    let csv = to_csv(&rows);
    print!("{csv}");
    for (l, scan, attn) in growth_ratios(&rows) {
        eprintln!("L={l}: scan x{scan:.3}, attention x{attn:.3}");
    }
    if let Some(path) = out {
        write(path, &csv)?;
    }
    Ok(())
}

pub fn gradcheck(scope: &str, probes: usize, seed: u64, inject_fault: bool) -> CmdResult {
    let scopes: Vec<GradScope> = if scope == "all" { GradScope::ALL.to_vec() } else { vec![scope.parse()?] };
    set_adjoint_fault(inject_fault);
    let mut failed = Vec::new();
    for s in scopes {
        let t = Instant::now();
        let report = check_scope(s, probes, seed)?;
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<10} max_rel_err {:.3e} probes {} seconds {:.2} {verdict}",
            s.name(),
            report.max_rel_err(),
            report.probes(),
            t.elapsed().as_secs_f64()
        );
        if !report.passed() {
            failed.push(s.name());
        }
    }
    set_adjoint_fault(false);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERIFY, msg: format!("gradient check failed: {}", failed.join(", ")) })
    }
}

pub fn toy_corpus(args: &ConfigArgs, out: &Path, clips: usize) -> CmdResult {
    let cfg = run_config(args)?;
    let manifest = write_synthetic_corpus(out, clips, cfg.model.n_classes, &cfg.frontend(), cfg.train.seed)?;
    println!("{}", manifest.display());
    Ok(())
}
