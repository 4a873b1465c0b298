use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskrefine::checkpoint::{load_checkpoint, save_checkpoint};
use maskrefine::config::RunConfig;
use maskrefine::dataset::{read_dataset, write_dataset};
use maskrefine::eval::{eval_scenes, evaluate_scenes, scene_image, EvalRow, Proposer};
use maskrefine::format::{read_gray_pgm, read_tensor, write_json, write_json_lines, write_pgm};
use maskrefine::manifest::{hash_artifacts, RunManifest};
use maskrefine::{bench, experiment};
use maskrefine_core::checks::{equivalence_suite, gradient_suite};
use maskrefine_core::metrics::binarize;
use maskrefine_core::network::{HeadVariant, MaskMode, Mode};
use maskrefine_core::synth::make_dataset;
use maskrefine_core::train;
use serde_json::json;

const GRAD_TOL: f64 = 1e-4;
const EQUIV_FWD_TOL: f64 = 1e-9;
const EQUIV_BWD_TOL: f64 = 1e-8;

/// Exit status for a check that ran but did not pass.
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "maskrefine", version, about = "Mask refinement network: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalMode {
    Coarse,
    Refined,
    Both,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum InferMode {
    Coarse,
    Refined,
}

impl From<InferMode> for MaskMode {
    fn from(m: InferMode) -> Self {
        match m {
            InferMode::Coarse => MaskMode::Coarse,
            InferMode::Refined => MaskMode::Refined,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset on disk.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
    },
    /// Train stage 1 (coarse mask + score) or stage 2 (refinement).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint directory (required for stage 2).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Dataset directory written by `synth`; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Proposal quality of a checkpoint on scenes and validation patches.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalMode::Both)]
        mode: EvalMode,
        #[arg(long)]
        topn: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random configurations per op.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Refinement module against its refactored form.
    Equiv {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Time the head variants.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "A,B,C")]
        heads: Vec<HeadVariant>,
        /// Timed repetitions per head.
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Proposals for one image: top-N masks as PGM plus a JSON list.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        /// Grayscale PGM or tensor file; an evaluation scene when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InferMode::Refined)]
        mode: InferMode,
        #[arg(long)]
        topn: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    // usage errors are validation errors (1); clap would exit with 2
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e);
            let numerical = e.chain().any(|c| {
                c.downcast_ref::<maskrefine::Error>().is_some_and(|e| e.is_numerical())
                    || matches!(
                        c.downcast_ref::<maskrefine_core::Error>(),
                        Some(maskrefine_core::Error::NonFinite { .. } | maskrefine_core::Error::Diverged { .. })
                    )
            });
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth { common, n_train, n_val } => synth(&common, n_train, n_val),
        Command::Train { common, stage, from, data } => train_cmd(&common, stage, from.as_deref(), data.as_deref()),
        Command::Eval { common, from, data, mode, topn, threshold } => {
            eval_cmd(&common, from.as_deref(), data.as_deref(), mode, topn, threshold)
        }
        Command::Gradcheck { common, trials } => gradcheck(&common, trials),
        Command::Equiv { common, trials } => equiv(&common, trials),
        Command::Bench { common, heads, trials } => bench_cmd(&common, &heads, trials),
        Command::Infer { common, from, image, mode, topn, threshold } => {
            infer(&common, &from, image.as_deref(), mode, topn, threshold)
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        bail!("--threshold must be in (0, 1), got {}", t);
    }
    Ok(())
}

fn synth(common: &Common, n_train: Option<usize>, n_val: Option<usize>) -> Result<u8> {
    let mut cfg = common.run_config()?;
    cfg.n_train = n_train.unwrap_or(cfg.n_train);
    cfg.n_val = n_val.unwrap_or(cfg.n_val);
    cfg.validate()?;
    let out = common.out_dir("data");
    let ds = make_dataset(&cfg.sample, common.seed, cfg.n_train, cfg.n_val)?;
    let written = write_dataset(&ds, &out)?;
    let mut m = RunManifest::new("synth", common.seed, json!({ "n_train": cfg.n_train, "n_val": cfg.n_val }), cfg);
    m.artifacts = hash_artifacts(&out, &written)?;
    m.write(&out)?;
    println!("wrote {} train / {} val samples to {}", ds.train.len(), ds.val.len(), out.display());
    Ok(0)
}

fn load_data(cfg: &RunConfig, seed: u64, data: Option<&Path>) -> Result<(maskrefine_core::synth::Dataset, Vec<maskrefine::manifest::Artifact>)> {
    match data {
        Some(dir) => {
            let ds = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
            if ds.config != cfg.sample {
                bail!("dataset {} was generated with a different sample config", dir.display());
            }
            let inputs = hash_artifacts(dir, &["dataset.json".into(), "manifest.jsonl".into()])?;
            Ok((ds, inputs))
        }
        None => Ok((experiment::dataset(cfg, seed)?, Vec::new())),
    }
}

fn train_cmd(common: &Common, stage: u8, from: Option<&Path>, data: Option<&Path>) -> Result<u8> {
    let cfg = common.run_config()?;
    let out = common.out_dir(&format!("stage{}", stage));
    let (ds, mut inputs) = load_data(&cfg, common.seed, data)?;
    let run = match (stage, from) {
        (1, None) => experiment::stage1(&cfg, &ds, common.seed)?,
        (1, Some(_)) => bail!("stage 1 starts from scratch; --from is only for stage 2"),
        (_, None) => bail!("stage 2 needs --from <stage-1 checkpoint>"),
        (_, Some(ckpt)) => {
            let (base, manifest) = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            if manifest.stage != 1 || base.mode() != Mode::FeedforwardOnly {
                bail!("{} is not a stage-1 checkpoint", ckpt.display());
            }
            inputs.extend(hash_artifacts(ckpt, &["manifest.json".into(), "params.bin".into()])?);
            experiment::stage2(&base, cfg.model.refinement.kind, &cfg, &ds)?
        }
    };
    save_checkpoint(&run.model, stage, &out.join("checkpoint"))?;
    write_json_lines(&out.join("log.jsonl"), &run.state.log)?;
    let files = ["checkpoint/manifest.json", "checkpoint/params.bin", "log.jsonl"].map(String::from);
    let mut m = RunManifest::new("train", common.seed, json!({ "stage": stage }), cfg);
    m.inputs = inputs;
    m.artifacts = hash_artifacts(&out, &files)?;
    m.write(&out)?;
    let last = run.state.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("stage {} done in {:.1}s, final train loss {:.5}, checkpoint in {}", stage, run.seconds, last, out.join("checkpoint").display());
    Ok(0)
}

fn eval_cmd(common: &Common, from: Option<&Path>, data: Option<&Path>, mode: EvalMode, topn: Option<usize>, threshold: f64) -> Result<u8> {
    check_threshold(threshold)?;
    let mut cfg = common.run_config()?;
    cfg.eval.threshold = threshold;
    cfg.eval.top_n = topn.unwrap_or(cfg.eval.top_n);
    cfg.validate()?;
    let out = common.out_dir("eval");
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    if let EvalMode::Oracle = mode {
        let report = evaluate_scenes(Proposer::Oracle, &cfg.sample, &cfg.eval, &cfg.inference, common.seed)?;
        rows.push(EvalRow { mode: "oracle".into(), patch: None, scenes: report });
    } else {
        let ckpt = from.context("eval needs --from <checkpoint>")?;
        let (model, _) = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        inputs.extend(hash_artifacts(ckpt, &["manifest.json".into(), "params.bin".into()])?);
        let ds = match data {
            Some(dir) => {
                inputs.extend(hash_artifacts(dir, &["dataset.json".into(), "manifest.jsonl".into()])?);
                Some(read_dataset(dir)?)
            }
            None => None,
        };
        let modes: &[MaskMode] = match mode {
            EvalMode::Coarse => &[MaskMode::Coarse],
            EvalMode::Refined => &[MaskMode::Refined],
            _ if model.mode() == Mode::Refined => &[MaskMode::Coarse, MaskMode::Refined],
            _ => &[MaskMode::Coarse],
        };
        for &m in modes {
            let patch = match &ds {
                Some(ds) => {
                    let preds = train::predict(&model, &ds.val, m, cfg.train.batch_size)?;
                    Some(train::evaluate_predictions(&ds.val, &preds, threshold)?)
                }
                None => None,
            };
            let scenes = evaluate_scenes(Proposer::Model(&model, m), &cfg.sample, &cfg.eval, &cfg.inference, common.seed)?;
            let name = if m == MaskMode::Coarse { "coarse" } else { "refined" };
            rows.push(EvalRow { mode: name.into(), patch, scenes });
        }
    }
    for r in &rows {
        let s = r.scenes.as_ref();
        println!(
            "{:8} patch IoU {:>7} AR {:>7} | scenes AR10 {:>7} AR100 {:>7} AUC {:>7}",
            r.mode,
            fmt_opt(r.patch.as_ref().and_then(|p| p.mean_iou)),
            fmt_opt(r.patch.as_ref().and_then(|p| p.ar)),
            fmt_opt(s.map(|s| s.ar10)),
            fmt_opt(s.map(|s| s.ar100)),
            fmt_opt(s.map(|s| s.auc)),
        );
    }
    write_json(&out.join("report.json"), &rows)?;
    let mut m = RunManifest::new("eval", common.seed, json!({ "mode": mode, "topn": cfg.eval.top_n, "threshold": threshold }), cfg);
    m.inputs = inputs;
    m.artifacts = hash_artifacts(&out, &["report.json".into()])?;
    m.write(&out)?;
    Ok(0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.4}", v))
}

fn gradcheck(common: &Common, trials: usize) -> Result<u8> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let checks = gradient_suite(trials, common.seed)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_rel_error <= GRAD_TOL;
        ok &= pass;
        println!("{:32} {:3} configs  max rel err {:.3e}  {}", c.op, c.configs, c.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    if let Some(out) = &common.out {
        write_json(&out.join("gradcheck.json"), &checks)?;
    }
    Ok(if ok { 0 } else { EXIT_CHECK_FAILED })
}

fn equiv(common: &Common, trials: usize) -> Result<u8> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let rep = equivalence_suite(trials, common.seed)?;
    let ok = rep.max_forward <= EQUIV_FWD_TOL && rep.max_backward <= EQUIV_BWD_TOL;
    println!(
        "{} trials: max |forward diff| {:.3e}, max |gradient diff| {:.3e}  {}",
        rep.trials,
        rep.max_forward,
        rep.max_backward,
        if ok { "ok" } else { "FAIL" }
    );
    if let Some(out) = &common.out {
        write_json(&out.join("equiv.json"), &rep)?;
    }
    Ok(if ok { 0 } else { EXIT_CHECK_FAILED })
}

fn bench_cmd(common: &Common, heads: &[HeadVariant], trials: usize) -> Result<u8> {
    let cfg = common.run_config()?;
    let timings = bench::bench_heads(&cfg.model, heads, cfg.train.batch_size, trials, common.seed)?;
    for t in &timings {
        println!("head {:?}: {:7} params  {:.3} ms/batch (median {:.3})", t.variant, t.params, t.seconds * 1e3, t.median_seconds * 1e3);
    }
    // heads listed in increasing simplicity must not get slower or larger
    let mut sorted = timings.clone();
    sorted.sort_by_key(|t| t.variant);
    let ok = sorted.windows(2).all(|w| w[1].seconds <= w[0].seconds && w[1].params <= w[0].params);
    if let Some(out) = &common.out {
        write_json(&out.join("bench.json"), &timings)?;
    }
    if !ok {
        println!("time/params not ordered C <= B <= A");
    }
    Ok(if ok { 0 } else { EXIT_CHECK_FAILED })
}

fn infer(common: &Common, from: &Path, image: Option<&Path>, mode: InferMode, topn: Option<usize>, threshold: f64) -> Result<u8> {
    check_threshold(threshold)?;
    let cfg = common.run_config()?;
    let (model, _) = load_checkpoint(from).with_context(|| format!("loading {}", from.display()))?;
    let img = match image {
        Some(p) if p.extension().is_some_and(|e| e == "pgm") => read_gray_pgm(p)?,
        Some(p) => read_tensor(p)?.1,
        None => {
            let eval = maskrefine::config::EvalConfig { scenes: 1, ..cfg.eval.clone() };
            scene_image(&eval_scenes(&cfg.sample, &eval, common.seed)[0], model.cfg.trunk.in_channels)?
        }
    };
    let img = if img.shape().len() == 3 { img.clone().reshape(&[1, img.shape()[0], img.shape()[1], img.shape()[2]])? } else { img };
    let infer_cfg = maskrefine_core::network::InferenceConfig {
        top_n: topn.unwrap_or(cfg.inference.top_n),
        mode: mode.into(),
        ..cfg.inference.clone()
    };
    let out = common.out_dir("proposals");
    let props = model.propose(&img, &infer_cfg)?;
    let w = model.width();
    let mut files = Vec::new();
    let mut list = Vec::new();
    for (rank, p) in props.iter().enumerate() {
        let name = format!("mask_{:03}.pgm", rank);
        write_pgm(&out.join(&name), &binarize(&p.mask, w, w, threshold)?)?;
        list.push(json!({ "rank": rank, "x": p.x, "y": p.y, "width": w, "score": p.score, "mask": name }));
        files.push(name);
    }
    write_json(&out.join("proposals.json"), &list)?;
    files.push("proposals.json".into());
    let mut m = RunManifest::new("infer", common.seed, json!({ "mode": mode, "topn": infer_cfg.top_n, "threshold": threshold }), cfg);
    m.inputs = hash_artifacts(from, &["manifest.json".into(), "params.bin".into()])?;
    if let Some(p) = image {
        let dir = p.parent().unwrap_or(Path::new("."));
        m.inputs.extend(hash_artifacts(dir, &[p.file_name().unwrap_or_default().to_string_lossy().into_owned()])?);
    }
    m.artifacts = hash_artifacts(&out, &files)?;
    m.write(&out)?;
    println!("{} proposals written to {}", props.len(), out.display());
    Ok(0)
}
