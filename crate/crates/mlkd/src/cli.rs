//! `mlkd` subcommands. Experiments are described by a JSON config file;
//! flags only pick the subcommand, paths and a few overrides.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mlkd_core::data::Dataset;
use mlkd_core::evaluation::{
    cka_similarity, dataset_features, knn_classify, linear_probe, per_class_accuracy, predict, topk_accuracy,
    EvalReport,
};
use mlkd_core::info_bound::{gaussian_pairs, mi_lower_bound, GaussianCritic};
use mlkd_core::networks::Checkpoint;
use mlkd_core::quantification::quantify_views;
use mlkd_core::training::{distill, pretrain_teacher, Hooks, TrainOutput};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfigFile;
use crate::error::{MlkdError, Result};
use crate::experiments::{mean_by_name, wall_clock, Bench};
use crate::format::{
    features_to_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_bytes,
};
use crate::report::{entropy_csv, runs_csv, train_log_csv, write_json};

#[derive(Parser, Debug)]
#[command(name = "mlkd", version, about = "Multi-level knowledge distillation at desk scale")]
struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). Library defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; falls back to the config's output_dir, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic data and save train/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Override data.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a teacher with cross-entropy.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Override the teacher's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distil a student from a frozen teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Override the student seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; prints a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        model: PathBuf,
        /// Reference network for `cka`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Neighbours for `knn` (config eval.k otherwise).
        #[arg(long)]
        k: Option<usize>,
        /// Also write the test features to this dataset-container file.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Pixel-entropy maps, average entropy and IoU over rotated views.
    Quantify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Image dataset; the configured test split otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of images (config quantify.images otherwise).
        #[arg(long)]
        images: Option<usize>,
    },
    /// Distil at 25/50/75/100% of the training data for every seed.
    Fewshot {
        #[command(flatten)]
        common: Common,
        /// Pretrained teacher; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run the seven loss combinations for every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Check the mutual-information lower bound on correlated Gaussians.
    Boundcheck {
        /// Total pairs; one tenth are positive.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.9])]
        rho: Vec<f64>,
        /// Slack allowed above the analytic mutual information.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug, Clone)]
struct DataArgs {
    /// Training data; distill.train_data or generated data otherwise.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Evaluation data; distill.eval_data or the generated test split
    /// otherwise.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalMode {
    Top1,
    Knn,
    Linear,
    Transfer,
    Cka,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("error[config]: {}", e.to_string().trim_start_matches("error: ").trim_end());
            return 1;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.tag());
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfigFile> {
    match &common.config {
        Some(p) => ExperimentConfigFile::load(p),
        None => Ok(ExperimentConfigFile::default()),
    }
}

fn out_dir(common: &Common, cfg: &ExperimentConfigFile) -> PathBuf {
    common.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

/// Training and evaluation data: explicit flags, then config paths, then
/// the configured generator.
fn resolve_data(args: &DataArgs, cfg: &ExperimentConfigFile) -> Result<(Dataset, Option<Dataset>)> {
    let train_path = args.train.clone().or_else(|| cfg.distill.train_data.as_ref().map(PathBuf::from));
    let test_path = args.test.clone().or_else(|| cfg.distill.eval_data.as_ref().map(PathBuf::from));
    let generated = if train_path.is_none() || test_path.is_none() { Some(cfg.datasets()?) } else { None };
    let train = match &train_path {
        Some(p) => load_dataset(p)?,
        None => generated.as_ref().unwrap().0.clone(),
    };
    let test = match &test_path {
        Some(p) => Some(load_dataset(p)?),
        None => generated.and_then(|g| g.1),
    };
    Ok((train, test))
}

fn write_training(dir: &Path, name: &str, out: &TrainOutput) -> Result<()> {
    save_checkpoint(&out.checkpoint, &dir.join(name))?;
    write_bytes(&dir.join("train_log.csv"), &train_log_csv(&out.log)?)
}

fn progress_hook(r: &mlkd_core::training::EpochRecord) {
    log::info!("epoch {} lr {:.4} total {:.4} train_acc {:?} eval_acc {:?}", r.epoch, r.lr, r.total, r.train_acc, r.eval_acc);
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let dir = out_dir(&common, &cfg);
            let (train, test) = cfg.datasets()?;
            save_dataset(&train, &dir.join("train.mlkd"))?;
            if let Some(t) = &test {
                save_dataset(t, &dir.join("test.mlkd"))?;
            }
            write_json(
                &dir.join("report.json"),
                &json!({
                    "command": "gen-data",
                    "config": cfg,
                    "seeds": {"data": cfg.data.seed},
                    "train": {"path": "train.mlkd", "n": train.len()},
                    "test": test.as_ref().map(|t| json!({"path": "test.mlkd", "n": t.len()})),
                }),
            )
        }
        Command::Pretrain { common, data, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.teacher.train.seed = s;
            }
            let dir = out_dir(&common, &cfg);
            let (train, test) = resolve_data(&data, &cfg)?;
            let arch = cfg.teacher_arch(&train);
            let clock = wall_clock();
            let hooks = Hooks { clock: Some(&clock), on_epoch: Some(&progress_hook) };
            let out = pretrain_teacher(&cfg.teacher_config(), &arch, &train, test.as_ref(), hooks)?;
            write_training(&dir, "teacher.ckpt", &out)?;
            let last = out.log.records.last();
            write_json(
                &dir.join("report.json"),
                &json!({
                    "command": "pretrain",
                    "config": cfg,
                    "arch": arch,
                    "seeds": {"data": cfg.data.seed, "train": cfg.teacher.train.seed},
                    "train_data": data.train,
                    "eval_data": data.test,
                    "final_train_acc": last.and_then(|r| r.train_acc),
                    "final_eval_acc": last.and_then(|r| r.eval_acc),
                    "seconds": clock(),
                }),
            )
        }
        Command::Distill { common, data, teacher, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.distill.seed = s;
            }
            let dir = out_dir(&common, &cfg);
            let t = load_checkpoint(&teacher)?;
            let (train, test) = resolve_data(&data, &cfg)?;
            // Pin the student architecture so the report alone reproduces the run.
            let dcfg = cfg.distill_config(&train, cfg.distill.seed);
            cfg.distill = dcfg.clone();
            let clock = wall_clock();
            let hooks = Hooks { clock: Some(&clock), on_epoch: Some(&progress_hook) };
            let out = distill(&dcfg, &t, &train, test.as_ref(), hooks)?;
            write_training(&dir, "student.ckpt", &out)?;
            let last = out.log.records.last();
            write_json(
                &dir.join("report.json"),
                &json!({
                    "command": "distill",
                    "config": cfg,
                    "teacher": teacher,
                    "seeds": {"data": cfg.data.seed, "student": dcfg.seed, "teacher": t.seed},
                    "train_data": data.train,
                    "eval_data": data.test,
                    "final_train_acc": last.and_then(|r| r.train_acc),
                    "final_eval_acc": last.and_then(|r| r.eval_acc),
                    "seconds": clock(),
                }),
            )
        }
        Command::Eval { common, data, mode, model, teacher, k, features } => {
            let cfg = load_config(&common)?;
            let net = load_checkpoint(&model)?;
            let value = evaluate(&cfg, &data, mode, &net, teacher.as_deref(), k, features.as_deref())?;
            let text = String::from_utf8(crate::report::json_bytes(&value)?).expect("JSON is UTF-8");
            print!("{text}");
            if let Some(dir) = common.out.as_ref() {
                write_bytes(&dir.join("eval.json"), text.as_bytes())?;
            }
            Ok(())
        }
        Command::Quantify { common, model, data, images } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg);
            let net = load_checkpoint(&model)?.network;
            let ds = match &data {
                Some(p) => load_dataset(p)?,
                None => cfg.datasets()?.1.ok_or_else(|| MlkdError::Config("no test split to quantify".into()))?,
            };
            let &[c, h, w] = ds.sample_shape() else {
                return Err(MlkdError::Config(format!("quantify needs C×H×W images, got {:?}", ds.sample_shape())));
            };
            if h != w {
                return Err(MlkdError::Config(format!("quantify needs square images, got {h}×{w}")));
            }
            let n = images.unwrap_or(cfg.quantify.images).min(ds.len());
            let idx: Vec<usize> = (0..n).map(|i| i * ds.len() / n.max(1)).collect();
            let (summary, maps) = quantify_views(&net, &ds.all(), &idx, c, h, &cfg.quantify.entropy)?;
            write_bytes(&dir.join("entropy.csv"), &entropy_csv(&idx, &maps)?)?;
            write_json(
                &dir.join("summary.json"),
                &json!({
                    "command": "quantify",
                    "config": cfg,
                    "model": model,
                    "data": data,
                    "seeds": {"entropy": cfg.quantify.entropy.seed},
                    "summary": summary,
                }),
            )
        }
        Command::Fewshot { common, teacher } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg);
            let bench = bench(cfg, teacher.as_deref())?;
            let runs = bench.sweep(&bench.few_shot_rows())?;
            write_runs(&dir, "fewshot", &bench, &runs)
        }
        Command::Ablate { common, teacher } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg);
            let bench = bench(cfg, teacher.as_deref())?;
            let runs = bench.sweep(&bench.ablation_rows())?;
            write_runs(&dir, "ablate", &bench, &runs)
        }
        Command::Boundcheck { samples, seed, rho, tolerance, out } => {
            let mut rows = Vec::new();
            let mut ok = true;
            for &r in &rho {
                if !(r.abs() < 1.0) {
                    return Err(MlkdError::Config(format!("rho {r} must lie in (-1, 1)")));
                }
                let critic = GaussianCritic { rho: r };
                let pos = (samples / 10).max(1);
                let b = mi_lower_bound(&gaussian_pairs(r, pos, samples - pos, seed), &critic)?;
                let holds = b.bound <= critic.true_mi() + tolerance;
                ok &= holds;
                rows.push(json!({"rho": r, "bound": b.bound, "true_mi": critic.true_mi(), "holds": holds}));
            }
            let report = json!({"command": "boundcheck", "samples": samples, "seeds": {"pairs": seed}, "tolerance": tolerance, "rows": rows, "all_hold": ok});
            let bytes = crate::report::json_bytes(&report)?;
            print!("{}", String::from_utf8_lossy(&bytes));
            if let Some(p) = out {
                write_bytes(&p, &bytes)?;
            }
            if ok {
                Ok(())
            } else {
                Err(MlkdError::Runtime("the estimated bound exceeds the true mutual information".into()))
            }
        }
    }
}

fn bench(cfg: ExperimentConfigFile, teacher: Option<&Path>) -> Result<Bench> {
    match teacher {
        Some(p) => Bench::with_teacher(cfg, load_checkpoint(p)?),
        None => Bench::prepare(cfg),
    }
}

fn write_runs(dir: &Path, command: &str, bench: &Bench, runs: &[crate::experiments::RunSummary]) -> Result<()> {
    write_bytes(&dir.join("runs.csv"), &runs_csv(runs)?)?;
    let means: Vec<_> = mean_by_name(runs).into_iter().map(|(n, m)| json!({"name": n, "mean_test_top1": m})).collect();
    write_json(
        &dir.join("report.json"),
        &json!({
            "command": command,
            "config": bench.config,
            "seeds": {"data": bench.config.data.seed, "teacher": bench.teacher.seed, "students": bench.config.seeds},
            "teacher_train_acc": bench.teacher_train_acc,
            "rows": means,
            "runs": runs,
        }),
    )
}

fn labels(ds: &Dataset) -> Result<&[usize]> {
    Ok(ds.require_labels()?)
}

fn evaluate(
    cfg: &ExperimentConfigFile,
    data: &DataArgs,
    mode: EvalMode,
    ckpt: &Checkpoint,
    teacher: Option<&Path>,
    k: Option<usize>,
    features: Option<&Path>,
) -> Result<serde_json::Value> {
    let net = &ckpt.network;
    let (train, test) = if mode == EvalMode::Transfer && data.train.is_none() && data.test.is_none() {
        cfg.transfer_datasets()?
    } else {
        resolve_data(data, cfg)?
    };
    let test = test.ok_or_else(|| MlkdError::Config("evaluation needs test data".into()))?;
    let test_feats = dataset_features(net, &test)?;
    if let Some(p) = features {
        save_dataset(&features_to_dataset(&test_feats, test.labels().map(<[usize]>::to_vec), test.classes())?, p)?;
    }
    let mode_name = serde_json::to_value(mode).expect("mode serializes");
    let report = |top1: f64, top5: Option<f64>, pred: &[usize]| -> Result<serde_json::Value> {
        let r = EvalReport {
            mode: mode_name.as_str().unwrap().into(),
            top1,
            top5,
            n_test: test.len(),
            seed: ckpt.seed,
            per_class: Some(per_class_accuracy(pred, labels(&test)?, test.classes())),
        };
        Ok(serde_json::to_value(r).expect("report serializes"))
    };
    match mode {
        EvalMode::Top1 => {
            let proj = net.projection.as_ref().ok_or_else(|| {
                MlkdError::Core(mlkd_core::Error::Capability("top1 needs a classification projection".into()))
            })?;
            let logits = proj.forward(&test_feats)?;
            let y = labels(&test)?;
            let pred = predict(&logits);
            let top1 = mlkd_core::evaluation::accuracy(&pred, y)?;
            let top5 = (logits.cols() >= 5).then(|| topk_accuracy(&logits, y, 5)).transpose()?;
            report(top1, top5, &pred)
        }
        EvalMode::Knn => {
            let k = k.unwrap_or(cfg.eval.k);
            let train_feats = dataset_features(net, &train)?;
            let pred = knn_classify(&train_feats, labels(&train)?, &test_feats, k)?;
            let mut v = report(mlkd_core::evaluation::accuracy(&pred, labels(&test)?)?, None, &pred)?;
            v["k"] = json!(k);
            Ok(v)
        }
        EvalMode::Linear | EvalMode::Transfer => {
            let train_feats = dataset_features(net, &train)?;
            let probe = &cfg.eval.probe;
            let r = linear_probe(&train_feats, labels(&train)?, &test_feats, labels(&test)?, probe)?;
            Ok(json!({
                "mode": mode,
                "top1": r.test_acc,
                "train_acc": r.train_acc,
                "n_test": test.len(),
                "seed": probe.seed,
                "probe": probe,
            }))
        }
        EvalMode::Cka => {
            let tp = teacher.ok_or_else(|| MlkdError::Config("cka needs --teacher".into()))?;
            let t = load_checkpoint(tp)?;
            let t_feats = dataset_features(&t.network, &test)?;
            let kernel = cfg.eval.cka_kernel;
            Ok(json!({
                "mode": mode,
                "cka": cka_similarity(&test_feats, &t_feats, kernel)?,
                "kernel": kernel,
                "n_test": test.len(),
            }))
        }
    }
}
