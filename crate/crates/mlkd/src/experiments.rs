//! Multi-run experiments shared by the CLI and the acceptance suite:
//! from-scratch baselines, loss ablations and few-shot sweeps.

use std::time::Instant;

use mlkd_core::data::Dataset;
use mlkd_core::evaluation::dataset_top1;
use mlkd_core::losses::LossWeights;
use mlkd_core::networks::Checkpoint;
use mlkd_core::training::{distill, pretrain_teacher, DistillConfig, Hooks, TrainOutput};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfigFile;
use crate::error::{MlkdError, Result};

/// Training-set shares for the few-shot sweep.
pub const FEW_SHOT_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// The loss combinations of the ablation, as (name, align, corr, sup).
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 7] = [
    ("align", true, false, false),
    ("corr", false, true, false),
    ("sup", false, false, true),
    ("align+sup", true, false, true),
    ("corr+sup", false, true, true),
    ("align+corr", true, true, false),
    ("all", true, true, true),
];

/// `base` with the three distillation terms switched on or off. The
/// cross-entropy term is kept in every row.
pub fn ablation_weights(base: &LossWeights, align: bool, corr: bool, sup: bool) -> LossWeights {
    let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
    LossWeights {
        lambda1: on(align, base.lambda1),
        lambda2: on(corr, base.lambda2),
        w_sup: on(sup, base.w_sup),
        w_kd: 0.0,
        ..*base
    }
}

/// Logit-matching baseline: temperature-scaled KD plus cross-entropy.
pub fn kd_weights(base: &LossWeights) -> LossWeights {
    LossWeights { lambda1: 0.0, lambda2: 0.0, w_sup: 0.0, w_kd: 1.0, ..*base }
}

/// Worker count from `MLKD_THREADS`, default 1.
pub fn threads() -> usize {
    std::env::var("MLKD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// `items.map(f)` on at most [`threads`] workers; results keep input order.
/// Every job is self-contained and seeded, so the output does not depend
/// on the worker count.
pub fn par_map<I: Sync, R: Send>(items: &[I], f: impl Fn(&I) -> R + Sync) -> Vec<R> {
    let workers = threads().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn wall_clock() -> impl Fn() -> f64 {
    let start = Instant::now();
    move || start.elapsed().as_secs_f64()
}

/// One finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub fraction: f64,
    pub test_top1: f64,
    pub final_train_acc: Option<f64>,
    pub seconds: f64,
}

/// Data and teacher shared by every run of an experiment.
pub struct Bench {
    pub config: ExperimentConfigFile,
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: Checkpoint,
    pub teacher_train_acc: f64,
}

impl Bench {
    /// Generate the data and pretrain the teacher.
    pub fn prepare(config: ExperimentConfigFile) -> Result<Self> {
        let (train, test) = config.datasets()?;
        let test = test.ok_or_else(|| MlkdError::Config("experiments need data.test_fraction > 0".into()))?;
        let arch = config.teacher_arch(&train);
        let out = pretrain_teacher(&config.teacher_config(), &arch, &train, None, Hooks::default())?;
        let teacher_train_acc = dataset_top1(&out.checkpoint.network, &train)?;
        Ok(Self { config, train, test, teacher: out.checkpoint, teacher_train_acc })
    }

    pub fn with_teacher(config: ExperimentConfigFile, teacher: Checkpoint) -> Result<Self> {
        let (train, test) = config.datasets()?;
        let test = test.ok_or_else(|| MlkdError::Config("experiments need data.test_fraction > 0".into()))?;
        let teacher_train_acc = dataset_top1(&teacher.network, &train)?;
        Ok(Self { config, train, test, teacher, teacher_train_acc })
    }

    pub fn student_config(&self, seed: u64, weights: LossWeights, fraction: f64) -> DistillConfig {
        DistillConfig { weights, few_shot_fraction: fraction, ..self.config.distill_config(&self.train, seed) }
    }

    /// Distil (or, with no teacher terms, train from scratch) one student.
    pub fn run(&self, name: &str, cfg: &DistillConfig) -> Result<(RunSummary, TrainOutput)> {
        let clock = wall_clock();
        let out = if ablation_is_scratch(&cfg.weights) {
            let arch = cfg.student.clone().expect("student filled in by distill_config");
            pretrain_teacher(cfg, &arch, &self.train, None, Hooks::default())?
        } else {
            distill(cfg, &self.teacher, &self.train, None, Hooks::default())?
        };
        let summary = RunSummary {
            name: name.into(),
            seed: cfg.seed,
            fraction: cfg.few_shot_fraction,
            test_top1: dataset_top1(&out.checkpoint.network, &self.test)?,
            final_train_acc: out.log.records.last().and_then(|r| r.train_acc),
            seconds: clock(),
        };
        log::info!("{name} seed {} fraction {}: test top-1 {:.4}", cfg.seed, cfg.few_shot_fraction, summary.test_top1);
        Ok((summary, out))
    }

    /// Every (row, seed) combination of `rows`.
    pub fn sweep(&self, rows: &[(String, LossWeights, f64)]) -> Result<Vec<RunSummary>> {
        let jobs: Vec<(&String, LossWeights, f64, u64)> = rows
            .iter()
            .flat_map(|(n, w, f)| self.config.seeds.iter().map(move |&s| (n, *w, *f, s)))
            .collect();
        par_map(&jobs, |(n, w, f, s)| self.run(n, &self.student_config(*s, *w, *f)).map(|r| r.0))
            .into_iter()
            .collect()
    }

    pub fn scratch_rows(&self) -> Vec<(String, LossWeights, f64)> {
        vec![("scratch".into(), LossWeights::ce_only(), 1.0)]
    }

    pub fn ablation_rows(&self) -> Vec<(String, LossWeights, f64)> {
        let base = self.config.distill.weights;
        ABLATION_ROWS.iter().map(|&(n, a, c, s)| (n.to_string(), ablation_weights(&base, a, c, s), 1.0)).collect()
    }

    pub fn few_shot_rows(&self) -> Vec<(String, LossWeights, f64)> {
        let w = self.config.distill.weights;
        FEW_SHOT_FRACTIONS.iter().map(|&f| (format!("mlkd@{f}"), w, f)).collect()
    }
}

fn ablation_is_scratch(w: &LossWeights) -> bool {
    w.lambda1 == 0.0 && w.lambda2 == 0.0 && w.w_sup == 0.0 && w.w_kd == 0.0
}

/// Mean test accuracy per row name, in first-seen order.
pub fn mean_by_name(runs: &[RunSummary]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in runs {
        match out.iter_mut().find(|(n, ..)| *n == r.name) {
            Some(e) => {
                e.1 += r.test_top1;
                e.2 += 1;
            }
            None => out.push((r.name.clone(), r.test_top1, 1)),
        }
    }
    out.into_iter().map(|(n, s, c)| (n, s / c as f64)).collect()
}
