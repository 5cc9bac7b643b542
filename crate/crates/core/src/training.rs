//! Teacher pretraining and multi-level distillation.
//!
//! Both loops share one implementation: pretraining is distillation with no
//! teacher and cross-entropy as the only term. Terms with zero weight are not
//! built at all, so their heads are never created and consume no random
//! draws.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::Augmenter;
use crate::autodiff::{Tape, Var};
use crate::data::{subsample, Dataset};
use crate::evaluation::{argmax, dataset_top1};
use crate::losses::{self, LossTerms, LossWeights, TeacherKind};
use crate::networks::{
    init_network, make_transform_head, Affine, ArchSpec, Checkpoint, HeadSpec, Network, TransformHead,
    DEFAULT_HEAD_MULTIPLIER,
};
use crate::optim::{clip_grad_norm, lr_schedule, Sgd};
use crate::rng::{self, streams};
use crate::{Error, Result, Tensor};

/// Raw feature matching on unnormalized MLP features can take steps large
/// enough to diverge at the default learning rate; clipping bounds them.
pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

/// Smallest norm divided by when training normalises representations. A
/// dead-ReLU sample can map to an exact zero vector, which the standalone
/// losses reject; during training it simply contributes no direction.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Largest joint gradient norm per step; 0 turns clipping off.
    pub grad_clip: f64,
    pub weights: LossWeights,
    /// Hidden width of the alignment head relative to the teacher dimension.
    pub head_multiplier: f64,
    pub teacher_kind: TeacherKind,
    pub few_shot_fraction: f64,
    pub student: Option<ArchSpec>,
    pub train_data: Option<String>,
    pub eval_data: Option<String>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 240,
            batch_size: 64,
            initial_lr: 0.05,
            lr_decay_epochs: vec![150, 180, 210],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: DEFAULT_GRAD_CLIP,
            weights: LossWeights::default(),
            head_multiplier: DEFAULT_HEAD_MULTIPLIER,
            teacher_kind: TeacherKind::Supervised,
            few_shot_fraction: 1.0,
            student: None,
            train_data: None,
            eval_data: None,
        }
    }
}

impl DistillConfig {
    /// Shorter schedule with the decay epochs moved proportionally
    /// (150/180/210 of 240 become 0.625/0.75/0.875 of `epochs`).
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let old = self.epochs.max(1) as f64;
        self.lr_decay_epochs = self
            .lr_decay_epochs
            .iter()
            .map(|&d| libm::round(d as f64 * epochs as f64 / old) as usize)
            .collect();
        self.epochs = epochs;
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.initial_lr, &self.lr_decay_epochs, self.lr_decay_factor)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive");
        }
        if !((0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be nonnegative");
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction <= 1.0) {
            return bad("few_shot_fraction must lie in (0, 1]");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative");
        }
        if !(self.head_multiplier > 0.0) {
            return bad("head_multiplier must be positive");
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub align: f64,
    pub corr: f64,
    pub sup: f64,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
    /// Running accuracy over the epoch's batches, before each update.
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// The log with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self.records.iter().map(|r| EpochRecord { seconds: 0.0, ..r.clone() }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Optional hooks: a monotonic clock in seconds for the log's timing column.
#[derive(Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub clock: Option<&'a dyn Fn() -> f64>,
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
}

impl Hooks<'_> {
    fn now(&self) -> f64 {
        self.clock.map_or(0.0, |c| c())
    }
}

/// Train a teacher with cross-entropy only.
pub fn pretrain_teacher(
    cfg: &DistillConfig,
    arch: &ArchSpec,
    train: &Dataset,
    eval: Option<&Dataset>,
    hooks: Hooks<'_>,
) -> Result<TrainOutput> {
    let cfg = DistillConfig {
        weights: LossWeights::ce_only(),
        teacher_kind: TeacherKind::Supervised,
        ..cfg.clone()
    };
    run(&cfg, arch, None, train, eval, hooks)
}

/// Train the student in `cfg.student` against the frozen `teacher`.
pub fn distill(
    cfg: &DistillConfig,
    teacher: &Checkpoint,
    train: &Dataset,
    eval: Option<&Dataset>,
    hooks: Hooks<'_>,
) -> Result<TrainOutput> {
    let arch = cfg
        .student
        .as_ref()
        .ok_or_else(|| Error::Config("distillation needs a student architecture".into()))?;
    let t = &teacher.network;
    if t.arch.input_dim() != arch.input_dim() {
        return Err(Error::Config(alloc::format!(
            "teacher takes {} inputs but the student takes {}",
            t.arch.input_dim(),
            arch.input_dim()
        )));
    }
    let w = &cfg.weights;
    if cfg.teacher_kind == TeacherKind::Supervised && w.w_kd > 0.0 && t.projection.is_none() {
        return Err(Error::Capability("kd needs teacher logits; teacher is feature-only".into()));
    }
    run(cfg, arch, Some(t), train, eval, hooks)
}

struct Heads {
    align: Option<TransformHead>,
    corr: Option<TransformHead>,
    sup: Option<Affine>,
}

impl Heads {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        if let Some(h) = &mut self.align {
            p.extend(h.params_mut());
        }
        if let Some(h) = &mut self.corr {
            p.extend(h.params_mut());
        }
        if let Some(a) = &mut self.sup {
            p.push(&mut a.weight);
            p.push(&mut a.bias);
        }
        p
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        if let Some(h) = &self.align {
            p.extend(h.params());
        }
        if let Some(h) = &self.corr {
            p.extend(h.params());
        }
        if let Some(a) = &self.sup {
            p.push(&a.weight);
            p.push(&a.bias);
        }
        p
    }
}

/// Which terms a configuration builds.
#[derive(Debug, Clone, Copy)]
struct Active {
    align: bool,
    corr: bool,
    sup: bool,
    ce: bool,
    kd: bool,
}

impl Active {
    fn new(w: &LossWeights, has_teacher: bool) -> Self {
        Self {
            align: has_teacher && w.lambda1 > 0.0,
            corr: has_teacher && w.lambda2 > 0.0,
            sup: has_teacher && w.w_sup > 0.0,
            ce: w.w_ce > 0.0,
            kd: has_teacher && w.w_kd > 0.0,
        }
    }

    fn needs_teacher(&self) -> bool {
        self.align || self.corr || self.sup || self.kd
    }
}

#[derive(Default)]
struct Sums {
    align: (f64, usize),
    corr: (f64, usize),
    sup: (f64, usize),
    ce: (f64, usize),
    kd: (f64, usize),
}

fn acc(slot: &mut (f64, usize), v: f64) {
    slot.0 += v;
    slot.1 += 1;
}

fn mean(slot: (f64, usize)) -> Option<f64> {
    (slot.1 > 0).then(|| slot.0 / slot.1 as f64)
}

fn run(
    cfg: &DistillConfig,
    arch: &ArchSpec,
    teacher: Option<&Network>,
    train: &Dataset,
    eval: Option<&Dataset>,
    hooks: Hooks<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    arch.validate()?;
    let w = cfg.weights;
    let active = Active::new(&w, teacher.is_some());
    if !(active.needs_teacher() || active.ce) {
        return Err(Error::Config("every loss weight is zero".into()));
    }
    let probe = LossTerms {
        sup: active.sup.then_some(0.0),
        ce: active.ce.then_some(0.0),
        kd: active.kd.then_some(0.0),
        ..LossTerms::default()
    };
    losses::loss_total(&probe, &w, cfg.teacher_kind)?;

    if train.sample_len() != arch.input_dim() {
        return Err(Error::Config(alloc::format!(
            "dataset samples have {} elements but the network takes {}",
            train.sample_len(),
            arch.input_dim()
        )));
    }
    let subset;
    let train = if cfg.few_shot_fraction < 1.0 {
        subset = subsample(train, cfg.few_shot_fraction, cfg.seed)?;
        &subset
    } else {
        train
    };
    let labels = if active.ce || active.sup || active.kd {
        Some(train.require_labels()?)
    } else {
        train.labels()
    };
    if active.ce || active.kd {
        match arch.classes {
            Some(k) if k >= train.classes() => {}
            _ => {
                return Err(Error::Config(alloc::format!(
                    "student needs a projection onto at least {} classes",
                    train.classes()
                )))
            }
        }
    }

    let mut student = init_network(arch, cfg.seed)?;
    let ds = arch.feature_dim();
    let dt = teacher.map_or(0, Network::feature_dim);
    let mut heads = Heads {
        align: if active.align {
            Some(make_transform_head(ds, dt, cfg.head_multiplier, cfg.seed)?)
        } else {
            None
        },
        corr: active.corr.then(|| {
            let spec = HeadSpec { input_dim: ds, hidden_dim: ds, output_dim: ds };
            TransformHead::from_rng(spec, &mut rng::seeded(cfg.seed, streams::CORR_HEAD))
        }),
        sup: active.sup.then(|| Affine::xavier(&mut rng::seeded(cfg.seed, streams::SUP_HEAD), ds, dt)),
    };
    let augmenter = if active.corr { Some(Augmenter::for_dataset(train)?) } else { None };
    let mut opt = Sgd::new(
        student.params().into_iter().chain(heads.params()),
        cfg.momentum,
        cfg.weight_decay,
    );

    let n = train.len();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = hooks.now();
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        order.shuffle(&mut rng::seeded(epoch_seed, streams::SHUFFLE));
        let mut aug_rng = rng::seeded(epoch_seed, streams::AUGMENT);
        let mut sums = Sums::default();
        let (mut hits, mut seen) = (0usize, 0usize);

        for chunk in order.chunks(cfg.batch_size) {
            let x = train.batch(chunk);
            let y: Option<Vec<usize>> = labels.map(|l| chunk.iter().map(|&i| l[i]).collect());
            let mut tape = Tape::new();
            let sv = student.on_tape(&mut tape, true);
            let av = heads.align.as_ref().map(|h| h.on_tape(&mut tape, true));
            let cv = heads.corr.as_ref().map(|h| h.on_tape(&mut tape, true));
            let pv = heads.sup.as_ref().map(|a| a.on_tape(&mut tape, true));
            let xv = tape.constant(x.clone());
            let zs = sv.features(&mut tape, xv)?;
            let zt = match teacher {
                Some(t) if active.needs_teacher() => Some(t.forward_features(&x)?),
                _ => None,
            };
            let mut weighted: Vec<(f64, Var)> = Vec::new();

            if let (Some(av), Some(zt)) = (av, &zt) {
                let h = av.forward(&mut tape, zs)?;
                let ztv = tape.constant(zt.clone());
                let t = losses::align_on_tape(&mut tape, h, ztv)?;
                acc(&mut sums.align, tape.scalar_value(t)?);
                weighted.push((w.lambda1, t));
            }
            if let (Some(cv), Some(zt), Some(aug)) = (cv, &zt, &augmenter) {
                // One anchor view per sample; a single-sample batch has no
                // relations to transfer.
                let views = aug.apply(&x, &mut aug_rng)?.views;
                if chunk.len() >= 2 {
                    let zt_anchor = teacher.unwrap().forward_features(&views)?;
                    let va = tape.constant(views);
                    let zs_anchor = sv.features(&mut tape, va)?;
                    let ga = cv.forward(&mut tape, zs_anchor)?;
                    let gb = cv.forward(&mut tape, zs)?;
                    let t = losses::corr_on_tape(&mut tape, &zt_anchor, zt, ga, gb, w.tau_corr, NORM_FLOOR)?;
                    acc(&mut sums.corr, tape.scalar_value(t)?);
                    weighted.push((w.lambda2, t));
                }
            }
            if let (Some(pv), Some(zt), Some(y)) = (pv, &zt, &y) {
                let p = pv.forward(&mut tape, zs)?;
                let ps = tape.normalize_rows_floored(p, NORM_FLOOR)?;
                let nt = tape.constant(zt.normalize_rows_floored("loss_sup(teacher)", NORM_FLOOR)?);
                let both: Vec<usize> = y.iter().chain(y).copied().collect();
                let bank_t = tape.concat_rows(nt, ps)?;
                let from_teacher = losses::sup_on_tape(&mut tape, nt, bank_t, &both, w.tau_sup)?;
                let bank_s = tape.concat_rows(ps, nt)?;
                let from_student = losses::sup_on_tape(&mut tape, ps, bank_s, &both, w.tau_sup)?;
                let t = tape.add(from_teacher, from_student)?;
                acc(&mut sums.sup, tape.scalar_value(t)?);
                weighted.push((w.w_sup, t));
            }
            let logits = if active.ce || active.kd { Some(sv.logits(&mut tape, zs)?) } else { None };
            if let (true, Some(l), Some(y)) = (active.ce, logits, &y) {
                let t = losses::ce_on_tape(&mut tape, l, y)?;
                acc(&mut sums.ce, tape.scalar_value(t)?);
                weighted.push((w.w_ce, t));
            }
            if let (true, Some(l), Some(zt)) = (active.kd, logits, &zt) {
                let lt = teacher.unwrap().forward_logits(zt)?;
                let t = losses::kd_on_tape(&mut tape, &lt, l, w.kd_temperature)?;
                acc(&mut sums.kd, tape.scalar_value(t)?);
                weighted.push((w.w_kd, t));
            }
            if weighted.is_empty() {
                continue;
            }

            if let Some(y) = &y {
                let l = match logits {
                    Some(l) => Some(tape.value(l).clone()),
                    None if student.projection.is_some() => Some(student.forward_logits(tape.value(zs))?),
                    None => None,
                };
                if let Some(l) = l {
                    hits += (0..l.rows()).filter(|&i| argmax(l.row(i)) == y[i]).count();
                    seen += l.rows();
                }
            }

            let mut total = None;
            for (wt, t) in weighted {
                let s = tape.scale(t, wt);
                total = Some(match total {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });
            }
            let mut grads = tape.backward(total.unwrap())?;
            let vars: Vec<Var> = sv
                .vars()
                .into_iter()
                .chain(av.iter().flat_map(|h| h.vars()))
                .chain(cv.iter().flat_map(|h| h.vars()))
                .chain(pv.iter().flat_map(|a| a.vars()))
                .collect();
            let mut g: Vec<Tensor> = vars.into_iter().map(|v| grads.take(v)).collect();
            clip_grad_norm(&mut g, cfg.grad_clip);
            let params: Vec<&mut Tensor> = student.params_mut().into_iter().chain(heads.params_mut()).collect();
            opt.step(params, &g, lr)?;
        }

        let terms = LossTerms {
            align: mean(sums.align),
            corr: mean(sums.corr),
            sup: mean(sums.sup),
            ce: mean(sums.ce),
            kd: mean(sums.kd),
        };
        let b = losses::loss_total(&terms, &w, cfg.teacher_kind)?;
        let eval_acc = match eval {
            Some(e) if student.projection.is_some() && e.labels().is_some() => Some(dataset_top1(&student, e)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            align: b.align,
            corr: b.corr,
            sup: b.sup,
            ce: b.ce,
            kd: b.kd,
            total: b.total,
            train_acc: (seen > 0).then(|| hits as f64 / seen as f64),
            eval_acc,
            seconds: hooks.now() - start,
        };
        log::debug!("epoch {epoch}: lr {lr:.2e} total {:.4} train_acc {:?} eval_acc {:?}", b.total, record.train_acc, eval_acc);
        if let Some(f) = hooks.on_epoch {
            f(&record);
        }
        log.records.push(record);
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            network: student,
            head: heads.align,
            seed: cfg.seed,
            epochs: cfg.epochs,
        },
        log,
    })
}
