//! Distillation objectives.
//!
//! Each loss exists in two forms: a `*_on_tape` builder used by the training
//! loop (teacher-side inputs are always tape constants, so they never receive
//! gradient), and a plain `loss_*` function over tensors that returns the
//! value.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::networks::TransformHead;
use crate::tensor::{self, clamped_ln, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Alignment weight.
    pub lambda1: f64,
    /// Correlation weight.
    pub lambda2: f64,
    pub w_sup: f64,
    pub w_ce: f64,
    /// Weight of the logit-matching baseline; zero in every MLKD setting.
    pub w_kd: f64,
    pub tau_corr: f64,
    pub tau_sup: f64,
    pub kd_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 20.0,
            w_sup: 0.5,
            w_ce: 1.0,
            w_kd: 0.0,
            tau_corr: 0.5,
            tau_sup: 0.07,
            kd_temperature: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda1, self.lambda2, self.w_sup, self.w_ce, self.w_kd];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        for t in [self.tau_corr, self.tau_sup, self.kd_temperature] {
            tensor::check_tau(t).map_err(|_| Error::Config("temperatures must be positive".into()))?;
        }
        Ok(())
    }

    /// Plain supervised training: cross-entropy only.
    pub fn ce_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            w_sup: 0.0,
            w_kd: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Teacher trained with labels; has a classification projection.
    Supervised,
    /// Teacher exposes representations only.
    FeatureOnly,
}

/// Unweighted term values feeding [`loss_total`]; `None` means the term was
/// not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub align: Option<f64>,
    pub corr: Option<f64>,
    pub sup: Option<f64>,
    pub ce: Option<f64>,
    pub kd: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub corr: f64,
    pub sup: f64,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// Weighted combination. Feature-only teachers admit only the alignment and
/// correlation terms.
pub fn loss_total(terms: &LossTerms, weights: &LossWeights, kind: TeacherKind) -> Result<LossBreakdown> {
    if kind == TeacherKind::FeatureOnly {
        for (name, t) in [("sup", terms.sup), ("ce", terms.ce), ("kd", terms.kd)] {
            if t.is_some() {
                return Err(Error::Capability(alloc::format!(
                    "`{name}` needs labels or teacher logits; teacher is feature-only"
                )));
            }
        }
    }
    let v = |t: Option<f64>| t.unwrap_or(0.0);
    let mut total = 0.0;
    for (w, t) in [
        (weights.lambda1, terms.align),
        (weights.lambda2, terms.corr),
        (weights.w_sup, terms.sup),
        (weights.w_ce, terms.ce),
        (weights.w_kd, terms.kd),
    ] {
        if let Some(t) = t {
            total += w * t;
        }
    }
    Ok(LossBreakdown {
        align: v(terms.align),
        corr: v(terms.corr),
        sup: v(terms.sup),
        ce: v(terms.ce),
        kd: v(terms.kd),
        total,
    })
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}

/// Soft-target cross-entropy `−mean Σ_k s(t/T)_k · log s(s/T)_k`; the
/// teacher side is a constant.
pub fn kd_on_tape(tape: &mut Tape, logits_t: &Tensor, logits_s: Var, temperature: f64) -> Result<Var> {
    let ls_shape = tape.value(logits_s).shape().to_vec();
    if logits_t.shape() != ls_shape.as_slice() {
        return Err(Error::shape("loss_kd", logits_t.shape(), &ls_shape));
    }
    let p = tensor::softmax_rows(logits_t, temperature)?;
    let n = p.rows() as f64;
    let pv = tape.constant(p);
    let ls = tape.log_softmax_rows(logits_s, temperature, None)?;
    let prod = tape.mul(pv, ls)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / n))
}

pub fn loss_kd(logits_t: &Tensor, logits_s: &Tensor, temperature: f64) -> Result<f64> {
    check_same_shape("loss_kd", logits_t, logits_s)?;
    let mut tape = Tape::new();
    let s = tape.constant(logits_s.clone());
    let out = kd_on_tape(&mut tape, logits_t, s, temperature)?;
    tape.scalar_value(out)
}

/// `mean ‖h(z_s) − z_t‖²` given the already transformed student features.
pub fn align_on_tape(tape: &mut Tape, transformed: Var, z_t: Var) -> Result<Var> {
    let n = tape.value(transformed).rows() as f64;
    let d = tape.sub(transformed, z_t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n))
}

pub fn loss_align(z_s: &Tensor, z_t: &Tensor, head: &TransformHead) -> Result<f64> {
    let spec = head.spec();
    if z_s.cols() != spec.input_dim || z_t.cols() != spec.output_dim || z_s.rows() != z_t.rows() {
        return Err(Error::shape("loss_align", z_s.shape(), z_t.shape()));
    }
    let mut tape = Tape::new();
    let hv = head.on_tape(&mut tape, false);
    let zs = tape.constant(z_s.clone());
    let zt = tape.constant(z_t.clone());
    let h = hv.forward(&mut tape, zs)?;
    let out = align_on_tape(&mut tape, h, zt)?;
    tape.scalar_value(out)
}

/// Relational KL: `KL(softmax(𝒜_T/τ) ‖ softmax(𝒜_S/τ))` averaged over
/// anchors, where `𝒜[i,j]` is the cosine similarity between anchor `i`
/// (an augmented view) and batch sample `j`. The diagonal is kept.
/// `norm_floor` is passed to the row normalisations; 0 makes zero rows an
/// error.
pub fn corr_on_tape(
    tape: &mut Tape,
    t_anchor: &Tensor,
    t_batch: &Tensor,
    s_anchor: Var,
    s_batch: Var,
    tau: f64,
    norm_floor: f64,
) -> Result<Var> {
    tensor::check_tau(tau)?;
    let n = t_batch.rows();
    if n < 2 {
        return Err(Error::Degenerate {
            op: "loss_corr",
            reason: "correlation needs a batch of at least two samples".into(),
        });
    }
    let (sa, sb) = (tape.value(s_anchor).shape().to_vec(), tape.value(s_batch).shape().to_vec());
    if t_anchor.rows() != n || sa[0] != n || sb[0] != n || sa[1] != sb[1] {
        return Err(Error::shape("loss_corr", &sa, &sb));
    }
    let a_t = tensor::cosine_similarity_floored(t_anchor, t_batch, norm_floor)?;
    let p = tensor::softmax_rows(&a_t, tau)?;
    let entropy_part: f64 = p.data().iter().map(|&x| x * clamped_ln(x)).sum();

    let na = tape.normalize_rows_floored(s_anchor, norm_floor).map_err(|e| relabel(e, "loss_corr(student anchor)"))?;
    let nb = tape.normalize_rows_floored(s_batch, norm_floor).map_err(|e| relabel(e, "loss_corr(student batch)"))?;
    let a_s = tape.matmul_t(na, nb)?;
    let q = tape.softmax_rows(a_s, tau)?;
    let log_q = tape.log(q);
    let pv = tape.constant(p);
    let cross = tape.mul(pv, log_q)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0 / n as f64);
    Ok(tape.add_scalar(neg, entropy_part / n as f64))
}

fn relabel(e: Error, op: &'static str) -> Error {
    match e {
        Error::ZeroNorm { row, .. } => Error::ZeroNorm { op, row },
        other => other,
    }
}

pub fn loss_corr(
    z_t_anchor: &Tensor,
    z_t: &Tensor,
    z_s_anchor: &Tensor,
    z_s: &Tensor,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let sa = tape.constant(z_s_anchor.clone());
    let sb = tape.constant(z_s.clone());
    let out = corr_on_tape(&mut tape, z_t_anchor, z_t, sa, sb, tau, 0.0)?;
    tape.scalar_value(out)
}

/// Which side of the supervised contrastive term supplies the anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    Teacher,
    Student,
}

/// Per-anchor weights `1(j ≠ i, y_j = y_i) / (C_i · N)` and the self-pair
/// exclusion mask. `C_i` counts the positives of anchor `i` in the bank,
/// which is `2·N_{y_i} − 1` when the bank is the anchors followed by their
/// counterparts. Anchors without positives get a zero row.
fn sup_weights(n: usize, labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let m = labels.len();
    let mut w = vec![0.0; n * m];
    let mut exclude = vec![false; n * m];
    for i in 0..n {
        exclude[i * m + i] = true;
        let c = (0..m).filter(|&j| j != i && labels[j] == labels[i]).count();
        if c == 0 {
            log::warn!("anchor {i} (class {}) has no positive in the bank; skipped", labels[i]);
            continue;
        }
        for j in 0..m {
            if j != i && labels[j] == labels[i] {
                w[i * m + j] = 1.0 / (c as f64 * n as f64);
            }
        }
    }
    (w, exclude)
}

/// Supervised contrastive distillation over `N` unit-norm anchors and a bank
/// of `2N` unit-norm entries whose first `N` rows are the anchors themselves.
/// `labels` has one entry per bank row.
pub fn sup_on_tape(tape: &mut Tape, anchors: Var, bank: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let (sa, sb) = (tape.value(anchors).shape().to_vec(), tape.value(bank).shape().to_vec());
    let n = sa[0];
    if sb[0] != 2 * n || sa[1] != sb[1] || labels.len() != sb[0] {
        return Err(Error::shape("loss_sup", &sa, &sb));
    }
    let (w, exclude) = sup_weights(n, labels);
    let logits = tape.matmul_t(anchors, bank)?;
    let log_p = tape.log_softmax_rows(logits, tau, Some(exclude))?;
    let wv = tape.constant(Tensor::from_parts(vec![n, 2 * n], w));
    let prod = tape.mul(wv, log_p)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

fn check_unit_rows(op: &'static str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        if (tensor::l2_norm(t.row(i)) - 1.0).abs() > 1e-6 {
            return Err(Error::Degenerate {
                op,
                reason: alloc::format!("row {i} is not unit-normalised"),
            });
        }
    }
    Ok(())
}

/// Value of the supervised contrastive term. `mode` records which network
/// produced the anchors; it determines gradient flow during training (the
/// teacher side is always fixed) and does not change the value.
pub fn loss_sup(z_anchor: &Tensor, z_bank: &Tensor, labels: &[usize], tau: f64, mode: AnchorMode) -> Result<f64> {
    check_unit_rows("loss_sup(anchor)", z_anchor)?;
    check_unit_rows("loss_sup(bank)", z_bank)?;
    let mut tape = Tape::new();
    let (a, b) = match mode {
        AnchorMode::Student => (tape.param(z_anchor.clone()), tape.constant(z_bank.clone())),
        AnchorMode::Teacher => (tape.constant(z_anchor.clone()), tape.param(z_bank.clone())),
    };
    let out = sup_on_tape(&mut tape, a, b, labels, tau)?;
    tape.scalar_value(out)
}

/// Mean negative log-probability of the true class.
pub fn ce_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::shape("loss_ce", &shape, &[labels.len()]));
    }
    check_labels(labels, k)?;
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = -1.0 / n as f64;
    }
    let ls = tape.log_softmax_rows(logits, 1.0, None)?;
    let w = tape.constant(Tensor::from_parts(vec![n, k], onehot));
    let prod = tape.mul(w, ls)?;
    Ok(tape.sum(prod))
}

pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = ce_on_tape(&mut tape, l, labels)?;
    tape.scalar_value(out)
}

/// The two parts of the soft-target loss when the student's logits are
/// routed through the teacher's projection of the transformed feature:
/// `alignment = −Σ p_T log s(W_T h(z_S))` and
/// `residual = Σ p_T log(s(W_T h(z_S)) / s(W_S z_S))`, which sum to the
/// soft-target loss at temperature 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdDecomposition {
    pub alignment: f64,
    pub residual: f64,
}

pub fn kd_decomposition(
    teacher_logits: &Tensor,
    teacher_logits_of_transformed: &Tensor,
    student_logits: &Tensor,
) -> Result<KdDecomposition> {
    check_same_shape("kd_decomposition", teacher_logits, student_logits)?;
    check_same_shape("kd_decomposition", teacher_logits, teacher_logits_of_transformed)?;
    let p = tensor::softmax_rows(teacher_logits, 1.0)?;
    let h = tensor::softmax_rows(teacher_logits_of_transformed, 1.0)?;
    let s = tensor::softmax_rows(student_logits, 1.0)?;
    let n = p.rows() as f64;
    let mut alignment = 0.0;
    let mut residual = 0.0;
    for ((&pk, &hk), &sk) in p.data().iter().zip(h.data()).zip(s.data()) {
        alignment -= pk * clamped_ln(hk);
        residual += pk * (clamped_ln(hk) - clamped_ln(sk));
    }
    Ok(KdDecomposition {
        alignment: alignment / n,
        residual: residual / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::networks::make_transform_head;
    use crate::rng::{normal_tensor, seeded, unit_rows};
    use proptest::prelude::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().map(|x| x * x.ln()).sum::<f64>()
    }

    #[test]
    fn weights_defaults() {
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2, w.w_sup, w.w_ce), (10.0, 20.0, 0.5, 1.0));
        assert_eq!((w.tau_corr, w.tau_sup), (0.5, 0.07));
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let zero = LossTerms {
            align: Some(0.0),
            corr: Some(0.0),
            ..Default::default()
        };
        assert_eq!(loss_total(&zero, &w, TeacherKind::FeatureOnly).unwrap().total, 0.0);
        let fo = LossTerms {
            align: Some(1.0),
            corr: Some(1.0),
            ..Default::default()
        };
        assert_eq!(loss_total(&fo, &w, TeacherKind::FeatureOnly).unwrap().total, 30.0);
        let sup = LossTerms {
            sup: Some(1.0),
            ce: Some(1.0),
            ..fo
        };
        assert_eq!(loss_total(&sup, &w, TeacherKind::Supervised).unwrap().total, 31.5);
        assert!(matches!(
            loss_total(&sup, &w, TeacherKind::FeatureOnly),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn kd_examples() {
        let t = rows(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]);
        let got = loss_kd(&t, &t, 1.0).unwrap();
        let p = tensor::softmax_rows(&t, 1.0).unwrap();
        let want = (entropy(p.row(0)) + entropy(p.row(1))) / 2.0;
        assert!((got - want).abs() < 1e-12);

        let peaked = rows(&[&[1e6, 0.0, 0.0]]);
        assert!(loss_kd(&peaked, &peaked, 1.0).unwrap().abs() < 1e-12);

        assert!(matches!(
            loss_kd(&t, &rows(&[&[1.0, 2.0, 3.0]]), 1.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn kd_matches_scalar_oracle() {
        let t = rows(&[&[0.2, -0.7, 1.1], &[0.5, 0.0, -2.0]]);
        let s = rows(&[&[-0.3, 0.9, 0.4], &[1.5, -0.5, 0.25]]);
        let temp = 2.5;
        let mut acc = 0.0;
        for i in 0..2 {
            let zt: f64 = t.row(i).iter().map(|v| (v / temp).exp()).sum();
            let zs: f64 = s.row(i).iter().map(|v| (v / temp).exp()).sum();
            for k in 0..3 {
                let p = (t.row(i)[k] / temp).exp() / zt;
                let q = (s.row(i)[k] / temp).exp() / zs;
                acc -= p * q.ln();
            }
        }
        assert!((loss_kd(&t, &s, temp).unwrap() - acc / 2.0).abs() < 1e-12);
    }

    #[test]
    fn align_examples() {
        let z = rows(&[&[0.5, 1.0, 0.0], &[2.0, 0.0, 3.0]]);
        assert_eq!(loss_align(&z, &z, &TransformHead::identity(3)).unwrap(), 0.0);

        let head = TransformHead::identity(2);
        let got = loss_align(&rows(&[&[1.0, 0.0]]), &rows(&[&[0.0, 1.0]]), &head).unwrap();
        assert_eq!(got, 2.0);

        let h = make_transform_head(3, 4, 1.0, 0).unwrap();
        assert!(matches!(loss_align(&z, &z, &h), Err(Error::Shape { .. })));
    }

    #[test]
    fn align_head_gradient() {
        let mut rng = seeded(0, 0);
        let zs = normal_tensor(&mut rng, &[4, 3], 1.0);
        let zt = normal_tensor(&mut rng, &[4, 2], 1.0);
        let head = make_transform_head(3, 2, 2.0, 1).unwrap();
        let params: Vec<Tensor> = head.params().into_iter().cloned().collect();
        let err = finite_diff_check(
            |tp, p| {
                let x = tp.constant(zs.clone());
                let t = tp.constant(zt.clone());
                let h = tp.matmul(x, p[0])?;
                let h = tp.add_row(h, p[1])?;
                let h = tp.relu(h);
                let h = tp.matmul(h, p[2])?;
                let h = tp.add_row(h, p[3])?;
                align_on_tape(tp, h, t)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn corr_hand_case() {
        // 𝒜_T = I and 𝒜_S = all-ones via unit vectors.
        let t = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let got = loss_corr(&t, &t, &s, &s, 0.5).unwrap();
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let p = [p0, 1.0 - p0];
        let want: f64 = p.iter().map(|x| x * (x / 0.5).ln()).sum();
        assert!((p0 - 0.8808).abs() < 1e-4);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3278).abs() < 1e-4);
    }

    #[test]
    fn corr_zero_at_matched_relations() {
        let mut rng = seeded(2, 0);
        let t = normal_tensor(&mut rng, &[5, 3], 1.0);
        let ta = normal_tensor(&mut rng, &[5, 3], 1.0);
        assert!(loss_corr(&ta, &t, &ta, &t, 0.5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn corr_degenerate_inputs() {
        let one = rows(&[&[1.0, 2.0]]);
        assert!(matches!(loss_corr(&one, &one, &one, &one, 0.5), Err(Error::Degenerate { .. })));
        let t = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let z = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            loss_corr(&t, &t, &t, &z, 0.5),
            Err(Error::ZeroNorm { op: "loss_corr(student batch)", row: 1 })
        ));
    }

    /// Exhaustive triple loop, written straight from the definition.
    fn sup_oracle(anchor: &Tensor, bank: &Tensor, labels: &[usize], tau: f64) -> f64 {
        let n = anchor.rows();
        let m = bank.rows();
        let mut total = 0.0;
        for i in 0..n {
            let c = (0..m).filter(|&j| j != i && labels[j] == labels[i]).count();
            if c == 0 {
                continue;
            }
            let mut acc = 0.0;
            for j in 0..m {
                if j == i || labels[j] != labels[i] {
                    continue;
                }
                let num = (tensor::dot(anchor.row(i), bank.row(j)) / tau).exp();
                let mut den = 0.0;
                for k in 0..m {
                    if k != i {
                        den += (tensor::dot(anchor.row(i), bank.row(k)) / tau).exp();
                    }
                }
                acc += (num / den).ln();
            }
            total += -acc / c as f64;
        }
        total / n as f64
    }

    #[test]
    fn sup_matches_triple_loop() {
        let mut rng = seeded(4, 0);
        let a = unit_rows(&mut rng, 4, 3);
        let other = unit_rows(&mut rng, 4, 3);
        let bank = a.concat_rows(&other).unwrap();
        let labels = [0, 0, 1, 1, 0, 0, 1, 1];
        for mode in [AnchorMode::Teacher, AnchorMode::Student] {
            let got = loss_sup(&a, &bank, &labels, 0.5, mode).unwrap();
            assert!((got - sup_oracle(&a, &bank, &labels, 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn sup_all_equal_representations() {
        // Every similarity is 1, so each log-ratio is ln(1/(2N−1)) and the
        // per-anchor average over positives is the same value.
        let n = 3;
        let v = Tensor::from_fn(2 * n, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let a = v.select_rows(&[0, 1, 2]);
        let labels = [0, 1, 0, 0, 1, 0];
        let got = loss_sup(&a, &v, &labels, 0.07, AnchorMode::Student).unwrap();
        let want = ((2 * n - 1) as f64).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn sup_single_positive_reduces_to_infonce() {
        let mut rng = seeded(5, 0);
        let a = unit_rows(&mut rng, 3, 4);
        let bank = a.concat_rows(&a).unwrap();
        let labels = [0, 1, 2, 0, 1, 2];
        let tau = 0.2;
        let got = loss_sup(&a, &bank, &labels, tau, AnchorMode::Teacher).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            let positive = a.row(i).to_vec();
            let negatives: Vec<Vec<f64>> = (0..6)
                .filter(|&k| k != i && k != i + 3)
                .map(|k| bank.row(k).to_vec())
                .collect();
            want += crate::info_bound::info_nce_multi_positive(a.row(i), &[positive], &negatives, tau).unwrap();
        }
        assert!((got - want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sup_anchor_without_positive_contributes_zero() {
        let a = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let bank = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8], &[0.8, 0.6]]);
        // Anchor 0 (class 7) has no other class-7 entry.
        let labels = [7, 1, 2, 1];
        let got = loss_sup(&a, &bank, &labels, 0.5, AnchorMode::Student).unwrap();
        assert!((got - sup_oracle(&a, &bank, &labels, 0.5)).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn ce_examples() {
        let u = Tensor::zeros(&[1, 10]);
        assert!((loss_ce(&u, &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((loss_ce(&u, &[3]).unwrap() - 2.3026).abs() < 1e-4);
        let mut c = vec![0.0; 10];
        c[2] = 1e6;
        assert!(loss_ce(&Tensor::matrix(1, 10, c).unwrap(), &[2]).unwrap().abs() < 1e-12);
        assert_eq!(loss_ce(&u, &[10]), Err(Error::Label { label: 10, classes: 10 }));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn ce_matches_scalar_oracle() {
        let l = rows(&[&[0.1, 2.0, -1.0], &[3.0, 0.5, 0.5]]);
        let labels = [2, 0];
        let mut want = 0.0;
        for i in 0..2 {
            let z: f64 = l.row(i).iter().map(|v| v.exp()).sum();
            want -= (l.row(i)[labels[i]].exp() / z).ln();
        }
        assert!((loss_ce(&l, &labels).unwrap() - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn decomposition_sums_to_kd() {
        let mut rng = seeded(9, 0);
        let t = normal_tensor(&mut rng, &[3, 4], 1.0);
        let h = normal_tensor(&mut rng, &[3, 4], 1.0);
        let s = normal_tensor(&mut rng, &[3, 4], 1.0);
        let d = kd_decomposition(&t, &h, &s).unwrap();
        assert!((d.alignment + d.residual - loss_kd(&t, &s, 1.0).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn corr_invariant_to_positive_rescaling(
            seed in 0u64..300,
            scales in prop::collection::vec(0.05f64..20.0, 4),
        ) {
            let mut rng = seeded(seed, 0);
            let ta = normal_tensor(&mut rng, &[4, 3], 1.0);
            let t = normal_tensor(&mut rng, &[4, 3], 1.0);
            let sa = normal_tensor(&mut rng, &[4, 2], 1.0);
            let s = normal_tensor(&mut rng, &[4, 2], 1.0);
            let base = loss_corr(&ta, &t, &sa, &s, 0.5).unwrap();
            prop_assert!(base >= 0.0);
            let scale = |x: &Tensor| {
                let mut y = x.clone();
                for (i, c) in scales.iter().enumerate() {
                    y.row_mut(i).iter_mut().for_each(|v| *v *= c);
                }
                y
            };
            let scaled = loss_corr(&scale(&ta), &scale(&t), &scale(&sa), &scale(&s), 0.5).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn sup_invariant_to_bank_permutation(seed in 0u64..300) {
            let mut rng = seeded(seed, 0);
            let a = unit_rows(&mut rng, 3, 3);
            let o = unit_rows(&mut rng, 3, 3);
            let bank = a.concat_rows(&o).unwrap();
            let labels = [0, 1, 0, 0, 1, 0];
            let base = loss_sup(&a, &bank, &labels, 0.3, AnchorMode::Student).unwrap();
            // Permute the non-anchor half; the anchors must stay in place.
            let perm = [0, 1, 2, 5, 3, 4];
            let pbank = bank.select_rows(&perm);
            let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let got = loss_sup(&a, &pbank, &plabels, 0.3, AnchorMode::Teacher).unwrap();
            prop_assert!((base - got).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }
    }
}
