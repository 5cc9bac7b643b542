//! Accuracy, nearest-neighbour, linear-probe and CKA evaluation of frozen
//! representations.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::losses::ce_on_tape;
use crate::networks::{Affine, Network};
use crate::optim::{lr_schedule, Sgd};
use crate::rng::{self, streams};
use crate::tensor::dot;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<f64>,
    pub n_test: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class: Option<Vec<f64>>,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

fn check_eval(n: usize, labels: &[usize]) -> Result<()> {
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::shape("evaluate", &[n], &[labels.len()]));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check_eval(pred.len(), labels)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_eval(logits.rows(), labels)?;
    accuracy(&predict(logits), labels)
}

/// Fraction of rows whose label is among the `k` largest logits (ties
/// resolved towards lower class indices).
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check_eval(logits.rows(), labels)?;
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let better = row.iter().enumerate().filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y)).count();
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy per class; `NaN` for classes absent from `labels`.
pub fn per_class_accuracy(pred: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        tot[y] += 1;
        hit[y] += usize::from(p == y);
    }
    hit.iter().zip(&tot).map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 }).collect()
}

/// Rows per forward pass when evaluating a whole dataset.
const EVAL_CHUNK: usize = 1024;

/// Features of every sample in `ds`.
pub fn dataset_features(net: &Network, ds: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::with_capacity(ds.len() * net.feature_dim());
    for chunk in idx.chunks(EVAL_CHUNK) {
        data.extend(net.forward_features(&ds.batch(chunk))?.into_data());
    }
    Tensor::new(vec![ds.len(), net.feature_dim()], data)
}

/// Top-1 accuracy of `net`'s own classifier on `ds`.
pub fn dataset_top1(net: &Network, ds: &Dataset) -> Result<f64> {
    let labels = ds.require_labels()?;
    let z = dataset_features(net, ds)?;
    top1_accuracy(&net.forward_logits(&z)?, labels)
}

pub const DEFAULT_K: usize = 10;

/// Unweighted majority vote among the `k` most cosine-similar training
/// points. Equal similarities rank the lower training index first; a tied
/// vote goes to whichever tied class has the nearest member.
pub fn knn_classify(train: &Tensor, train_labels: &[usize], test: &Tensor, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > train.rows() {
        return Err(Error::param("k", "must lie in [1, n_train]"));
    }
    if train_labels.len() != train.rows() {
        return Err(Error::shape("knn_classify", train.shape(), &[train_labels.len()]));
    }
    if train.cols() != test.cols() {
        return Err(Error::shape("knn_classify", train.shape(), test.shape()));
    }
    let tr = train.normalize_rows("knn_classify(train)")?;
    let te = test.normalize_rows("knn_classify(test)")?;
    let sims = te.matmul_t(&tr)?;
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(test.rows());
    let mut order: Vec<usize> = Vec::with_capacity(train.rows());
    for i in 0..test.rows() {
        let s = sims.row(i);
        order.clear();
        order.extend(0..train.rows());
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut votes = vec![0usize; classes];
        for &j in &order[..k] {
            votes[train_labels[j]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let winner = order[..k].iter().map(|&j| train_labels[j]).find(|&c| votes[c] == top).unwrap();
        out.push(winner);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Standardise features with the training mean and std before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            lr_decay_epochs: vec![60, 80],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
}

fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var.iter().map(|s| {
        let sd = libm::sqrt(s / n as f64);
        if sd > 1e-12 { 1.0 / sd } else { 1.0 }
    });
    (mean.clone(), scale.collect())
}

fn apply_standardizer(x: &Tensor, (mean, scale): &(Vec<f64>, Vec<f64>)) -> Tensor {
    Tensor::from_fn(x.rows(), x.cols(), |i, j| (x.row(i)[j] - mean[j]) * scale[j])
}

/// Affine classifier on frozen features trained with cross-entropy and SGD.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_eval(train.rows(), train_labels)?;
    check_eval(test.rows(), test_labels)?;
    if train.cols() != test.cols() {
        return Err(Error::shape("linear_probe", train.shape(), test.shape()));
    }
    if train_labels.iter().all(|&y| y == train_labels[0]) {
        return Err(Error::Data("linear probe needs at least two classes in the training set".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("probe epochs and batch size must be positive".into()));
    }
    let classes = train_labels.iter().chain(test_labels).max().unwrap() + 1;
    let (train, test) = if cfg.standardize {
        let st = standardizer(train);
        (apply_standardizer(train, &st), apply_standardizer(test, &st))
    } else {
        (train.clone(), test.clone())
    };
    let mut layer = Affine::xavier(&mut rng::seeded(cfg.seed, streams::PROBE), train.cols(), classes);
    let mut opt = Sgd::new([&layer.weight, &layer.bias], cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr, &cfg.lr_decay_epochs, cfg.lr_decay_factor);
        order.sort_unstable();
        order.shuffle(&mut rng::seeded(cfg.seed.wrapping_add(epoch as u64), streams::PROBE));
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let vars = layer.on_tape(&mut tape, true);
            let xv = tape.constant(x);
            let logits = vars.forward(&mut tape, xv)?;
            let loss = ce_on_tape(&mut tape, logits, &y)?;
            let mut g = tape.backward(loss)?;
            let grads = [g.take(vars.weight), g.take(vars.bias)];
            opt.step(vec![&mut layer.weight, &mut layer.bias], &grads, lr)?;
        }
    }
    Ok(ProbeResult {
        train_acc: top1_accuracy(&layer.forward(&train)?, train_labels)?,
        test_acc: top1_accuracy(&layer.forward(&test)?, test_labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CkaKernel {
    Linear,
    /// Gaussian kernel with bandwidth `scale × median pairwise distance`.
    Rbf { scale: f64 },
}

impl CkaKernel {
    pub const DEFAULT_RBF: CkaKernel = CkaKernel::Rbf { scale: 0.5 };
}

fn gram(x: &Tensor, kernel: CkaKernel) -> Result<Tensor> {
    let n = x.rows();
    let g = x.matmul_t(x)?;
    match kernel {
        CkaKernel::Linear => Ok(g),
        CkaKernel::Rbf { scale } => {
            if !(scale > 0.0) {
                return Err(Error::param("scale", "RBF bandwidth scale must be positive"));
            }
            let d2 = Tensor::from_fn(n, n, |i, j| (g.row(i)[i] + g.row(j)[j] - 2.0 * g.row(i)[j]).max(0.0));
            let mut dists: Vec<f64> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| libm::sqrt(d2.row(i)[j])).collect();
            dists.sort_by(f64::total_cmp);
            let m = dists.len();
            let median = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
            if !(median > 0.0) {
                return Err(Error::Degenerate {
                    op: "cka_similarity",
                    reason: "median pairwise distance is zero".into(),
                });
            }
            let sigma = scale * median;
            Ok(d2.map(|v| libm::exp(-v / (2.0 * sigma * sigma))))
        }
    }
}

/// `H K H` with `H = I − 11ᵀ/n`.
fn double_center(k: &Tensor) -> Tensor {
    let n = k.rows();
    let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k.row(i)[j]).sum::<f64>() / n as f64).collect();
    let all = row_mean.iter().sum::<f64>() / n as f64;
    Tensor::from_fn(n, n, |i, j| k.row(i)[j] - row_mean[i] - col_mean[j] + all)
}

/// Centred kernel alignment `HSIC(K, L) / √(HSIC(K, K) HSIC(L, L))`.
pub fn cka_similarity(x: &Tensor, y: &Tensor, kernel: CkaKernel) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape("cka_similarity", x.shape(), y.shape()));
    }
    if x.rows() < 3 {
        return Err(Error::param("x", "CKA needs at least three samples"));
    }
    let kx = double_center(&gram(&x.as_matrix(), kernel)?);
    let ky = double_center(&gram(&y.as_matrix(), kernel)?);
    let hsic = |a: &Tensor, b: &Tensor| dot(a.data(), b.data());
    let (xy, xx, yy) = (hsic(&kx, &ky), hsic(&kx, &kx), hsic(&ky, &ky));
    let denom = libm::sqrt(xx * yy);
    if !(denom > 1e-300) {
        return Err(Error::Degenerate {
            op: "cka_similarity",
            reason: "constant features give zero HSIC".into(),
        });
    }
    Ok((xy / denom).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use proptest::prelude::*;

    #[test]
    fn top1_examples() {
        let eye = Tensor::from_fn(3, 3, |i, j| f64::from(u8::from(i == j)));
        assert_eq!(top1_accuracy(&eye, &[0, 1, 2]).unwrap(), 1.0);
        let inv = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(top1_accuracy(&inv, &[0, 1]).unwrap(), 0.0);
        let logits = Tensor::from_fn(10, 2, |i, j| f64::from(u8::from((i < 7) == (j == 0))));
        assert!((top1_accuracy(&logits, &[0; 10]).unwrap() - 0.7).abs() < 1e-15);
        let tie = Tensor::from_rows(&[&[1.0, 1.0]]).unwrap();
        assert_eq!(predict(&tie), vec![0]);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn topk_covers_top1() {
        let logits = normal_tensor(&mut seeded(1, 0), &[40, 6], 1.0);
        let labels: Vec<usize> = (0..40).map(|i| i % 6).collect();
        assert_eq!(topk_accuracy(&logits, &labels, 1).unwrap(), top1_accuracy(&logits, &labels).unwrap());
        assert_eq!(topk_accuracy(&logits, &labels, 6).unwrap(), 1.0);
    }

    /// Exhaustive oracle: similarity of every pair, stable ranking, vote.
    fn knn_oracle(train: &Tensor, labels: &[usize], test: &Tensor, k: usize) -> Vec<usize> {
        let cos = |a: &[f64], b: &[f64]| dot(a, b) / (libm::sqrt(dot(a, a)) * libm::sqrt(dot(b, b)));
        (0..test.rows())
            .map(|i| {
                let mut ranked: Vec<(f64, usize)> = (0..train.rows()).map(|j| (cos(test.row(i), train.row(j)), j)).collect();
                ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let near = &ranked[..k];
                let count = |c: usize| near.iter().filter(|(_, j)| labels[*j] == c).count();
                let best = near.iter().map(|(_, j)| count(labels[*j])).max().unwrap();
                near.iter().map(|(_, j)| labels[*j]).find(|&c| count(c) == best).unwrap()
            })
            .collect()
    }

    #[test]
    fn knn_examples() {
        let train = normal_tensor(&mut seeded(2, 0), &[30, 4], 1.0);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let q = train.select_rows(&[7]);
        assert_eq!(knn_classify(&train, &labels, &q, 1).unwrap(), vec![labels[7]]);
        let same = vec![2; 30];
        let test = normal_tensor(&mut seeded(3, 0), &[5, 4], 1.0);
        assert_eq!(knn_classify(&train, &same, &test, 10).unwrap(), vec![2; 5]);
        assert!(knn_classify(&train, &labels, &test, 31).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = seeded(4, 0);
        let train = normal_tensor(&mut rng, &[100, 5], 1.0);
        let test = normal_tensor(&mut rng, &[100, 5], 1.0);
        let labels: Vec<usize> = (0..100).map(|i| (i * 7) % 4).collect();
        for k in [1, 4, 10] {
            assert_eq!(knn_classify(&train, &labels, &test, k).unwrap(), knn_oracle(&train, &labels, &test, k));
        }
    }

    #[test]
    fn probe_separable_and_deterministic() {
        let mut rng = seeded(5, 0);
        let x = Tensor::from_fn(200, 2, |i, j| if j == 0 { if i % 2 == 0 { 2.0 } else { -2.0 } } else { 0.0 } + 0.3 * rng::normal(&mut rng));
        let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let cfg = ProbeConfig { epochs: 20, lr_decay_epochs: vec![12, 16], ..ProbeConfig::default() };
        let r = linear_probe(&x, &y, &x, &y, &cfg).unwrap();
        assert_eq!(r.test_acc, 1.0);
        assert_eq!(r, linear_probe(&x, &y, &x, &y, &cfg).unwrap());
        assert!(matches!(linear_probe(&x, &[0; 200], &x, &y, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn probe_chance_on_random_labels() {
        let mut rng = seeded(6, 0);
        let x = normal_tensor(&mut rng, &[400, 8], 1.0);
        let xt = normal_tensor(&mut rng, &[1000, 8], 1.0);
        let y: Vec<usize> = (0..400).map(|_| rand::Rng::gen_range(&mut rng, 0..4)).collect();
        let yt: Vec<usize> = (0..1000).map(|_| rand::Rng::gen_range(&mut rng, 0..4)).collect();
        let cfg = ProbeConfig { epochs: 10, lr_decay_epochs: vec![6, 8], ..ProbeConfig::default() };
        let r = linear_probe(&x, &y, &xt, &yt, &cfg).unwrap();
        // Binomial std at p = 1/4, n = 1000 is about 0.0137.
        assert!((r.test_acc - 0.25).abs() < 3.0 * 0.0137, "{}", r.test_acc);
        let majority = (0..4).map(|c| y.iter().filter(|&&v| v == c).count()).max().unwrap() as f64 / 400.0;
        assert!(r.train_acc >= majority);
    }

    /// `HSIC = tr(K H L H)` by explicit loops.
    fn hsic_oracle(k: &Tensor, l: &Tensor) -> f64 {
        let n = k.rows();
        let h = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / n as f64;
        let mut kh = vec![vec![0.0; n]; n];
        let mut lh = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for m in 0..n {
                    kh[i][j] += k.row(i)[m] * h(m, j);
                    lh[i][j] += l.row(i)[m] * h(m, j);
                }
            }
        }
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                tr += kh[i][j] * lh[j][i];
            }
        }
        tr
    }

    #[test]
    fn cka_examples() {
        let mut rng = seeded(7, 0);
        let x = normal_tensor(&mut rng, &[5, 3], 1.0);
        let y = normal_tensor(&mut rng, &[5, 4], 1.0);
        for kernel in [CkaKernel::Linear, CkaKernel::DEFAULT_RBF] {
            assert!((cka_similarity(&x, &x, kernel).unwrap() - 1.0).abs() < 1e-10);
            let (kx, ky) = (gram(&x, kernel).unwrap(), gram(&y, kernel).unwrap());
            let want = hsic_oracle(&kx, &ky) / libm::sqrt(hsic_oracle(&kx, &kx) * hsic_oracle(&ky, &ky));
            assert!((cka_similarity(&x, &y, kernel).unwrap() - want).abs() < 1e-10);
        }
        // Orthogonal transform: a plane rotation in the first two axes.
        let (c, s) = (libm::cos(0.7), libm::sin(0.7));
        let r = Tensor::from_rows(&[&[c, s, 0.0], &[-s, c, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let xr = x.matmul(&r).unwrap();
        assert!((cka_similarity(&x, &xr, CkaKernel::Linear).unwrap() - 1.0).abs() < 1e-10);
        let flat = Tensor::full(&[5, 3], 1.0);
        assert!(matches!(cka_similarity(&flat, &x, CkaKernel::Linear), Err(Error::Degenerate { .. })));
    }

    proptest! {
        #[test]
        fn knn_scale_invariant(seed in 0u64..200, scale in 0.01f64..100.0) {
            let mut rng = seeded(seed, 0);
            let train = normal_tensor(&mut rng, &[20, 3], 1.0);
            let test = normal_tensor(&mut rng, &[5, 3], 1.0);
            let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
            let scaled = test.map(|v| v * scale);
            prop_assert_eq!(knn_classify(&train, &labels, &test, 5).unwrap(), knn_classify(&train, &labels, &scaled, 5).unwrap());
        }

        #[test]
        fn cka_bounded_and_symmetric(seed in 0u64..200) {
            let mut rng = seeded(seed, 0);
            let x = normal_tensor(&mut rng, &[8, 3], 1.0);
            let y = normal_tensor(&mut rng, &[8, 2], 1.0);
            for kernel in [CkaKernel::Linear, CkaKernel::DEFAULT_RBF] {
                let a = cka_similarity(&x, &y, kernel).unwrap();
                let b = cka_similarity(&y, &x, kernel).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
