//! Synthetic datasets and stratified index management.
//!
//! Two families are generated: Gaussian class clusters in flat feature space
//! (optionally pushed through a fixed random nonlinearity) and small
//! single-channel images of oriented bar gratings whose class is fixed by bar
//! spacing and orientation family, so that quarter-turn rotations never change
//! the label.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams, DetRng};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Feature vectors of length `dim`.
    Clusters,
    /// `1 × dim × dim` images.
    Bars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub family: Family,
    pub classes: usize,
    pub per_class: usize,
    /// Feature count for clusters, side length for bars.
    pub dim: usize,
    /// Std of the class centres (clusters) or bar contrast (bars).
    pub spread: f64,
    /// Within-class (clusters) or per-pixel (bars) noise std.
    pub noise: f64,
    /// Clusters only: map samples through `sin(x·A)` for a fixed random `A`.
    #[serde(default)]
    pub warp: bool,
}

impl GeneratorSpec {
    pub fn clusters(classes: usize, per_class: usize, dim: usize, spread: f64, noise: f64, warp: bool) -> Self {
        Self { family: Family::Clusters, classes, per_class, dim, spread, noise, warp }
    }

    pub fn bars(classes: usize, per_class: usize, side: usize, contrast: f64, noise: f64) -> Self {
        Self { family: Family::Bars, classes, per_class, dim: side, spread: contrast, noise, warp: false }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self.family {
            Family::Clusters => vec![self.dim],
            Family::Bars => vec![1, self.dim, self.dim],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("a dataset needs at least two classes".into()));
        }
        if self.per_class == 0 || self.dim == 0 {
            return Err(Error::Config("per_class and dim must be positive".into()));
        }
        if !(self.spread >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("spread and noise must be nonnegative".into()));
        }
        if self.family == Family::Bars && self.classes > 2 * bar_frequencies(self.dim).len() {
            return Err(Error::Config(alloc::format!(
                "{}×{} bar images support at most {} classes",
                self.dim,
                self.dim,
                2 * bar_frequencies(self.dim).len()
            )));
        }
        Ok(())
    }
}

/// Generator settings plus the seed they were run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub spec: GeneratorSpec,
    pub seed: u64,
}

/// Samples stored row-major in 32-bit floats. `shape[0]` is the sample
/// count; the remaining entries are the per-sample shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    shape: Vec<usize>,
    labels: Option<Vec<usize>>,
    classes: usize,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f32>,
        shape: Vec<usize>,
        labels: Option<Vec<usize>>,
        classes: usize,
        provenance: Option<Provenance>,
    ) -> Result<Self> {
        if shape.len() < 2 || shape.contains(&0) {
            return Err(Error::Data(alloc::format!("invalid dataset shape {shape:?}")));
        }
        if shape.iter().product::<usize>() != inputs.len() {
            return Err(Error::Data("input length does not match shape".into()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("inputs contain non-finite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != shape[0] {
                return Err(Error::Data("label count does not match sample count".into()));
            }
            if let Some(&label) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::Label { label, classes });
            }
        }
        Ok(Self { inputs, shape, labels, classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels().ok_or_else(|| Error::Data("dataset has no labels".into()))
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.sample_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Rows `idx` as a 64-bit `len(idx) × sample_len` matrix.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| f64::from(v)));
        }
        Tensor::from_parts(vec![idx.len(), d], data)
    }

    pub fn all(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.sample_len()], self.inputs.iter().map(|&v| f64::from(v)).collect())
    }

    /// Per-feature standard deviation over the whole dataset.
    pub fn feature_std(&self) -> Vec<f64> {
        let (n, d) = (self.len(), self.sample_len());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(self.sample(i)) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(self.sample(i)).zip(&mean) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        var.iter().map(|s| libm::sqrt(s / n as f64)).collect()
    }

    /// New dataset holding rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.sample_len();
        let mut inputs = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            inputs.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Dataset {
            inputs,
            shape,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Sample indices grouped by class (one group when unlabeled).
    fn class_groups(&self) -> Vec<Vec<usize>> {
        match &self.labels {
            None => vec![(0..self.len()).collect()],
            Some(l) => {
                let mut g = vec![Vec::new(); self.classes];
                for (i, &y) in l.iter().enumerate() {
                    g[y].push(i);
                }
                g
            }
        }
    }
}

/// Bar frequencies (cycles per image) distinguishable at side length `side`.
fn bar_frequencies(side: usize) -> Vec<f64> {
    let nyquist = side as f64 / 2.0;
    (0..).map(|j| 1.0 + 0.75 * j as f64).take_while(|&f| f < nyquist).collect()
}

pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::seeded(seed, streams::DATA);
    let n = spec.classes * spec.per_class;
    let d: usize = spec.sample_shape().iter().product();
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match spec.family {
        Family::Clusters => {
            let centres = rng::normal_tensor(&mut rng, &[spec.classes, spec.dim], spec.spread);
            let warp = spec.warp.then(|| rng::normal_tensor(&mut rng, &[spec.dim, spec.dim], 1.0 / libm::sqrt(spec.dim as f64)));
            for k in 0..spec.classes {
                for _ in 0..spec.per_class {
                    let z: Vec<f64> = centres.row(k).iter().map(|c| c + spec.noise * rng::normal(&mut rng)).collect();
                    match &warp {
                        None => inputs.extend(z.iter().map(|&v| v as f32)),
                        Some(a) => {
                            for j in 0..spec.dim {
                                let s: f64 = z.iter().enumerate().map(|(i, v)| v * a.row(i)[j]).sum();
                                inputs.push(libm::sin(s) as f32);
                            }
                        }
                    }
                    labels.push(k);
                }
            }
        }
        Family::Bars => {
            let freqs = bar_frequencies(spec.dim);
            for k in 0..spec.classes {
                for _ in 0..spec.per_class {
                    render_bars(&mut rng, spec, freqs[k / 2], k % 2 == 1, &mut inputs);
                    labels.push(k);
                }
            }
        }
    }
    let mut shape = vec![n];
    shape.extend(spec.sample_shape());
    Dataset::new(inputs, shape, Some(labels), spec.classes, Some(Provenance { spec: spec.clone(), seed }))
}

/// Grating `contrast · max(0, cos(2π f (u cos θ + v sin θ)/S + φ))` plus noise,
/// with θ drawn from {0°, 90°} or, for diagonal classes, {45°, 135°}.
fn render_bars(rng: &mut DetRng, spec: &GeneratorSpec, freq: f64, diagonal: bool, out: &mut Vec<f32>) {
    use rand::Rng;
    let quarter = core::f64::consts::FRAC_PI_2;
    let theta = if diagonal { quarter / 2.0 } else { 0.0 } + if rng.gen::<bool>() { quarter } else { 0.0 };
    let phase = rng.gen_range(0.0..core::f64::consts::TAU);
    let s = spec.dim as f64;
    let (c, sn) = (libm::cos(theta), libm::sin(theta));
    for v in 0..spec.dim {
        for u in 0..spec.dim {
            let t = core::f64::consts::TAU * freq * (u as f64 * c + v as f64 * sn) / s + phase;
            let val = spec.spread * libm::cos(t).max(0.0) + spec.noise * rng::normal(rng);
            out.push(val as f32);
        }
    }
}

/// Per-class counts for `fractions` of `n` using cumulative rounding, so the
/// parts always sum to `n`.
fn partition_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut acc = 0.0;
    let mut prev = 0usize;
    fractions
        .iter()
        .map(|f| {
            acc += f;
            let edge = (libm::round(acc * n as f64) as usize).min(n);
            let c = edge - prev;
            prev = edge;
            c
        })
        .collect()
}

fn shuffled(mut idx: Vec<usize>, rng: &mut DetRng) -> Vec<usize> {
    idx.shuffle(rng);
    idx
}

/// Stratified, disjoint, exhaustive split. Each part keeps the original
/// sample order.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::param("fractions", "need positive fractions"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param("fractions", "fractions must sum to 1"));
    }
    let mut rng = rng::seeded(seed, streams::SPLIT);
    let mut parts = vec![Vec::new(); fractions.len()];
    for (class, group) in ds.class_groups().into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let counts = partition_counts(group.len(), fractions);
        if let Some(p) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(alloc::format!("split {p} would contain no samples of class {class}")));
        }
        let order = shuffled(group, &mut rng);
        let mut start = 0;
        for (part, c) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&order[start..start + c]);
            start += c;
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            ds.select(&p)
        })
        .collect())
}

/// Stratified sample without replacement keeping `round(fraction · n_c)` of
/// each class `c`.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param("fraction", "must lie in (0, 1]"));
    }
    let mut rng = rng::seeded(seed, streams::SUBSAMPLE);
    let mut keep = Vec::new();
    for (class, group) in ds.class_groups().into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let c = libm::round(fraction * group.len() as f64) as usize;
        if c == 0 {
            return Err(Error::Data(alloc::format!("fraction {fraction} leaves class {class} empty")));
        }
        let order = shuffled(group, &mut rng);
        keep.extend_from_slice(&order[..c]);
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Dataset {
        generate_synthetic(&GeneratorSpec::clusters(10, 10, 4, 3.0, 0.5, false), 7).unwrap()
    }

    fn class_counts(ds: &Dataset) -> Vec<usize> {
        let mut c = vec![0; ds.classes()];
        ds.labels().unwrap().iter().for_each(|&y| c[y] += 1);
        c
    }

    #[test]
    fn generation_is_deterministic_and_counts_match() {
        let spec = GeneratorSpec::clusters(3, 17, 5, 2.0, 1.0, true);
        let a = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(a, generate_synthetic(&spec, 1).unwrap());
        assert_ne!(a.inputs(), generate_synthetic(&spec, 2).unwrap().inputs());
        assert_eq!(class_counts(&a), vec![17; 3]);
        let img = generate_synthetic(&GeneratorSpec::bars(6, 4, 8, 1.0, 0.1), 1).unwrap();
        assert_eq!(img.shape(), &[24, 1, 8, 8]);
        assert_eq!(class_counts(&img), vec![4; 6]);
    }

    #[test]
    fn too_few_classes_rejected() {
        let spec = GeneratorSpec::clusters(1, 10, 4, 1.0, 1.0, false);
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
        assert!(generate_synthetic(&GeneratorSpec::bars(20, 2, 8, 1.0, 0.1), 0).is_err());
    }

    #[test]
    fn cluster_moments_match_spec() {
        let spec = GeneratorSpec::clusters(2, 2000, 3, 4.0, 0.5, false);
        let ds = generate_synthetic(&spec, 11).unwrap();
        let mut rng = rng::seeded(11, streams::DATA);
        let centres = rng::normal_tensor(&mut rng, &[2, 3], 4.0);
        for k in 0..2 {
            let rows: Vec<&[f32]> = (0..ds.len()).filter(|&i| ds.labels().unwrap()[i] == k).map(|i| ds.sample(i)).collect();
            let n = rows.len() as f64;
            for j in 0..3 {
                let m = rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / n;
                // Standard error of the mean is 0.5/√2000 ≈ 0.011.
                assert!((m - centres.row(k)[j]).abs() < 0.05);
                for l in 0..3 {
                    let cov = rows
                        .iter()
                        .map(|r| (f64::from(r[j]) - centres.row(k)[j]) * (f64::from(r[l]) - centres.row(k)[l]))
                        .sum::<f64>()
                        / n;
                    let want = if j == l { 0.25 } else { 0.0 };
                    assert!((cov - want).abs() < 0.03, "cov[{j},{l}] = {cov}");
                }
            }
        }
    }

    #[test]
    fn split_examples() {
        let ds = small();
        let one = split(&ds, &[1.0], 3).unwrap();
        assert_eq!(one, vec![ds.clone()]);
        let parts = split(&ds, &[0.8, 0.2], 3).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
        assert_eq!(class_counts(&parts[0]), vec![8; 10]);
        assert_eq!(class_counts(&parts[1]), vec![2; 10]);
        assert!(split(&ds, &[0.99, 0.01], 3).is_err());
        assert!(split(&ds, &[0.5, 0.4], 3).is_err());
    }

    #[test]
    fn subsample_examples() {
        let ds = small();
        assert_eq!(subsample(&ds, 1.0, 5).unwrap(), ds);
        let half = subsample(&ds, 0.5, 5).unwrap();
        assert_eq!(half.len(), 50);
        assert_eq!(class_counts(&half), vec![5; 10]);
        assert_eq!(half, subsample(&ds, 0.5, 5).unwrap());
        assert!(matches!(subsample(&ds, 0.01, 5), Err(Error::Data(_))));
        assert!(subsample(&ds, 0.0, 5).is_err());
    }

    fn sorted_rows(ds: &Dataset) -> Vec<(Vec<u32>, usize)> {
        let mut v: Vec<_> = (0..ds.len())
            .map(|i| (ds.sample(i).iter().map(|x| x.to_bits()).collect(), ds.labels().unwrap()[i]))
            .collect();
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn splits_partition_the_dataset(seed in 0u64..1000, a in 0.2f64..0.6) {
            let ds = small();
            let parts = split(&ds, &[a, 1.0 - a], seed).unwrap();
            let mut joined = Vec::new();
            for (p, frac) in parts.iter().zip([a, 1.0 - a]) {
                joined.extend(sorted_rows(p));
                for &c in &class_counts(p) {
                    prop_assert!((c as f64 - frac * 10.0).abs() <= 1.0);
                }
            }
            joined.sort();
            prop_assert_eq!(joined, sorted_rows(&ds));
        }
    }
}
