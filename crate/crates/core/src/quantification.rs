//! Perturbation-based knowledge quantification.
//!
//! For an input `x` and frozen network `f`, a per-element noise scale `σ` is
//! learned so that `x̃ ~ N(x, diag σ²)` keeps `E‖f(x̃) − f(x)‖²` within a
//! distortion budget `ε` while `Σ log σ_i` is as large as possible. Elements
//! that tolerate little noise (low entropy `H_i = log σ_i + ½ log 2πe`) are
//! the ones the representation depends on.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::ViewMap;
use crate::autodiff::{softplus, Tape};
use crate::networks::Network;
use crate::rng::{self, streams};
use crate::{Error, Result, Tensor};

/// `½ log(2πe)`, the entropy of a unit-variance Gaussian.
pub const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    /// Per-sample input shape.
    pub shape: Vec<usize>,
    pub sigma: Vec<f64>,
    pub entropy: Vec<f64>,
    pub mean_entropy: f64,
    /// `H̄ > H_i`.
    pub concept_mask: Vec<bool>,
    /// `max(0, D − ε)` at the final σ, estimated with fresh draws.
    pub violation: f64,
    pub epsilon: f64,
    /// False when the final violation exceeds `2ε`.
    pub converged: bool,
}

impl EntropyMap {
    pub fn from_sigma(shape: Vec<usize>, sigma: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != sigma.len() || sigma.is_empty() {
            return Err(Error::shape("EntropyMap", &shape, &[sigma.len()]));
        }
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Data(alloc::format!("sigma[{i}] must be positive and finite")));
        }
        let entropy: Vec<f64> = sigma.iter().map(|s| libm::log(*s) + HALF_LOG_2PI_E).collect();
        let mean_entropy = entropy.iter().sum::<f64>() / entropy.len() as f64;
        let concept_mask = entropy.iter().map(|&h| mean_entropy > h).collect();
        Ok(Self {
            shape,
            sigma,
            entropy,
            mean_entropy,
            concept_mask,
            violation: 0.0,
            epsilon: 0.0,
            converged: true,
        })
    }

    /// The same map expressed in the coordinates of the original input when
    /// it was computed on a view produced through `view`.
    pub fn to_original(&self, view: &ViewMap) -> Result<Self> {
        if view.source.len() != self.sigma.len() {
            return Err(Error::shape("EntropyMap::to_original", &[self.sigma.len()], &[view.source.len()]));
        }
        Ok(Self {
            sigma: view.to_original(&self.sigma),
            entropy: view.to_original(&self.entropy),
            concept_mask: view.to_original(&self.concept_mask),
            ..self.clone()
        })
    }
}

pub fn average_entropy(map: &EntropyMap) -> f64 {
    map.entropy.iter().sum::<f64>() / map.entropy.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    /// Monte-Carlo draws per step.
    pub draws: usize,
    pub steps: usize,
    /// Hinge penalty weight.
    pub beta: f64,
    /// `ε = epsilon_fraction · ‖f(x)‖²` unless `epsilon` is set.
    pub epsilon_fraction: f64,
    pub epsilon: Option<f64>,
    /// Adam step size on the softplus pre-activation ρ.
    pub step_size: f64,
    /// Initial σ as a fraction of the input's std.
    pub init_fraction: f64,
    /// σ is capped at `cap_factor ×` the input's std.
    pub cap_factor: f64,
    /// σ is averaged over this trailing fraction of steps.
    pub average_fraction: f64,
    /// Draws used for the final constraint check.
    pub check_draws: usize,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            draws: 8,
            steps: 200,
            beta: 100.0,
            epsilon_fraction: 0.05,
            epsilon: None,
            step_size: 0.1,
            init_fraction: 0.1,
            cap_factor: 10.0,
            average_fraction: 0.25,
            check_draws: 256,
            seed: 0,
        }
    }
}

impl EntropyConfig {
    fn validate(&self) -> Result<()> {
        let positive = [self.beta, self.step_size, self.init_fraction, self.cap_factor];
        if self.draws == 0 || self.steps == 0 || self.check_draws == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("entropy estimator settings must be positive".into()));
        }
        if !(self.average_fraction > 0.0 && self.average_fraction <= 1.0) {
            return Err(Error::Config("average_fraction must lie in (0, 1]".into()));
        }
        if self.epsilon.is_some_and(|e| !(e >= 0.0)) || !(self.epsilon_fraction >= 0.0) {
            return Err(Error::Config("distortion budget must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `ln(eʸ − 1)`, the inverse of softplus.
fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 { y } else { libm::log(libm::expm1(y)) }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.99;
        self.t += 1;
        let (c1, c2) = (1.0 - libm::pow(B1, f64::from(self.t)), 1.0 - libm::pow(B2, f64::from(self.t)));
        for i in 0..p.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / (libm::sqrt(self.v[i] / c2) + 1e-8);
        }
    }
}

/// Mean squared feature distortion over `eps.rows()` draws at scale `sigma`.
fn distortion(net: &Network, x: &[f64], target: &Tensor, sigma: &[f64], eps: &Tensor) -> Result<f64> {
    let xt = Tensor::from_fn(eps.rows(), x.len(), |i, j| x[j] + sigma[j] * eps.row(i)[j]);
    let f = net.forward_features(&xt)?;
    let mut acc = 0.0;
    for i in 0..f.rows() {
        acc += f.row(i).iter().zip(target.row(0)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(acc / f.rows() as f64)
}

/// Learn σ for one input `image` (flattened, per-sample `shape`) against the
/// frozen `net`.
pub fn estimate_pixel_entropy(net: &Network, image: &[f64], shape: &[usize], cfg: &EntropyConfig) -> Result<EntropyMap> {
    cfg.validate()?;
    let d = image.len();
    if shape.iter().product::<usize>() != d || d == 0 {
        return Err(Error::shape("estimate_pixel_entropy", shape, &[d]));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "estimate_pixel_entropy" });
    }
    let x = Tensor::from_parts(vec![1, d], image.to_vec());
    let target = net.forward_features(&x)?;
    let epsilon = cfg.epsilon.unwrap_or_else(|| cfg.epsilon_fraction * target.data().iter().map(|v| v * v).sum::<f64>());

    let mean = image.iter().sum::<f64>() / d as f64;
    let std = libm::sqrt(image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64);
    let std = if std > 1e-12 { std } else { 1.0 };
    let rho_cap = inv_softplus(cfg.cap_factor * std);
    let mut rho = vec![inv_softplus(cfg.init_fraction * std); d];
    let mut adam = Adam { m: vec![0.0; d], v: vec![0.0; d], t: 0 };

    let avg_from = cfg.steps - (libm::ceil(cfg.average_fraction * cfg.steps as f64) as usize).clamp(1, cfg.steps);
    let mut sigma_sum = vec![0.0; d];
    for step in 0..cfg.steps {
        let mut rng = rng::seeded(cfg.seed.wrapping_add(step as u64), streams::ENTROPY);
        let eps = rng::normal_tensor(&mut rng, &[cfg.draws, d], 1.0);

        let mut tape = Tape::new();
        let vars = net.on_tape(&mut tape, false);
        let r = tape.param(Tensor::from_parts(vec![1, d], rho.clone()));
        let sigma = tape.softplus(r);
        let e = tape.constant(eps);
        let noise = tape.mul_row(e, sigma)?;
        let xv = tape.constant(x.clone());
        let xt = tape.add_row(noise, xv)?;
        let f = vars.features(&mut tape, xt)?;
        let tgt = tape.constant(Tensor::from_fn(cfg.draws, target.cols(), |_, j| target.row(0)[j]));
        let diff = tape.sub(f, tgt)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        let dist = tape.scale(total, 1.0 / cfg.draws as f64);
        let over = tape.add_scalar(dist, -epsilon);
        let hinge = tape.relu(over);
        let log_sigma = tape.log(sigma);
        let reward = tape.sum(log_sigma);
        let penalty = tape.scale(hinge, cfg.beta);
        let loss = tape.sub(penalty, reward)?;
        let g = tape.backward(loss)?.wrt(r);

        adam.step(&mut rho, g.data(), cfg.step_size);
        rho.iter_mut().for_each(|p| *p = p.min(rho_cap));
        if step >= avg_from {
            sigma_sum.iter_mut().zip(&rho).for_each(|(s, &p)| *s += softplus(p));
        }
    }
    let n_avg = (cfg.steps - avg_from) as f64;
    let sigma: Vec<f64> = sigma_sum.iter().map(|s| s / n_avg).collect();

    let check = rng::normal_tensor(&mut rng::seeded(cfg.seed.wrapping_add(cfg.steps as u64), streams::ENTROPY), &[cfg.check_draws, d], 1.0);
    let violation = (distortion(net, image, &target, &sigma, &check)? - epsilon).max(0.0);
    let converged = violation <= 2.0 * epsilon;
    if !converged {
        log::warn!("entropy estimate did not meet its distortion budget: violation {violation:.3e} > 2ε = {:.3e}", 2.0 * epsilon);
    }
    let mut map = EntropyMap::from_sigma(shape.to_vec(), sigma)?;
    map.violation = violation;
    map.epsilon = epsilon;
    map.converged = converged;
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    pub iou: f64,
    /// The union inside the overlap was empty; `iou` is then 0.
    pub degenerate: bool,
}

/// `|S¹ ∩ S²| / |S¹ ∪ S²|` over elements marked in `overlap`.
pub fn iou_from_masks(a: &[bool], b: &[bool], overlap: &[bool]) -> Result<Iou> {
    if a.len() != b.len() || a.len() != overlap.len() {
        return Err(Error::shape("iou_consistency", &[a.len()], &[b.len(), overlap.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&x, &y), &o) in a.iter().zip(b).zip(overlap) {
        if o {
            inter += usize::from(x && y);
            union += usize::from(x || y);
        }
    }
    Ok(if union == 0 {
        Iou { iou: 0.0, degenerate: true }
    } else {
        Iou { iou: inter as f64 / union as f64, degenerate: false }
    })
}

/// IoU of the concept masks of two maps already expressed in the same
/// coordinates (see [`EntropyMap::to_original`]).
pub fn iou_consistency(a: &EntropyMap, b: &EntropyMap, overlap: &[bool]) -> Result<Iou> {
    iou_from_masks(&a.concept_mask, &b.concept_mask, overlap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageQuantification {
    pub index: usize,
    pub turns: [u8; 2],
    pub mean_entropy: [f64; 2],
    pub iou: f64,
    pub degenerate: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantificationSummary {
    pub mean_entropy: f64,
    pub mean_iou: f64,
    pub images: Vec<ImageQuantification>,
}

/// Entropy maps for two independently rotated views of each image, mapped
/// back to the original grid and compared by IoU.
pub fn quantify_views(
    net: &Network,
    images: &Tensor,
    indices: &[usize],
    channels: usize,
    side: usize,
    cfg: &EntropyConfig,
) -> Result<(QuantificationSummary, Vec<[EntropyMap; 2]>)> {
    use rand::Rng;
    if indices.is_empty() {
        return Err(Error::Data("no images to quantify".into()));
    }
    let shape = vec![channels, side, side];
    let mut rng = rng::seeded(cfg.seed, streams::AUGMENT);
    let mut images_out = Vec::with_capacity(indices.len());
    let mut maps = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = images.row(i);
        let turns = [rng.gen_range(0..4u8), rng.gen_range(0..4u8)];
        let mut pair = Vec::with_capacity(2);
        for (v, &t) in turns.iter().enumerate() {
            let vm = ViewMap::rotation(channels, side, t);
            let view = vm.forward(img);
            let c = EntropyConfig { seed: cfg.seed.wrapping_add((i * 2 + v) as u64 * 7919), ..cfg.clone() };
            pair.push(estimate_pixel_entropy(net, &view, &shape, &c)?.to_original(&vm)?);
        }
        let overlap = ViewMap::rotation(channels, side, turns[0]).overlap();
        let iou = iou_consistency(&pair[0], &pair[1], &overlap)?;
        images_out.push(ImageQuantification {
            index: i,
            turns,
            mean_entropy: [pair[0].mean_entropy, pair[1].mean_entropy],
            iou: iou.iou,
            degenerate: iou.degenerate,
            converged: pair[0].converged && pair[1].converged,
        });
        let b = pair.pop().unwrap();
        let a = pair.pop().unwrap();
        maps.push([a, b]);
    }
    let n = images_out.len() as f64;
    Ok((
        QuantificationSummary {
            mean_entropy: images_out.iter().map(|q| 0.5 * (q.mean_entropy[0] + q.mean_entropy[1])).sum::<f64>() / n,
            mean_iou: images_out.iter().map(|q| q.iou).sum::<f64>() / n,
            images: images_out,
        },
        maps,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Affine, ArchSpec};
    use crate::rng::{normal_vec, seeded};
    use proptest::prelude::*;

    fn linear_net(weight: Tensor) -> Network {
        let (i, o) = (weight.rows(), weight.cols());
        Network {
            arch: ArchSpec::mlp(i, &[o], None),
            layers: vec![Affine { weight, bias: Tensor::zeros(&[1, o]) }],
            projection: None,
        }
    }

    fn identity_net(d: usize) -> Network {
        linear_net(Affine::identity(d).weight)
    }

    #[test]
    fn unit_sigma_gives_gaussian_entropy() {
        let m = EntropyMap::from_sigma(vec![2, 2], vec![1.0; 4]).unwrap();
        assert!(m.entropy.iter().all(|h| (h - 1.4189).abs() < 1e-4));
        assert!((HALF_LOG_2PI_E - 0.5 * libm::log(2.0 * core::f64::consts::PI * core::f64::consts::E)).abs() < 1e-15);
        // Equal entropies leave the strict-inequality mask empty.
        assert!(m.concept_mask.iter().all(|&b| !b));
    }

    #[test]
    fn average_entropy_examples() {
        let mut m = EntropyMap::from_sigma(vec![2], vec![1.0, 1.0]).unwrap();
        m.entropy = vec![0.0, 2.0];
        assert_eq!(average_entropy(&m), 1.0);
        let sig = normal_vec(&mut seeded(1, 0), 17, 1.0).iter().map(|v| libm::exp(*v)).collect();
        let r = EntropyMap::from_sigma(vec![17], sig).unwrap();
        let oracle = r.entropy.iter().fold(0.0, |a, h| a + h) / 17.0;
        assert_eq!(average_entropy(&r), oracle);
        assert!((r.mean_entropy - oracle).abs() < 1e-12);
        assert!(r.concept_mask.iter().any(|&b| !b));
    }

    #[test]
    fn iou_examples() {
        let full = [true; 4];
        let a = [true, true, false, false];
        assert_eq!(iou_from_masks(&a, &a, &full).unwrap().iou, 1.0);
        assert_eq!(iou_from_masks(&a, &[false, false, true, true], &full).unwrap().iou, 0.0);
        assert_eq!(iou_from_masks(&a, &[true, false, true, false], &full).unwrap().iou, 1.0 / 3.0);
        let empty = iou_from_masks(&[false; 4], &[false; 4], &full).unwrap();
        assert_eq!(empty, Iou { iou: 0.0, degenerate: true });
        // Elements outside the overlap are ignored.
        assert_eq!(iou_from_masks(&a, &[true, false, true, false], &[true, true, false, false]).unwrap().iou, 0.5);
    }

    #[test]
    fn constant_network_hits_sigma_cap() {
        let net = linear_net(Tensor::zeros(&[3, 2]));
        let img = [0.0, 1.0, 2.0];
        let std = libm::sqrt(2.0 / 3.0);
        // Enough steps for the bound to bind before averaging starts.
        let cfg = EntropyConfig { steps: 600, ..EntropyConfig::default() };
        let map = estimate_pixel_entropy(&net, &img, &[3], &cfg).unwrap();
        for (s, h) in map.sigma.iter().zip(&map.entropy) {
            assert!((s - 10.0 * std).abs() < 1e-6 * std, "{s}");
            assert!((h - (libm::log(10.0 * std) + HALF_LOG_2PI_E)).abs() < 1e-6);
        }
        assert!(map.converged);
    }

    /// Maximise `2 log σ − β·max(0, 2σ² − ε)` over a fine grid of σ.
    fn grid_optimum(eps: f64, beta: f64) -> f64 {
        let obj = |s: f64| 2.0 * libm::log(s) - beta * (2.0 * s * s - eps).max(0.0);
        (1..200_000).map(|i| i as f64 * 1e-5).fold((f64::NEG_INFINITY, 0.0), |(bo, bs), s| {
            let o = obj(s);
            if o > bo { (o, s) } else { (bo, bs) }
        }).1
    }

    #[test]
    fn identity_network_matches_grid_optimum() {
        let net = identity_net(2);
        let cfg = EntropyConfig { draws: 512, epsilon: Some(0.1), ..EntropyConfig::default() };
        let map = estimate_pixel_entropy(&net, &[1.0, 2.0], &[2], &cfg).unwrap();
        let want = grid_optimum(0.1, cfg.beta);
        assert!((want - libm::sqrt(0.05)).abs() < 1e-4);
        for s in &map.sigma {
            assert!((s - want).abs() / want < 0.1, "σ = {s}, oracle {want}");
        }
    }

    #[test]
    fn looser_budget_means_more_entropy() {
        let net = identity_net(2);
        let h: Vec<f64> = [0.02, 0.1, 0.5]
            .iter()
            .map(|&e| {
                let cfg = EntropyConfig { draws: 64, epsilon: Some(e), ..EntropyConfig::default() };
                estimate_pixel_entropy(&net, &[1.0, 2.0], &[2], &cfg).unwrap().mean_entropy
            })
            .collect();
        assert!(h[0] < h[1] && h[1] < h[2], "{h:?}");
    }

    #[test]
    fn deterministic_per_seed() {
        let net = identity_net(3);
        let cfg = EntropyConfig { steps: 30, ..EntropyConfig::default() };
        let a = estimate_pixel_entropy(&net, &[0.3, -1.0, 2.0], &[3], &cfg).unwrap();
        assert_eq!(a, estimate_pixel_entropy(&net, &[0.3, -1.0, 2.0], &[3], &cfg).unwrap());
    }

    #[test]
    fn remap_round_trips_rotation() {
        let sig: Vec<f64> = (1..=9).map(f64::from).collect();
        let m = EntropyMap::from_sigma(vec![1, 3, 3], sig.clone()).unwrap();
        let vm = ViewMap::rotation(1, 3, 1);
        let viewed = EntropyMap::from_sigma(vec![1, 3, 3], vm.forward(&sig)).unwrap();
        assert_eq!(viewed.to_original(&vm).unwrap().sigma, m.sigma);
        assert_eq!(iou_consistency(&viewed.to_original(&vm).unwrap(), &m, &vm.overlap()).unwrap().iou, 1.0);
    }

    proptest! {
        #[test]
        fn iou_bounded_and_symmetric(a in proptest::collection::vec(any::<bool>(), 12), b in proptest::collection::vec(any::<bool>(), 12), o in proptest::collection::vec(any::<bool>(), 12)) {
            let x = iou_from_masks(&a, &b, &o).unwrap();
            let y = iou_from_masks(&b, &a, &o).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x.iou));
        }
    }
}
