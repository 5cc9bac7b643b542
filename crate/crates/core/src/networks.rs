//! Multilayer-perceptron feature extractors, classification projections and
//! the student-to-teacher transform heads.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::rng::{self, streams, DetRng};
use crate::{Error, Result, Tensor};

/// Layer widths of a [`Network`]. `widths` lists every hidden width followed
/// by the feature dimension; `input_shape` is the per-sample shape (flat
/// vectors or `C×H×W` images, which are flattened on entry).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
}

impl ArchSpec {
    pub fn mlp(input_dim: usize, widths: &[usize], classes: Option<usize>) -> Self {
        Self {
            input_shape: vec![input_dim],
            widths: widths.to_vec(),
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("architecture needs at least one layer".into()));
        }
        if self.input_shape.is_empty() || self.input_dim() == 0 || self.widths.contains(&0) {
            return Err(Error::Config("architecture widths must be positive".into()));
        }
        if self.classes == Some(0) {
            return Err(Error::Config("class count must be positive".into()));
        }
        Ok(())
    }
}

/// `x ↦ x·W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(rng: &mut DetRng, fan_in: usize, fan_out: usize) -> Self {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let w = rng::uniform_vec(rng, fan_in * fan_out, bound);
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Tensor::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 }),
            bias: Tensor::zeros(&[1, dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.as_matrix().matmul(&self.weight)?.add_row(self.bias.data())
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> AffineVars {
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AffineVars {
            weight: leaf(tape, &self.weight),
            bias: leaf(tape, &self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

impl AffineVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Feature extractor with an optional linear classification projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: ArchSpec,
    pub layers: Vec<Affine>,
    pub projection: Option<Affine>,
}

pub fn init_network(arch: &ArchSpec, seed: u64) -> Result<Network> {
    arch.validate()?;
    let mut rng = rng::seeded(seed, streams::INIT);
    let mut layers = Vec::with_capacity(arch.widths.len());
    let mut fan_in = arch.input_dim();
    for &w in &arch.widths {
        layers.push(Affine::xavier(&mut rng, fan_in, w));
        fan_in = w;
    }
    let projection = arch.classes.map(|k| Affine::xavier(&mut rng, fan_in, k));
    Ok(Network {
        arch: arch.clone(),
        layers,
        projection,
    })
}

impl Network {
    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn classes(&self) -> Option<usize> {
        self.projection.as_ref().map(Affine::out_dim)
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.arch.input_dim() {
            return Err(Error::shape(
                "forward_features",
                batch.shape(),
                &[batch.rows(), self.arch.input_dim()],
            ));
        }
        Ok(())
    }

    /// Last-layer representation `z` (pre-projection).
    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut h = batch.as_matrix();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    /// `z·W + b`.
    pub fn forward_logits(&self, z: &Tensor) -> Result<Tensor> {
        let proj = self.projection.as_ref().ok_or_else(|| {
            Error::Capability("network has no classification projection (feature-only)".into())
        })?;
        if z.cols() != proj.in_dim() {
            return Err(Error::shape("forward_logits", z.shape(), &[z.rows(), proj.in_dim()]));
        }
        proj.forward(z)
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> NetVars {
        NetVars {
            layers: self.layers.iter().map(|l| l.on_tape(tape, trainable)).collect(),
            projection: self.projection.as_ref().map(|p| p.on_tape(tape, trainable)),
            input_dim: self.arch.input_dim(),
        }
    }

    /// Parameter tensors in declaration order: each layer's weight and bias,
    /// then the projection's.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter().chain(self.projection.iter()) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().chain(self.projection.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Expected shapes of [`Network::params`] for `arch`.
    pub fn param_shapes(arch: &ArchSpec) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut fan_in = arch.input_dim();
        for &w in &arch.widths {
            out.push(vec![fan_in, w]);
            out.push(vec![1, w]);
            fan_in = w;
        }
        if let Some(k) = arch.classes {
            out.push(vec![fan_in, k]);
            out.push(vec![1, k]);
        }
        out
    }

    pub fn from_params(arch: &ArchSpec, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = Self::param_shapes(arch);
        if shapes.len() != params.len() {
            return Err(Error::Contract("parameter count does not match architecture".into()));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(Error::shape("Network::from_params", s, p.shape()));
            }
        }
        let mut it = params.into_iter();
        let mut pair = || Affine {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let layers = arch.widths.iter().map(|_| pair()).collect();
        let projection = arch.classes.map(|_| pair());
        Ok(Self {
            arch: arch.clone(),
            layers,
            projection,
        })
    }
}

/// A [`Network`]'s parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub layers: Vec<AffineVars>,
    pub projection: Option<AffineVars>,
    input_dim: usize,
}

impl NetVars {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xs = tape.value(x);
        if xs.cols() != self.input_dim {
            return Err(Error::shape(
                "forward_features",
                xs.shape(),
                &[xs.rows(), self.input_dim],
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let p = self.projection.ok_or_else(|| {
            Error::Capability("network has no classification projection (feature-only)".into())
        })?;
        p.forward(tape, z)
    }

    /// Same order as [`Network::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .chain(self.projection.iter())
            .flat_map(AffineVars::vars)
            .collect()
    }
}

/// Dimensions of a two-layer transform head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

/// Two affine layers with one ReLU between them, mapping student features
/// into the teacher's representation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformHead {
    pub first: Affine,
    pub second: Affine,
}

/// Default hidden-width multiplier (relative to the teacher dimension).
pub const DEFAULT_HEAD_MULTIPLIER: f64 = 16.0;

pub fn make_transform_head(
    student_dim: usize,
    teacher_dim: usize,
    multiplier: f64,
    seed: u64,
) -> Result<TransformHead> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::param("multiplier", "must be positive"));
    }
    if student_dim == 0 || teacher_dim == 0 {
        return Err(Error::param("dims", "head dimensions must be at least 1"));
    }
    let hidden = (libm::round(multiplier * teacher_dim as f64) as usize).max(1);
    Ok(TransformHead::new(
        HeadSpec {
            input_dim: student_dim,
            hidden_dim: hidden,
            output_dim: teacher_dim,
        },
        seed,
    ))
}

impl TransformHead {
    /// Xavier initialisation from the alignment-head stream of `seed`.
    pub fn new(spec: HeadSpec, seed: u64) -> Self {
        Self::from_rng(spec, &mut rng::seeded(seed, streams::ALIGN_HEAD))
    }

    pub fn from_rng(spec: HeadSpec, rng: &mut DetRng) -> Self {
        Self {
            first: Affine::xavier(rng, spec.input_dim, spec.hidden_dim),
            second: Affine::xavier(rng, spec.hidden_dim, spec.output_dim),
        }
    }

    /// Identity weights and zero biases; acts as the identity on
    /// nonnegative inputs.
    pub fn identity(dim: usize) -> Self {
        Self {
            first: Affine::identity(dim),
            second: Affine::identity(dim),
        }
    }

    pub fn spec(&self) -> HeadSpec {
        HeadSpec {
            input_dim: self.first.in_dim(),
            hidden_dim: self.first.out_dim(),
            output_dim: self.second.out_dim(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.first.in_dim() {
            return Err(Error::shape("transform_head", x.shape(), &[x.rows(), self.first.in_dim()]));
        }
        let mut h = self.first.forward(x)?;
        relu_in_place(&mut h);
        self.second.forward(&h)
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            first: self.first.on_tape(tape, trainable),
            second: self.second.on_tape(tape, trainable),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.first.weight, &self.first.bias, &self.second.weight, &self.second.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.first.weight,
            &mut self.first.bias,
            &mut self.second.weight,
            &mut self.second.bias,
        ]
    }

    pub fn param_shapes(spec: &HeadSpec) -> Vec<Vec<usize>> {
        vec![
            vec![spec.input_dim, spec.hidden_dim],
            vec![1, spec.hidden_dim],
            vec![spec.hidden_dim, spec.output_dim],
            vec![1, spec.output_dim],
        ]
    }

    pub fn from_params(spec: &HeadSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::param_shapes(spec);
        if params.len() != 4 {
            return Err(Error::Contract("transform head needs four tensors".into()));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(Error::shape("TransformHead::from_params", s, p.shape()));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            first: Affine { weight: next(), bias: next() },
            second: Affine { weight: next(), bias: next() },
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub first: AffineVars,
    pub second: AffineVars,
}

impl HeadVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, h)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.first.vars().to_vec();
        v.extend(self.second.vars());
        v
    }
}

/// Trained network plus everything needed to reproduce or reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Alignment head trained alongside a distilled student, if any.
    pub head: Option<TransformHead>,
    pub seed: u64,
    pub epochs: usize,
}

/// Architecture descriptor stored alongside checkpoint parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDescriptor {
    pub arch: ArchSpec,
    #[serde(default)]
    pub head: Option<HeadSpec>,
    pub seed: u64,
    pub epochs: usize,
}

impl Checkpoint {
    pub fn descriptor(&self) -> CheckpointDescriptor {
        CheckpointDescriptor {
            arch: self.network.arch.clone(),
            head: self.head.as_ref().map(TransformHead::spec),
            seed: self.seed,
            epochs: self.epochs,
        }
    }

    /// Network parameters followed by head parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.network.params();
        if let Some(h) = &self.head {
            p.extend(h.params());
        }
        p
    }

    pub fn param_shapes(desc: &CheckpointDescriptor) -> Vec<Vec<usize>> {
        let mut s = Network::param_shapes(&desc.arch);
        if let Some(h) = &desc.head {
            s.extend(TransformHead::param_shapes(h));
        }
        s
    }

    pub fn from_params(desc: &CheckpointDescriptor, mut params: Vec<Tensor>) -> Result<Self> {
        let n_net = Network::param_shapes(&desc.arch).len();
        if params.len() < n_net {
            return Err(Error::Contract("too few parameter tensors".into()));
        }
        let head_params = params.split_off(n_net);
        let network = Network::from_params(&desc.arch, params)?;
        let head = match &desc.head {
            Some(spec) => Some(TransformHead::from_params(spec, head_params)?),
            None if head_params.is_empty() => None,
            None => return Err(Error::Contract("unexpected trailing parameters".into())),
        };
        Ok(Self {
            network,
            head,
            seed: desc.seed,
            epochs: desc.epochs,
        })
    }
}
