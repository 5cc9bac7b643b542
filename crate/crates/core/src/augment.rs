//! Second views of a batch: quarter-turn rotations for square images and
//! small Gaussian jitter for flat inputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Dataset;
use crate::rng::{self, DetRng};
use crate::{Error, Result, Tensor};

/// Jitter std as a fraction of each feature's dataset-wide std.
pub const JITTER_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum Augmenter {
    /// Rotate `channels × side × side` images by a uniformly drawn multiple
    /// of 90°.
    Rotate { channels: usize, side: usize },
    /// Add `N(0, std_j²)` noise to feature `j`.
    Jitter { std: Vec<f64> },
}

impl Augmenter {
    /// Rotation for `C×H×W` samples, jitter scaled from the feature spread
    /// for flat ones.
    pub fn for_dataset(ds: &Dataset) -> Result<Self> {
        match ds.sample_shape() {
            [c, h, w] => {
                if h != w {
                    return Err(Error::Augmentation(alloc::format!("rotation needs square images, got {h}×{w}")));
                }
                Ok(Augmenter::Rotate { channels: *c, side: *h })
            }
            [_] => Ok(Augmenter::Jitter {
                std: ds.feature_std().iter().map(|s| JITTER_SCALE * s).collect(),
            }),
            other => Err(Error::Augmentation(alloc::format!("unsupported sample shape {other:?}"))),
        }
    }

    fn sample_len(&self) -> usize {
        match self {
            Augmenter::Rotate { channels, side } => channels * side * side,
            Augmenter::Jitter { std } => std.len(),
        }
    }

    /// One view per row of `batch`, drawing from `rng`.
    pub fn apply(&self, batch: &Tensor, rng: &mut DetRng) -> Result<Augmented> {
        let d = self.sample_len();
        if batch.cols() != d {
            return Err(Error::shape("augment", batch.shape(), &[batch.rows(), d]));
        }
        let mut out = Vec::with_capacity(batch.len());
        let mut maps = Vec::with_capacity(batch.rows());
        for i in 0..batch.rows() {
            let row = batch.row(i);
            match self {
                Augmenter::Rotate { channels, side } => {
                    let turns = rng.gen_range(0..4u8);
                    let map = ViewMap::rotation(*channels, *side, turns);
                    out.extend(map.source.iter().map(|&s| row[s]));
                    maps.push(map);
                }
                Augmenter::Jitter { std } => {
                    out.extend(row.iter().zip(std).map(|(x, s)| x + s * rng::normal(rng)));
                    maps.push(ViewMap::identity(d));
                }
            }
        }
        Ok(Augmented {
            views: Tensor::from_parts(vec![batch.rows(), d], out),
            maps,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub views: Tensor,
    pub maps: Vec<ViewMap>,
}

/// Where each element of a view came from: `view[p] = original[source[p]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewMap {
    pub turns: u8,
    pub source: Vec<usize>,
}

impl ViewMap {
    pub fn identity(len: usize) -> Self {
        Self { turns: 0, source: (0..len).collect() }
    }

    /// `turns` counter-clockwise quarter turns of each `side × side` channel.
    pub fn rotation(channels: usize, side: usize, turns: u8) -> Self {
        let plane = side * side;
        let mut source: Vec<usize> = (0..channels * plane).collect();
        for _ in 0..turns % 4 {
            let prev = source.clone();
            for c in 0..channels {
                for i in 0..side {
                    for j in 0..side {
                        source[c * plane + i * side + j] = prev[c * plane + j * side + (side - 1 - i)];
                    }
                }
            }
        }
        Self { turns: turns % 4, source }
    }

    /// Apply this map to a per-element array of the original.
    pub fn forward<T: Copy>(&self, original: &[T]) -> Vec<T> {
        self.source.iter().map(|&s| original[s]).collect()
    }

    /// Bring a per-element array computed on the view back to the original's
    /// coordinates.
    pub fn to_original<T: Copy + Default>(&self, view: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); view.len()];
        for (p, &s) in self.source.iter().enumerate() {
            out[s] = view[p];
        }
        out
    }

    /// Original elements present in the view; every element under a pure
    /// rotation.
    pub fn overlap(&self) -> Vec<bool> {
        let mut seen = vec![false; self.source.len()];
        self.source.iter().for_each(|&s| seen[s] = true);
        seen
    }
}

/// Rotate a single `channels × side × side` image.
pub fn rotate(image: &[f64], channels: usize, side: usize, turns: u8) -> Result<Vec<f64>> {
    if image.len() != channels * side * side {
        return Err(Error::Augmentation(alloc::format!(
            "image of {} elements is not {channels}×{side}×{side}",
            image.len()
        )));
    }
    Ok(ViewMap::rotation(channels, side, turns).forward(image))
}
