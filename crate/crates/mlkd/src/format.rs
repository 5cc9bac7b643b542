//! Binary containers for checkpoints and datasets.
//!
//! Both start with the magic `MLKD`, a little-endian `u16` version and a
//! `u32` length-prefixed JSON header. Checkpoints follow with every parameter
//! tensor as `f64`; datasets with `f32` inputs and then `u16` labels. Sizes
//! implied by the header are checked against the file before anything is
//! allocated, and trailing bytes are rejected.

use std::fs;
use std::path::Path;

use mlkd_core::data::{Dataset, Provenance};
use mlkd_core::networks::{Checkpoint, CheckpointDescriptor};
use mlkd_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MlkdError, Result};

pub const MAGIC: &[u8; 4] = b"MLKD";
pub const VERSION: u16 = 1;
/// Headers larger than this are treated as corrupt.
const MAX_HEADER: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub labels_present: bool,
    #[serde(rename = "K")]
    pub k: usize,
    pub generator: Option<Provenance>,
}

fn write_prefix(out: &mut Vec<u8>, header: &[u8]) -> Result<()> {
    let len = u32::try_from(header.len()).map_err(|_| MlkdError::Runtime("header too large".into()))?;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(header);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MlkdError::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Magic, version and JSON header.
    fn prefix<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        if self.take(4, "magic")? != MAGIC {
            return Err(MlkdError::format(0, "bad magic"));
        }
        let at = self.pos;
        let version = u16::from_le_bytes(self.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(MlkdError::format(at, format!("unsupported version {version}")));
        }
        let at = self.pos;
        let len = u32::from_le_bytes(self.take(4, "header length")?.try_into().unwrap()) as usize;
        if len > MAX_HEADER {
            return Err(MlkdError::format(at, format!("header length {len} is implausible")));
        }
        let at = self.pos;
        let raw = self.take(len, "header")?;
        serde_json::from_slice(raw).map_err(|e| MlkdError::format(at, format!("invalid header: {e}")))
    }

    /// Fails unless exactly `n` bytes are left.
    fn expect_exact(&self, n: Option<usize>, what: &str) -> Result<()> {
        match n {
            Some(n) if n == self.remaining() => Ok(()),
            Some(n) if n > self.remaining() => Err(MlkdError::format(
                self.pos,
                format!("truncated {what}: header implies {n} bytes, {} remain", self.remaining()),
            )),
            Some(n) => Err(MlkdError::format(self.pos + n, "trailing bytes after payload")),
            None => Err(MlkdError::format(self.pos, format!("{what} size overflows"))),
        }
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ckpt.descriptor()).map_err(|e| MlkdError::Runtime(e.to_string()))?;
    let params = ckpt.params();
    let mut out = Vec::with_capacity(10 + header.len() + 8 * params.iter().map(|p| p.len()).sum::<usize>());
    write_prefix(&mut out, &header)?;
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let desc: CheckpointDescriptor = r.prefix()?;
    desc.arch.validate().map_err(|e| MlkdError::format(10, e.to_string()))?;
    let shapes = Checkpoint::param_shapes(&desc);
    let count = shapes
        .iter()
        .try_fold(0usize, |acc, s| s.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| acc.checked_add(n)));
    r.expect_exact(count.and_then(|c| c.checked_mul(8)), "parameters")?;
    let mut params = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(8 * n, "parameters")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(Tensor::new(shape, data)?);
    }
    Ok(Checkpoint::from_params(&desc, params)?)
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.classes() > usize::from(u16::MAX) + 1 {
        return Err(MlkdError::Runtime(format!("{} classes do not fit u16 labels", ds.classes())));
    }
    let header = DatasetHeader {
        dtype: "f32".into(),
        shape: ds.shape().to_vec(),
        labels_present: ds.labels().is_some(),
        k: ds.classes(),
        generator: ds.provenance.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| MlkdError::Runtime(e.to_string()))?;
    let mut out = Vec::with_capacity(10 + header.len() + 4 * ds.inputs().len() + 2 * ds.len());
    write_prefix(&mut out, &header)?;
    for v in ds.inputs() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = ds.labels() {
        for &l in labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let h: DatasetHeader = r.prefix()?;
    if h.dtype != "f32" {
        return Err(MlkdError::format(10, format!("unsupported dtype {:?}", h.dtype)));
    }
    if h.shape.len() < 2 {
        return Err(MlkdError::format(10, format!("shape {:?} has no sample dimension", h.shape)));
    }
    let n_inputs = h.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = h.shape[0];
    let size = n_inputs
        .and_then(|c| c.checked_mul(4))
        .and_then(|b| if h.labels_present { b.checked_add(2 * n) } else { Some(b) });
    r.expect_exact(size, "payload")?;
    let raw = r.take(4 * n_inputs.unwrap(), "inputs")?;
    let inputs = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let labels = if h.labels_present {
        let raw = r.take(2 * n, "labels")?;
        Some(raw.chunks_exact(2).map(|c| usize::from(u16::from_le_bytes(c.try_into().unwrap()))).collect())
    } else {
        None
    };
    Dataset::new(inputs, h.shape, labels, h.k, h.generator).map_err(|e| MlkdError::format(10, e.to_string()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MlkdError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MlkdError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| MlkdError::io(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_bytes(path, &checkpoint_to_bytes(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&read(path)?)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_bytes(path, &dataset_to_bytes(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&read(path)?)
}

/// Frozen features in the dataset container (rows as samples), for external
/// plotting tools. Values are narrowed to `f32`.
pub fn features_to_dataset(features: &Tensor, labels: Option<Vec<usize>>, classes: usize) -> Result<Dataset> {
    let inputs = features.data().iter().map(|&v| v as f32).collect();
    Ok(Dataset::new(inputs, features.shape().to_vec(), labels, classes.max(1), None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlkd_core::data::{generate_synthetic, GeneratorSpec};
    use mlkd_core::networks::{init_network, make_transform_head, ArchSpec};

    fn ckpt(head: bool) -> Checkpoint {
        let network = init_network(&ArchSpec::mlp(5, &[7, 3], Some(4)), 2).unwrap();
        Checkpoint {
            network,
            head: head.then(|| make_transform_head(3, 6, 2.0, 1).unwrap()),
            seed: 2,
            epochs: 11,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for head in [false, true] {
            let c = ckpt(head);
            let bytes = checkpoint_to_bytes(&c).unwrap();
            assert_eq!(&bytes[..4], MAGIC);
            assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
            assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn dataset_round_trip_flat_and_images() {
        for spec in [GeneratorSpec::clusters(3, 4, 5, 2.0, 0.5, true), GeneratorSpec::bars(2, 3, 6, 1.0, 0.1)] {
            let ds = generate_synthetic(&spec, 9).unwrap();
            let bytes = dataset_to_bytes(&ds).unwrap();
            assert_eq!(dataset_from_bytes(&bytes).unwrap(), ds);
        }
        let unlabeled = Dataset::new(vec![1.5; 6], vec![3, 2], None, 2, None).unwrap();
        assert_eq!(dataset_from_bytes(&dataset_to_bytes(&unlabeled).unwrap()).unwrap(), unlabeled);
    }

    #[test]
    fn header_is_the_documented_json() {
        let ds = generate_synthetic(&GeneratorSpec::clusters(2, 2, 3, 1.0, 1.0, false), 0).unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
        assert_eq!(v["dtype"], "f32");
        assert_eq!(v["shape"], serde_json::json!([4, 3]));
        assert_eq!(v["labels_present"], true);
        assert_eq!(v["K"], 2);
        assert_eq!(v["generator"]["seed"], 0);
        assert_eq!(bytes.len(), 10 + len + 4 * 12 + 2 * 4);
    }

    #[test]
    fn corrupt_magic_and_version() {
        let mut bytes = checkpoint_to_bytes(&ckpt(false)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(MlkdError::Format { offset: 0, .. })));
        let mut bytes = checkpoint_to_bytes(&ckpt(false)).unwrap();
        bytes[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(MlkdError::Format { offset: 4, .. })));
    }

    #[test]
    fn every_truncation_and_extension_is_rejected() {
        let ds = generate_synthetic(&GeneratorSpec::clusters(2, 3, 2, 1.0, 1.0, false), 1).unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(dataset_from_bytes(&bytes[..cut]), Err(MlkdError::Format { .. })), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(dataset_from_bytes(&long), Err(MlkdError::Format { .. })));

        let bytes = checkpoint_to_bytes(&ckpt(true)).unwrap();
        for cut in 0..bytes.len() {
            assert!(checkpoint_from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn oversized_shape_fails_before_allocation() {
        let header = br#"{"dtype":"f32","shape":[1000000000,1000000000],"labels_present":true,"K":2,"generator":null}"#;
        let mut bytes = Vec::new();
        write_prefix(&mut bytes, header).unwrap();
        bytes.extend_from_slice(&[0; 16]);
        let err = dataset_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, MlkdError::Format { offset, .. } if offset == 10 + header.len()), "{err}");
        let huge = br#"{"dtype":"f32","shape":[18446744073709551615,4],"labels_present":false,"K":2,"generator":null}"#;
        let mut bytes = Vec::new();
        write_prefix(&mut bytes, huge).unwrap();
        assert!(matches!(dataset_from_bytes(&bytes), Err(MlkdError::Format { .. })));
    }

    #[test]
    fn labels_outside_k_rejected() {
        let ds = Dataset::new(vec![0.0; 4], vec![2, 2], Some(vec![0, 1]), 2, None).unwrap();
        let mut bytes = dataset_to_bytes(&ds).unwrap();
        let n = bytes.len();
        bytes[n - 2] = 5;
        assert!(matches!(dataset_from_bytes(&bytes), Err(MlkdError::Format { .. })));
    }
}
