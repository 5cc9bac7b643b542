//! The JSON experiment file. Every section is optional; omitted fields take
//! the library defaults, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use mlkd_core::data::{generate_synthetic, split, Dataset, GeneratorSpec};
use mlkd_core::evaluation::{CkaKernel, ProbeConfig, DEFAULT_K};
use mlkd_core::networks::ArchSpec;
use mlkd_core::quantification::EntropyConfig;
use mlkd_core::training::DistillConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MlkdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub generator: GeneratorSpec,
    pub seed: u64,
    /// Held-out share of every class.
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::clusters(10, 600, 32, 2.0, 1.25, true),
            seed: 0,
            test_fraction: 1.0 / 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub widths: Vec<usize>,
    pub train: DistillConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            widths: vec![256, 256],
            train: DistillConfig::default().with_epochs(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub widths: Vec<usize>,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self { widths: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub probe: ProbeConfig,
    pub cka_kernel: CkaKernel,
    /// Second task for transfer probing; defaults to a reseeded copy of the
    /// training generator.
    pub transfer: Option<DataSection>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            probe: ProbeConfig::default(),
            cka_kernel: CkaKernel::DEFAULT_RBF,
            transfer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantifySection {
    pub entropy: EntropyConfig,
    /// Number of test images analysed.
    pub images: usize,
}

impl Default for QuantifySection {
    fn default() -> Self {
        Self { entropy: EntropyConfig::default(), images: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfigFile {
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub distill: DistillConfig,
    pub eval: EvalSection,
    pub quantify: QuantifySection,
    /// Student seeds for multi-seed commands.
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfigFile {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            distill: DistillConfig { head_multiplier: 2.0, ..DistillConfig::default() }.with_epochs(60),
            eval: EvalSection::default(),
            quantify: QuantifySection::default(),
            seeds: (0..5).collect(),
            output_dir: None,
        }
    }
}

impl ExperimentConfigFile {
    /// Parse a config document. Keys given in the document override the
    /// file-level defaults one by one, so a partial `distill` section keeps
    /// the desk-scale schedule rather than the library's 240-epoch one.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| MlkdError::Config(format!("config: {e}"));
        let user: Value = serde_json::from_str(text).map_err(bad)?;
        let mut merged = serde_json::to_value(Self::default()).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MlkdError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            MlkdError::Config(m) => MlkdError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.data.test_fraction;
        if !(0.0..1.0).contains(&t) {
            return Err(MlkdError::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        if self.teacher.widths.is_empty() || self.student.widths.is_empty() {
            return Err(MlkdError::Config("teacher and student need at least one layer".into()));
        }
        if self.seeds.is_empty() {
            return Err(MlkdError::Config("seeds must not be empty".into()));
        }
        self.teacher.train.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    /// Generate the configured data and split off the test share.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        generate_split(&self.data)
    }

    pub fn transfer_datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let section = self.eval.transfer.clone().unwrap_or_else(|| DataSection {
            seed: self.data.seed.wrapping_add(1_000),
            ..self.data.clone()
        });
        generate_split(&section)
    }

    pub fn teacher_arch(&self, ds: &Dataset) -> ArchSpec {
        arch_for(ds, &self.teacher.widths)
    }

    pub fn teacher_config(&self) -> DistillConfig {
        self.teacher.train.clone()
    }

    /// The distillation config for `seed`, with the student architecture
    /// filled in from the student section unless given explicitly.
    pub fn distill_config(&self, ds: &Dataset, seed: u64) -> DistillConfig {
        let mut cfg = DistillConfig { seed, ..self.distill.clone() };
        cfg.student.get_or_insert_with(|| arch_for(ds, &self.student.widths));
        cfg
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        // A different variant of a tagged enum replaces the value wholesale.
        (Value::Object(b), Value::Object(o)) if b.get("kind").is_none() || o.get("kind").is_none() || b.get("kind") == o.get("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn arch_for(ds: &Dataset, widths: &[usize]) -> ArchSpec {
    ArchSpec {
        input_shape: ds.sample_shape().to_vec(),
        widths: widths.to_vec(),
        classes: Some(ds.classes()),
    }
}

fn generate_split(section: &DataSection) -> Result<(Dataset, Option<Dataset>)> {
    let ds = generate_synthetic(&section.generator, section.seed)?;
    if section.test_fraction == 0.0 {
        return Ok((ds, None));
    }
    let t = section.test_fraction;
    let mut parts = split(&ds, &[1.0 - t, t], section.seed)?;
    let test = parts.pop().unwrap();
    Ok((parts.pop().unwrap(), Some(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfigFile::from_json("{}").unwrap(), ExperimentConfigFile::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [
            r#"{"bogus": 1}"#,
            r#"{"distill": {"lr": 0.1}}"#,
            r#"{"distill": {"weights": {"lambda3": 1.0}}}"#,
            r#"{"data": {"generator": {"family": "clusters", "classes": 2, "per_class": 3, "dim": 2, "spread": 1.0, "noise": 1.0, "colour": true}}}"#,
            r#"{"eval": {"probe": {"epochs": 3, "nesterov": true}}}"#,
        ] {
            assert!(matches!(ExperimentConfigFile::from_json(doc), Err(MlkdError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = ExperimentConfigFile::from_json(r#"{"distill": {"weights": {"lambda1": 3.0}, "epochs": 4}}"#).unwrap();
        assert_eq!(cfg.distill.weights.lambda1, 3.0);
        assert_eq!(cfg.distill.weights.lambda2, 20.0);
        assert_eq!(cfg.distill.epochs, 4);
        assert_eq!(cfg.distill.initial_lr, 0.05);
        assert_eq!(cfg.distill.head_multiplier, ExperimentConfigFile::default().distill.head_multiplier);
        assert_eq!(cfg.distill.lr_decay_epochs, ExperimentConfigFile::default().distill.lr_decay_epochs);
    }

    #[test]
    fn switching_enum_variant_replaces_it() {
        let cfg = ExperimentConfigFile::from_json(r#"{"eval": {"cka_kernel": {"kind": "linear"}}}"#).unwrap();
        assert_eq!(cfg.eval.cka_kernel, CkaKernel::Linear);
        let cfg = ExperimentConfigFile::from_json(r#"{"eval": {"cka_kernel": {"scale": 2.0}}}"#).unwrap();
        assert_eq!(cfg.eval.cka_kernel, CkaKernel::Rbf { scale: 2.0 });
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [r#"{"data": {"test_fraction": 1.0}}"#, r#"{"distill": {"epochs": 0}}"#, r#"{"seeds": []}"#] {
            let e = ExperimentConfigFile::from_json(doc).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{doc}: {e}");
        }
    }

    #[test]
    fn split_sizes_follow_test_fraction() {
        let cfg = ExperimentConfigFile::from_json(
            r#"{"data": {"generator": {"family": "clusters", "classes": 3, "per_class": 10, "dim": 2, "spread": 1.0, "noise": 1.0}, "test_fraction": 0.2}}"#,
        )
        .unwrap();
        let (train, test) = cfg.datasets().unwrap();
        assert_eq!((train.len(), test.unwrap().len()), (24, 6));
        let d = cfg.distill_config(&train, 7);
        assert_eq!(d.seed, 7);
        assert_eq!(d.student.unwrap(), ArchSpec::mlp(2, &[64, 64], Some(3)));
    }
}
