//! Experiment configuration: one JSON document describing domains, dataset
//! sizes, networks, training and the method list.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distiller::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::IFGSM_STEPS;
use crate::nets::DepthNetworkSpec;
use crate::simworld::{DatasetManifest, DomainConfig, LoadedDataset};

/// Environment variable overriding `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "DFDEPTH_OUTPUT_ROOT";

/// The held-out split draws scenes from a disjoint seed range.
pub const TEST_NAMESPACE_OFFSET: u64 = 500_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSizes {
    pub train_a: usize,
    pub test_a: usize,
    pub ood: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self { train_a: 1800, test_a: 200, ood: 1800 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilons: Vec<f64>,
    pub steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilons: [0.0, 1.0, 2.0, 4.0].iter().map(|e| e / 255.0).collect(), steps: IFGSM_STEPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Target domain (the teacher's training data).
    pub domain_a: DomainConfig,
    /// Out-of-distribution proxy domain.
    pub domain_b: DomainConfig,
    pub sizes: DatasetSizes,
    pub teacher: DepthNetworkSpec,
    pub student: DepthNetworkSpec,
    /// Supervised pretraining of the teacher.
    pub teacher_train: TrainConfig,
    /// Student training (supervised and all distillation methods).
    pub train: TrainConfig,
    /// Noise inputs per epoch for `random_noise_kd`; defaults to the OOD size.
    pub noise_samples_per_epoch: Option<usize>,
    /// Teacher checkpoint for distillation; defaults to the
    /// `teacher_supervised` run under `output_root`.
    pub teacher_checkpoint: Option<PathBuf>,
    pub attack: AttackConfig,
    pub methods: Vec<Method>,
    pub output_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let a = DomainConfig::target_default();
        let size = a.image_size;
        let max_depth = a.depth_range.1;
        Self {
            domain_a: a,
            domain_b: DomainConfig::ood_default(),
            sizes: DatasetSizes::default(),
            teacher: DepthNetworkSpec::teacher(max_depth, size),
            student: DepthNetworkSpec::student(max_depth, size),
            teacher_train: TrainConfig { lr: 1e-3, ..TrainConfig::default() },
            train: TrainConfig::default(),
            noise_samples_per_epoch: None,
            teacher_checkpoint: None,
            attack: AttackConfig::default(),
            methods: Method::ALL.to_vec(),
            output_root: PathBuf::from("runs"),
        }
    }
}

/// Every leaf key of [`ExperimentConfig`], dotted. Arrays are leaves.
pub const CONFIG_KEYS: &[&str] = &[
    "attack.epsilons",
    "attack.steps",
    "domain_a.depth_range",
    "domain_a.image_size",
    "domain_a.name",
    "domain_a.num_classes",
    "domain_a.num_objects",
    "domain_a.palette",
    "domain_a.pixel_noise_sigma",
    "domain_a.seed_namespace",
    "domain_a.texture_style",
    "domain_b.depth_range",
    "domain_b.image_size",
    "domain_b.name",
    "domain_b.num_classes",
    "domain_b.num_objects",
    "domain_b.palette",
    "domain_b.pixel_noise_sigma",
    "domain_b.seed_namespace",
    "domain_b.texture_style",
    "methods",
    "noise_samples_per_epoch",
    "output_root",
    "sizes.ood",
    "sizes.test_a",
    "sizes.train_a",
    "student.base_width",
    "student.depth_stages",
    "student.input_size",
    "student.max_depth",
    "student.uses_batchnorm",
    "teacher.base_width",
    "teacher.depth_stages",
    "teacher.input_size",
    "teacher.max_depth",
    "teacher.uses_batchnorm",
    "teacher_checkpoint",
    "teacher_train.ablation.transform_raw_branch",
    "teacher_train.ablation.use_g",
    "teacher_train.ablation.use_mixing",
    "teacher_train.ablation.use_rec",
    "teacher_train.adam_beta1",
    "teacher_train.adam_beta2",
    "teacher_train.adam_eps",
    "teacher_train.alpha",
    "teacher_train.batch_size",
    "teacher_train.beta",
    "teacher_train.bn_layers",
    "teacher_train.branch_weights.raw",
    "teacher_train.branch_weights.transformed",
    "teacher_train.epochs",
    "teacher_train.g_lr",
    "teacher_train.lambda",
    "teacher_train.lr",
    "teacher_train.lr_decay.every",
    "teacher_train.lr_decay.factor",
    "teacher_train.mixing.include_background",
    "teacher_train.seed",
    "train.ablation.transform_raw_branch",
    "train.ablation.use_g",
    "train.ablation.use_mixing",
    "train.ablation.use_rec",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.alpha",
    "train.batch_size",
    "train.beta",
    "train.bn_layers",
    "train.branch_weights.raw",
    "train.branch_weights.transformed",
    "train.epochs",
    "train.g_lr",
    "train.lambda",
    "train.lr",
    "train.lr_decay.every",
    "train.lr_decay.factor",
    "train.mixing.include_background",
    "train.seed",
];

fn field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{prefix}: {m}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.domain_a.validate().map_err(|e| field("domain_a", e))?;
        self.domain_b.validate().map_err(|e| field("domain_b", e))?;
        self.teacher.validate().map_err(|e| field("teacher", e))?;
        self.student.validate().map_err(|e| field("student", e))?;
        self.teacher_train.validate().map_err(|e| field("teacher_train", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        crate::nets::validate_compression_pair(&self.teacher, &self.student).map_err(|e| field("student", e))?;
        let s = &self.sizes;
        if s.train_a == 0 || s.test_a == 0 || s.ood < 2 {
            return Err(Error::Config(format!("sizes: train_a and test_a must be positive and ood at least 2, got {s:?}")));
        }
        for (name, spec) in [("teacher", &self.teacher), ("student", &self.student)] {
            for (dname, d) in [("domain_a", &self.domain_a), ("domain_b", &self.domain_b)] {
                if spec.input_size != d.image_size {
                    return Err(Error::Config(format!(
                        "{name}.input_size: {:?} differs from {dname}.image_size {:?}",
                        spec.input_size, d.image_size
                    )));
                }
            }
        }
        if self.domain_a.seed_namespace == self.domain_b.seed_namespace {
            return Err(Error::Config("domain_b.seed_namespace: must differ from domain_a's".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods: at least one method is required".into()));
        }
        if self.noise_samples_per_epoch.is_some_and(|n| n < 2) {
            return Err(Error::Config("noise_samples_per_epoch: must be at least 2".into()));
        }
        if self.attack.epsilons.is_empty() || self.attack.epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config("attack.epsilons: need at least one finite, non-negative bound".into()));
        }
        if self.attack.steps == 0 {
            return Err(Error::Config("attack.steps: must be at least 1".into()));
        }
        if self.output_root.as_os_str().is_empty() {
            return Err(Error::Config("output_root: must not be empty".into()));
        }
        Ok(())
    }

    /// Applies the output-root environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.output_root = PathBuf::from(root);
        }
        self
    }

    /// Domain of the held-out target split.
    pub fn domain_a_test(&self) -> DomainConfig {
        DomainConfig {
            name: format!("{}_test", self.domain_a.name),
            seed_namespace: self.domain_a.seed_namespace + TEST_NAMESPACE_OFFSET,
            ..self.domain_a.clone()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_root.join("data")
    }

    /// `(split name, domain, count)` of every generated dataset.
    pub fn splits(&self) -> [(&'static str, DomainConfig, usize); 3] {
        [
            ("train_a", self.domain_a.clone(), self.sizes.train_a),
            ("test_a", self.domain_a_test(), self.sizes.test_a),
            ("ood", self.domain_b.clone(), self.sizes.ood),
        ]
    }

    /// Loads a generated split, checking it matches the configuration.
    pub fn load_split(&self, split: &str) -> Result<LoadedDataset> {
        let (_, domain, count) = self
            .splits()
            .into_iter()
            .find(|(n, _, _)| *n == split)
            .ok_or_else(|| Error::InvalidInput(format!("unknown split {split:?}")))?;
        let dir = self.data_dir().join(split);
        if !dir.join("manifest.json").is_file() {
            return Err(Error::Missing(format!("dataset {} not found; run `gen` first", dir.display())));
        }
        let manifest = DatasetManifest::load(&dir)?;
        if manifest.domain != domain || manifest.count != count {
            return Err(Error::Missing(format!("dataset {} does not match the configuration; rerun `gen`", dir.display())));
        }
        LoadedDataset::from_manifest(&manifest)
    }

    pub fn teacher_checkpoint_path(&self) -> PathBuf {
        self.teacher_checkpoint.clone().unwrap_or_else(|| {
            crate::distiller::run_dir(&self.output_root, Method::TeacherSupervised, None, self.teacher_train.seed).join("ckpt").join("model.ckpt")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn leaves(prefix: &str, v: &serde_json::Value, out: &mut BTreeSet<String>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, x) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaves(&p, x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string());
            }
        }
    }

    #[test]
    fn registry_lists_every_key() {
        let mut keys = BTreeSet::new();
        leaves("", &serde_json::to_value(ExperimentConfig::default()).unwrap(), &mut keys);
        let registry: BTreeSet<String> = CONFIG_KEYS.iter().map(|s| s.to_string()).collect();
        assert_eq!(keys, registry);
    }

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!((c.train.lr, c.train.epochs, c.train.batch_size, c.train.alpha, c.train.beta, c.train.lambda), (1e-4, 20, 8, 0.001, 0.001, 0.9));
        assert_eq!((c.train.lr_decay.every, c.train.lr_decay.factor), (5, 0.5));
        assert_eq!(c.methods, Method::ALL);
    }

    #[test]
    fn round_trips_and_accepts_partial_documents() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let p = ExperimentConfig::from_json(r#"{"sizes": {"ood": 300}, "methods": ["kd_ood"]}"#).unwrap();
        assert_eq!(p.sizes.ood, 300);
        assert_eq!(p.sizes.train_a, 1800);
        assert_eq!(p.methods, [Method::KdOod]);
    }

    #[test]
    fn rejects_with_field_level_messages() {
        let cases = [
            (r#"{"train": {"lr_typo": 1}}"#, "lr_typo"),
            (r#"{"methods": ["kd"]}"#, "unknown variant"),
            (r#"{"methods": []}"#, "methods"),
            (r#"{"train": {"batch_size": 1}}"#, "train"),
            (r#"{"sizes": {"ood": 1}}"#, "sizes"),
            (r#"{"student": {"base_width": 8, "depth_stages": 4, "uses_batchnorm": true, "max_depth": 10.0, "input_size": [32, 32]}}"#, "student.input_size"),
            (r#"{"domain_b": {"name": "b", "image_size": [48, 64], "depth_range": [0.5, 10.0], "num_objects": [3, 8], "num_classes": 6, "palette": [[1,1,1]], "texture_style": "flat", "pixel_noise_sigma": 0.0, "seed_namespace": 7}}"#, "domain_b"),
            (r#"{"attack": {"steps": 0}}"#, "attack.steps"),
        ];
        for (text, needle) in cases {
            let e = ExperimentConfig::from_json(text).unwrap_err();
            assert!(e.is_config(), "{text}");
            assert!(e.to_string().contains(needle), "{text}: {e}");
        }
    }

    #[test]
    fn splits_use_disjoint_scenes() {
        let c = ExperimentConfig::default();
        let [(_, a, _), (_, t, _), (_, b, _)] = c.splits();
        assert_ne!(a.seed_namespace, t.seed_namespace);
        assert_ne!(a.seed_namespace, b.seed_namespace);
        assert_eq!(a.palette, t.palette);
    }
}
