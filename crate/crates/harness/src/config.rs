//! Experiment configuration: protocol defaults, the desk-scale profile and
//! file overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcnet::autodiff::Objective;
use pcnet::net::Hyper;
use pcnet::stimuli::DatasetCounts;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the directory that holds `cifar-100-binary/`.
pub const DATA_ROOT_VAR: &str = "PCNET_DATA_ROOT";
pub const CIFAR_DIR: &str = "cifar-100-binary";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Directory containing `cifar-100-binary/`; falls back to the environment.
    pub data_root: Option<PathBuf>,
    /// A generated shapes dataset to use instead of generating one.
    pub shapes_dir: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub channels: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub hyper: Hyper,
    pub train_timesteps: usize,
    pub eval_timesteps: usize,

    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub finetune_objective: Objective,
    pub pretrain_seeds: Vec<u64>,
    pub finetune_seeds: Vec<u64>,

    /// First `n` CIFAR training images; all of them when unset.
    pub cifar_train_images: Option<usize>,
    /// CIFAR test images used as the pretraining validation set.
    pub cifar_val_images: usize,
    pub shape_counts: DatasetCounts,
    pub dataset_seed: u64,
    /// Test images per class used in evaluation.
    pub test_per_class: usize,
    /// Noise levels evaluated and reported.
    pub noise_levels: Vec<f32>,
    /// The enlarged α of the ablation and restricted-training runs.
    pub large_alpha: f32,
    /// Timesteps at which `d_0` reconstructions are saved as images.
    pub recon_timesteps: Vec<usize>,
    pub recon_per_class: usize,
    /// Training unroll lengths compared by the timestep study.
    pub timestep_variants: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Full,
            data_root: None,
            shapes_dir: None,
            out_dir: PathBuf::from("runs"),
            channels: vec![128, 128, 128],
            head_hidden: vec![256, 128],
            hyper: Hyper::default(),
            train_timesteps: 10,
            eval_timesteps: 100,
            pretrain_epochs: 150,
            finetune_epochs: 25,
            batch_size: 64,
            lr: 5e-5,
            finetune_objective: Objective::Classification,
            pretrain_seeds: vec![0, 1, 2],
            finetune_seeds: vec![0, 1, 2],
            cifar_train_images: None,
            cifar_val_images: 1000,
            shape_counts: DatasetCounts::default(),
            dataset_seed: 0,
            test_per_class: 1200,
            noise_levels: vec![0.1],
            large_alpha: 0.2,
            recon_timesteps: vec![1, 100],
            recon_per_class: 4,
            timestep_variants: vec![5, 10, 20],
        }
    }
}

impl ExperimentConfig {
    /// Reduced protocol: 20/10 epochs, 10k CIFAR images, 200 test images per
    /// class and 3 pretrains × 1 finetune.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            pretrain_epochs: 20,
            finetune_epochs: 10,
            cifar_train_images: Some(10_000),
            test_per_class: 200,
            finetune_seeds: vec![0],
            ..Self::default()
        }
    }

    pub fn base(desk: bool) -> Self {
        if desk {
            Self::desk()
        } else {
            Self::default()
        }
    }

    /// Loads `path` (TOML or JSON by extension) over the profile defaults.
    /// Fields missing from the file keep the profile's values.
    pub fn load(path: &Path, desk: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overrides: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => bail!("config {} must end in .toml or .json", path.display()),
        };
        Self::with_overrides(desk, overrides)
    }

    pub fn with_overrides(desk: bool, overrides: serde_json::Value) -> Result<Self> {
        let mut value = serde_json::to_value(Self::base(desk))?;
        merge(&mut value, overrides);
        let cfg: Self = serde_json::from_value(value).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.channels.is_empty() || self.channels.contains(&0) {
            bail!("channels must be non-empty and positive");
        }
        if self.train_timesteps == 0 || self.eval_timesteps == 0 {
            bail!("timesteps must be >= 1");
        }
        if self.batch_size == 0 {
            bail!("batch size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("learning rate must be positive");
        }
        if self.pretrain_seeds.is_empty() || self.finetune_seeds.is_empty() {
            bail!("need at least one pretrain and one finetune seed");
        }
        if self.noise_levels.is_empty() {
            bail!("need at least one noise level");
        }
        for &s in &self.noise_levels {
            if !pcnet::stimuli::NOISE_LEVELS.contains(&s) {
                bail!("noise level {s} is not one of {:?}", pcnet::stimuli::NOISE_LEVELS);
            }
        }
        if self.timestep_variants.contains(&0) {
            bail!("timestep variants must be >= 1");
        }
        Ok(())
    }

    /// The CIFAR directory from the config or the environment.
    pub fn cifar_dir(&self) -> Result<PathBuf> {
        let root = match &self.data_root {
            Some(r) => r.clone(),
            None => std::env::var_os(DATA_ROOT_VAR)
                .map(PathBuf::from)
                .with_context(|| format!("no data root: set data_root or {DATA_ROOT_VAR}"))?,
        };
        let dir = root.join(CIFAR_DIR);
        if !dir.join("train.bin").is_file() || !dir.join("test.bin").is_file() {
            bail!("CIFAR-100 binary files not found in {}", dir.display());
        }
        Ok(dir)
    }

    /// Hash of everything that affects results; `out_dir` and `data_root`
    /// only say where things live.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("data_root");
        }
        hash_value(&v)
    }
}

/// Short SHA-256 digest of a JSON value's compact encoding.
pub fn hash_value(v: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json value serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.pretrain_epochs, c.finetune_epochs), (150, 25));
        assert_eq!((c.train_timesteps, c.eval_timesteps), (10, 100));
        assert_eq!(c.pretrain_seeds.len() * c.finetune_seeds.len(), 9);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.noise_levels, vec![0.1]);
        c.validate().unwrap();
    }

    #[test]
    fn desk_profile_scales_down() {
        let c = ExperimentConfig::desk();
        assert_eq!((c.pretrain_epochs, c.finetune_epochs), (20, 10));
        assert_eq!(c.cifar_train_images, Some(10_000));
        assert_eq!(c.test_per_class, 200);
        assert_eq!(c.pretrain_seeds.len() * c.finetune_seeds.len(), 3);
    }

    #[test]
    fn file_overrides_merge_over_the_profile() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "batch_size = 8\n[hyper]\nalpha = 0.0\n").unwrap();
        let c = ExperimentConfig::load(&path, true).unwrap();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.hyper, Hyper::new(0.2, 0.1, 0.0).unwrap());
        assert_eq!(c.pretrain_epochs, 20);

        let json = dir.path().join("c.json");
        std::fs::write(&json, r#"{"eval_timesteps": 5}"#).unwrap();
        assert_eq!(ExperimentConfig::load(&json, false).unwrap().eval_timesteps, 5);

        std::fs::write(&path, "no_such_field = 1\n").unwrap();
        assert!(ExperimentConfig::load(&path, false).is_err());
    }

    #[test]
    fn hash_ignores_locations_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        b.data_root = Some(PathBuf::from("/data"));
        assert_eq!(a.hash(), b.hash());
        b.eval_timesteps = 50;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn off_grid_noise_is_rejected() {
        let c = ExperimentConfig {
            noise_levels: vec![0.12],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
