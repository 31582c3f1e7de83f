//! Training stages with content-addressed checkpoints, and trajectory
//! evaluation over the shapes test set.

use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use anyhow::{bail, Context as _, Result};
use log::{info, warn};
use pcnet::autodiff::{AdamConfig, AdamState, Objective};
use pcnet::datasets::{
    epoch_seed, load_cifar_file, load_shape_dataset, Cifar100, ImageSet, ShapeDataset, CIFAR_TEST_RECORDS,
    CIFAR_TRAIN_RECORDS, IMAGE_LEN,
};
use pcnet::imageio::write_png;
use pcnet::metrics::{fg_value, Aggregator, RunRecord};
use pcnet::net::{
    load_checkpoint, run_trajectory_with, save_checkpoint, Architecture, BaselineKind, HeadSpec, Hyper, ParamGroup,
    PcConfig, PcNet,
};
use pcnet::stimuli::{generate_dataset, render_noisy, Split, StimulusClass, StimulusSpec, IMAGE_SIZE, MANIFEST_FILE};
use pcnet::tensor::Tensor;
use pcnet::train::{evaluate, train_epoch, EpochStats, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hash_value, ExperimentConfig};

pub const CIFAR_CLASSES: usize = 100;

/// A trained network and where its checkpoint lives.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: PcNet,
    pub hash: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub id: String,
    pub model: PcNet,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainData {
    Cifar,
    /// Reconstruction pretraining on the shapes training split.
    Shapes,
}

/// How the networks of one experimental arm are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub hyper: Hyper,
    pub train_timesteps: usize,
    pub pretrain_data: PretrainData,
    pub noise_free_finetune: bool,
}

impl Variant {
    pub fn standard(cfg: &ExperimentConfig) -> Self {
        Self {
            hyper: cfg.hyper,
            train_timesteps: cfg.train_timesteps,
            pretrain_data: PretrainData::Cifar,
            noise_free_finetune: false,
        }
    }
}

/// Lazily loaded datasets plus the checkpoint cache under `out_dir`.
pub struct Context {
    pub cfg: ExperimentConfig,
    cifar: Option<Rc<Cifar100>>,
    shapes: Option<Rc<ShapeDataset>>,
}

fn write_epoch_log(path: &Path, rows: &[(usize, EpochStats, EpochStats)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "train_loss",
        "train_accuracy",
        "val_loss",
        "val_reconstruction",
        "val_accuracy",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (epoch, tr, va) in rows {
        w.write_record([
            epoch.to_string(),
            tr.loss.to_string(),
            opt(tr.accuracy),
            va.loss.to_string(),
            va.reconstruction.to_string(),
            opt(va.accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Renders `specs`, optionally replacing their noise level, into a labelled set.
pub fn render_set(specs: &[StimulusSpec], noise: Option<f32>) -> Result<ImageSet> {
    let mut data = Vec::with_capacity(specs.len() * IMAGE_LEN);
    let mut labels = Vec::with_capacity(specs.len());
    for spec in specs {
        let spec = noise.map_or_else(|| spec.clone(), |s| spec.with_noise(s));
        data.extend_from_slice(render_noisy(&spec)?.pixels.data());
        labels.push(spec.class.target());
    }
    Ok(ImageSet::from_floats(data, Some(labels), (0..specs.len()).collect())?)
}

fn fresh_arch(cfg: &ExperimentConfig) -> Architecture {
    Architecture {
        channels: cfg.channels.clone(),
        head: None,
        ..Architecture::predictive()
    }
}

fn binary_head(cfg: &ExperimentConfig) -> HeadSpec {
    HeadSpec {
        hidden: cfg.head_hidden.clone(),
        classes: 2,
    }
}

/// Baseline geometry with the configured widths; FF-C widens every layer
/// by 172/128.
pub fn baseline_arch(kind: BaselineKind, cfg: &ExperimentConfig) -> Architecture {
    let mut arch = kind.architecture();
    arch.channels = match kind {
        BaselineKind::FfC => cfg.channels.iter().map(|&c| (c * 172).div_ceil(128)).collect(),
        _ => cfg.channels.clone(),
    };
    arch.head = None;
    arch
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Self {
            cfg,
            cifar: None,
            shapes: None,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("checkpoints")
    }

    /// CIFAR-100, cut to the configured training subset.
    pub fn cifar(&mut self) -> Result<Rc<Cifar100>> {
        if let Some(c) = &self.cifar {
            return Ok(c.clone());
        }
        let dir = self.cfg.cifar_dir()?;
        let mut train = load_cifar_file(&dir.join("train.bin"), None)?;
        let test = load_cifar_file(&dir.join("test.bin"), None)?;
        if train.len() != CIFAR_TRAIN_RECORDS || test.len() != CIFAR_TEST_RECORDS {
            warn!(
                "{} holds {} train / {} test records, not the standard {CIFAR_TRAIN_RECORDS} / {CIFAR_TEST_RECORDS}",
                dir.display(),
                train.len(),
                test.len()
            );
        }
        if let Some(n) = self.cfg.cifar_train_images {
            if n < train.len() {
                train = train.take(n);
            }
        }
        info!("CIFAR-100: {} training images", train.len());
        let c = Rc::new(Cifar100 { train, test });
        self.cifar = Some(c.clone());
        Ok(c)
    }

    fn cifar_val(&mut self) -> Result<ImageSet> {
        let c = self.cifar()?;
        Ok(c.test.take(self.cfg.cifar_val_images.min(c.test.len())))
    }

    /// `shapes_dir` if set, else a directory under `out_dir` named by the
    /// dataset's counts and seed.
    pub fn shapes_dir(&self) -> PathBuf {
        match &self.cfg.shapes_dir {
            Some(d) => d.clone(),
            None => {
                let key = json!({"counts": self.cfg.shape_counts, "seed": self.cfg.dataset_seed});
                self.cfg.out_dir.join(format!("shapes-{}", hash_value(&key)))
            }
        }
    }

    /// The configured shapes dataset, generated under `out_dir` on first use.
    pub fn shapes(&mut self) -> Result<Rc<ShapeDataset>> {
        if let Some(s) = &self.shapes {
            return Ok(s.clone());
        }
        let dir = self.shapes_dir();
        if self.cfg.shapes_dir.is_none() && !dir.join(MANIFEST_FILE).is_file() {
            let tmp = dir.with_extension("partial");
            if tmp.exists() {
                fs::remove_dir_all(&tmp)?;
            }
            info!("generating shapes dataset in {}", dir.display());
            generate_dataset(&tmp, &self.cfg.shape_counts, self.cfg.dataset_seed)?;
            fs::rename(&tmp, &dir)?;
        }
        let s = Rc::new(load_shape_dataset(&dir.join(MANIFEST_FILE))?);
        self.shapes = Some(s.clone());
        Ok(s)
    }

    /// The first `test_per_class` test specs of every class.
    pub fn test_specs(&mut self) -> Result<Vec<(StimulusClass, Vec<StimulusSpec>)>> {
        let shapes = self.shapes()?;
        let n = self.cfg.test_per_class;
        Ok(StimulusClass::ALL
            .iter()
            .map(|&class| {
                let idx = shapes.indices(Some(Split::Test), Some(class));
                let specs: Vec<StimulusSpec> = idx.iter().take(n).map(|&i| shapes.entries[i].spec.clone()).collect();
                (class, specs)
            })
            .collect())
    }

    /// Loads the checkpoint addressed by `key`, or trains and saves it.
    fn cached(
        &self,
        stage: &str,
        key: serde_json::Value,
        train: impl FnOnce(&Path) -> Result<PcNet>,
    ) -> Result<Trained> {
        let hash = hash_value(&key);
        let dir = self.checkpoint_dir();
        let path = dir.join(format!("{stage}-{hash}.json"));
        if path.is_file() {
            let (model, _) = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
            info!("reusing {}", path.display());
            return Ok(Trained { model, hash, path });
        }
        fs::create_dir_all(&dir)?;
        let log = dir.join(format!("{stage}-{hash}.log.csv"));
        let model = train(&log)?;
        save_checkpoint(
            &model,
            &path,
            json!({"stage": stage, "key": key, "pcnet": pcnet::VERSION}),
        )?;
        info!("saved {}", path.display());
        Ok(Trained { model, hash, path })
    }

    /// Trains `model` for `epochs`, logging train and validation stats per epoch.
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        model: &mut PcNet,
        train: &ImageSet,
        val: &ImageSet,
        tc: &TrainConfig,
        epochs: usize,
        seed: u64,
        log: &Path,
    ) -> Result<()> {
        let mut adam = AdamState::new(AdamConfig {
            lr: self.cfg.lr,
            ..AdamConfig::default()
        });
        let mut rows = Vec::with_capacity(epochs + 1);
        rows.push((0, EpochStats::default(), evaluate(model, val, tc)?));
        for epoch in 1..=epochs {
            let tr = train_epoch(model, &mut adam, train, tc, epoch_seed(seed, epoch), |_, _| {})?;
            let va = evaluate(model, val, tc)?;
            info!(
                "epoch {epoch}/{epochs}: train loss {:.5}, val loss {:.5}{}",
                tr.loss,
                va.loss,
                va.accuracy.map(|a| format!(", val accuracy {a:.3}")).unwrap_or_default()
            );
            rows.push((epoch, tr, va));
            write_epoch_log(log, &rows)?;
        }
        write_epoch_log(log, &rows)
    }

    /// Unsupervised reconstruction pretraining of encoders and decoders.
    pub fn pretrain(&mut self, variant: &Variant, seed: u64) -> Result<Trained> {
        let (train, val) = match variant.pretrain_data {
            PretrainData::Cifar => (self.cifar()?.train.clone(), self.cifar_val()?),
            PretrainData::Shapes => {
                let s = self.shapes()?;
                (s.select(Some(Split::Train), None).0, s.select(Some(Split::Val), None).0)
            }
        };
        let cfg = &self.cfg;
        let key = json!({
            "channels": cfg.channels,
            "hyper": variant.hyper,
            "timesteps": variant.train_timesteps,
            "data": variant.pretrain_data,
            "cifar_train_images": cfg.cifar_train_images,
            "shapes": (variant.pretrain_data == PretrainData::Shapes).then(|| json!([cfg.shape_counts, cfg.dataset_seed])),
            "epochs": cfg.pretrain_epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "seed": seed,
        });
        self.cached("pretrain", key, |log| {
            info!("pretraining seed {seed} on {:?}", variant.pretrain_data);
            let mut model = PcNet::build(
                PcConfig {
                    arch: fresh_arch(cfg),
                    hyper: variant.hyper,
                    timesteps: variant.train_timesteps,
                },
                seed,
            )?;
            let tc = TrainConfig {
                timesteps: variant.train_timesteps,
                objective: Objective::Reconstruction,
                hyper: variant.hyper,
                trainable: ParamGroup::All,
                batch_size: cfg.batch_size,
            };
            self.fit(&mut model, &train, &val, &tc, cfg.pretrain_epochs, seed, log)?;
            Ok(model)
        })
    }

    /// Adds the binary head to `parent` and trains every parameter on
    /// Square vs Random.
    pub fn finetune(&mut self, parent: &Trained, variant: &Variant, seed: u64) -> Result<Trained> {
        let shapes = self.shapes()?;
        let (train, val) = if variant.noise_free_finetune {
            let (_, tr) = shapes.select(Some(Split::Train), None);
            let (_, va) = shapes.select(Some(Split::Val), None);
            (render_set(&tr, Some(0.0))?, render_set(&va, Some(0.0))?)
        } else {
            (shapes.select(Some(Split::Train), None).0, shapes.select(Some(Split::Val), None).0)
        };
        let cfg = &self.cfg;
        let timesteps = if parent.model.has_feedback() { variant.train_timesteps } else { 1 };
        let key = json!({
            "parent": parent.hash,
            "head": cfg.head_hidden,
            "hyper": variant.hyper,
            "timesteps": timesteps,
            "objective": cfg.finetune_objective,
            "noise_free": variant.noise_free_finetune,
            "shapes": [cfg.shape_counts, cfg.dataset_seed],
            "epochs": cfg.finetune_epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "seed": seed,
        });
        self.cached("finetune", key, |log| {
            info!("finetuning {} with seed {seed}", parent.path.display());
            let mut model = parent.model.clone();
            model.attach_head(&binary_head(cfg), seed)?;
            model.config.hyper = variant.hyper;
            let objective = if model.has_feedback() {
                cfg.finetune_objective
            } else {
                Objective::Classification
            };
            let tc = TrainConfig {
                timesteps,
                objective,
                hyper: variant.hyper,
                trainable: ParamGroup::All,
                batch_size: cfg.batch_size,
            };
            self.fit(&mut model, &train, &val, &tc, cfg.finetune_epochs, seed, log)?;
            Ok(model)
        })
    }

    /// One pretrained network per pretrain seed, ids `p<seed>`.
    pub fn pretrained(&mut self, variant: &Variant) -> Result<Vec<(String, Trained)>> {
        let seeds = self.cfg.pretrain_seeds.clone();
        seeds.into_iter().map(|p| Ok((format!("p{p}"), self.pretrain(variant, p)?))).collect()
    }

    /// Pretrain × finetune seed grid, ids `p<seed>-f<seed>`.
    pub fn finetuned(&mut self, variant: &Variant) -> Result<Vec<Network>> {
        let mut out = Vec::new();
        let fseeds = self.cfg.finetune_seeds.clone();
        for (pid, parent) in self.pretrained(variant)? {
            for &f in &fseeds {
                let t = self.finetune(&parent, variant, f)?;
                out.push(Network {
                    id: format!("{pid}-f{f}"),
                    model: t.model,
                    checkpoint: t.path,
                });
            }
        }
        Ok(out)
    }

    /// CIFAR-100 classification training of a feedforward body with a
    /// 100-way head, one step, no feedback involved.
    pub fn classifier_pretrain(&mut self, arch: Architecture, label: &str, seed: u64) -> Result<Trained> {
        let train = self.cifar()?.train.clone();
        let val = self.cifar_val()?;
        let cfg = &self.cfg;
        let key = json!({
            "arch": arch,
            "head": cfg.head_hidden,
            "cifar_train_images": cfg.cifar_train_images,
            "epochs": cfg.pretrain_epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "seed": seed,
        });
        self.cached(&format!("classify-{label}"), key, |log| {
            info!("classification pretraining {label} seed {seed}");
            let mut model = PcNet::build(
                PcConfig {
                    arch,
                    timesteps: 1,
                    ..PcConfig::default()
                },
                seed,
            )?;
            model.attach_head(
                &HeadSpec {
                    hidden: cfg.head_hidden.clone(),
                    classes: CIFAR_CLASSES,
                },
                seed,
            )?;
            let tc = TrainConfig {
                timesteps: 1,
                objective: Objective::Classification,
                hyper: Hyper::default(),
                trainable: ParamGroup::Feedforward,
                batch_size: cfg.batch_size,
            };
            self.fit(&mut model, &train, &val, &tc, cfg.pretrain_epochs, seed, log)?;
            model.detach_head();
            Ok(model)
        })
    }

    /// Parameter-free regime: a classification-trained body gets decoders
    /// fitted for one-step reconstruction with the encoders frozen. The
    /// update coefficients never enter training.
    pub fn parameter_free(&mut self, seed: u64) -> Result<Trained> {
        let body = self.classifier_pretrain(fresh_arch(&self.cfg), "pc", seed)?;
        let train = self.cifar()?.train.clone();
        let val = self.cifar_val()?;
        let cfg = &self.cfg;
        let key = json!({
            "parent": body.hash,
            "epochs": cfg.pretrain_epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "seed": seed,
        });
        self.cached("feedback", key, |log| {
            info!("one-step feedback training on {}", body.path.display());
            let mut model = body.model.clone();
            let tc = TrainConfig {
                timesteps: 1,
                objective: Objective::Reconstruction,
                hyper: Hyper::default(),
                trainable: ParamGroup::Feedback,
                batch_size: cfg.batch_size,
            };
            self.fit(&mut model, &train, &val, &tc, cfg.pretrain_epochs, seed, log)?;
            Ok(model)
        })
    }

    /// A feedforward baseline: CIFAR-100 classification, then the binary
    /// head finetuned on shapes.
    pub fn baselines(&mut self, kind: BaselineKind) -> Result<Vec<Network>> {
        let variant = Variant::standard(&self.cfg);
        let mut out = Vec::new();
        for p in self.cfg.pretrain_seeds.clone() {
            let body = self.classifier_pretrain(baseline_arch(kind, &self.cfg), kind.label(), p)?;
            for f in self.cfg.finetune_seeds.clone() {
                let t = self.finetune(&body, &variant, f)?;
                out.push(Network {
                    id: format!("{}-p{p}-f{f}", kind.label()),
                    model: t.model,
                    checkpoint: t.path,
                });
            }
        }
        Ok(out)
    }
}

/// What one evaluation pass runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPlan {
    pub hyper: Hyper,
    pub timesteps: usize,
    pub noise_levels: Vec<f32>,
    pub recon_timesteps: Vec<usize>,
    pub recon_per_class: usize,
}

impl EvalPlan {
    pub fn new(cfg: &ExperimentConfig, hyper: Hyper) -> Self {
        Self {
            hyper,
            timesteps: cfg.eval_timesteps,
            noise_levels: cfg.noise_levels.clone(),
            recon_timesteps: cfg.recon_timesteps.clone(),
            recon_per_class: cfg.recon_per_class,
        }
    }

    /// Feedforward-only models stop after the first step.
    pub fn steps_for(&self, model: &PcNet) -> usize {
        if model.has_feedback() {
            self.timesteps
        } else {
            1
        }
    }
}

fn item(t: &Tensor, i: usize) -> pcnet::Result<Tensor> {
    let s = t.slice_batch(i, i + 1)?;
    let tail = s.shape()[1..].to_vec();
    s.reshape(&tail)
}

/// Runs every network over every class and noise level and collects one
/// record per image and timestep. Reconstructions of the first few images
/// at the first noise level go to `recon_dir` when given.
pub fn evaluate_networks(
    nets: &[Network],
    test: &[(StimulusClass, Vec<StimulusSpec>)],
    plan: &EvalPlan,
    batch_size: usize,
    recon_dir: Option<&Path>,
) -> Result<Aggregator> {
    if let Some(d) = recon_dir {
        fs::create_dir_all(d)?;
    }
    let mut agg = Aggregator::new();
    for net in nets {
        let steps = plan.steps_for(&net.model);
        info!("evaluating {} for {steps} steps", net.id);
        for (class, specs) in test {
            for (ni, &sigma) in plan.noise_levels.iter().enumerate() {
                for (bi, chunk) in specs.chunks(batch_size.max(1)).enumerate() {
                    let noisy: Vec<StimulusSpec> = chunk.iter().map(|s| s.with_noise(sigma)).collect();
                    let images: Vec<Tensor> =
                        noisy.iter().map(|s| Ok(render_noisy(s)?.pixels)).collect::<Result<_>>()?;
                    let batch = Tensor::stack(
                        &images
                            .iter()
                            .map(|t| t.clone().reshape(&[1, 3, IMAGE_SIZE, IMAGE_SIZE]))
                            .collect::<pcnet::Result<Vec<_>>>()?,
                    )?;
                    let dump = match recon_dir {
                        Some(d) if ni == 0 && bi == 0 => {
                            let n = plan.recon_per_class.min(chunk.len());
                            for (i, img) in images.iter().take(n).enumerate() {
                                let p = d.join(format!("{}_{i}_sigma{sigma}_input.png", class.label()));
                                if !p.exists() {
                                    write_png(&p, img)?;
                                }
                            }
                            Some((d, n))
                        }
                        _ => None,
                    };
                    run_trajectory_with(&net.model, &batch, steps, &plan.hyper, |step| {
                        for (i, spec) in noisy.iter().enumerate() {
                            let fg = match &step.reconstruction {
                                Some(r) => Some(fg_value(&item(r, i)?, spec)?),
                                None => None,
                            };
                            agg.push(&RunRecord {
                                network_id: net.id.clone(),
                                class: *class,
                                noise_sigma: sigma,
                                timestep: step.timestep,
                                p_square: step.p_square.as_ref().map(|p| p[i]),
                                fg,
                                reconstruction: step.reconstruction.as_ref().map(|_| step.errors[0][i]),
                            });
                        }
                        if let (Some((d, n)), Some(r)) = (dump, &step.reconstruction) {
                            if plan.recon_timesteps.contains(&step.timestep) {
                                for i in 0..n {
                                    let p = d.join(format!(
                                        "{}_{}_{i}_sigma{sigma}_t{}.png",
                                        net.id,
                                        class.label(),
                                        step.timestep
                                    ));
                                    write_png(&p, &item(r, i)?)?;
                                }
                            }
                        }
                        Ok(())
                    })?;
                }
            }
        }
    }
    if agg.is_empty() {
        bail!("evaluation produced no records");
    }
    Ok(agg)
}
