//! TOML run configuration with sections `[arch]`, `[optim]`, `[data]` and
//! `[run]`. Unknown keys are errors. Relative paths resolve against the
//! directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::activation::Activation;
use crate::arch::{
    build_sepconv_vgg, build_xception, ArchOptions, ArchSpec, Shape3, Task, XceptionConfig,
};
use crate::data::{
    load_dataset, read_class_weights, synth_dataset, synth_multilabel, Dataset, Split,
};
use crate::error::{ensure, Error, Result};
use crate::optim::{OptimConfig, OptimizerKind, Schedule};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: ArchSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    /// `xception`, `toy`, `vgg` or `file`.
    pub preset: String,
    /// Architecture text file, used with `preset = "file"`.
    pub file: Option<PathBuf>,
    pub classes: Option<usize>,
    /// `CxHxW`; defaults to the preset's input.
    pub input: Option<String>,
    pub residuals: bool,
    pub activation: String,
    pub fc: Vec<usize>,
    pub task: String,
    pub middle_repeats: Option<usize>,
    pub dropout: f64,
    pub vgg_widths: Vec<usize>,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            file: None,
            classes: None,
            input: None,
            residuals: true,
            activation: "none".into(),
            fc: Vec::new(),
            task: "single-label".into(),
            middle_repeats: None,
            dropout: 0.5,
            vgg_widths: vec![32, 64, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// `sgd` or `rmsprop`.
    pub optimizer: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    /// `epochs` or `samples`.
    pub decay_unit: String,
    pub weight_decay: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub polyak: bool,
    pub polyak_decay: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let c = OptimConfig::imagenet();
        let Schedule::Epochs { factor, every } = c.schedule else {
            unreachable!("default schedule is epoch based")
        };
        Self {
            optimizer: "sgd".into(),
            learning_rate: c.lr0,
            momentum: c.momentum,
            decay_factor: factor,
            decay_every: every,
            decay_unit: "epochs".into(),
            weight_decay: c.weight_decay,
            rho: c.rho,
            epsilon: c.epsilon,
            polyak: c.polyak,
            polyak_decay: c.polyak_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `synthetic` or `files`.
    pub source: String,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    pub class_weights: Option<PathBuf>,
    pub synth_train: usize,
    pub synth_val: usize,
    /// Defaults to the run seed.
    pub synth_seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            train_images: None,
            train_labels: None,
            val_images: None,
            val_labels: None,
            class_weights: None,
            synth_train: 12_800,
            synth_val: 1_000,
            synth_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_batch: usize,
    pub profile: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Record wall-clock seconds in the profile; off makes profiles
    /// reproducible byte for byte.
    pub wallclock: bool,
    /// Evaluate the full training split in inference mode after the last step.
    pub eval_train: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 3000,
            batch_size: 64,
            eval_every: 200,
            eval_batch: 100,
            profile: None,
            checkpoint: None,
            wallclock: true,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses `path`, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
        };
        fix(&mut self.arch.file);
        fix(&mut self.data.train_images);
        fix(&mut self.data.train_labels);
        fix(&mut self.data.val_images);
        fix(&mut self.data.val_labels);
        fix(&mut self.data.class_weights);
        fix(&mut self.run.profile);
        fix(&mut self.run.checkpoint);
    }

    pub fn validate(&self) -> Result<()> {
        self.optim_config()?;
        self.task()?;
        Activation::from_str(&self.arch.activation)?;
        ensure!(
            ["xception", "toy", "vgg", "file"].contains(&self.arch.preset.as_str()),
            Config,
            "unknown arch preset `{}`",
            self.arch.preset
        );
        ensure!(
            self.arch.preset != "file" || self.arch.file.is_some(),
            Config,
            "preset `file` needs `arch.file`"
        );
        ensure!(
            ["synthetic", "files"].contains(&self.data.source.as_str()),
            Config,
            "unknown data source `{}`",
            self.data.source
        );
        ensure!(self.run.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.run.eval_every >= 1, Config, "eval_every must be >= 1");
        ensure!(self.run.eval_batch >= 1, Config, "eval_batch must be >= 1");
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        Task::from_str(&self.arch.task)
    }

    pub fn optim_config(&self) -> Result<OptimConfig> {
        let o = &self.optim;
        let kind = match o.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "rmsprop" => OptimizerKind::Rmsprop,
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        };
        let schedule = match o.decay_unit.as_str() {
            "epochs" => Schedule::Epochs {
                factor: o.decay_factor,
                every: o.decay_every,
            },
            "samples" => Schedule::Samples {
                factor: o.decay_factor,
                every: o.decay_every,
            },
            other => return Err(Error::Config(format!("unknown decay unit `{other}`"))),
        };
        let c = OptimConfig {
            kind,
            momentum: o.momentum,
            lr0: o.learning_rate,
            schedule,
            weight_decay: o.weight_decay,
            rho: o.rho,
            epsilon: o.epsilon,
            polyak: o.polyak,
            polyak_decay: o.polyak_decay,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn arch_options(&self) -> Result<ArchOptions> {
        Ok(ArchOptions {
            residuals: self.arch.residuals,
            intermediate_activation: Activation::from_str(&self.arch.activation)?,
            fc_layers: self.arch.fc.clone(),
            task: self.task()?,
        })
    }

    pub fn build_arch(&self) -> Result<ArchSpec> {
        let a = &self.arch;
        let input = a.input.as_deref().map(Shape3::from_str).transpose()?;
        match a.preset.as_str() {
            "xception" | "toy" => {
                let base = if a.preset == "toy" {
                    XceptionConfig::toy()
                } else {
                    XceptionConfig::default()
                };
                let cfg = XceptionConfig {
                    input: input.unwrap_or(base.input),
                    num_classes: a.classes.unwrap_or(base.num_classes),
                    middle_repeats: a.middle_repeats.unwrap_or(base.middle_repeats),
                    dropout: a.dropout,
                    options: self.arch_options()?,
                    ..base
                };
                build_xception(&cfg)
            }
            "vgg" => {
                let mut spec = build_sepconv_vgg(
                    &a.vgg_widths,
                    input.unwrap_or(Shape3::new(3, 32, 32)),
                    a.classes.unwrap_or(10),
                )?;
                spec.options.task = self.task()?;
                Ok(spec)
            }
            "file" => {
                let path = a.file.as_ref().expect("validated");
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                ArchSpec::from_text(&text)
            }
            other => Err(Error::Config(format!("unknown arch preset `{other}`"))),
        }
    }

    /// Train and validation splits; the validation split is optional for
    /// file sources.
    pub fn load_data(&self, spec: &ArchSpec) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.data;
        let classes = spec
            .num_classes
            .ok_or_else(|| Error::Config("architecture has no classifier".into()))?;
        let (train, val) = match d.source.as_str() {
            "synthetic" => {
                ensure!(
                    spec.input.h == spec.input.w && spec.input.c == 3,
                    Config,
                    "synthetic data is 3xHxH, model takes {}",
                    spec.input
                );
                let seed = d.synth_seed.unwrap_or(self.run.seed);
                let gen = match self.task()? {
                    Task::SingleLabel => synth_dataset,
                    Task::MultiLabel => synth_multilabel,
                };
                let train = gen(classes, d.synth_train, spec.input.h, seed)?;
                let mut val = gen(
                    classes,
                    d.synth_val,
                    spec.input.h,
                    seed ^ 0x7661_6c69_6461_7465,
                )?;
                val.split = Split::Val;
                if self.task()? == Task::MultiLabel {
                    val = val.with_class_weights(vec![1.0; classes])?;
                }
                (train, Some(val))
            }
            _ => {
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| {
                        Error::Config(format!("data.{what} is required for file sources"))
                    })
                };
                let train = load_dataset(
                    need(&d.train_images, "train_images")?,
                    need(&d.train_labels, "train_labels")?,
                    Split::Train,
                )?;
                let val = match (&d.val_images, &d.val_labels) {
                    (Some(i), Some(l)) => Some(load_dataset(i, l, Split::Val)?),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "val_images and val_labels go together".into(),
                        ))
                    }
                };
                let val = match (val, &d.class_weights) {
                    (Some(v), Some(w)) => {
                        Some(v.with_class_weights(read_class_weights(w, classes)?)?)
                    }
                    (v, _) => v,
                };
                (train, val)
            }
        };
        for ds in std::iter::once(&train).chain(val.as_ref()) {
            ensure!(
                ds.num_classes() == classes,
                Config,
                "{} split has {} classes, model head has {classes}",
                ds.split,
                ds.num_classes()
            );
            let dims = ds.images.dims();
            ensure!(
                (dims.c, dims.h, dims.w) == (spec.input.c, spec.input.h, spec.input.w),
                Config,
                "{} images are {}x{}x{}, model takes {}",
                ds.split,
                dims.c,
                dims.h,
                dims.w,
                spec.input
            );
        }
        Ok((train, val))
    }
}
