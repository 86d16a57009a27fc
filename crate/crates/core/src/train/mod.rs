//! Training runs: batching, schedules, Polyak evaluation, CSV profiles and
//! checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, Counters};
pub use config::{ArchSection, DataSection, OptimSection, RunSection, TrainConfig};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::arch::{ArchSpec, Node, Task};
use crate::data::{
    epoch_order, topk_accuracy, weighted_map_at_k, BatchIter, Dataset, Labels, MetricReport,
    PROFILE_HEADER,
};
use crate::error::{ensure, Error, Result};
use crate::model::{Model, ParamStore};
use crate::nn::{sigmoid_cross_entropy, softmax_cross_entropy, Mode};
use crate::optim::{lr_at, Optimizer};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Stream key for dropout masks, separate from data shuffling.
const DROPOUT_STREAM: u64 = 0x6472_6f70_6f75_7400;
/// Ranking depth of the multi-label metric.
pub const MAP_DEPTH: usize = 100;

/// Split-level metrics from an inference pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub wmap100: Option<f64>,
}

fn batch_loss(task: Task, logits: &Tensor4<f32>, labels: &Labels) -> Result<(f64, Tensor4<f32>)> {
    match (task, labels) {
        (Task::SingleLabel, Labels::Single { labels, .. }) => softmax_cross_entropy(logits, labels),
        (Task::MultiLabel, Labels::Multi { rows, .. }) => sigmoid_cross_entropy(logits, rows),
        (t, _) => Err(Error::Config(format!("{t} model cannot use these labels"))),
    }
}

/// Inference-mode metrics over a whole split, in fixed-size batches.
/// Single-label tasks report top-1 and top-5 (top-k capped at the class
/// count); multi-label tasks report weighted MAP@100 using the split's class
/// weights, or equal weights when none are set.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    data: &Dataset,
    batch: usize,
) -> Result<EvalReport> {
    ensure!(
        !data.is_empty(),
        Data,
        "cannot evaluate an empty {} split",
        data.split
    );
    let task = model.spec().options.task;
    let classes = data.num_classes();
    let mut logits = Vec::with_capacity(data.len() * classes);
    let mut loss = 0.0;
    for b in BatchIter::sequential(data, batch)? {
        let b = b?;
        let y = model.predict(store, &b.images)?;
        let (l, _) = batch_loss(task, &y, &b.labels)?;
        loss += l * b.indices.len() as f64;
        logits.extend_from_slice(y.as_slice());
    }
    let logits = Tensor4::from_vec((data.len(), classes, 1, 1), logits)?;
    let mut report = EvalReport {
        loss: loss / data.len() as f64,
        ..EvalReport::default()
    };
    match &data.labels {
        Labels::Single { labels, .. } => {
            report.top1 = Some(topk_accuracy(&logits, labels, 1)?);
            report.top5 = Some(topk_accuracy(&logits, labels, 5.min(classes))?);
        }
        Labels::Multi { rows, .. } => {
            let equal = vec![1.0; classes];
            let weights = data.class_weights.as_deref().unwrap_or(&equal);
            report.wmap100 = Some(weighted_map_at_k(&logits, rows, weights, MAP_DEPTH)?);
        }
    }
    Ok(report)
}

/// Result of [`Trainer::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// One entry per profile row.
    pub rows: Vec<MetricReport>,
    /// Mean training loss of each epoch completed during the run.
    pub epoch_losses: Vec<f64>,
    /// Inference-mode metrics on the full training split after the last step.
    pub final_train: Option<EvalReport>,
}

/// A model, its weights and optimizer, and the run position.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optim: Optimizer<f32>,
    pub counters: Counters,
}

#[derive(Default)]
struct Window {
    loss: f64,
    hits: f64,
    seen: usize,
}

impl Trainer {
    /// Fresh weights drawn from `seed`.
    pub fn new(spec: &ArchSpec, optim: crate::optim::OptimConfig, seed: u64) -> Result<Self> {
        let model = Model::new(spec)?;
        let store = model.init_params(&mut Rng::seed(seed))?;
        let optim = Optimizer::new(optim, &store)?;
        Ok(Self {
            model,
            store,
            optim,
            counters: Counters {
                seed,
                ..Counters::default()
            },
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Ok(Self {
            model: Model::new(&ck.spec)?,
            store: ck.store,
            optim: ck.optim,
            counters: ck.counters,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.model.spec().clone(),
            store: self.store.clone(),
            optim: self.optim.clone(),
            counters: self.counters,
        }
    }

    /// Weights used for evaluation: the Polyak shadow when enabled.
    pub fn eval_store(&self) -> ParamStore<f32> {
        self.optim.eval_weights(&self.store)
    }

    pub fn evaluate(&self, data: &Dataset, batch: usize) -> Result<EvalReport> {
        evaluate(&self.model, &self.eval_store(), data, batch)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let spec = self.model.spec();
        let k = spec.num_classes.unwrap_or(0);
        ensure!(
            data.num_classes() == k,
            Config,
            "{} split has {} classes, model head has {k}",
            data.split,
            data.num_classes()
        );
        let multi = matches!(data.labels, Labels::Multi { .. });
        ensure!(
            multi == (spec.options.task == Task::MultiLabel),
            Config,
            "{} split labels do not suit a {} model",
            data.split,
            spec.options.task
        );
        Ok(())
    }

    /// One optimizer step on `batch`; returns the loss and batch top-1 (single-label only).
    fn step(&mut self, images: &Tensor4<f32>, labels: &Labels) -> Result<(f64, Option<f64>, f64)> {
        let lr = lr_at(
            &self.optim.config,
            self.counters.epoch,
            self.counters.samples_seen,
        );
        let mut rng = Rng::stream(self.counters.seed ^ DROPOUT_STREAM, self.counters.step);
        let (logits, tape) = self
            .model
            .forward(&self.store, images, Mode::Train, &mut rng)?;
        let task = self.model.spec().options.task;
        let (loss, grad) = batch_loss(task, &logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.counters.step,
                loss,
            });
        }
        let top1 = match labels {
            Labels::Single { labels, .. } => Some(topk_accuracy(&logits, labels, 1)?),
            Labels::Multi { .. } => None,
        };
        self.model.commit_stats(&mut self.store, &tape);
        let (_, grads) = self.model.backward(&self.store, tape, grad)?;
        let n = images.dims().n;
        self.optim.step(&mut self.store, &grads, lr, n)?;
        self.counters.step += 1;
        self.counters.batch_in_epoch += 1;
        self.counters.samples_seen += n as u64;
        Ok((loss, top1, lr))
    }

    /// Runs `steps` more steps in full batches (a trailing partial batch of
    /// each epoch is dropped). Writes a profile row every `eval_every` steps
    /// and after the last step, and saves a checkpoint at each row. A
    /// non-finite loss aborts the run and leaves the last saved checkpoint.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        opts: &RunOptions,
    ) -> Result<TrainOutcome> {
        self.check_data(train)?;
        if let Some(v) = val {
            self.check_data(v)?;
        }
        ensure!(
            train.len() >= opts.batch_size,
            Config,
            "{} training examples cannot fill a batch of {}",
            train.len(),
            opts.batch_size
        );
        ensure!(opts.eval_every >= 1, Config, "eval_every must be >= 1");
        let per_epoch = (train.len() / opts.batch_size) as u64;
        let mut profile = opts
            .profile
            .as_ref()
            .map(ProfileWriter::create)
            .transpose()?;
        if let Some(path) = &opts.checkpoint {
            self.checkpoint().save(path)?;
        }
        let clock = Instant::now();
        let mut outcome = TrainOutcome {
            rows: Vec::new(),
            epoch_losses: Vec::new(),
            final_train: None,
        };
        let mut window = Window::default();
        let (mut epoch_sum, mut epoch_count, mut epoch_whole) =
            (0.0, 0u64, self.counters.batch_in_epoch == 0);
        let mut order = epoch_order(train.len(), self.counters.seed, self.counters.epoch);
        let end = self.counters.step + opts.steps;
        while self.counters.step < end {
            if self.counters.batch_in_epoch == per_epoch {
                self.counters.epoch += 1;
                self.counters.batch_in_epoch = 0;
                order = epoch_order(train.len(), self.counters.seed, self.counters.epoch);
            }
            let start = self.counters.batch_in_epoch as usize * opts.batch_size;
            let batch = train.subset(&order[start..start + opts.batch_size])?;
            let (loss, top1, lr) = self.step(&batch.images, &batch.labels)?;
            window.loss += loss;
            window.hits += top1.unwrap_or(0.0);
            window.seen += 1;
            epoch_sum += loss;
            epoch_count += 1;
            if self.counters.batch_in_epoch == per_epoch {
                if epoch_whole {
                    outcome.epoch_losses.push(epoch_sum / epoch_count as f64);
                }
                (epoch_sum, epoch_count, epoch_whole) = (0.0, 0, true);
            }
            if self.counters.step % opts.eval_every == 0 || self.counters.step == end {
                let mut row = MetricReport {
                    step: self.counters.step,
                    epoch: self.counters.samples_seen as f64 / train.len() as f64,
                    lr,
                    train_loss: Some(window.loss / window.seen as f64),
                    train_top1: top1.map(|_| window.hits / window.seen as f64),
                    ..MetricReport::default()
                };
                if let Some(v) = val {
                    let e = self.evaluate(v, opts.eval_batch)?;
                    row.val_loss = Some(e.loss);
                    row.val_top1 = e.top1;
                    row.val_top5 = e.top5;
                    row.val_wmap100 = e.wmap100;
                }
                if opts.wallclock {
                    row.wallclock_s = Some(clock.elapsed().as_secs_f64());
                }
                if let Some(p) = &mut profile {
                    p.row(&row)?;
                }
                if let Some(path) = &opts.checkpoint {
                    self.checkpoint().save(path)?;
                }
                outcome.rows.push(row);
                window = Window::default();
            }
        }
        if opts.eval_train && opts.steps > 0 {
            outcome.final_train = Some(self.evaluate(train, opts.eval_batch)?);
        }
        Ok(outcome)
    }
}

/// Loop settings that are not part of the checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_batch: usize,
    pub profile: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub wallclock: bool,
    /// Evaluate the full training split after the last step.
    pub eval_train: bool,
}

impl RunOptions {
    pub fn from_config(c: &TrainConfig) -> Self {
        let r = &c.run;
        Self {
            steps: r.steps,
            batch_size: r.batch_size,
            eval_every: r.eval_every,
            eval_batch: r.eval_batch,
            profile: r.profile.clone(),
            checkpoint: r.checkpoint.clone(),
            wallclock: r.wallclock,
            eval_train: r.eval_train,
        }
    }
}

struct ProfileWriter {
    file: fs::File,
}

impl ProfileWriter {
    fn create(path: &PathBuf) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{PROFILE_HEADER}")?;
        Ok(Self { file })
    }

    fn row(&mut self, r: &MetricReport) -> Result<()> {
        writeln!(self.file, "{}", r.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Builds the architecture and data a config describes and trains from
/// scratch.
pub fn train_from_config(cfg: &TrainConfig) -> Result<(Trainer, TrainOutcome)> {
    let spec = cfg.build_arch()?;
    let (train, val) = cfg.load_data(&spec)?;
    let mut trainer = Trainer::new(&spec, cfg.optim_config()?, cfg.run.seed)?;
    let outcome = trainer.run(&train, val.as_ref(), &RunOptions::from_config(cfg))?;
    Ok((trainer, outcome))
}

/// Evaluation report in profile-row form for a checkpoint: counters from the
/// checkpoint, validation columns from `data`.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, batch: usize) -> Result<MetricReport> {
    let trainer = Trainer::from_checkpoint(ck.clone())?;
    trainer.check_data(data)?;
    let e = trainer.evaluate(data, batch)?;
    Ok(MetricReport {
        step: ck.counters.step,
        lr: lr_at(
            &ck.optim.config,
            ck.counters.epoch,
            ck.counters.samples_seen,
        ),
        val_loss: Some(e.loss),
        val_top1: e.top1,
        val_top5: e.top5,
        val_wmap100: e.wmap100,
        ..MetricReport::default()
    })
}

/// Ablation variants compared against the unmodified preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    ResidualsOff,
    Relu,
    Elu,
}

impl Variant {
    pub const ALL: [Self; 4] = [Self::Baseline, Self::ResidualsOff, Self::Relu, Self::Elu];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::ResidualsOff => "residuals-off",
            Self::Relu => "relu",
            Self::Elu => "elu",
        }
    }

    /// `base` with only this variant's option changed.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Baseline => {}
            Self::ResidualsOff => c.arch.residuals = false,
            Self::Relu => c.arch.activation = "relu".into(),
            Self::Elu => c.arch.activation = "elu".into(),
        }
        c
    }
}

/// Kinds of difference found between two architectures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpecDiff {
    pub shortcuts: usize,
    pub activations: usize,
    pub other: usize,
}

/// Node-by-node comparison that classifies each difference as a changed
/// block shortcut, a changed separable-convolution activation, or anything
/// else (including differing node counts).
pub fn spec_diff(a: &ArchSpec, b: &ArchSpec) -> SpecDiff {
    fn walk(a: &[Node], b: &[Node], d: &mut SpecDiff) {
        if a.len() != b.len() {
            d.other += 1;
            return;
        }
        for (x, y) in a.iter().zip(b) {
            match (x, y) {
                (
                    Node::Block {
                        name: n1,
                        body: b1,
                        shortcut: s1,
                    },
                    Node::Block {
                        name: n2,
                        body: b2,
                        shortcut: s2,
                    },
                ) => {
                    d.other += (n1 != n2) as usize;
                    d.shortcuts += (s1 != s2) as usize;
                    walk(b1, b2, d);
                }
                (Node::Towers(t1), Node::Towers(t2)) if t1.len() == t2.len() => {
                    for (p, q) in t1.iter().zip(t2) {
                        walk(p, q, d);
                    }
                }
                (Node::SepConv { activation: a1, .. }, Node::SepConv { activation: a2, .. })
                    if a1 != a2 =>
                {
                    let mut y = y.clone();
                    if let Node::SepConv { activation, .. } = &mut y {
                        *activation = *a1;
                    }
                    d.activations += 1;
                    d.other += (*x != y) as usize;
                }
                _ => d.other += (x != y) as usize,
            }
        }
    }
    let mut d = SpecDiff::default();
    d.other += (a.input != b.input || a.num_classes != b.num_classes) as usize;
    d.other +=
        (a.options.fc_layers != b.options.fc_layers || a.options.task != b.options.task) as usize;
    walk(&a.nodes, &b.nodes, &mut d);
    d
}

/// Errors unless `variant_spec` differs from `base` only in what `variant`
/// names.
pub fn check_variant(
    variant: Variant,
    base: &ArchSpec,
    variant_spec: &ArchSpec,
) -> Result<SpecDiff> {
    let d = spec_diff(base, variant_spec);
    let ok = d.other == 0
        && match variant {
            Variant::Baseline => d.shortcuts == 0 && d.activations == 0,
            Variant::ResidualsOff => d.activations == 0,
            Variant::Relu | Variant::Elu => d.shortcuts == 0,
        };
    ensure!(
        ok,
        Config,
        "{} variant changes more than its option: {d:?}",
        variant.name()
    );
    Ok(d)
}

/// First profile step at which the training loss is at or below `threshold`.
pub fn steps_to_loss(rows: &[MetricReport], threshold: f64) -> Option<u64> {
    rows.iter()
        .find(|r| r.train_loss.is_some_and(|l| l <= threshold))
        .map(|r| r.step)
}

/// One ablation run per variant with identical seed and settings. Each
/// profile goes to `dir/<variant>.csv` with the wall-clock column off.
pub fn ablation_run(
    base: &TrainConfig,
    variants: &[Variant],
    dir: &Path,
) -> Result<Vec<(Variant, TrainOutcome)>> {
    let base_spec = base.build_arch()?;
    let (train, val) = base.load_data(&base_spec)?;
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut cfg = v.apply(base);
        cfg.run.wallclock = false;
        cfg.run.checkpoint = None;
        cfg.run.profile = Some(dir.join(format!("{}.csv", v.name())));
        let spec = cfg.build_arch()?;
        check_variant(v, &base_spec, &spec)?;
        let mut trainer = Trainer::new(&spec, cfg.optim_config()?, cfg.run.seed)?;
        let outcome = trainer.run(&train, val.as_ref(), &RunOptions::from_config(&cfg))?;
        out.push((v, outcome));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchOptions, Shape3};
    use crate::data::{synth_dataset, Split};

    fn small() -> TrainConfig {
        TrainConfig::parse(
            "[arch]\npreset = \"vgg\"\nvgg_widths = [8]\ninput = \"3x16x16\"\nclasses = 4\n\
             [data]\nsynth_train = 64\nsynth_val = 20\n\
             [run]\nsteps = 6\nbatch_size = 16\neval_every = 4\neval_batch = 8\nwallclock = false\n",
        )
        .unwrap()
    }

    fn checksum(store: &ParamStore<f32>) -> Vec<u32> {
        store
            .iter()
            .flat_map(|p| p.value.as_slice().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn zero_steps_write_header_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.run.steps = 0;
        cfg.run.profile = Some(dir.path().join("p.csv"));
        cfg.run.checkpoint = Some(dir.path().join("c.ck"));
        let (trainer, out) = train_from_config(&cfg).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(
            fs::read_to_string(dir.path().join("p.csv")).unwrap(),
            format!("{PROFILE_HEADER}\n")
        );
        let ck = Checkpoint::load(dir.path().join("c.ck")).unwrap();
        assert_eq!(ck, trainer.checkpoint());
    }

    #[test]
    fn rows_and_epochs() {
        let (trainer, out) = train_from_config(&small()).unwrap();
        let steps: Vec<u64> = out.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, [4, 6]);
        // 64 examples in batches of 16: one full epoch, then two steps.
        assert_eq!(out.epoch_losses.len(), 1);
        assert_eq!(trainer.counters.epoch, 1);
        assert_eq!(trainer.counters.batch_in_epoch, 2);
        assert_eq!(trainer.counters.samples_seen, 96);
        assert_eq!(out.rows[1].epoch, 1.5);
        assert!(out
            .rows
            .iter()
            .all(|r| r.val_top1.is_some() && r.val_wmap100.is_none()));
        assert!(out.final_train.is_some());
    }

    #[test]
    fn runs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = Vec::new();
        for i in 0..2 {
            let mut cfg = small();
            cfg.run.profile = Some(dir.path().join(format!("{i}.csv")));
            train_from_config(&cfg).unwrap();
            csv.push(fs::read(dir.path().join(format!("{i}.csv"))).unwrap());
        }
        assert_eq!(csv[0], csv[1]);
    }

    #[test]
    fn evaluation_leaves_store_untouched() {
        let (trainer, _) = train_from_config(&small()).unwrap();
        let cfg = small();
        let (_, val) = cfg.load_data(trainer.model.spec()).unwrap();
        let before = checksum(&trainer.store);
        let a = trainer.evaluate(val.as_ref().unwrap(), 7).unwrap();
        let b = trainer.evaluate(val.as_ref().unwrap(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(checksum(&trainer.store), before);
    }

    #[test]
    fn resume_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.run.checkpoint = Some(dir.path().join("c.ck"));
        let (trainer, out) = train_from_config(&cfg).unwrap();
        let (train, val) = cfg.load_data(trainer.model.spec()).unwrap();
        let val = val.unwrap();
        let ck = Checkpoint::load(dir.path().join("c.ck")).unwrap();
        let mut resumed = Trainer::from_checkpoint(ck.clone()).unwrap();
        let opts = RunOptions {
            steps: 0,
            ..RunOptions::from_config(&small())
        };
        resumed.run(&train, Some(&val), &opts).unwrap();
        let e = resumed.evaluate(&val, 8).unwrap();
        let last = out.rows.last().unwrap();
        assert_eq!(Some(e.loss), last.val_loss);
        assert_eq!(e.top1, last.val_top1);
        assert_eq!(e.top5, last.val_top5);
        let r = evaluate_checkpoint(&ck, &val, 8).unwrap();
        assert_eq!((r.val_top1, r.val_top5), (last.val_top1, last.val_top5));
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let spec = cfg.build_arch().unwrap();
        let (mut train, _) = cfg.load_data(&spec).unwrap();
        train.images.as_mut_slice()[0] = f32::NAN;
        let mut trainer = Trainer::new(&spec, cfg.optim_config().unwrap(), 7).unwrap();
        let path = dir.path().join("c.ck");
        let opts = RunOptions {
            checkpoint: Some(path.clone()),
            ..RunOptions::from_config(&cfg)
        };
        let before = trainer.checkpoint().to_bytes().unwrap();
        let err = trainer.run(&train, None, &opts).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
        assert_eq!(fs::read(&path).unwrap(), before);
    }

    #[test]
    fn head_mismatch_rejected() {
        let cfg = small();
        let spec = cfg.build_arch().unwrap();
        let other = synth_dataset(5, 20, 16, 1).unwrap();
        let mut trainer = Trainer::new(&spec, cfg.optim_config().unwrap(), 7).unwrap();
        let opts = RunOptions::from_config(&cfg);
        assert!(matches!(
            trainer.run(&other, None, &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn untrained_top1_near_chance() {
        // Balanced 10-class labels, 1000 examples: sd of the hit rate under
        // chance is sqrt(0.1 * 0.9 / 1000) ~= 0.0095.
        let cfg = TrainConfig::parse("[arch]\npreset = \"toy\"\n").unwrap();
        let spec = cfg.build_arch().unwrap();
        let val = synth_dataset(10, 1000, 32, 11).unwrap();
        let trainer = Trainer::new(&spec, cfg.optim_config().unwrap(), 7).unwrap();
        let top1 = trainer.evaluate(&val, 100).unwrap().top1.unwrap();
        let sd = (0.1f64 * 0.9 / 1000.0).sqrt();
        assert!((top1 - 0.1).abs() <= 3.0 * sd, "top1 {top1}");
    }

    #[test]
    fn multilabel_fixture_map() {
        // Scores pass straight through: a parameter-free net on 2x1x1 inputs.
        // Class 0 ranks images 0,1,2,3 with positives {0,2}: AP (1 + 2/3) / 2.
        // Class 1 ranks images 1,2,3,0 with positives {2,3}: AP (1/2 + 2/3) / 2.
        let spec = ArchSpec {
            name: "passthrough".into(),
            input: Shape3::new(2, 1, 1),
            num_classes: Some(2),
            options: ArchOptions {
                task: Task::MultiLabel,
                ..ArchOptions::default()
            },
            nodes: vec![Node::GlobalAvgPool],
        };
        let model = Model::new(&spec).unwrap();
        let store = model.init_params::<f32>(&mut Rng::seed(0)).unwrap();
        let images =
            Tensor4::from_vec((4, 2, 1, 1), vec![0.9, 0.2, 0.8, 0.7, 0.3, 0.6, 0.1, 0.4]).unwrap();
        let labels = Labels::Multi {
            classes: 2,
            rows: vec![1, 0, 0, 0, 1, 1, 0, 1],
        };
        let data = Dataset::new(images, labels, Split::Val).unwrap();
        let got = evaluate(&model, &store, &data, 3).unwrap().wmap100.unwrap();
        let expect = ((1.0 + 2.0 / 3.0) / 2.0 + (0.5 + 2.0 / 3.0) / 2.0) / 2.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((expect - 17.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn variant_specs_differ_only_in_their_option() {
        let base = TrainConfig::parse("[arch]\npreset = \"toy\"\n").unwrap();
        let base_spec = base.build_arch().unwrap();
        let n_blocks_with_shortcut = base_spec.residual_count();
        for v in Variant::ALL {
            let spec = v.apply(&base).build_arch().unwrap();
            let d = check_variant(v, &base_spec, &spec).unwrap();
            match v {
                Variant::Baseline => assert_eq!(d, SpecDiff::default()),
                Variant::ResidualsOff => assert_eq!(d.shortcuts, n_blocks_with_shortcut),
                Variant::Relu | Variant::Elu => {
                    assert!(d.activations > 0);
                    assert_eq!(
                        crate::arch::count_params(&spec).unwrap(),
                        crate::arch::count_params(&base_spec).unwrap()
                    );
                }
            }
        }
        let mut wrong = Variant::Relu.apply(&base);
        wrong.arch.residuals = false;
        let spec = wrong.build_arch().unwrap();
        assert!(check_variant(Variant::Relu, &base_spec, &spec).is_err());
    }

    #[test]
    fn steps_to_loss_threshold() {
        let rows: Vec<MetricReport> = [(10, 2.0), (20, 1.2), (30, 0.9)]
            .iter()
            .map(|&(step, l)| MetricReport {
                step,
                train_loss: Some(l),
                ..MetricReport::default()
            })
            .collect();
        assert_eq!(steps_to_loss(&rows, 1.2), Some(20));
        assert_eq!(steps_to_loss(&rows, 0.5), None);
    }
}
