//! Pretraining, fine-tuning, evaluation and whole-model gradient checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapter::InsertionStrategy;
use crate::autodiff::gradcheck::{self, GradcheckReport};
use crate::autodiff::{AutodiffError, Gradients, ParamStore, Sgd, Tape};
use crate::backbone::{BuildMode, Model};
use crate::config::{BackboneConfig, PeftConfig, RunConfig, TrainConfig};
use crate::data::{generate_dataset, ConfusionMatrix, Metrics, PointCloud};
use crate::Error;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Half-width of the uniform noise added to trainable values before a
/// gradient check.
pub const GRADCHECK_PERTURB: f64 = 0.5;

/// Mean cross-entropy of one scene and its parameter gradients.
pub fn scene_gradients(model: &Model, cloud: &PointCloud) -> Result<(f64, Gradients), Error> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, cloud)?;
    let loss = tape.cross_entropy(out.logits, &cloud.labels)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads.into_params()))
}

pub fn scene_loss(model: &Model, store: &ParamStore, cloud: &PointCloud) -> Result<f64, Error> {
    let mut tape = Tape::inference();
    let out = model.forward_with(&mut tape, store, cloud)?;
    let loss = tape.cross_entropy(out.logits, &cloud.labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Deterministic scene order: a fresh shuffle per pass over the data.
struct Schedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Schedule {
    fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn diverged(step: usize, last: Option<f64>) -> Error {
    Error::Diverged { step, last_finite_loss: last }
}

/// Runs `steps` SGD steps of `batch` scenes each and returns the mean batch
/// loss of every step, measured before its update. `on_step` sees every
/// `(step, loss)`.
pub fn fit(
    model: &mut Model,
    scenes: &[PointCloud],
    steps: usize,
    batch: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, Error> {
    if scenes.is_empty() && steps > 0 {
        return Err(Error::Data("no training scenes".into()));
    }
    let mut schedule = Schedule::new(scenes.len(), seed);
    let mut opt = Sgd::new(lr, momentum);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut total = Gradients::default();
        let mut loss = 0.0;
        for _ in 0..batch.max(1) {
            let cloud = &scenes[schedule.next()];
            let (l, g) = match scene_gradients(model, cloud) {
                Ok(r) => r,
                Err(Error::Autodiff(AutodiffError::NonFinite { .. })) => return Err(diverged(step, losses.last().copied())),
                Err(e) => return Err(e),
            };
            loss += l;
            total.merge(g);
        }
        let loss = loss / batch.max(1) as f64;
        if !loss.is_finite() {
            return Err(diverged(step, losses.last().copied()));
        }
        total.scale(1.0 / batch.max(1) as f64);
        opt.step(&mut model.store, &total);
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Fine-tunes the trainable part of `model` per `train`.
pub fn finetune(
    model: &mut Model,
    scenes: &[PointCloud],
    train: &TrainConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, Error> {
    fit(model, scenes, train.steps, train.batch, train.lr, train.momentum, train.seed, on_step)
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    /// Backbone and temporary head after training, all trainable.
    pub model: Model,
    pub losses: Vec<f64>,
}

impl Pretrained {
    /// Backbone parameters with the frozen flag set; the head is dropped.
    pub fn frozen_backbone(&self) -> Vec<crate::autodiff::Parameter> {
        self.model.frozen_backbone()
    }
}

/// Supervised training of backbone plus a temporary head, `epochs` passes
/// over `scenes` with one scene per step.
pub fn pretrain_backbone(
    backbone: &BackboneConfig,
    peft: &PeftConfig,
    scenes: &[PointCloud],
    epochs: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<Pretrained, Error> {
    let mut model = Model::build(backbone, peft, seed, BuildMode::Pretrain)?;
    let losses = fit(&mut model, scenes, epochs * scenes.len(), 1, lr, momentum, seed, |_, _| {})?;
    Ok(Pretrained { model, losses })
}

/// A fine-tuning model with the given pretrained backbone loaded.
pub fn finetune_model(
    backbone: &BackboneConfig,
    peft: &PeftConfig,
    pretrained: &[crate::autodiff::Parameter],
    seed: u64,
) -> Result<Model, Error> {
    let mut model = Model::build(backbone, peft, seed, BuildMode::Finetune)?;
    model.load(pretrained)?;
    Ok(model)
}

/// Confusion matrix over all scenes, evaluated in parallel on the current
/// rayon pool.
pub fn evaluate(model: &Model, scenes: &[PointCloud]) -> Result<(ConfusionMatrix, Metrics), Error> {
    let k = model.backbone.num_classes;
    let parts: Vec<Result<ConfusionMatrix, Error>> = scenes
        .par_iter()
        .map(|cloud| {
            let preds = model.predict(cloud)?;
            let mut cm = ConfusionMatrix::new(k);
            cm.add(&cloud.labels, &preds)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(k);
    for p in parts {
        cm.merge(&p?);
    }
    let m = cm.metrics()?;
    Ok((cm, m))
}

/// Scenes of the three splits described by a run configuration.
#[derive(Debug, Clone)]
pub struct Splits {
    pub pretrain: Vec<PointCloud>,
    pub train: Vec<PointCloud>,
    pub val: Vec<PointCloud>,
}

/// One of the three dataset splits of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Pretraining distribution.
    Pretrain,
    /// Downstream distribution, fine-tuning scenes.
    Train,
    /// Downstream distribution, held-out scenes.
    Val,
}

/// Scenes of one split. Each split draws from its own seed
/// (`data.seed`, `+1`, `+2`).
pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<PointCloud>, Error> {
    let s = cfg.data.seed;
    let (which, count, seed) = match split {
        Split::Pretrain => (&cfg.data.pretrain, cfg.data.pretrain_scenes, s),
        Split::Train => (&cfg.data.downstream, cfg.data.train_scenes, s.wrapping_add(1)),
        Split::Val => (&cfg.data.downstream, cfg.data.val_scenes, s.wrapping_add(2)),
    };
    generate_dataset(&cfg.scene_spec(which)?, count, seed)
}

pub fn make_splits(cfg: &RunConfig) -> Result<Splits, Error> {
    Ok(Splits {
        pretrain: generate_split(cfg, Split::Pretrain)?,
        train: generate_split(cfg, Split::Train)?,
        val: generate_split(cfg, Split::Val)?,
    })
}

/// The same architecture shrunk so that finite differences over every
/// trainable scalar stay cheap: a quarter of the channels, patches of 4 and
/// scenes of 24 points.
pub fn miniature(cfg: &RunConfig) -> RunConfig {
    let mut m = cfg.clone();
    for s in &mut m.backbone.stages {
        s.channels = (s.channels / 4).max(4);
        s.patch = 4;
        s.groups = (s.groups / 8).max(1);
    }
    if let Some(b) = &mut m.peft.bottleneck {
        b.iter_mut().for_each(|d| *d = (*d / 4).max(1));
    }
    if let Some(m1) = &mut m.peft.group_count_stage1 {
        *m1 = (*m1 / 8).max(1);
    }
    m.data.points = Some(24);
    m
}

/// Central finite differences over every trainable scalar of the miniature
/// model on one downstream scene. Trainable values are first moved off
/// their initialization (uniform noise of half-width `perturb`) so that the
/// zero-initialized up-projections do not hide the other gradients.
pub fn gradcheck(cfg: &RunConfig, seed: u64, perturb: f64) -> Result<GradcheckReport, Error> {
    let mini = miniature(cfg);
    let mut model = Model::build(&mini.backbone, &mini.peft, seed, BuildMode::Finetune)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.get(id).trainable {
            model.store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-perturb..=perturb));
        }
    }
    let spec = mini.scene_spec(&mini.data.downstream)?;
    let cloud = generate_dataset(&spec, 1, seed)?.pop().expect("one scene");
    let (_, analytic) = scene_gradients(&model, &cloud)?;
    let mut store = model.store.clone();
    gradcheck::check_trainable(&mut store, &analytic, GRADCHECK_STEP, GRADCHECK_TOLERANCE, |s| scene_loss(&model, s, &cloud))
}

/// Validation mIoU of one fine-tuning strategy, one entry per seed.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub strategy: InsertionStrategy,
    pub seeds: Vec<u64>,
    pub mious: Vec<f64>,
}

impl ArmResult {
    pub fn mean_miou(&self) -> f64 {
        self.mious.iter().sum::<f64>() / self.mious.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub pretrain_losses: Vec<f64>,
    pub arms: Vec<ArmResult>,
}

impl TransferReport {
    pub fn arm(&self, strategy: InsertionStrategy) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.strategy == strategy)
    }
}

/// Pretrains once on the pretraining split with `cfg.train.seed`, freezes the
/// backbone, then fine-tunes every strategy for `cfg.train.steps` steps per
/// seed and evaluates on the validation split. Only the strategy changes
/// between arms; the rest of `cfg.peft` is shared.
pub fn transfer_experiment(
    cfg: &RunConfig,
    strategies: &[InsertionStrategy],
    seeds: &[u64],
) -> Result<TransferReport, Error> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    let t = &cfg.train;
    let pre = pretrain_backbone(
        &cfg.backbone,
        &cfg.peft,
        &splits.pretrain,
        t.pretrain_epochs,
        t.pretrain_lr,
        t.momentum,
        t.seed,
    )?;
    let frozen = pre.frozen_backbone();
    let mut arms = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let peft = PeftConfig { strategy, ..cfg.peft.clone() };
        let mut mious = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut model = finetune_model(&cfg.backbone, &peft, &frozen, seed)?;
            fit(&mut model, &splits.train, t.steps, t.batch, t.lr, t.momentum, seed, |_, _| {})?;
            mious.push(evaluate(&model, &splits.val)?.1.miou);
        }
        arms.push(ArmResult { strategy, seeds: seeds.to_vec(), mious });
    }
    Ok(TransferReport { pretrain_losses: pre.losses, arms })
}

/// Trainable share of all parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub trainable: usize,
    pub frozen: usize,
    pub closed_form: usize,
}

impl Budget {
    pub fn of(model: &Model) -> Self {
        let (trainable, frozen) = model.census();
        Self { trainable, frozen, closed_form: model.closed_form_trainable() }
    }

    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / (self.trainable + self.frozen) as f64
    }
}
