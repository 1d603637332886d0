//! Self-supervised pre-training of a backbone on unlabeled images.
//!
//! Two objectives are available: a SimSiam-style predictor with a
//! stop-gradient target, and a SwAV-style swapped prediction against
//! prototypes whose targets come from a balanced Sinkhorn assignment. Both
//! use plain SGD with momentum under a warmup + cosine learning-rate schedule.
//! Training is single-threaded and reproducible for a fixed seed.

pub mod augment;
pub mod sinkhorn;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_traced, sample_crop, AugmentSpec, AugmentedPair, CropBox};
pub use sinkhorn::{marginals, sinkhorn};

use crate::backbones::{BackboneGraph, Binder, NormMode, ParamStore};
use crate::corpus::corpus_hash;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Rng;
use crate::tensor::{xavier_uniform, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    /// Optimizer steps per epoch; the toy runs treat one step as one epoch.
    pub steps_per_epoch: usize,
}

impl TrainSchedule {
    /// Full-scale reference settings.
    pub fn reference() -> Self {
        Self { epochs: 400, batch_size: 96, base_lr: 0.6, final_lr: 0.0006, warmup_epochs: 5, steps_per_epoch: 1 }
    }

    /// Desk-scale settings: `steps` optimizer steps of batch 32.
    pub fn toy(steps: usize) -> Self {
        Self {
            epochs: steps.max(1),
            batch_size: 32,
            base_lr: 0.05,
            final_lr: 0.0005,
            warmup_epochs: (steps / 20).min(10),
            steps_per_epoch: 1,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, steps_per_epoch and batch_size must be positive"));
        }
        if self.final_lr > self.base_lr || self.final_lr < 0.0 {
            return Err(Error::invalid(format!("need 0 <= final_lr <= base_lr, got {} / {}", self.final_lr, self.base_lr)));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(format!("warmup {} must be shorter than {} epochs", self.warmup_epochs, self.epochs)));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `final_lr`.
pub fn cosine_lr(step: usize, schedule: &TrainSchedule) -> f64 {
    let warmup = schedule.warmup_epochs * schedule.steps_per_epoch;
    let total = schedule.total_steps();
    if step < warmup {
        return schedule.base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    schedule.final_lr + 0.5 * (schedule.base_lr - schedule.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with momentum: `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let w = store.get(name)?;
            if w.shape() != g.shape() {
                return Err(Error::shape(format!("{name}: gradient {:?} for weight {:?}", g.shape(), w.shape())));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; w.numel()]);
            let mut out = w.to_vec();
            for i in 0..out.len() {
                v[i] = self.momentum * v[i] + g.data()[i] + self.weight_decay * out[i];
                out[i] -= lr * v[i];
            }
            let updated = Tensor::new(w.shape().to_vec(), out)?;
            store.insert(name.clone(), updated);
        }
        Ok(())
    }
}

/// Prototype vectors, one unit-norm row each.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Tensor,
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let (k, d) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = src.to_vec();
    for r in 0..k {
        let row = &mut out[r * d..(r + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new([k, d], out).expect("same shape")
}

impl PrototypeBank {
    pub fn random(count: usize, dim: usize, rng: &mut Rng) -> Self {
        let t = Tensor::from_fn([count, dim], |_| rng.normal());
        Self { prototypes: normalize_rows(&t) }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::shape(format!("prototypes must be [K,D], got {:?}", t.shape())));
        }
        Ok(Self { prototypes: normalize_rows(t) })
    }

    /// Largest deviation of a row norm from 1.
    pub fn norm_error(&self) -> f64 {
        let d = self.prototypes.shape()[1];
        self.prototypes
            .data()
            .chunks(d)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `−mean_b cos(p_b, z_b)` with no gradient flowing into `z`.
pub fn negative_cosine<'t>(p: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let pn = p.l2_normalize(1)?;
    let zn = z.detach().l2_normalize(1)?;
    Ok(pn.mul(zn)?.sum_axes(&[1])?.mean_all().neg())
}

/// Symmetrized SimSiam loss, in `[−1, 1]`.
pub fn simsiam_loss<'t>(p_a: Var<'t>, p_b: Var<'t>, z_a: Var<'t>, z_b: Var<'t>) -> Result<Var<'t>> {
    Ok(negative_cosine(p_a, z_b)?.add(negative_cosine(p_b, z_a)?)?.scale(0.5))
}

/// Soft codes for a `[B, K]` score matrix; each row sums to one.
pub fn swav_codes(scores: &Tensor, iters: usize, eps: f64) -> Result<Tensor> {
    let b = scores.shape().first().copied().unwrap_or(0) as f64;
    Ok(sinkhorn(scores, iters, eps)?.map(|q| q * b))
}

/// Swapped prediction: the codes of each view supervise the temperature
/// softmax of the other view's scores.
pub fn swav_loss<'t>(
    scores_a: Var<'t>,
    scores_b: Var<'t>,
    codes_a: &Tensor,
    codes_b: &Tensor,
    temperature: f64,
) -> Result<Var<'t>> {
    let tape = scores_a.tape();
    let b = scores_a.shape()[0] as f64;
    let qa = tape.constant(codes_a.clone());
    let qb = tape.constant(codes_b.clone());
    let la = scores_a.scale(1.0 / temperature).log_softmax()?;
    let lb = scores_b.scale(1.0 / temperature).log_softmax()?;
    Ok(qa.mul(lb)?.sum_all().add(qb.mul(la)?.sum_all())?.scale(-0.5 / b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    SimSiam,
    Swav,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::SimSiam => "simsiam",
            Objective::Swav => "swav",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simsiam" => Ok(Self::SimSiam),
            "swav" => Ok(Self::Swav),
            _ => Err(Error::invalid(format!("objective must be simsiam or swav, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub schedule: TrainSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub proj_dim: usize,
    pub num_prototypes: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_eps: f64,
    pub temperature: f64,
    pub bn_momentum: f64,
}

impl PretrainConfig {
    pub fn toy(objective: Objective, steps: usize, seed: u64) -> Self {
        Self {
            objective,
            seed,
            augment: AugmentSpec::default(),
            schedule: TrainSchedule::toy(steps),
            momentum: 0.9,
            weight_decay: 0.0,
            proj_dim: 32,
            num_prototypes: 16,
            sinkhorn_iters: 3,
            sinkhorn_eps: 0.05,
            temperature: 0.1,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

const HEAD_STREAM: u64 = u64::MAX;

fn linear_head(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut Rng) {
    store.insert(format!("{name}.weight"), xavier_uniform(&[out, inp], rng));
    store.insert(format!("{name}.bias"), Tensor::zeros([out]));
}

fn dense<'t>(binder: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.linear(binder.param(&format!("{name}.weight"))?, Some(binder.param(&format!("{name}.bias"))?))
}

/// Owns the backbone, the training heads and the optimizer state.
pub struct Pretrainer {
    model: BackboneGraph,
    store: ParamStore,
    sgd: Sgd,
    config: PretrainConfig,
    corpus: Vec<Image>,
    corpus_hash: String,
    root: Rng,
    step: usize,
    history: Vec<StepRecord>,
}

impl Pretrainer {
    pub fn new(model: BackboneGraph, corpus: Vec<Image>, mut config: PretrainConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("pre-training corpus is empty"));
        }
        config.schedule.validate()?;
        if config.schedule.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if model.input_spec.fixed_size {
            let s = model.input_spec.height;
            config.augment.crop_sizes = (s, s);
        }
        config.augment.validate()?;
        let root = Rng::new(config.seed);
        let mut head_rng = root.fork(HEAD_STREAM);
        let mut store = model.params.clone();
        let embed = *model.tap_channels().last().expect("taps nonempty");
        let p = config.proj_dim;
        linear_head(&mut store, "head.proj", p, embed, &mut head_rng);
        match config.objective {
            Objective::SimSiam => {
                linear_head(&mut store, "head.pred1", p, p, &mut head_rng);
                linear_head(&mut store, "head.pred2", p, p, &mut head_rng);
            }
            Objective::Swav => {
                let bank = PrototypeBank::random(config.num_prototypes, p, &mut head_rng);
                store.insert("head.prototypes", bank.prototypes);
            }
        }
        let hash = corpus_hash(&corpus);
        Ok(Self {
            model,
            store,
            sgd: Sgd::new(config.momentum, config.weight_decay),
            config,
            corpus,
            corpus_hash: hash,
            root,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn prototypes(&self) -> Option<PrototypeBank> {
        self.store.get("head.prototypes").ok().map(|t| PrototypeBank { prototypes: t.clone() })
    }

    fn views(&self, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let bs = self.config.schedule.batch_size;
        let (mut a, mut b) = (Vec::with_capacity(bs), Vec::with_capacity(bs));
        for _ in 0..bs {
            let img = &self.corpus[rng.below(self.corpus.len())];
            let (va, vb) = augment(img, &self.config.augment, rng)?;
            a.push(va.to_tensor());
            b.push(vb.to_tensor());
        }
        Ok((Tensor::stack(&a)?, Tensor::stack(&b)?))
    }

    /// One optimizer step on a freshly sampled batch. The batch and its
    /// augmentations depend only on `(seed, step)`.
    pub fn step(&mut self) -> Result<StepRecord> {
        let mut rng = self.root.fork(self.step as u64);
        let (xa, xb) = self.views(&mut rng)?;
        self.step_on(&xa, &xb)
    }

    /// One optimizer step on given view batches `[B, C, H, W]`.
    pub fn step_on(&mut self, view_a: &Tensor, view_b: &Tensor) -> Result<StepRecord> {
        let lr = cosine_lr(self.step, &self.config.schedule);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.store, true, NormMode::Train);
        let za = self.model.embed(&binder, tape.constant(view_a.clone()))?;
        let zb = self.model.embed(&binder, tape.constant(view_b.clone()))?;
        let loss = match self.config.objective {
            Objective::SimSiam => {
                let (pa, pb) = (dense(&binder, "head.proj", za)?, dense(&binder, "head.proj", zb)?);
                let pred = |z| dense(&binder, "head.pred2", dense(&binder, "head.pred1", z)?.relu());
                simsiam_loss(pred(pa)?, pred(pb)?, pa, pb)?
            }
            Objective::Swav => {
                let protos = binder.param("head.prototypes")?;
                let sa = dense(&binder, "head.proj", za)?.l2_normalize(1)?.linear(protos, None)?;
                let sb = dense(&binder, "head.proj", zb)?.l2_normalize(1)?.linear(protos, None)?;
                let (iters, eps) = (self.config.sinkhorn_iters, self.config.sinkhorn_eps);
                let qa = swav_codes(&sa.value(), iters, eps)?;
                let qb = swav_codes(&sb.value(), iters, eps)?;
                swav_loss(sa, sb, &qa, &qb, self.config.temperature)?
            }
        };
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        let grads = tape.backward(loss)?;
        let named = binder.gradients(&grads);
        let stats = binder.take_stats();
        drop(binder);
        self.sgd.step(&mut self.store, &named, lr)?;
        if let Ok(p) = self.store.get("head.prototypes") {
            let normalized = normalize_rows(p);
            self.store.insert("head.prototypes", normalized);
        }
        let bs = view_a.shape()[0];
        self.model.update_running_stats(&stats, self.config.bn_momentum, bs);
        let record = StepRecord { step: self.step, loss: value, lr };
        self.history.push(record);
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` further steps.
    pub fn run(&mut self, steps: usize) -> Result<&[StepRecord]> {
        let start = self.history.len();
        for _ in 0..steps {
            self.step()?;
        }
        Ok(&self.history[start..])
    }

    /// The trained backbone (heads dropped), tagged with training metadata.
    pub fn finish(self) -> BackboneGraph {
        let mut model = self.model;
        let names: Vec<String> = model.params.trainable_names().cloned().collect();
        for name in names {
            if let Ok(t) = self.store.get(&name) {
                model.params.insert(name, t.clone());
            }
        }
        model.metadata.insert("objective".into(), self.config.objective.to_string());
        model.metadata.insert("steps".into(), self.step.to_string());
        model.metadata.insert("seed".into(), self.config.seed.to_string());
        model.metadata.insert("corpus_hash".into(), self.corpus_hash);
        model
    }
}

/// Mean of a trailing window of losses.
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || losses.len() < window {
        return Vec::new();
    }
    losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
