//! Toy image-to-image translation: a small convolutional generator maps two
//! aligned input channels onto a target channel, trained with a mix of pixel
//! `ℓ1` and CoPer feature loss.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneGraph, Binder, NormMode, ParamStore, WeightEntry, WeightFile};
use crate::classical::{psnr, ssim, SsimConfig};
use crate::corpus::{generate, CorpusSpec};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::losses::{full_objective, generator_objective_var, loss_coper_var, loss_l1_var, LossBreakdown};
use crate::metric::{coper_distance, ChannelWeights};
use crate::pretrain::Sgd;
use crate::rng::Rng;
use crate::tensor::{xavier_uniform, Tape, Tensor, Var};

/// Aligned input/target triples: inputs are an edge map and an intensity
/// warp `(x + x²)/2` of a latent image `x`, the target is `x` itself.
#[derive(Debug, Clone)]
pub struct PairedCorpus {
    /// `[2, H, W]` per sample.
    pub inputs: Vec<Tensor>,
    /// `[1, H, W]` per sample.
    pub targets: Vec<Tensor>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Gradient magnitude by central differences (edge-replicated), scaled to `[0, 1]`.
pub fn edge_map(x: &Image) -> Image {
    let (h, w) = (x.height, x.width);
    let at = |y: isize, xx: isize| x.at(0, y.clamp(0, h as isize - 1) as usize, xx.clamp(0, w as isize - 1) as usize);
    Image::from_fn(1, h, w, |_, y, xx| {
        let (y, xx) = (y as isize, xx as isize);
        let gx = at(y, xx + 1) - at(y, xx - 1);
        let gy = at(y + 1, xx) - at(y - 1, xx);
        ((gx * gx + gy * gy).sqrt() / 2.0).min(1.0)
    })
}

pub fn intensity_warp(x: &Image) -> Image {
    x.map(|v| (v + v * v) / 2.0)
}

impl PairedCorpus {
    pub fn from_latents(latents: &[Image], val_fraction: f64, seed: u64) -> Result<Self> {
        if latents.len() < 2 {
            return Err(Error::invalid("paired corpus needs at least two images"));
        }
        let mut inputs = Vec::with_capacity(latents.len());
        let mut targets = Vec::with_capacity(latents.len());
        for im in latents {
            let g = im.to_gray();
            let e = edge_map(&g).to_tensor();
            let w = intensity_warp(&g).to_tensor();
            let (h, wd) = (g.height, g.width);
            let mut data = e.to_vec();
            data.extend_from_slice(w.data());
            inputs.push(Tensor::new([2, h, wd], data)?);
            targets.push(g.to_tensor());
        }
        let n = latents.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let order = Rng::new(seed).fork(0x5917).permutation(n);
        let mut val = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok(Self { inputs, targets, train, val })
    }

    /// Procedural latents of side `size`.
    pub fn procedural(count: usize, size: usize, seed: u64) -> Result<Self> {
        Self::from_latents(&generate(&CorpusSpec { count, size, seed }), 0.2, seed)
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let x: Vec<Tensor> = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        let y: Vec<Tensor> = indices.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((Tensor::stack(&x)?, Tensor::stack(&y)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden widths; the network has `widths.len() + 1` 3×3 convolutions.
    pub widths: Vec<usize>,
    /// Hidden activation (`relu`); the output passes through a sigmoid into `[0, 1]`.
    pub activation: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { in_channels: 2, out_channels: 1, widths: vec![16, 16, 16], activation: "relu".into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        if config.activation != "relu" {
            return Err(Error::invalid(format!("unsupported activation {:?}", config.activation)));
        }
        let mut params = ParamStore::new();
        let mut chans = vec![config.in_channels];
        chans.extend(&config.widths);
        chans.push(config.out_channels);
        for (i, pair) in chans.windows(2).enumerate() {
            params.insert(format!("gen.conv{}.weight", i + 1), xavier_uniform(&[pair[1], pair[0], 3, 3], rng));
            params.insert(format!("gen.conv{}.bias", i + 1), Tensor::zeros([pair[1]]));
        }
        Ok(Self { config, params })
    }

    fn depth(&self) -> usize {
        self.config.widths.len() + 1
    }

    /// `[B, in, H, W]` → `[B, out, H, W]` in `[0, 1]`.
    pub fn forward<'t>(&self, binder: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for i in 1..=self.depth() {
            let w = binder.param(&format!("gen.conv{i}.weight"))?;
            let b = binder.param(&format!("gen.conv{i}.bias"))?;
            h = h.conv2d(w, Some(b), 1, 1)?;
            h = if i < self.depth() { h.relu() } else { h.sigmoid() };
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.params);
        Ok(self.forward(&binder, tape.constant(x.clone()))?.value())
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut meta = BTreeMap::new();
        meta.insert("generator".into(), serde_json::to_string(&self.config).expect("config serializes"));
        let entries = self
            .params
            .iter()
            .map(|(n, t)| WeightEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        WeightFile::new(meta, entries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Validation cadence in steps; validation also runs before step 0 and after the last step.
    pub eval_every: usize,
    /// Unit-normalize tap activations inside the CoPer loss.
    #[serde(default)]
    pub normalize_features: bool,
}

impl Default for SynthSchedule {
    fn default() -> Self {
        Self { steps: 500, batch_size: 8, lr: 0.01, momentum: 0.9, eval_every: 100, normalize_features: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub l1: f64,
    pub coper: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub coper_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HistoryEntry {
    Train { step: usize, losses: LossBreakdown },
    Val { step: usize, metrics: ValidationMetrics },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRun {
    pub generator: Generator,
    pub history: Vec<HistoryEntry>,
    pub lambda1: f64,
    pub seed: u64,
}

impl SynthRun {
    pub fn validations(&self) -> Vec<(usize, ValidationMetrics)> {
        self.history
            .iter()
            .filter_map(|h| match h {
                HistoryEntry::Val { step, metrics } => Some((*step, *metrics)),
                _ => None,
            })
            .collect()
    }

    pub fn initial_val(&self) -> ValidationMetrics {
        self.validations().first().expect("validation runs before training").1
    }

    pub fn final_val(&self) -> ValidationMetrics {
        self.validations().last().expect("validation runs after training").1
    }
}

/// Validation metrics of `generator` on the held-out split.
pub fn validate(generator: &Generator, corpus: &PairedCorpus, loss_net: &BackboneGraph) -> Result<ValidationMetrics> {
    let weights = ChannelWeights::ones(loss_net);
    let ssim_cfg = SsimConfig::default();
    let (x, y) = corpus.batch(&corpus.val)?;
    let tape = Tape::new();
    let gen_binder = Binder::frozen(&tape, &generator.params);
    let net_binder = Binder::frozen(&tape, &loss_net.params);
    let out = generator.forward(&gen_binder, tape.constant(x))?;
    let target = tape.constant(y.clone());
    let l1 = loss_l1_var(target, out)?.item()?;
    let coper = loss_coper_var(loss_net, &net_binder, &[(target, out)], false)?.item()?;
    let out = out.value();
    let n = corpus.val.len() as f64;
    let (mut p, mut s, mut c) = (0.0, 0.0, 0.0);
    for i in 0..corpus.val.len() {
        let (a, b) = (y.index0(i)?, out.index0(i)?);
        p += psnr(&a, &b, 1.0)?.min(100.0);
        s += ssim(&a, &b, &ssim_cfg)?;
        c += coper_distance(loss_net, &weights, &a, &b)?.total;
    }
    Ok(ValidationMetrics { l1, coper, psnr: p / n, ssim: s / n, coper_metric: c / n })
}

/// Trains a fresh generator with `g = λ1·l1 + (1−λ1)·coper` (no adversarial term).
pub fn train_translator(
    corpus: &PairedCorpus,
    config: &GeneratorConfig,
    loss_net: &BackboneGraph,
    lambda1: f64,
    schedule: &SynthSchedule,
    seed: u64,
) -> Result<SynthRun> {
    train_translator_with(corpus, config, loss_net, lambda1, schedule, seed, |_| Ok(()))
}

/// As [`train_translator`], calling `sink` with each history entry as it is produced.
pub fn train_translator_with(
    corpus: &PairedCorpus,
    config: &GeneratorConfig,
    loss_net: &BackboneGraph,
    lambda1: f64,
    schedule: &SynthSchedule,
    seed: u64,
    mut sink: impl FnMut(&HistoryEntry) -> Result<()>,
) -> Result<SynthRun> {
    if corpus.train.is_empty() || corpus.val.is_empty() {
        return Err(Error::invalid("paired corpus has an empty split"));
    }
    crate::losses::check_lambdas(lambda1, 0.0)?;
    if schedule.batch_size == 0 || schedule.eval_every == 0 {
        return Err(Error::invalid("batch_size and eval_every must be positive"));
    }
    let root = Rng::new(seed);
    let mut generator = Generator::new(config.clone(), &mut root.fork(u64::MAX))?;
    let mut sgd = Sgd::new(schedule.momentum, 0.0);
    let mut history = Vec::new();
    let mut push = |h: HistoryEntry, history: &mut Vec<HistoryEntry>| -> Result<()> {
        sink(&h)?;
        history.push(h);
        Ok(())
    };
    push(HistoryEntry::Val { step: 0, metrics: validate(&generator, corpus, loss_net)? }, &mut history)?;
    for step in 0..schedule.steps {
        let mut rng = root.fork(step as u64);
        let idx: Vec<usize> = (0..schedule.batch_size).map(|_| corpus.train[rng.below(corpus.train.len())]).collect();
        let (x, y) = corpus.batch(&idx)?;
        let tape = Tape::new();
        let gen_binder = Binder::new(&tape, &generator.params, true, NormMode::Inference);
        let net_binder = Binder::frozen(&tape, &loss_net.params);
        let out = generator.forward(&gen_binder, tape.constant(x))?;
        let target = tape.constant(y);
        let l1 = loss_l1_var(target, out)?;
        let coper = loss_coper_var(loss_net, &net_binder, &[(target, out)], schedule.normalize_features)?;
        let g = generator_objective_var(l1, Some(coper), None, lambda1, 0.0)?;
        let breakdown = full_objective(l1.item()?, coper.item()?, 0.0, lambda1, 0.0)?;
        if !breakdown.g_total.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at step {step}")));
        }
        let grads = tape.backward(g)?;
        let named = gen_binder.gradients(&grads);
        drop(gen_binder);
        sgd.step(&mut generator.params, &named, schedule.lr)?;
        push(HistoryEntry::Train { step, losses: breakdown }, &mut history)?;
        let done = step + 1;
        if done % schedule.eval_every == 0 || done == schedule.steps {
            push(HistoryEntry::Val { step: done, metrics: validate(&generator, corpus, loss_net)? }, &mut history)?;
        }
    }
    Ok(SynthRun { generator, history, lambda1, seed })
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for h in history {
        serde_json::to_writer(&mut out, h)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda1: f64,
    /// Weight of the CoPer term, `1 − λ1`.
    pub coper_weight: f64,
    pub metrics: ValidationMetrics,
}

/// One training run per `λ1`, all from the same seed.
pub fn compare_lambda(
    corpus: &PairedCorpus,
    config: &GeneratorConfig,
    loss_net: &BackboneGraph,
    lambdas: &[f64],
    schedule: &SynthSchedule,
    seed: u64,
) -> Result<Vec<LambdaRow>> {
    lambdas
        .iter()
        .map(|&l| {
            let run = train_translator(corpus, config, loss_net, l, schedule, seed)?;
            Ok(LambdaRow { lambda1: l, coper_weight: 1.0 - l, metrics: run.final_val() })
        })
        .collect()
}
