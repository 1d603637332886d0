//! Miniature VGG-, ResNet- and ViT-style feature extractors.
//!
//! A [`BackboneGraph`] is an ordered list of [`Layer`]s plus the indices of
//! its tap layers. The forward pass is an interpreter over that list; tap
//! outputs are returned as `[B, C_l, H_l, W_l]` maps (transformer token
//! matrices are reshaped onto their square patch grid).
//!
//! Tap placement:
//! - `mini_vgg`: after the ReLU closing each of the 4 conv stages (before pooling);
//! - `mini_resnet`: after the stem and after each of the 3 residual stages;
//! - `mini_vit`: after each of the 5 transformer blocks.

mod params;
mod weights;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use params::{is_buffer, BatchStats, Binder, NormMode, ParamStore};
pub use weights::{WeightEntry, WeightFile, WeightFileError, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{xavier_uniform, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    MiniVgg,
    MiniResnet,
    MiniVit,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini_vgg" | "vgg" => Ok(Self::MiniVgg),
            "mini_resnet" | "resnet" => Ok(Self::MiniResnet),
            "mini_vit" | "vit" => Ok(Self::MiniVit),
            other => Err(Error::invalid(format!("unknown backbone kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Tiny,
    Small,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            other => Err(Error::invalid(format!("unknown scale {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub tokens_per_side: usize,
    pub mlp_hidden: usize,
}

impl ViTConfig {
    pub fn tiny() -> Self {
        Self { patch_size: 4, embed_dim: 32, num_blocks: 5, num_heads: 2, tokens_per_side: 8, mlp_hidden: 64 }
    }

    pub fn small() -> Self {
        Self { patch_size: 4, embed_dim: 64, num_blocks: 5, num_heads: 4, tokens_per_side: 16, mlp_hidden: 128 }
    }

    /// ViT-S/16 shapes: 224×224 input, 14×14 tokens of width 384.
    pub fn reference_s16() -> Self {
        Self { patch_size: 16, embed_dim: 384, num_blocks: 5, num_heads: 6, tokens_per_side: 14, mlp_hidden: 1536 }
    }

    pub fn input_size(&self) -> usize {
        self.patch_size * self.tokens_per_side
    }

    /// Shape of each reshaped tap: `[embed_dim, t, t]`.
    pub fn tap_shape(&self) -> [usize; 3] {
        [self.embed_dim, self.tokens_per_side, self.tokens_per_side]
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.tokens_per_side == 0
            || self.num_blocks == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::invalid(format!("invalid ViT config {self:?}")));
        }
        Ok(())
    }
}

/// Full architecture description; stored in weight-file metadata so a file
/// can be loaded without out-of-band information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    MiniVgg { scale: Scale },
    MiniResnet { scale: Scale },
    MiniVit { config: ViTConfig },
}

impl Architecture {
    pub fn new(kind: BackboneKind, scale: Scale) -> Self {
        match kind {
            BackboneKind::MiniVgg => Architecture::MiniVgg { scale },
            BackboneKind::MiniResnet => Architecture::MiniResnet { scale },
            BackboneKind::MiniVit => Architecture::MiniVit {
                config: match scale {
                    Scale::Tiny => ViTConfig::tiny(),
                    Scale::Small => ViTConfig::small(),
                },
            },
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Architecture::MiniVgg { .. } => BackboneKind::MiniVgg,
            Architecture::MiniResnet { .. } => BackboneKind::MiniResnet,
            Architecture::MiniVit { .. } => BackboneKind::MiniVit,
        }
    }

    pub fn name(&self) -> String {
        let scale = |s: &Scale| match s {
            Scale::Tiny => "tiny",
            Scale::Small => "small",
        };
        match self {
            Architecture::MiniVgg { scale: s } => format!("mini_vgg-{}", scale(s)),
            Architecture::MiniResnet { scale: s } => format!("mini_resnet-{}", scale(s)),
            Architecture::MiniVit { config } => {
                format!("mini_vit-p{}-d{}-t{}", config.patch_size, config.embed_dim, config.tokens_per_side)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Fully convolutional models accept any spatial size of at least
    /// `min_size`; transformers require exactly `height × width`.
    pub fixed_size: bool,
    pub min_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { name: String, channels: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    /// conv3×3(stride) → BN → ReLU → conv3×3 → BN, plus a projection shortcut
    /// (1×1 conv + BN) when the shape changes, then ReLU.
    BasicBlock { name: String, in_ch: usize, out_ch: usize, stride: usize },
    /// Non-overlapping patch projection plus learned position embedding;
    /// outputs tokens `[B, N, D]`.
    PatchEmbed { name: String, in_ch: usize, dim: usize, patch: usize, tokens: usize },
    /// Pre-norm block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
    TransformerBlock { name: String, dim: usize, heads: usize, hidden: usize },
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

impl Layer {
    fn params(&self) -> Vec<(String, Vec<usize>, Init)> {
        let conv = |name: &str, o: usize, i: usize, k: usize, bias: bool| {
            let mut v = vec![(format!("{name}.weight"), vec![o, i, k, k], Init::Xavier)];
            if bias {
                v.push((format!("{name}.bias"), vec![o], Init::Zeros));
            }
            v
        };
        let bn = |name: &str, c: usize| {
            vec![
                (format!("{name}.weight"), vec![c], Init::Ones),
                (format!("{name}.bias"), vec![c], Init::Zeros),
                (format!("{name}.running_mean"), vec![c], Init::Zeros),
                (format!("{name}.running_var"), vec![c], Init::Ones),
            ]
        };
        let linear = |name: &str, o: usize, i: usize| {
            vec![(format!("{name}.weight"), vec![o, i], Init::Xavier), (format!("{name}.bias"), vec![o], Init::Zeros)]
        };
        let ln = |name: &str, d: usize| {
            vec![(format!("{name}.weight"), vec![d], Init::Ones), (format!("{name}.bias"), vec![d], Init::Zeros)]
        };
        match self {
            Layer::Conv { name, in_ch, out_ch, kernel, .. } => conv(name, *out_ch, *in_ch, *kernel, true),
            Layer::BatchNorm { name, channels } => bn(name, *channels),
            Layer::Relu | Layer::MaxPool { .. } => vec![],
            Layer::BasicBlock { name, in_ch, out_ch, stride } => {
                let mut v = conv(&format!("{name}.conv1"), *out_ch, *in_ch, 3, false);
                v.extend(bn(&format!("{name}.bn1"), *out_ch));
                v.extend(conv(&format!("{name}.conv2"), *out_ch, *out_ch, 3, false));
                v.extend(bn(&format!("{name}.bn2"), *out_ch));
                if *stride != 1 || in_ch != out_ch {
                    v.extend(conv(&format!("{name}.down"), *out_ch, *in_ch, 1, false));
                    v.extend(bn(&format!("{name}.down_bn"), *out_ch));
                }
                v
            }
            Layer::PatchEmbed { name, in_ch, dim, patch, tokens } => {
                let mut v = conv(&format!("{name}.proj"), *dim, *in_ch, *patch, true);
                v.push((format!("{name}.pos"), vec![*tokens, *dim], Init::Normal(0.02)));
                v
            }
            Layer::TransformerBlock { name, dim, hidden, .. } => {
                let mut v = ln(&format!("{name}.ln1"), *dim);
                v.extend(linear(&format!("{name}.attn.qkv"), 3 * dim, *dim));
                v.extend(linear(&format!("{name}.attn.proj"), *dim, *dim));
                v.extend(ln(&format!("{name}.ln2"), *dim));
                v.extend(linear(&format!("{name}.fc1"), *hidden, *dim));
                v.extend(linear(&format!("{name}.fc2"), *dim, *hidden));
                v
            }
        }
    }
}

/// A backbone: layer sequence, tap indices, input contract and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGraph {
    pub name: String,
    pub architecture: Architecture,
    pub layers: Vec<Layer>,
    pub taps: Vec<usize>,
    pub input_spec: InputSpec,
    /// Range the network expects its input in; images arrive in `[0, 1]`
    /// and are mapped linearly onto it.
    pub input_range: (f64, f64),
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

fn vgg_layers(scale: Scale) -> (Vec<Layer>, Vec<usize>) {
    let (widths, convs) = match scale {
        Scale::Tiny => ([8, 16, 32, 64], 1),
        Scale::Small => ([16, 32, 64, 128], 2),
    };
    let mut layers = Vec::new();
    let mut taps = Vec::new();
    let mut in_ch = 3;
    for (stage, &w) in widths.iter().enumerate() {
        if stage > 0 {
            layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
        }
        for c in 0..convs {
            layers.push(Layer::Conv {
                name: format!("stage{}.conv{}", stage + 1, c + 1),
                in_ch,
                out_ch: w,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(Layer::Relu);
            in_ch = w;
        }
        taps.push(layers.len() - 1);
    }
    (layers, taps)
}

fn resnet_layers(scale: Scale) -> (Vec<Layer>, Vec<usize>) {
    let (stem, widths) = match scale {
        Scale::Tiny => (8, [16, 32, 64]),
        Scale::Small => (16, [32, 64, 128]),
    };
    let mut layers = vec![
        Layer::Conv { name: "stem.conv".into(), in_ch: 3, out_ch: stem, kernel: 3, stride: 1, padding: 1 },
        Layer::BatchNorm { name: "stem.bn".into(), channels: stem },
        Layer::Relu,
    ];
    let mut taps = vec![2];
    let mut in_ch = stem;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(Layer::BasicBlock { name: format!("stage{}", i + 1), in_ch, out_ch: w, stride: 2 });
        taps.push(layers.len() - 1);
        in_ch = w;
    }
    (layers, taps)
}

fn vit_layers(cfg: &ViTConfig) -> (Vec<Layer>, Vec<usize>) {
    let mut layers = vec![Layer::PatchEmbed {
        name: "patch_embed".into(),
        in_ch: 3,
        dim: cfg.embed_dim,
        patch: cfg.patch_size,
        tokens: cfg.tokens_per_side * cfg.tokens_per_side,
    }];
    for b in 0..cfg.num_blocks {
        layers.push(Layer::TransformerBlock {
            name: format!("block{}", b + 1),
            dim: cfg.embed_dim,
            heads: cfg.num_heads,
            hidden: cfg.mlp_hidden,
        });
    }
    let taps = (1..=cfg.num_blocks).collect();
    (layers, taps)
}

/// Builds a backbone with seeded Xavier-uniform weights and zero biases.
pub fn build_backbone(kind: BackboneKind, scale: Scale, rng: &mut Rng) -> BackboneGraph {
    build_architecture(Architecture::new(kind, scale), rng).expect("preset architectures are valid")
}

pub fn build_architecture(architecture: Architecture, rng: &mut Rng) -> Result<BackboneGraph> {
    let (layers, taps, input_spec) = match &architecture {
        Architecture::MiniVgg { scale } => {
            let (l, t) = vgg_layers(*scale);
            (l, t, InputSpec { channels: 3, height: 64, width: 64, fixed_size: false, min_size: 8 })
        }
        Architecture::MiniResnet { scale } => {
            let (l, t) = resnet_layers(*scale);
            (l, t, InputSpec { channels: 3, height: 64, width: 64, fixed_size: false, min_size: 8 })
        }
        Architecture::MiniVit { config } => {
            config.validate()?;
            let (l, t) = vit_layers(config);
            let side = config.input_size();
            (l, t, InputSpec { channels: 3, height: side, width: side, fixed_size: true, min_size: side })
        }
    };
    let mut params = ParamStore::new();
    for layer in &layers {
        for (name, shape, init) in layer.params() {
            let t = match init {
                Init::Xavier => xavier_uniform(&shape, rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
                Init::Normal(std) => Tensor::from_fn(shape, |_| std * rng.normal()),
            };
            params.insert(name, t);
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("init.seed".to_string(), rng.seed().to_string());
    metadata.insert("init.scheme".to_string(), "xavier_uniform".to_string());
    Ok(BackboneGraph {
        name: architecture.name(),
        architecture,
        layers,
        taps,
        input_spec,
        input_range: (0.0, 1.0),
        params,
        metadata,
    })
}

/// Reshape a token matrix `[B, N, D]` onto its patch grid `[B, D, t, t]`.
/// Rejects token counts that are not perfect squares.
pub fn tokens_to_map<'t>(tokens: Var<'t>) -> Result<Var<'t>> {
    let shape = tokens.shape();
    let &[b, n, d] = shape.as_slice() else {
        return Err(Error::shape(format!("token matrix must be [B,N,D], got {shape:?}")));
    };
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::shape(format!("non-square token count {n} cannot be reshaped to a grid")));
    }
    tokens.permute(&[0, 2, 1])?.reshape(&[b, d, side, side])
}

impl BackboneGraph {
    pub fn kind(&self) -> BackboneKind {
        self.architecture.kind()
    }

    pub fn vit_config(&self) -> Option<&ViTConfig> {
        match &self.architecture {
            Architecture::MiniVit { config } => Some(config),
            _ => None,
        }
    }

    /// Output channels of each tap, in tap order.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|&i| {
                self.layers[..=i]
                    .iter()
                    .rev()
                    .find_map(|l| match l {
                        Layer::Conv { out_ch, .. } | Layer::BasicBlock { out_ch, .. } => Some(*out_ch),
                        Layer::BatchNorm { channels, .. } => Some(*channels),
                        Layer::PatchEmbed { dim, .. } | Layer::TransformerBlock { dim, .. } => Some(*dim),
                        _ => None,
                    })
                    .unwrap_or(self.input_spec.channels)
            })
            .collect()
    }

    /// Checks `[B,C,H,W]` against the input contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let spec = &self.input_spec;
        let &[_, c, h, w] = shape else {
            return Err(Error::shape(format!("{}: expected [B,C,H,W] input, got {shape:?}", self.name)));
        };
        if c != spec.channels && c != 1 {
            return Err(Error::shape(format!("{}: expected 1 or {} channels, got {c}", self.name, spec.channels)));
        }
        if spec.fixed_size && (h != spec.height || w != spec.width) {
            return Err(Error::shape(format!(
                "{}: expected {}x{} input, got {h}x{w}",
                self.name, spec.height, spec.width
            )));
        }
        if h < spec.min_size || w < spec.min_size {
            return Err(Error::shape(format!("{}: input {h}x{w} below minimum {}", self.name, spec.min_size)));
        }
        Ok(())
    }

    fn prepare_input<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x.shape())?;
        let mut x = x;
        if x.shape()[1] == 1 && self.input_spec.channels > 1 {
            let copies = vec![x; self.input_spec.channels];
            x = Var::concat(&copies, 1)?;
        }
        let (lo, hi) = self.input_range;
        if (lo, hi) != (0.0, 1.0) {
            x = x.scale(hi - lo).add_scalar(lo);
        }
        Ok(x)
    }

    /// Forward pass returning every tap as a `[B, C_l, H_l, W_l]` map.
    /// `x` holds images in `[0, 1]`, one or `input_spec.channels` channels.
    pub fn forward_taps<'t>(&self, binder: &Binder<'t, '_>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.forward_raw_taps(binder, x)?
            .into_iter()
            .map(|h| if h.shape().len() == 3 { tokens_to_map(h) } else { Ok(h) })
            .collect()
    }

    /// Like [`forward_taps`](Self::forward_taps) but transformer taps stay as
    /// `[B, N, D]` token matrices.
    pub fn forward_raw_taps<'t>(&self, binder: &Binder<'t, '_>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut h = self.prepare_input(x)?;
        let mut taps = Vec::with_capacity(self.taps.len());
        let last = *self.taps.last().expect("taps nonempty");
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            h = apply_layer(layer, binder, h)?;
            if self.taps.contains(&i) {
                taps.push(h);
            }
        }
        Ok(taps)
    }

    /// Global embedding: spatial mean of the last tap, `[B, C_last]`.
    pub fn embed<'t>(&self, binder: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let taps = self.forward_taps(binder, x)?;
        taps.last().expect("taps nonempty").mean_axes(&[2, 3])
    }

    /// Tap activations for one image given as `[C,H,W]` or `[1,C,H,W]`.
    pub fn extract_taps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.extract_with(image, false)
    }

    /// Raw tap outputs for one image; transformer taps are `[N, D]`.
    pub fn extract_token_taps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.extract_with(image, true)
    }

    fn extract_with(&self, image: &Tensor, raw: bool) -> Result<Vec<Tensor>> {
        let batched = match image.ndim() {
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(image.shape());
                image.reshape(s)?
            }
            4 if image.shape()[0] == 1 => image.clone(),
            _ => return Err(Error::shape(format!("extract_taps expects one image, got {:?}", image.shape()))),
        };
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.params);
        let x = tape.constant(batched);
        let taps = if raw { self.forward_raw_taps(&binder, x)? } else { self.forward_taps(&binder, x)? };
        taps.into_iter()
            .map(|t| t.value().index0(0))
            .collect()
    }

    /// Fold batch statistics into running averages: `r ← (1−m)·r + m·batch`.
    /// Variance uses the unbiased estimate of the batch.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64, batch_count: usize) {
        for s in stats {
            let mean_name = format!("{}.running_mean", s.layer);
            let var_name = format!("{}.running_var", s.layer);
            let (Ok(rm), Ok(rv)) = (self.params.get(&mean_name), self.params.get(&var_name)) else { continue };
            let correction = if batch_count > 1 { batch_count as f64 / (batch_count - 1) as f64 } else { 1.0 };
            let rm = Tensor::from_fn([s.mean.len()], |i| (1.0 - momentum) * rm.data()[i] + momentum * s.mean[i]);
            let rv = Tensor::from_fn([s.var.len()], |i| {
                (1.0 - momentum) * rv.data()[i] + momentum * s.var[i] * correction
            });
            self.params.insert(mean_name, rm);
            self.params.insert(var_name, rv);
        }
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut metadata = self.metadata.clone();
        metadata.insert(
            "architecture".into(),
            serde_json::to_string(&self.architecture).expect("architecture serializes"),
        );
        metadata.insert("input_range".into(), format!("{},{}", self.input_range.0, self.input_range.1));
        let entries = self
            .params
            .iter()
            .map(|(name, t)| WeightEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        WeightFile::new(metadata, entries)
    }

    pub fn from_weight_file(file: &WeightFile) -> std::result::Result<Self, WeightFileError> {
        let arch_json = file
            .metadata
            .get("architecture")
            .ok_or_else(|| WeightFileError::BadArchitecture("missing architecture metadata".into()))?;
        let architecture: Architecture =
            serde_json::from_str(arch_json).map_err(|e| WeightFileError::BadArchitecture(e.to_string()))?;
        let mut model = build_architecture(architecture, &mut Rng::new(0))
            .map_err(|e| WeightFileError::BadArchitecture(e.to_string()))?;
        let mut loaded = ParamStore::new();
        for entry in &file.entries {
            let expected = model
                .params
                .get(&entry.name)
                .map_err(|_| WeightFileError::UnknownEntry(entry.name.clone()))?;
            if expected.shape() != entry.shape.as_slice() {
                return Err(WeightFileError::ShapeMismatch {
                    name: entry.name.clone(),
                    expected: expected.shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
            let data = entry.values.iter().map(|&v| v as f64).collect();
            loaded.insert(entry.name.clone(), Tensor::from_parts(entry.shape.clone(), data));
        }
        if let Some(missing) = model.params.names().find(|n| !loaded.contains(n)) {
            return Err(WeightFileError::MissingEntry(missing.clone()));
        }
        model.params = loaded;
        let mut metadata = file.metadata.clone();
        metadata.remove("architecture");
        if let Some(range) = metadata.remove("input_range") {
            let parts: Vec<f64> = range.split(',').filter_map(|p| p.parse().ok()).collect();
            if let [lo, hi] = parts[..] {
                model.input_range = (lo, hi);
            } else {
                return Err(WeightFileError::BadArchitecture(format!("bad input_range {range:?}")));
            }
        }
        model.metadata = metadata;
        Ok(model)
    }
}

/// Serialize a model's weights (32-bit payload).
pub fn save_weights(model: &BackboneGraph) -> Vec<u8> {
    model.to_weight_file().to_bytes()
}

/// A backbone named either by a weight-file path or by
/// `builtin:<kind>:<scale>:<seed>` (seeded random weights), e.g.
/// `builtin:mini_vgg:tiny:0`.
pub fn resolve_model(spec: &str) -> Result<BackboneGraph> {
    if let Some(rest) = spec.strip_prefix("builtin:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [kind, scale, seed] = parts.as_slice() else {
            return Err(Error::invalid(format!("expected builtin:<kind>:<scale>:<seed>, got {spec:?}")));
        };
        let seed: u64 = seed.parse().map_err(|_| Error::invalid(format!("bad seed {seed:?}")))?;
        return Ok(build_backbone(kind.parse()?, scale.parse()?, &mut Rng::new(seed)));
    }
    let bytes = std::fs::read(spec).map_err(|e| Error::io(spec, e))?;
    Ok(load_weights(&bytes)?)
}

/// Rebuild a model from weight-file bytes; values are promoted to f64.
pub fn load_weights(bytes: &[u8]) -> std::result::Result<BackboneGraph, WeightFileError> {
    BackboneGraph::from_weight_file(&WeightFile::from_bytes(bytes)?)
}

fn conv_layer<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
    let w = b.param(&format!("{name}.weight"))?;
    let bias_name = format!("{name}.bias");
    let bias = if b.store().contains(&bias_name) { Some(b.param(&bias_name)?) } else { None };
    x.conv2d(w, bias, stride, padding)
}

fn batch_norm<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let gamma = b.param(&format!("{name}.weight"))?;
    let beta = b.param(&format!("{name}.bias"))?;
    match b.norm_mode() {
        NormMode::Inference => {
            let mean = b.store().get(&format!("{name}.running_mean"))?;
            let var = b.store().get(&format!("{name}.running_var"))?;
            x.batch_norm_inference(gamma, beta, mean, var, BN_EPS)
        }
        NormMode::Train => {
            let (y, mean, var) = x.batch_norm_train(gamma, beta, BN_EPS)?;
            b.record_stats(BatchStats { layer: name.to_string(), mean, var });
            Ok(y)
        }
    }
}

fn linear<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.linear(b.param(&format!("{name}.weight"))?, Some(b.param(&format!("{name}.bias"))?))
}

fn layer_norm<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(b.param(&format!("{name}.weight"))?, b.param(&format!("{name}.bias"))?, LN_EPS)
}

/// Multi-head self-attention over tokens `[B, N, D]`.
fn attention<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let (bsz, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let qkv = linear(b, &format!("{name}.qkv"), x)?
        .reshape(&[bsz, n, 3, heads, dh])?
        .permute(&[2, 0, 3, 1, 4])?; // [3, B, H, N, dh]
    let part = |i: usize| -> Result<Var<'t>> { qkv.narrow(0, i, 1)?.reshape(&[bsz * heads, n, dh]) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q.matmul(k.permute(&[0, 2, 1])?)?.scale(1.0 / (dh as f64).sqrt());
    let attn = scores.softmax()?;
    let ctx = attn
        .matmul(v)?
        .reshape(&[bsz, heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[bsz, n, d])?;
    linear(b, &format!("{name}.proj"), ctx)
}

fn apply_layer<'t>(layer: &Layer, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    match layer {
        Layer::Conv { name, stride, padding, .. } => conv_layer(b, name, x, *stride, *padding),
        Layer::BatchNorm { name, .. } => batch_norm(b, name, x),
        Layer::Relu => Ok(x.relu()),
        Layer::MaxPool { kernel, stride } => x.maxpool2d(*kernel, *stride),
        Layer::BasicBlock { name, in_ch, out_ch, stride } => {
            let h = conv_layer(b, &format!("{name}.conv1"), x, *stride, 1)?;
            let h = batch_norm(b, &format!("{name}.bn1"), h)?.relu();
            let h = conv_layer(b, &format!("{name}.conv2"), h, 1, 1)?;
            let h = batch_norm(b, &format!("{name}.bn2"), h)?;
            let shortcut = if *stride != 1 || in_ch != out_ch {
                let s = conv_layer(b, &format!("{name}.down"), x, *stride, 0)?;
                batch_norm(b, &format!("{name}.down_bn"), s)?
            } else {
                x
            };
            Ok(h.add(shortcut)?.relu())
        }
        Layer::PatchEmbed { name, dim, patch, tokens, .. } => {
            let y = conv_layer(b, &format!("{name}.proj"), x, *patch, 0)?;
            let s = y.shape();
            let n = s[2] * s[3];
            if n != *tokens {
                return Err(Error::shape(format!("patch grid has {n} tokens, model expects {tokens}")));
            }
            let t = y.reshape(&[s[0], *dim, n])?.permute(&[0, 2, 1])?;
            t.add(b.param(&format!("{name}.pos"))?)
        }
        Layer::TransformerBlock { name, heads, .. } => {
            let a = attention(b, &format!("{name}.attn"), layer_norm(b, &format!("{name}.ln1"), x)?, *heads)?;
            let x = x.add(a)?;
            let h = layer_norm(b, &format!("{name}.ln2"), x)?;
            let h = linear(b, &format!("{name}.fc1"), h)?.gelu();
            let h = linear(b, &format!("{name}.fc2"), h)?;
            x.add(h)
        }
    }
}
