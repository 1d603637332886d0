//! The CoPer perceptual distance.
//!
//! For each tap layer `l` both images' activations are unit-normalized along
//! channels, their difference is scaled channel-wise by `w_l`, squared, summed
//! over channels and averaged over the `H_l × W_l` positions. Layer terms are
//! summed (or averaged, see [`LayerAggregation`]) into the total distance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{tokens_to_map, BackboneGraph, Binder};
use crate::classical::QualityScores;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One non-negative weight per channel of every tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub per_layer: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl ChannelWeights {
    /// All-ones weights for `model`'s taps.
    pub fn ones(model: &BackboneGraph) -> Self {
        Self::ones_for(&model.tap_channels())
    }

    pub fn ones_for(channels: &[usize]) -> Self {
        Self { per_layer: channels.iter().map(|&c| vec![1.0; c]).collect(), id: Some("ones".into()) }
    }

    pub fn new(per_layer: Vec<Vec<f64>>) -> Result<Self> {
        if per_layer.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("channel weights must be finite and non-negative"));
        }
        Ok(Self { per_layer, id: None })
    }

    /// Every weight multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { per_layer: self.per_layer.iter().map(|l| l.iter().map(|w| w * s).collect()).collect(), id: None }
    }

    pub fn check(&self, channels: &[usize]) -> Result<()> {
        if self.per_layer.len() != channels.len() {
            return Err(Error::shape(format!(
                "{} weight vectors for {} tap layers",
                self.per_layer.len(),
                channels.len()
            )));
        }
        for (l, (w, &c)) in self.per_layer.iter().zip(channels).enumerate() {
            if w.len() != c {
                return Err(Error::shape(format!("layer {l}: {} weights for {c} channels", w.len())));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid(format!("layer {l}: weights must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Explicit id, `"ones"` for all-ones weights, otherwise a content hash.
    pub fn weights_id(&self) -> String {
        if let Some(id) = &self.id {
            return id.clone();
        }
        if self.per_layer.iter().flatten().all(|&w| w == 1.0) {
            return "ones".into();
        }
        let mut h = Sha256::new();
        for layer in &self.per_layer {
            h.update((layer.len() as u64).to_le_bytes());
            for w in layer {
                h.update(w.to_le_bytes());
            }
        }
        format!("sha256:{}", &hex::encode(h.finalize().as_slice())[..16])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAggregation {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for LayerAggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::invalid(format!("aggregation must be sum or mean, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricOptions {
    pub aggregation: LayerAggregation,
    /// Unit-normalize channel fibers before differencing (the metric path).
    pub normalize: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { aggregation: LayerAggregation::Sum, normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub backbone: String,
    pub weights_id: String,
    pub per_layer: Vec<f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<QualityScores>,
}

fn aggregate(per_layer: &[f64], aggregation: LayerAggregation) -> f64 {
    let sum: f64 = per_layer.iter().sum();
    match aggregation {
        LayerAggregation::Sum => sum,
        LayerAggregation::Mean => sum / per_layer.len() as f64,
    }
}

/// Per-sample distance `[B]` between two `[B, C, H, W]` tap maps.
pub fn layer_distance<'t>(f1: Var<'t>, f2: Var<'t>, w: Var<'t>, normalize: bool) -> Result<Var<'t>> {
    let shape = f1.shape();
    if shape.len() != 4 || shape != f2.shape() {
        return Err(Error::shape(format!("tap maps {:?} vs {:?}", shape, f2.shape())));
    }
    let (a, b) = if normalize {
        (f1.l2_normalize_channels()?, f2.l2_normalize_channels()?)
    } else {
        (f1, f2)
    };
    let hw = (shape[2] * shape[3]) as f64;
    a.sub(b)?.mul_channels(w)?.square().sum_axes(&[1, 2, 3]).map(|s| s.scale(1.0 / hw))
}

/// Differentiable per-layer distances, each `[B]`, for batched images.
pub fn coper_distance_vars<'t>(
    model: &BackboneGraph,
    binder: &Binder<'t, '_>,
    weights: &ChannelWeights,
    x1: Var<'t>,
    x2: Var<'t>,
    options: MetricOptions,
) -> Result<Vec<Var<'t>>> {
    weights.check(&model.tap_channels())?;
    let taps1 = model.forward_taps(binder, x1)?;
    let taps2 = model.forward_taps(binder, x2)?;
    let tape = binder.tape();
    taps1
        .into_iter()
        .zip(taps2)
        .zip(&weights.per_layer)
        .map(|((a, b), w)| {
            let w = tape.constant(Tensor::new([w.len()], w.clone())?);
            layer_distance(a, b, w, options.normalize)
        })
        .collect()
}

/// Differentiable total distance `[B]`.
pub fn coper_distance_var<'t>(
    model: &BackboneGraph,
    binder: &Binder<'t, '_>,
    weights: &ChannelWeights,
    x1: Var<'t>,
    x2: Var<'t>,
    options: MetricOptions,
) -> Result<Var<'t>> {
    let layers = coper_distance_vars(model, binder, weights, x1, x2, options)?;
    let n = layers.len() as f64;
    let mut total = layers[0];
    for l in &layers[1..] {
        total = total.add(*l)?;
    }
    Ok(match options.aggregation {
        LayerAggregation::Sum => total,
        LayerAggregation::Mean => total.scale(1.0 / n),
    })
}

/// Per-layer distances from already extracted `[C, H, W]` tap maps.
pub fn distance_from_maps(
    maps1: &[Tensor],
    maps2: &[Tensor],
    weights: &ChannelWeights,
    normalize: bool,
) -> Result<Vec<f64>> {
    if maps1.len() != maps2.len() {
        return Err(Error::shape(format!("{} vs {} tap maps", maps1.len(), maps2.len())));
    }
    let channels: Vec<usize> = maps1
        .iter()
        .map(|m| if m.ndim() == 3 { Ok(m.shape()[0]) } else { Err(Error::shape(format!("tap map {:?}", m.shape()))) })
        .collect::<Result<_>>()?;
    weights.check(&channels)?;
    let tape = Tape::new();
    maps1
        .iter()
        .zip(maps2)
        .zip(&weights.per_layer)
        .map(|((a, b), w)| {
            let batched = |t: &Tensor| -> Result<Var<'_>> {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                Ok(tape.constant(t.reshape(s)?))
            };
            let w = tape.constant(Tensor::new([w.len()], w.clone())?);
            layer_distance(batched(a)?, batched(b)?, w, normalize)?.item()
        })
        .collect()
}

/// Per-layer distances from transformer token matrices `[N, D]`, each reshaped
/// onto its `D × √N × √N` grid first. Non-square token counts are rejected.
pub fn distance_from_tokens(
    tokens1: &[Tensor],
    tokens2: &[Tensor],
    weights: &ChannelWeights,
    normalize: bool,
) -> Result<Vec<f64>> {
    let to_maps = |ts: &[Tensor]| -> Result<Vec<Tensor>> {
        ts.iter()
            .map(|t| {
                let &[n, d] = t.shape() else {
                    return Err(Error::shape(format!("token matrix must be [N,D], got {:?}", t.shape())));
                };
                let tape = Tape::new();
                let v = tape.constant(t.reshape([1, n, d])?);
                tokens_to_map(v)?.value().index0(0)
            })
            .collect()
    };
    distance_from_maps(&to_maps(tokens1)?, &to_maps(tokens2)?, weights, normalize)
}

fn report(model: &BackboneGraph, weights: &ChannelWeights, per_layer: Vec<f64>, agg: LayerAggregation) -> DistanceReport {
    DistanceReport {
        backbone: model.name.clone(),
        weights_id: weights.weights_id(),
        total: aggregate(&per_layer, agg),
        per_layer,
        scores: None,
    }
}

fn check_pair(x1: &Tensor, x2: &Tensor) -> Result<()> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape(format!("image shapes differ: {:?} vs {:?}", x1.shape(), x2.shape())));
    }
    Ok(())
}

/// CoPer distance between two images (`[C,H,W]` or `[1,C,H,W]`, values in `[0,1]`).
pub fn coper_distance(model: &BackboneGraph, weights: &ChannelWeights, x1: &Tensor, x2: &Tensor) -> Result<DistanceReport> {
    coper_distance_with(model, weights, x1, x2, MetricOptions::default())
}

pub fn coper_distance_with(
    model: &BackboneGraph,
    weights: &ChannelWeights,
    x1: &Tensor,
    x2: &Tensor,
    options: MetricOptions,
) -> Result<DistanceReport> {
    check_pair(x1, x2)?;
    weights.check(&model.tap_channels())?;
    let maps1 = model.extract_taps(x1)?;
    let maps2 = model.extract_taps(x2)?;
    let per_layer = distance_from_maps(&maps1, &maps2, weights, options.normalize)?;
    Ok(report(model, weights, per_layer, options.aggregation))
}

/// Transformer variant: each block's token matrix is reshaped onto the patch
/// grid before the same per-layer formula is applied.
pub fn coper_distance_vit(
    model: &BackboneGraph,
    weights: &ChannelWeights,
    x1: &Tensor,
    x2: &Tensor,
    options: MetricOptions,
) -> Result<DistanceReport> {
    if model.vit_config().is_none() {
        return Err(Error::invalid(format!("{} is not a transformer backbone", model.name)));
    }
    check_pair(x1, x2)?;
    weights.check(&model.tap_channels())?;
    let t1 = model.extract_token_taps(x1)?;
    let t2 = model.extract_token_taps(x2)?;
    let per_layer = distance_from_tokens(&t1, &t2, weights, options.normalize)?;
    Ok(report(model, weights, per_layer, options.aggregation))
}

/// Dispatches to the CNN or transformer path by model kind.
pub fn distance_auto(
    model: &BackboneGraph,
    weights: &ChannelWeights,
    x1: &Tensor,
    x2: &Tensor,
    options: MetricOptions,
) -> Result<DistanceReport> {
    if model.vit_config().is_some() {
        coper_distance_vit(model, weights, x1, x2, options)
    } else {
        coper_distance_with(model, weights, x1, x2, options)
    }
}

/// Distances for many pairs, evaluated on worker threads; result `i`
/// belongs to pair `i` and a failing pair does not affect the others.
pub fn batch_distance(
    model: &BackboneGraph,
    weights: &ChannelWeights,
    pairs: &[(Tensor, Tensor)],
    options: MetricOptions,
) -> Vec<Result<DistanceReport>> {
    if pairs.is_empty() {
        return Vec::new();
    }
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(pairs.len());
    let chunk = pairs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(a, b)| distance_auto(model, weights, a, b, options))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("distance worker panicked")).collect()
    })
}
