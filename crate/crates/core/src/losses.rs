//! Training losses for image-to-image synthesis: pixel `ℓ1`, adversarial,
//! the CoPer feature loss and their weighted combination.
//!
//! Every loss has a plain evaluation (`f64`) and a tape variant returning a
//! scalar [`Var`] for backpropagation.

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneGraph, Binder};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Saturation guard for discriminator probabilities.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA2: f64 = 10.0;

/// Named single-channel images sharing one spatial shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub channels: Vec<(String, Tensor)>,
}

impl ModalityBundle {
    /// Each image is `[H, W]` or `[1, H, W]`; stored as `[1, H, W]`.
    pub fn new(channels: Vec<(String, Tensor)>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("bundle needs at least one channel"));
        }
        let mut out = Vec::with_capacity(channels.len());
        let mut spatial: Option<(usize, usize)> = None;
        for (name, t) in channels {
            let (h, w) = match *t.shape() {
                [h, w] | [1, h, w] => (h, w),
                _ => return Err(Error::shape(format!("channel {name}: expected [H,W], got {:?}", t.shape()))),
            };
            match spatial {
                None => spatial = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::shape(format!("channel {name}: {h}x{w} differs from {}x{}", s.0, s.1)))
                }
                _ => {}
            }
            out.push((name, t.reshape([1, h, w])?));
        }
        Ok(Self { channels: out })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.channels[0].1.shape();
        (s[1], s[2])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.channels.iter().map(|(_, t)| t)
    }

    fn check_against(&self, other: &ModalityBundle) -> Result<()> {
        if self.len() != other.len() || self.spatial() != other.spatial() {
            return Err(Error::shape(format!(
                "bundles differ: {} channels {:?} vs {} channels {:?}",
                self.len(),
                self.spatial(),
                other.len(),
                other.spatial()
            )));
        }
        Ok(())
    }
}

/// Mean absolute error over all channels and pixels.
pub fn loss_l1(target: &ModalityBundle, output: &ModalityBundle) -> Result<f64> {
    target.check_against(output)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in target.tensors().zip(output.tensors()) {
        s += a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>();
        n += a.numel();
    }
    Ok(s / n as f64)
}

pub fn loss_l1_var<'t>(target: Var<'t>, output: Var<'t>) -> Result<Var<'t>> {
    Ok(target.sub(output)?.abs().mean_all())
}

/// `mean(log d_real) + mean(log(1 − d_fake))`, probabilities clamped to
/// `[ε, 1−ε]` first.
pub fn loss_adv(d_real: &Tensor, d_fake: &Tensor) -> f64 {
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let real = d_real.data().iter().map(|&p| clamp(p).ln()).sum::<f64>() / d_real.numel() as f64;
    let fake = d_fake.data().iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / d_fake.numel() as f64;
    real + fake
}

pub fn loss_adv_var<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Result<Var<'t>> {
    let real = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()?.mean_all();
    let fake = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS).neg().add_scalar(1.0).ln()?.mean_all();
    real.add(fake)
}

/// Feature reconstruction loss over `pairs` of `(target, output)` images,
/// each `[B, 1, H, W]` (or with the model's channel count):
/// `1/(m·L) Σ_j Σ_i 1/(C_i H_i W_i) ‖φ_i(y_j) − φ_i(ŷ_j)‖²`, averaged over the batch.
/// With `normalize` the tap activations are unit-normalized along channels first.
pub fn loss_coper_var<'t>(
    model: &BackboneGraph,
    binder: &Binder<'t, '_>,
    pairs: &[(Var<'t>, Var<'t>)],
    normalize: bool,
) -> Result<Var<'t>> {
    if pairs.is_empty() {
        return Err(Error::invalid("loss_coper needs at least one channel"));
    }
    let levels = model.taps.len();
    let mut terms = Vec::with_capacity(pairs.len() * levels);
    for &(y, yhat) in pairs {
        if y.shape() != yhat.shape() {
            return Err(Error::shape(format!("target {:?} vs output {:?}", y.shape(), yhat.shape())));
        }
        let fy = model.forward_taps(binder, y)?;
        let fo = model.forward_taps(binder, yhat)?;
        for (a, b) in fy.into_iter().zip(fo) {
            let (a, b) = if normalize { (a.l2_normalize_channels()?, b.l2_normalize_channels()?) } else { (a, b) };
            let s = a.shape();
            let chw = (s[1] * s[2] * s[3]) as f64;
            terms.push(a.sub(b)?.square().sum_axes(&[1, 2, 3])?.mean_all().scale(1.0 / chw));
        }
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(total.scale(1.0 / (pairs.len() * levels) as f64))
}

pub fn loss_coper(model: &BackboneGraph, target: &ModalityBundle, output: &ModalityBundle, normalize: bool) -> Result<f64> {
    target.check_against(output)?;
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &model.params);
    let batched = |t: &Tensor| -> Result<Var<'_>> {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        Ok(tape.constant(t.reshape(s)?))
    };
    let pairs = target
        .tensors()
        .zip(output.tensors())
        .map(|(a, b)| Ok((batched(a)?, batched(b)?)))
        .collect::<Result<Vec<_>>>()?;
    loss_coper_var(model, &binder, &pairs, normalize)?.item()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub coper: f64,
    pub adv: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub g_total: f64,
    pub d_total: f64,
}

pub fn check_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(Error::invalid(format!("lambda1 must lie in [0,1], got {lambda1}")));
    }
    if !(lambda2 >= 0.0 && lambda2.is_finite()) {
        return Err(Error::invalid(format!("lambda2 must be >= 0, got {lambda2}")));
    }
    Ok(())
}

/// Generator objective `λ1·l1 + (1−λ1)·coper + λ2·adv`; discriminator objective `−adv`.
pub fn full_objective(l1: f64, coper: f64, adv: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    check_lambdas(lambda1, lambda2)?;
    Ok(LossBreakdown {
        l1,
        coper,
        adv,
        lambda1,
        lambda2,
        g_total: lambda1 * l1 + (1.0 - lambda1) * coper + lambda2 * adv,
        d_total: -adv,
    })
}

/// Tape version of the generator objective. `coper` and `adv` may be absent
/// when their weight is zero.
pub fn generator_objective_var<'t>(
    l1: Var<'t>,
    coper: Option<Var<'t>>,
    adv: Option<Var<'t>>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var<'t>> {
    check_lambdas(lambda1, lambda2)?;
    let mut g = l1.scale(lambda1);
    if let Some(c) = coper {
        g = g.add(c.scale(1.0 - lambda1))?;
    }
    if let Some(a) = adv {
        g = g.add(a.scale(lambda2))?;
    }
    Ok(g)
}

/// Task-specific `λ1` defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPreset {
    MsLike,
    TumorLike,
}

impl LambdaPreset {
    pub fn lambda1(self) -> f64 {
        match self {
            LambdaPreset::MsLike => 0.55,
            LambdaPreset::TumorLike => 0.70,
        }
    }

    pub fn lambda2(self) -> f64 {
        DEFAULT_LAMBDA2
    }
}

impl std::str::FromStr for LambdaPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ms" | "ms_like" => Ok(Self::MsLike),
            "tumor" | "tumor_like" => Ok(Self::TumorLike),
            _ => Err(Error::invalid(format!("unknown preset {s:?}"))),
        }
    }
}
