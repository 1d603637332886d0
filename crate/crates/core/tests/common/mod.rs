//! Shared test helpers: central finite differences and the catalogue of
//! differentiable cases checked by both the gradient tests and the
//! acceptance run.
#![allow(dead_code)]

pub mod oracle_suite;
pub mod oracles;
pub mod study;

use perceptra::backbones::{
    build_architecture, build_backbone, tokens_to_map, Architecture, BackboneGraph, BackboneKind, Binder, NormMode,
    Scale, ViTConfig,
};
use perceptra::losses::{generator_objective_var, loss_adv_var, loss_coper_var, loss_l1_var};
use perceptra::metric::{coper_distance_var, layer_distance, ChannelWeights, MetricOptions};
use perceptra::pretrain::{negative_cosine, simsiam_loss, swav_codes, swav_loss};
use perceptra::{Result, Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-3;
/// Floor for near-zero gradients; well above the rounding error of a central
/// difference with step 1e-4 on O(1) losses.
pub const FD_ATOL: f64 = 1e-7;
/// Draws whose inputs come closer than this to a relu/abs/clamp/max-pool kink
/// are resampled.
pub const KINK_MARGIN: f64 = 1e-2;
const MAX_RESAMPLES: usize = 20_000;

pub type Gen = Box<dyn Fn(&mut Rng) -> Vec<Tensor> + Send + Sync>;
pub type Build = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync>;

pub struct GradCase {
    pub name: &'static str,
    /// The first `wrt` generated tensors are differentiated; the rest enter as constants.
    pub wrt: usize,
    pub margin: f64,
    pub gen: Gen,
    pub build: Build,
}

#[derive(Debug)]
pub struct FdOutcome {
    pub checked: usize,
    pub worst: f64,
    pub failure: Option<String>,
    pub resamples: usize,
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(lo, hi))
}

/// Magnitudes in `[lo, hi]` with random signs.
pub fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.uniform_range(lo, hi);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduce any output to a scalar with fixed, uneven weights so every
/// element's gradient is distinct.
pub fn project<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|i| (0.7 * i as f64 + 0.3).sin() + 0.1).collect())?;
    Ok(out.mul(out.tape().constant(r))?.sum_all())
}

fn eval_loss(case: &GradCase, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    (case.build)(&tape, &vars).and_then(|l| l.item()).expect("forward")
}

/// Compare reverse-mode gradients with central differences for one seed.
pub fn fd_check(case: &GradCase, seed: u64) -> FdOutcome {
    let mut rng = Rng::new(seed);
    let mut resamples = 0;
    let (inputs, analytic) = loop {
        let inputs = (case.gen)(&mut rng);
        let tape = Tape::new();
        let vars: Vec<Var> =
            inputs.iter().enumerate().map(|(i, t)| tape.leaf(t.clone(), i < case.wrt)).collect();
        let loss = (case.build)(&tape, &vars).expect("forward");
        if tape.kink_margin() < case.margin {
            resamples += 1;
            if resamples > MAX_RESAMPLES {
                let failure = Some(format!("{} seed {seed}: no draw clear of kinks", case.name));
                return FdOutcome { checked: 0, worst: f64::INFINITY, failure, resamples };
            }
            continue;
        }
        let grads = tape.backward(loss).expect("backward");
        let analytic: Vec<Tensor> = vars[..case.wrt].iter().map(|v| grads.wrt(*v)).collect();
        break (inputs, analytic);
    };
    let mut outcome = FdOutcome { checked: 0, worst: 0.0, failure: None, resamples };
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[i] = bump(&inputs[i], k, FD_STEP);
            minus[i] = bump(&inputs[i], k, -FD_STEP);
            let numeric = (eval_loss(case, &plus) - eval_loss(case, &minus)) / (2.0 * FD_STEP);
            let a = grad.data()[k];
            let err = (a - numeric).abs();
            let allowed = FD_RTOL * a.abs().max(numeric.abs()) + FD_ATOL;
            outcome.checked += 1;
            outcome.worst = outcome.worst.max(err / allowed);
            if err > allowed && outcome.failure.is_none() {
                outcome.failure =
                    Some(format!("{} seed {seed} input {i}[{k}]: analytic {a:.10e} vs numeric {numeric:.10e}", case.name));
            }
        }
    }
    outcome
}

fn bump(t: &Tensor, k: usize, h: f64) -> Tensor {
    let mut d = t.to_vec();
    d[k] += h;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

fn case<G, B>(name: &'static str, wrt: usize, gen: G, build: B) -> GradCase
where
    G: Fn(&mut Rng) -> Vec<Tensor> + Send + Sync + 'static,
    B: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync + 'static,
{
    GradCase { name, wrt, margin: KINK_MARGIN, gen: Box::new(gen), build: Box::new(build) }
}

fn model_case<G, B>(name: &'static str, wrt: usize, gen: G, build: B) -> GradCase
where
    G: Fn(&mut Rng) -> Vec<Tensor> + Send + Sync + 'static,
    B: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync + 'static,
{
    case(name, wrt, gen, build)
}

/// The first two stages of the tiny VGG.
pub fn two_layer_vgg(seed: u64) -> BackboneGraph {
    let mut m = build_backbone(BackboneKind::MiniVgg, Scale::Tiny, &mut Rng::new(seed));
    let cut = m.taps[1] + 1;
    m.layers.truncate(cut);
    m.taps.truncate(2);
    // one pooling stage left; tiny inputs keep every unit clear of the kink band
    m.input_spec.min_size = 2;
    m
}

pub fn micro_vit(seed: u64) -> BackboneGraph {
    let config =
        ViTConfig { patch_size: 2, embed_dim: 8, num_blocks: 1, num_heads: 2, tokens_per_side: 2, mlp_hidden: 12 };
    build_architecture(Architecture::MiniVit { config }, &mut Rng::new(seed)).unwrap()
}

/// A single residual stage of the tiny ResNet, with batch statistics.
pub fn micro_resnet(seed: u64) -> BackboneGraph {
    let mut m = build_backbone(BackboneKind::MiniResnet, Scale::Tiny, &mut Rng::new(seed));
    let cut = m.taps[1] + 1;
    m.layers.truncate(cut);
    m.taps.truncate(2);
    m.input_spec.min_size = 4;
    m
}

fn sum_taps<'t>(taps: Vec<Var<'t>>) -> Result<Var<'t>> {
    let mut total = project(taps[0])?;
    for t in &taps[1..] {
        total = total.add(project(*t)?)?;
    }
    Ok(total)
}

pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case(
            "add_sub_mul",
            2,
            |r| vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)],
            |_, v| project(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.mul(v[1])?),
        ),
        case(
            "square_scale_neg_shift",
            1,
            |r| vec![uniform(&[5], -1.0, 1.0, r)],
            |_, v| project(v[0].square().scale(1.7).neg().add_scalar(0.3).mul(v[0])?),
        ),
        case("relu", 1, |r| vec![away_from_zero(&[12], 0.02, 1.0, r)], |_, v| project(v[0].relu())),
        case("abs", 1, |r| vec![away_from_zero(&[12], 0.02, 1.0, r)], |_, v| project(v[0].abs())),
        case("gelu", 1, |r| vec![uniform(&[12], -3.0, 3.0, r)], |_, v| project(v[0].gelu())),
        case("sigmoid", 1, |r| vec![uniform(&[12], -4.0, 4.0, r)], |_, v| project(v[0].sigmoid())),
        case("ln", 1, |r| vec![uniform(&[12], 0.1, 2.0, r)], |_, v| project(v[0].ln()?)),
        case("clamp", 1, |r| vec![uniform(&[12], -1.0, 1.0, r)], |_, v| project(v[0].clamp(-0.5, 0.5))),
        case(
            "conv2d_pad1",
            3,
            |r| vec![uniform(&[2, 2, 5, 5], -1.0, 1.0, r), uniform(&[3, 2, 3, 3], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)],
            |_, v| project(v[0].conv2d(v[1], Some(v[2]), 1, 1)?),
        ),
        case(
            "conv2d_stride2",
            2,
            |r| vec![uniform(&[1, 2, 7, 7], -1.0, 1.0, r), uniform(&[2, 2, 3, 3], -1.0, 1.0, r)],
            |_, v| project(v[0].conv2d(v[1], None, 2, 0)?),
        ),
        case("maxpool2d", 1, |r| vec![uniform(&[1, 2, 4, 4], -1.0, 1.0, r)], |_, v| project(v[0].maxpool2d(2, 2)?)),
        case(
            "maxpool2d_overlap",
            1,
            |r| vec![uniform(&[1, 1, 5, 5], -1.0, 1.0, r)],
            |_, v| project(v[0].maxpool2d(3, 2)?),
        ),
        case("avgpool2d", 1, |r| vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, r)], |_, v| project(v[0].avgpool2d(2, 2)?)),
        case(
            "linear",
            3,
            |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[5, 4], -1.0, 1.0, r), uniform(&[5], -1.0, 1.0, r)],
            |_, v| project(v[0].linear(v[1], Some(v[2]))?),
        ),
        case(
            "matmul",
            2,
            |r| vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 2], -1.0, 1.0, r)],
            |_, v| project(v[0].matmul(v[1])?),
        ),
        case("softmax", 1, |r| vec![uniform(&[3, 5], -2.0, 2.0, r)], |_, v| project(v[0].softmax()?)),
        case("log_softmax", 1, |r| vec![uniform(&[3, 5], -2.0, 2.0, r)], |_, v| project(v[0].log_softmax()?)),
        case(
            "layer_norm",
            3,
            |r| vec![uniform(&[2, 3, 6], -1.0, 1.0, r), uniform(&[6], 0.5, 1.5, r), uniform(&[6], -0.5, 0.5, r)],
            |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?),
        ),
        case(
            "batch_norm_train",
            3,
            |r| vec![uniform(&[4, 3, 2, 2], -1.0, 1.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
            |_, v| project(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0),
        ),
        case(
            "batch_norm_inference",
            3,
            |r| {
                vec![
                    uniform(&[2, 3, 2, 2], -1.0, 1.0, r),
                    uniform(&[3], 0.5, 1.5, r),
                    uniform(&[3], -0.5, 0.5, r),
                    uniform(&[3], -0.5, 0.5, r),
                    uniform(&[3], 0.5, 2.0, r),
                ]
            },
            |_, v| project(v[0].batch_norm_inference(v[1], v[2], &v[3].value(), &v[4].value(), 1e-5)?),
        ),
        case(
            "sum_mean_axes",
            1,
            |r| vec![uniform(&[2, 3, 4], -1.0, 1.0, r)],
            |_, v| {
                let a = project(v[0].sum_axes(&[1])?)?;
                let b = project(v[0].square().mean_axes(&[0, 2])?)?;
                a.add(b)?.add(v[0].mean_all().mul(v[0].sum_all())?)
            },
        ),
        case("l2_normalize", 1, |r| vec![uniform(&[3, 4], -1.0, 1.0, r)], |_, v| project(v[0].l2_normalize(1)?)),
        case(
            "l2_normalize_channels",
            1,
            |r| vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r)],
            |_, v| project(v[0].l2_normalize_channels()?),
        ),
        case(
            "mul_channels",
            2,
            |r| vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)],
            |_, v| project(v[0].mul_channels(v[1])?),
        ),
        case(
            "reshape_permute_narrow_concat",
            2,
            |r| vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 1, 4], -1.0, 1.0, r)],
            |_, v| {
                let a = v[0].narrow(1, 1, 2)?;
                let c = Var::concat(&[a, v[1]], 1)?;
                project(c.permute(&[2, 0, 1])?.reshape(&[4, 6])?.square())
            },
        ),
        case(
            "tokens_to_map",
            1,
            |r| vec![uniform(&[2, 4, 3], -1.0, 1.0, r)],
            |_, v| project(tokens_to_map(v[0])?.l2_normalize_channels()?),
        ),
        case(
            "layer_distance",
            3,
            |r| vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r), uniform(&[2, 3, 2, 2], -1.0, 1.0, r), uniform(&[3], 0.1, 1.0, r)],
            |_, v| project(layer_distance(v[0], v[1], v[2], true)?),
        ),
        case(
            "loss_l1",
            1,
            |r| {
                let y = uniform(&[2, 1, 3, 3], 0.0, 1.0, r);
                let off = away_from_zero(&[2, 1, 3, 3], 0.02, 0.3, r);
                let yhat = Tensor::new(y.shape().to_vec(), y.data().iter().zip(off.data()).map(|(a, b)| a + b).collect()).unwrap();
                vec![yhat, y]
            },
            |_, v| loss_l1_var(v[1], v[0]),
        ),
        case(
            "loss_adv",
            2,
            |r| vec![uniform(&[6], 0.05, 0.95, r), uniform(&[6], 0.05, 0.95, r)],
            |_, v| loss_adv_var(v[0], v[1]),
        ),
        case(
            "generator_objective",
            3,
            |r| vec![uniform(&[4], 0.0, 1.0, r), uniform(&[4], 0.0, 1.0, r), uniform(&[4], 0.05, 0.95, r)],
            |_, v| {
                let l1 = v[0].square().mean_all();
                let coper = v[1].square().sum_all();
                let adv = v[2].ln()?.mean_all();
                generator_objective_var(l1, Some(coper), Some(adv), 0.7, 10.0)
            },
        ),
        case(
            "negative_cosine",
            1,
            |r| vec![uniform(&[3, 5], -1.0, 1.0, r), uniform(&[3, 5], -1.0, 1.0, r)],
            |_, v| negative_cosine(v[0], v[1]),
        ),
        case(
            "simsiam_loss",
            2,
            |r| (0..4).map(|_| uniform(&[3, 5], -1.0, 1.0, r)).collect(),
            |_, v| simsiam_loss(v[0], v[1], v[2], v[3]),
        ),
        case(
            "swav_loss",
            2,
            |r| {
                let sa = uniform(&[4, 6], -1.0, 1.0, r);
                let sb = uniform(&[4, 6], -1.0, 1.0, r);
                let qa = swav_codes(&sa, 3, 0.05).unwrap();
                let qb = swav_codes(&sb, 3, 0.05).unwrap();
                vec![sa, sb, qa, qb]
            },
            |_, v| swav_loss(v[0], v[1], &v[2].value(), &v[3].value(), 0.1),
        ),
    ];

    let vgg = two_layer_vgg(11);
    cases.push(model_case(
        "loss_coper_vgg2",
        1,
        |r| vec![uniform(&[1, 1, 2, 2], 0.0, 1.0, r), uniform(&[1, 1, 2, 2], 0.0, 1.0, r)],
        move |t, v| {
            let b = Binder::frozen(t, &vgg.params);
            loss_coper_var(&vgg, &b, &[(v[1], v[0])], false)
        },
    ));
    let vgg = two_layer_vgg(12);
    let weights = ChannelWeights::ones_for(&vgg.tap_channels()).scaled(0.5);
    cases.push(model_case(
        "coper_distance_vgg2",
        1,
        |r| vec![uniform(&[1, 3, 2, 2], 0.0, 1.0, r), uniform(&[1, 3, 2, 2], 0.0, 1.0, r)],
        move |t, v| {
            let b = Binder::frozen(t, &vgg.params);
            Ok(coper_distance_var(&vgg, &b, &weights, v[0], v[1], MetricOptions::default())?.sum_all())
        },
    ));
    let resnet = micro_resnet(13);
    cases.push(model_case(
        "resnet_stage_train_bn",
        1,
        |r| vec![uniform(&[2, 3, 4, 4], 0.0, 1.0, r)],
        move |t, v| {
            let b = Binder::new(t, &resnet.params, false, NormMode::Train);
            sum_taps(resnet.forward_taps(&b, v[0])?)
        },
    ));
    let vit = micro_vit(14);
    cases.push(model_case(
        "vit_block",
        1,
        |r| vec![uniform(&[1, 3, 4, 4], 0.0, 1.0, r)],
        move |t, v| {
            let b = Binder::frozen(t, &vit.params);
            sum_taps(vit.forward_taps(&b, v[0])?)
        },
    ));
    cases
}

/// Per-layer CoPer distance written out directly from the definition on
/// `[C,H,W]` maps: unit-normalize each position's channel fiber, weight,
/// square, sum over channels, average over positions.
pub fn naive_layer_distance(a: &Tensor, b: &Tensor, w: &[f64]) -> f64 {
    let (c, h, wd) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..wd {
            let at = |t: &Tensor, ch: usize| t.data()[(ch * h + y) * wd + x];
            let na = (0..c).map(|ch| at(a, ch).powi(2)).sum::<f64>().sqrt().max(1e-10);
            let nb = (0..c).map(|ch| at(b, ch).powi(2)).sum::<f64>().sqrt().max(1e-10);
            for ch in 0..c {
                total += (w[ch] * (at(a, ch) / na - at(b, ch) / nb)).powi(2);
            }
        }
    }
    total / (h * wd) as f64
}

/// Token matrix `[N, D]` onto its `[D, t, t]` grid, token `i·t + j` at `(i, j)`.
pub fn naive_tokens_to_map(tokens: &Tensor) -> Tensor {
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let t = (n as f64).sqrt().round() as usize;
    assert_eq!(t * t, n);
    Tensor::from_fn([d, t, t], |idx| {
        let (ch, pos) = (idx / n, idx % n);
        tokens.data()[pos * d + ch]
    })
}

/// Metric axioms over `pairs` random image pairs: identity, exact symmetry,
/// non-negativity and the quadratic weight-scaling law.
pub fn check_metric_axioms(model: &BackboneGraph, pairs: usize, seed: u64) -> std::result::Result<(), String> {
    use perceptra::metric::distance_auto;
    let side = model.vit_config().map_or(16, |c| c.input_size());
    let ones = ChannelWeights::ones(model);
    let mut rng = Rng::new(seed);
    for i in 0..pairs {
        let x1 = Tensor::from_fn([3, side, side], |_| rng.uniform());
        let x2 = Tensor::from_fn([3, side, side], |_| rng.uniform());
        let s = rng.uniform_range(0.1, 3.0);
        // random non-negative weights
        let w = ChannelWeights::new(
            model.tap_channels().iter().map(|&c| (0..c).map(|_| rng.uniform_range(0.0, 2.0)).collect()).collect(),
        )
        .map_err(|e| e.to_string())?;
        let d = |w: &ChannelWeights, a: &Tensor, b: &Tensor| {
            distance_auto(model, w, a, b, MetricOptions::default()).map_err(|e| e.to_string())
        };
        let same = d(&ones, &x1, &x1)?;
        if same.total != 0.0 {
            return Err(format!("{}: pair {i}: d(x,x) = {}", model.name, same.total));
        }
        let ab = d(&w, &x1, &x2)?;
        let ba = d(&w, &x2, &x1)?;
        if ab.total != ba.total || ab.per_layer != ba.per_layer {
            return Err(format!("{}: pair {i}: asymmetric {} vs {}", model.name, ab.total, ba.total));
        }
        if ab.per_layer.iter().any(|&v| !(v >= 0.0)) {
            return Err(format!("{}: pair {i}: negative layer term {:?}", model.name, ab.per_layer));
        }
        let scaled = d(&w.scaled(s), &x1, &x2)?;
        for (l, (a, b)) in ab.per_layer.iter().zip(&scaled.per_layer).enumerate() {
            let want = s * s * a;
            if (b - want).abs() > 1e-9 * want.abs().max(f64::MIN_POSITIVE) {
                return Err(format!("{}: pair {i} layer {l}: {b} vs s²·d = {want}", model.name));
            }
        }
    }
    Ok(())
}

/// Objective algebra on fuzzed inputs: the breakdown formulas, the affine
/// coefficients, the tape variant, and the `λ1 = 1` degeneration.
pub fn check_objective_algebra(trials: usize, seed: u64) -> std::result::Result<f64, String> {
    use perceptra::losses::full_objective;
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let l1 = rng.uniform_range(0.0, 5.0);
        let coper = rng.uniform_range(0.0, 5.0);
        let adv = rng.uniform_range(-20.0, 0.0);
        let lambda1 = if i % 10 == 0 { 1.0 } else { rng.uniform() };
        let lambda2 = if i % 7 == 0 { 0.0 } else { rng.uniform_range(0.0, 20.0) };
        let b = full_objective(l1, coper, adv, lambda1, lambda2).map_err(|e| e.to_string())?;
        let want = lambda1 * l1 + (1.0 - lambda1) * coper + lambda2 * adv;
        let scale = 1.0 + l1.abs() + coper.abs() + lambda2 * adv.abs();
        let err = (b.g_total - want).abs() / scale;
        worst = worst.max(err);
        if err > 1e-12 || b.d_total != -adv {
            return Err(format!("trial {i}: g {} vs {want}, d {} vs {}", b.g_total, b.d_total, -adv));
        }
        if lambda1 == 1.0 && b.g_total != l1 + lambda2 * adv {
            return Err(format!("trial {i}: λ1=1 gives {} not {}", b.g_total, l1 + lambda2 * adv));
        }
        // affine probing, one coordinate at a time
        let delta = rng.uniform_range(0.1, 1.0);
        let probes = [
            (full_objective(l1 + delta, coper, adv, lambda1, lambda2), lambda1),
            (full_objective(l1, coper + delta, adv, lambda1, lambda2), 1.0 - lambda1),
            (full_objective(l1, coper, adv + delta, lambda1, lambda2), lambda2),
        ];
        for (k, (p, coef)) in probes.into_iter().enumerate() {
            let p = p.map_err(|e| e.to_string())?;
            let slope = (p.g_total - b.g_total) / delta;
            let err = (slope - coef).abs() * delta / scale;
            worst = worst.max(err);
            if err > 1e-12 {
                return Err(format!("trial {i}: coefficient {k} is {slope}, expected {coef}"));
            }
        }
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let g = generator_objective_var(s(l1), Some(s(coper)), Some(s(adv)), lambda1, lambda2)
            .and_then(|v| v.item())
            .map_err(|e| e.to_string())?;
        let err = (g - b.g_total).abs() / scale;
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!("trial {i}: tape objective {g} vs {}", b.g_total));
        }
    }
    Ok(worst)
}
