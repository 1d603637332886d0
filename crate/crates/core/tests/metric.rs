mod common;

use common::{check_metric_axioms, micro_vit, naive_layer_distance, naive_tokens_to_map};
use perceptra::backbones::{build_backbone, BackboneKind, Scale};
use perceptra::metric::{
    batch_distance, coper_distance, coper_distance_vit, coper_distance_with, distance_from_tokens, ChannelWeights,
    LayerAggregation, MetricOptions,
};
use perceptra::{Rng, Tensor};

fn img(seed: u64, side: usize) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn([3, side, side], |_| r.uniform())
}

#[test]
fn axioms_cnn() {
    for kind in [BackboneKind::MiniVgg, BackboneKind::MiniResnet] {
        let m = build_backbone(kind, Scale::Tiny, &mut Rng::new(1));
        check_metric_axioms(&m, 100, 7).unwrap();
    }
}

#[test]
fn axioms_vit() {
    let m = build_backbone(BackboneKind::MiniVit, Scale::Tiny, &mut Rng::new(1));
    check_metric_axioms(&m, 100, 8).unwrap();
}

#[test]
fn cnn_total_matches_definition() {
    let m = build_backbone(BackboneKind::MiniVgg, Scale::Tiny, &mut Rng::new(2));
    let (a, b) = (img(1, 16), img(2, 16));
    let w = ChannelWeights::ones(&m).scaled(0.7);
    let report = coper_distance(&m, &w, &a, &b).unwrap();
    let (ta, tb) = (m.extract_taps(&a).unwrap(), m.extract_taps(&b).unwrap());
    let mut sum = 0.0;
    for (l, (x, y)) in ta.iter().zip(&tb).enumerate() {
        let want = naive_layer_distance(x, y, &w.per_layer[l]);
        assert!((report.per_layer[l] - want).abs() < 1e-12 * want.max(1.0));
        sum += want;
    }
    assert!((report.total - sum).abs() < 1e-12);
    assert_eq!(report.total, report.per_layer.iter().sum::<f64>());
}

#[test]
fn vit_path_equals_cnn_formula_on_reshaped_tokens() {
    let m = micro_vit(3);
    let side = m.vit_config().unwrap().input_size();
    let (a, b) = (img(3, side), img(4, side));
    let w = ChannelWeights::ones(&m);
    let report = coper_distance_vit(&m, &w, &a, &b, MetricOptions::default()).unwrap();
    let (ta, tb) = (m.extract_token_taps(&a).unwrap(), m.extract_token_taps(&b).unwrap());
    for (l, (x, y)) in ta.iter().zip(&tb).enumerate() {
        assert_eq!(x.shape(), &[4, 8]);
        let want = naive_layer_distance(&naive_tokens_to_map(x), &naive_tokens_to_map(y), &w.per_layer[l]);
        assert!((report.per_layer[l] - want).abs() < 1e-12, "{} vs {want}", report.per_layer[l]);
    }
}

#[test]
fn non_square_tokens_rejected() {
    let t = Tensor::zeros([6, 4]);
    let w = ChannelWeights::ones_for(&[4]);
    assert!(distance_from_tokens(&[t.clone()], &[t], &w, true).is_err());
}

#[test]
fn vit_entry_rejects_cnn() {
    let m = build_backbone(BackboneKind::MiniVgg, Scale::Tiny, &mut Rng::new(0));
    let w = ChannelWeights::ones(&m);
    assert!(coper_distance_vit(&m, &w, &img(0, 16), &img(1, 16), MetricOptions::default()).is_err());
}

#[test]
fn mean_aggregation_divides_by_layers() {
    let m = build_backbone(BackboneKind::MiniVgg, Scale::Tiny, &mut Rng::new(5));
    let w = ChannelWeights::ones(&m);
    let (a, b) = (img(5, 16), img(6, 16));
    let sum = coper_distance(&m, &w, &a, &b).unwrap();
    let mean = coper_distance_with(&m, &w, &a, &b, MetricOptions { aggregation: LayerAggregation::Mean, normalize: true })
        .unwrap();
    assert!((mean.total - sum.total / 4.0).abs() < 1e-15);
}

#[test]
fn batch_equals_sequential() {
    let m = build_backbone(BackboneKind::MiniVgg, Scale::Tiny, &mut Rng::new(6));
    let w = ChannelWeights::ones(&m);
    assert!(batch_distance(&m, &w, &[], MetricOptions::default()).is_empty());
    let mut pairs: Vec<(Tensor, Tensor)> = (0..9).map(|i| (img(10 + i, 16), img(20 + i, 16))).collect();
    // a malformed pair fails alone
    pairs.insert(4, (img(0, 16), img(0, 12)));
    let got = batch_distance(&m, &w, &pairs, MetricOptions::default());
    assert_eq!(got.len(), pairs.len());
    for (i, (r, (a, b))) in got.iter().zip(&pairs).enumerate() {
        match coper_distance(&m, &w, a, b) {
            Ok(want) => assert_eq!(r.as_ref().unwrap().total, want.total),
            Err(_) => assert!(r.is_err() && i == 4),
        }
    }
    let one = batch_distance(&m, &w, &[(img(1, 16), img(1, 16))], MetricOptions::default());
    assert_eq!(one[0].as_ref().unwrap().total, 0.0);
}

#[test]
fn brightness_shift_is_seen() {
    let m = build_backbone(BackboneKind::MiniVgg, Scale::Tiny, &mut Rng::new(7));
    let w = ChannelWeights::ones(&m);
    let mut any = false;
    for s in 0..5 {
        let a = img(30 + s, 16).map(|v| 0.8 * v);
        let b = a.map(|v| v + 0.15);
        any |= coper_distance(&m, &w, &a, &b).unwrap().total > 0.0;
    }
    assert!(any);
}

#[test]
fn weight_shape_mismatch_rejected() {
    let m = build_backbone(BackboneKind::MiniVgg, Scale::Tiny, &mut Rng::new(0));
    let w = ChannelWeights::ones_for(&[8, 16, 32]);
    assert!(coper_distance(&m, &w, &img(0, 16), &img(1, 16)).is_err());
    assert!(ChannelWeights::new(vec![vec![1.0, -0.5]]).is_err());
}
