//! Oracle comparisons, each over many random small instances. They panic
//! on the first mismatch.

use super::oracles;
use perceptra::classical::{l1_distance, psnr, ssim, SsimConfig, SsimWindow};
use perceptra::eval::{afc_score, normalize_distances, normalize_ratings, pearson};
use perceptra::{Rng, Tape, Tensor};

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-9;

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL, "{what}: {a} vs {b}");
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn conv2d_matches_naive_loops() {
    for seed in 0..INSTANCES {
        let mut r = Rng::new(seed);
        let (n, c, o) = (1 + r.below(2), 1 + r.below(3), 1 + r.below(3));
        let k = [1, 2, 3][r.below(3)];
        let (stride, pad) = (1 + r.below(2), r.below(2));
        let (h, w) = (k + r.below(5), k + r.below(5));
        let integer = seed % 2 == 0;
        let draw = |len, r: &mut Rng| -> Vec<f64> {
            if integer {
                (0..len).map(|_| r.below(9) as f64 - 4.0).collect()
            } else {
                oracles::rand_vec(len, -1.0, 1.0, r)
            }
        };
        let x = draw(n * c * h * w, &mut r);
        let kern = draw(o * c * k * k, &mut r);
        let bias = draw(o, &mut r);
        let (want, oh, ow) = oracles::conv2d(&x, (n, c, h, w), &kern, (o, k, k), Some(&bias), stride, pad);
        let tape = Tape::new();
        let got = tape
            .constant(tensor(&[n, c, h, w], x))
            .conv2d(tape.constant(tensor(&[o, c, k, k], kern)), Some(tape.constant(tensor(&[o], bias))), stride, pad)
            .unwrap()
            .value();
        assert_eq!(got.shape(), &[n, o, oh, ow]);
        for (g, e) in got.data().iter().zip(&want) {
            if integer {
                assert_eq!(g, e, "seed {seed}");
            } else {
                close(*g, *e, "conv2d");
            }
        }
    }
}

pub fn pooling_matches_naive_loops() {
    for seed in 0..INSTANCES {
        let mut r = Rng::new(1000 + seed);
        let (kernel, stride) = [(2, 2), (3, 2), (2, 1), (3, 3)][r.below(4)];
        let (planes, h, w) = (1 + r.below(3), kernel + r.below(6), kernel + r.below(6));
        let x = oracles::rand_vec(planes * h * w, -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let v = tape.constant(tensor(&[1, planes, h, w], x.clone()));
        for max in [true, false] {
            let got = if max { v.maxpool2d(kernel, stride) } else { v.avgpool2d(kernel, stride) }.unwrap().value();
            let want = oracles::pool2d(&x, planes, h, w, kernel, stride, max);
            assert_eq!(got.numel(), want.len());
            for (g, e) in got.data().iter().zip(&want) {
                close(*g, *e, if max { "maxpool" } else { "avgpool" });
            }
        }
    }
}

pub fn ssim_matches_sliding_window_oracle() {
    for seed in 0..INSTANCES {
        let mut r = Rng::new(2000 + seed);
        let (config, win) = if seed % 2 == 0 {
            (SsimConfig::default(), oracles::ssim_window(11, Some(1.5)))
        } else {
            (SsimConfig::uniform8(1.0), oracles::ssim_window(8, None))
        };
        let k = config.window.size();
        let (c, h, w) = (1 + r.below(3), k + r.below(6), k + r.below(6));
        let a = oracles::rand_vec(c * h * w, 0.0, 1.0, &mut r);
        // correlated partner so SSIM is far from zero
        let b: Vec<f64> = a.iter().map(|v| (0.7 * v + 0.3 * r.uniform()).clamp(0.0, 1.0)).collect();
        let got = ssim(&tensor(&[c, h, w], a.clone()), &tensor(&[c, h, w], b.clone()), &config).unwrap();
        let want = oracles::ssim(&a, &b, c, h, w, &win, config.k1, config.k2, config.peak);
        close(got, want, "ssim");
    }
}

pub fn ssim_window_taps_are_normalized() {
    for window in [SsimWindow::Gaussian { size: 11, sigma: 1.5 }, SsimWindow::Uniform { size: 8 }] {
        let s: f64 = window.taps().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }
}

pub fn psnr_and_l1_match_direct_formulas() {
    for seed in 0..INSTANCES {
        let mut r = Rng::new(3000 + seed);
        let n = 1 + r.below(40);
        let peak = [1.0, 255.0][r.below(2)];
        let a = oracles::rand_vec(n, 0.0, peak, &mut r);
        let b = oracles::rand_vec(n, 0.0, peak, &mut r);
        let (ta, tb) = (tensor(&[n], a.clone()), tensor(&[n], b.clone()));
        close(psnr(&ta, &tb, peak).unwrap(), oracles::psnr(&a, &b, peak), "psnr");
        close(l1_distance(&ta, &tb).unwrap(), oracles::l1(&a, &b), "l1");
    }
}

pub fn pearson_matches_moment_formula_and_t_tail() {
    for seed in 0..INSTANCES {
        let mut r = Rng::new(4000 + seed);
        let n = 3 + r.below(30);
        let a = oracles::rand_vec(n, -1.0, 1.0, &mut r);
        let slope = r.uniform_range(-1.0, 1.0);
        let b: Vec<f64> = a.iter().map(|x| slope * x + 0.5 * r.normal()).collect();
        let got = pearson(&a, &b).unwrap();
        let want_r = oracles::pearson_r(&a, &b);
        close(got.r, want_r, "pearson r");
        assert_eq!(got.n, n);
        let t = want_r * ((n - 2) as f64 / (1.0 - want_r * want_r)).sqrt();
        close(got.p_value, oracles::t_two_sided(t, n - 2), "pearson p");
    }
}

pub fn afc_score_matches_case_analysis() {
    for seed in 0..INSTANCES {
        let mut r = Rng::new(5000 + seed);
        let d0 = r.uniform();
        // every fifth instance is an exact tie
        let d1 = if seed % 5 == 0 { d0 } else { r.uniform() };
        let p = [0.0, 1.0, r.uniform()][r.below(3)];
        assert_eq!(afc_score(d0, d1, p).unwrap(), oracles::afc(d0, d1, p), "seed {seed}");
    }
}

pub fn normalizations_match_divide_by_max() {
    for seed in 0..INSTANCES {
        let mut r = Rng::new(6000 + seed);
        let n = 1 + r.below(20);
        let d = oracles::rand_vec(n, 0.0, 5.0, &mut r);
        for (g, e) in normalize_distances(&d).unwrap().iter().zip(oracles::normalize_by_max(&d)) {
            close(*g, e, "normalize_distances");
        }
        let real: Vec<u8> = (0..n).map(|_| 1 + r.below(6) as u8).collect();
        let mut synth: Vec<u8> = (0..n).map(|_| 1 + r.below(6) as u8).collect();
        synth[0] = if real[0] == 1 { 6 } else { 1 };
        let diffs: Vec<f64> = real.iter().zip(&synth).map(|(a, b)| (*a as f64 - *b as f64).abs()).collect();
        for (g, e) in normalize_ratings(&real, &synth).unwrap().iter().zip(oracles::normalize_by_max(&diffs)) {
            close(*g, e, "normalize_ratings");
        }
    }
}
