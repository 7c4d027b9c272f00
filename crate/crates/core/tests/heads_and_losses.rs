mod common;

use common::{add_row, map, mat, mm, param, relu, rng, sigmoid, uniform, vector};
use proptest::prelude::*;
use trtr::localize::{
    apply_window, argmax, decode_center, decode_size, heads_forward, init_heads, smooth_size, BoundingBox, CosineWindow,
    GridPoint, HEAD_NAMES,
};
use trtr::loss::{
    adaptive_sigma, focal_loss, focal_loss_with_grad, gaussian_label, gaussian_radius, joint_loss, offset_loss,
    size_loss, FocalParams, MIN_OVERLAP,
};
use trtr::tensor::gradcheck::{check_inputs, check_params};
use trtr::tensor::TransformerWeights;
use trtr::{Graph, Tensor};

fn head_weights(d: usize, seed: u64) -> TransformerWeights {
    let mut w = TransformerWeights::new();
    init_heads(&mut rng(seed), &mut w, d).unwrap();
    for p in w.iter_mut().filter(|p| p.name.ends_with("bias")) {
        let n = p.value.len();
        p.value = uniform(&mut rng(seed + 50 + n as u64), &[n], 0.5);
    }
    w
}

#[test]
fn heads_match_conv_sigmoid_oracle() {
    for seed in 0..4 {
        let w = head_weights(4, seed);
        let x = uniform(&mut rng(seed + 9), &[4, 4], 1.0);
        let g = Graph::new();
        let maps = heads_forward(&g, &w, &g.constant(x.clone()), 2, 2, 8).unwrap().to_maps();
        for (name, got) in HEAD_NAMES.iter().zip([&maps.y, &maps.offset, &maps.size]) {
            let mut h = mat(&x);
            for l in 0..3 {
                h = add_row(&mm(&h, &param(&w, &format!("heads.{name}.{l}.weight"))), &vector(&w, &format!("heads.{name}.{l}.bias")));
                h = map(&h, if l < 2 { relu } else { sigmoid });
            }
            let c = h[0].len();
            let expect = Tensor::from_fn(got.shape().to_vec(), |i| h[i % 4][i / 4]);
            assert_eq!(got.len(), 4 * c);
            assert!(got.max_abs_diff(&expect) < 1e-12, "{name}");
        }
    }
}

#[test]
fn zero_network_gives_half_and_negative_bias_saturates() {
    let mut w = head_weights(4, 1);
    for p in w.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let g = Graph::new();
    let x = g.constant(uniform(&mut rng(2), &[9, 4], 1.0));
    let m = heads_forward(&g, &w, &x, 3, 3, 8).unwrap().to_maps();
    for t in [&m.y, &m.offset, &m.size] {
        assert!(t.data().iter().all(|&v| v == 0.5));
    }
    *w.get_mut("heads.cls.2.bias").unwrap() = Tensor::full([1], -60.0);
    let g = Graph::new();
    let x = g.constant(x.value().as_ref().clone());
    let m = heads_forward(&g, &w, &x, 3, 3, 8).unwrap().to_maps();
    assert!(m.y.data().iter().all(|&v| v > 0.0 && v < 1e-25));
}

fn probed_heads<'g>(g: &'g Graph, w: &TransformerWeights, x: trtr::Var<'g>, probe: &[Tensor; 3]) -> trtr::Result<trtr::Var<'g>> {
    let h = heads_forward(g, w, &x, 2, 2, 8)?;
    let a = h.y.mul(&g.constant(probe[0].clone()))?.sum();
    let b = h.offset.mul(&g.constant(probe[1].clone()))?.sum();
    let c = h.size.mul(&g.constant(probe[2].clone()))?.sum();
    a.add(&b)?.add(&c)
}

#[test]
fn gradcheck_heads() {
    for seed in 0..3 {
        let w = head_weights(4, seed);
        let x = uniform(&mut rng(seed + 1), &[4, 4], 1.0);
        let probe = [uniform(&mut rng(seed + 2), &[2, 2], 1.0), uniform(&mut rng(seed + 3), &[2, 2, 2], 1.0), uniform(&mut rng(seed + 4), &[2, 2, 2], 1.0)];
        let report = check_params("heads", &w, |g, w| probed_heads(g, w, g.constant(x.clone()), &probe)).unwrap();
        assert!(report.passed(), "{report}");
        let report = check_inputs("heads input", &[x.clone()], |g, v| probed_heads(g, &w, v[0], &probe)).unwrap();
        assert!(report.passed(), "{report}");
    }
}

fn hann_oracle(n: usize) -> Vec<f64> {
    if n <= 2 {
        return vec![1.0; n];
    }
    let raw: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect();
    let peak = raw.iter().copied().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

#[test]
fn window_matches_separable_hann() {
    for (h, w) in [(1, 1), (2, 3), (5, 8), (8, 8), (16, 11), (31, 31)] {
        let win = CosineWindow::hann(h, w, 0.4).unwrap();
        let (wy, wx) = (hann_oracle(h), hann_oracle(w));
        let expect = Tensor::from_fn([h, w], |i| wy[i / w] * wx[i % w]);
        assert!(win.window.max_abs_diff(&expect) < 1e-12);
        assert!((win.window.data().iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }
    assert!(CosineWindow::hann(4, 4, 1.5).is_err());
}

#[test]
fn window_limits() {
    let y = uniform(&mut rng(3), &[9, 9], 1.0).map(|v| v.abs());
    assert_eq!(apply_window(&y, &CosineWindow::hann(9, 9, 0.0).unwrap()).unwrap(), y);
    let full = CosineWindow::hann(9, 9, 1.0).unwrap();
    assert_eq!(argmax(&apply_window(&y, &full).unwrap()), Some(GridPoint { x: 4, y: 4 }));
    let flat = apply_window(&Tensor::full([9, 9], 0.5), &CosineWindow::hann(9, 9, 0.4).unwrap()).unwrap();
    assert_eq!(argmax(&flat), Some(GridPoint { x: 4, y: 4 }));
    let even = CosineWindow::hann(8, 8, 1.0).unwrap();
    assert_eq!(argmax(&apply_window(&y.reshape([9, 9]).unwrap(), &CosineWindow::hann(9, 9, 1.0).unwrap()).unwrap()), Some(full.center()));
    assert_eq!(even.center(), GridPoint { x: 3, y: 3 });
}

#[test]
fn decode_center_and_size_cases() {
    let mut y = Tensor::zeros([6, 5]);
    y.set(&[4, 3], 0.9);
    let mut o = Tensor::zeros([2, 6, 5]);
    o.set(&[0, 4, 3], 0.5);
    o.set(&[1, 4, 3], 0.25);
    let c = decode_center(&y, &o, 8).unwrap().unwrap();
    assert_eq!((c.cx, c.cy), (28.0, 34.0));
    let c = decode_center(&y, &Tensor::zeros([2, 6, 5]), 8).unwrap().unwrap();
    assert_eq!((c.cx % 8.0, c.cy % 8.0), (0.0, 0.0));
    assert_eq!(decode_center(&Tensor::full([2, 2], f64::NAN), &Tensor::zeros([2, 2, 2]), 8).unwrap(), None);

    let mut s = Tensor::zeros([2, 6, 5]);
    s.set(&[0, 4, 3], 0.25);
    s.set(&[1, 4, 3], 0.5);
    assert_eq!(decode_size(&s, GridPoint { x: 3, y: 4 }, 256, 256).unwrap(), (64.0, 128.0));
    assert_eq!(decode_size(&Tensor::full([2, 6, 5], 1.0), GridPoint { x: 0, y: 0 }, 255, 248).unwrap(), (255.0, 248.0));
    let r = uniform(&mut rng(4), &[2, 6, 5], 1.0).map(|v| v.abs());
    for (py, px) in [(0, 0), (5, 4), (2, 3)] {
        let (w, h) = decode_size(&r, GridPoint { x: px, y: py }, 200, 120).unwrap();
        assert_eq!((w, h), (200.0 * r.at(&[0, py, px]), 120.0 * r.at(&[1, py, px])));
    }
    assert!(decode_size(&r, GridPoint { x: 5, y: 0 }, 10, 10).is_err());

    assert_eq!(smooth_size((10.0, 10.0), (20.0, 30.0), 0.0).unwrap(), (10.0, 10.0));
    assert_eq!(smooth_size((10.0, 10.0), (20.0, 30.0), 1.0).unwrap(), (20.0, 30.0));
    let (w, h) = smooth_size((10.0, 10.0), (20.0, 30.0), 0.3).unwrap();
    assert!((w - 13.0).abs() < 1e-12 && (h - 16.0).abs() < 1e-12);
}

/// Chebyshev distance from cell `i` to the central cell block on an axis of `n`.
fn axis_distance(i: usize, n: usize) -> usize {
    (2 * i).abs_diff(n - 1) / 2
}

fn grid_distance(p: GridPoint, n: usize) -> usize {
    axis_distance(p.x, n).max(axis_distance(p.y, n))
}

proptest! {
    #[test]
    fn increasing_influence_never_moves_the_peak_away(seed in 0u64..100_000) {
        let y = uniform(&mut rng(seed), &[8, 8], 1.0).map(|v| v.abs());
        let mut last = usize::MAX;
        for k in 0..=10 {
            let win = CosineWindow::hann(8, 8, k as f64 / 10.0).unwrap();
            let peak = argmax(&apply_window(&y, &win).unwrap()).unwrap();
            let d = grid_distance(peak, 8);
            prop_assert!(d <= last, "λ {}: distance {} after {}", k as f64 / 10.0, d, last);
            last = d;
        }
        prop_assert_eq!(last, 0);
    }

    #[test]
    fn decode_equals_exhaustive_scan(seed in 0u64..100_000, h in 1usize..=16, w in 1usize..=16, lambda in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let y = uniform(&mut r, &[h, w], 1.0).map(|v| v.abs());
        let off = uniform(&mut r, &[2, h, w], 1.0).map(|v| v.abs().min(0.999));
        let win = CosineWindow::hann(h, w, lambda).unwrap();
        let got = decode_center(&apply_window(&y, &win).unwrap(), &off, 8).unwrap().unwrap();

        let mut best = (0, 0, f64::NEG_INFINITY);
        for i in 0..h {
            for j in 0..w {
                let v = (1.0 - lambda) * y.at(&[i, j]) + lambda * win.window.at(&[i, j]);
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        let (i, j, v) = best;
        prop_assert_eq!(got.peak, GridPoint { x: j, y: i });
        prop_assert_eq!(got.score, v);
        prop_assert_eq!((got.cx, got.cy), (8.0 * (j as f64 + off.at(&[0, i, j])), 8.0 * (i as f64 + off.at(&[1, i, j]))));
        prop_assert!(got.cx >= 0.0 && got.cx < 8.0 * w as f64 && got.cy >= 0.0 && got.cy < 8.0 * h as f64);
    }

    #[test]
    fn head_outputs_stay_in_range_on_extreme_inputs(seed in 0u64..10_000) {
        let w = head_weights(4, seed);
        let x = uniform(&mut rng(seed + 1), &[9, 4], 1.0).map(|v| v.signum() * 1e3);
        let g = Graph::new();
        let m = heads_forward(&g, &w, &g.constant(x), 3, 3, 8).unwrap().to_maps();
        for t in [&m.y, &m.offset, &m.size] {
            prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn gaussian_label_matches_per_pixel_oracle() {
    for (cx, cy, sigma) in [(3, 4, 1.3), (0, 7, 0.5), (5, 5, 2.7)] {
        let l = gaussian_label(GridPoint { x: cx, y: cy }, sigma, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let d2 = ((x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2)) as f64;
                assert!((l.at(&[y, x]) - (-d2 / (2.0 * sigma * sigma)).exp()).abs() < 1e-12);
            }
        }
        assert_eq!(l.at(&[cy, cx]), 1.0);
    }
    let sigma = 2.0 / (2.0 * 2f64.ln()).sqrt();
    let l = gaussian_label(GridPoint { x: 3, y: 3 }, sigma, 8, 8).unwrap();
    assert!((l.at(&[3, 5]) - 0.5).abs() < 1e-12);
    assert!(gaussian_label(GridPoint { x: 8, y: 0 }, 1.0, 8, 8).is_err());
    assert!(gaussian_label(GridPoint { x: 0, y: 0 }, 0.0, 8, 8).is_err());
}

#[test]
fn gaussian_label_is_symmetric_about_a_central_peak() {
    let l = gaussian_label(GridPoint { x: 4, y: 4 }, 1.7, 9, 9).unwrap();
    for y in 0..9 {
        for x in 0..9 {
            assert_eq!(l.at(&[y, x]), l.at(&[8 - y, x]));
            assert_eq!(l.at(&[y, x]), l.at(&[y, 8 - x]));
        }
    }
}

/// Largest `r` keeping `iou(r) ≥ o`, by bisection on a decreasing function.
fn bisect(iou: impl Fn(f64) -> f64, o: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if iou(mid) >= o {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn radius_oracle(w: f64, h: f64, o: f64) -> f64 {
    let base = BoundingBox::from_corner(0.0, 0.0, w, h);
    let shifted = |r: f64| base.iou(&BoundingBox::from_corner(r, r, w, h));
    let shrunk = |r: f64| base.iou(&BoundingBox::from_corner(r, r, w - 2.0 * r, h - 2.0 * r));
    let grown = |r: f64| base.iou(&BoundingBox::from_corner(-r, -r, w + 2.0 * r, h + 2.0 * r));
    let m = w.min(h);
    bisect(shifted, o, m).min(bisect(shrunk, o, m / 2.0)).min(bisect(grown, o, 10.0 * (w + h)))
}

#[test]
fn label_radius_matches_iou_bisection() {
    for (w, h) in [(1.0, 1.0), (2.0, 2.0), (3.5, 3.5), (6.0, 6.0), (2.0, 5.0), (7.3, 1.9)] {
        let got = gaussian_radius(w, h, MIN_OVERLAP);
        let expect = radius_oracle(w, h, MIN_OVERLAP);
        assert!((got - expect).abs() < 1e-6, "{w}x{h}: {got} vs {expect}");
    }
    assert!(adaptive_sigma(20.0, 20.0) > adaptive_sigma(2.0, 2.0));
    assert_eq!(adaptive_sigma(1.0, 1.0), 0.5);
}

#[test]
fn focal_scalar_oracles() {
    let one = |y: f64, l: f64| focal_loss_with_grad(&Tensor::full([1, 1], y), &Tensor::full([1, 1], l), FocalParams::default()).unwrap().0;
    assert!(one(1.0 - 1e-7, 1.0) < 1e-12);
    assert!((one(0.5, 1.0) - (-(0.5f64).powi(2) * 0.5f64.ln())).abs() < 1e-15);
    assert!((one(0.5, 1.0) - 0.17329).abs() < 1e-5);
    assert!((one(0.5, 0.0) - 0.17329).abs() < 1e-5);
    assert!((one(0.5, 0.9) / one(0.5, 0.0) - 1e-4).abs() < 1e-15);
}

#[test]
fn regression_loss_oracles() {
    let g = Graph::new();
    let mut o = Tensor::zeros([2, 4, 4]);
    let cell = GridPoint { x: 2, y: 1 };
    let lo = |o: &Tensor, c: (f64, f64)| offset_loss(&g.constant(o.clone()), c, 8).unwrap().value().item();
    assert_eq!(lo(&o, (16.0, 8.0)), 0.0);
    assert_eq!(lo(&o, (20.0, 10.0)), 0.75);
    o.set(&[0, 1, 2], 0.5);
    o.set(&[1, 1, 2], 0.25);
    assert_eq!(lo(&o, (20.0, 10.0)), 0.0);

    let s = g.constant(Tensor::full([2, 4, 4], 0.5));
    let ls = size_loss(&s, (0.25, 0.75), cell).unwrap();
    assert_eq!(ls.value().item(), 0.5);
    let grads = g.backward(ls).unwrap();
    let gs = grads.wrt(s).unwrap();
    assert_eq!((gs[4 + 2], gs[16 + 4 + 2]), (1.0, -1.0));
    assert_eq!(gs.iter().filter(|&&v| v != 0.0).count(), 2);
    assert_eq!(size_loss(&s, (0.5, 0.5), cell).unwrap().value().item(), 0.0);

    let c = |v: f64| g.constant(Tensor::scalar(v));
    assert_eq!(joint_loss(&c(1.0), &c(2.0), &c(3.0), 1.0, 1.0).unwrap().value().item(), 6.0);
    assert_eq!(joint_loss(&c(1.0), &c(2.0), &c(3.0), 0.0, 0.0).unwrap().value().item(), 1.0);
}

#[test]
fn focal_gradient_matches_finite_differences() {
    for seed in 0..6 {
        let pred = uniform(&mut rng(seed), &[4, 4], 1.0).map(|v| 0.5 + 0.45 * v);
        let label = gaussian_label(GridPoint { x: (seed % 4) as usize, y: 2 }, 1.1, 4, 4).unwrap();
        let report = check_inputs("focal", &[pred], |_, v| focal_loss(&v[0], &label, FocalParams::default())).unwrap();
        assert!(report.passed(), "{report}");
    }
}

proptest! {
    #[test]
    fn focal_is_nonnegative(seed in 0u64..100_000, cx in 0usize..5, cy in 0usize..5, sigma in 0.3f64..3.0) {
        let pred = uniform(&mut rng(seed), &[5, 5], 1.0).map(|v| 0.5 + 0.5 * v);
        let label = gaussian_label(GridPoint { x: cx, y: cy }, sigma, 5, 5).unwrap();
        let (loss, _) = focal_loss_with_grad(&pred, &label, FocalParams::default()).unwrap();
        prop_assert!(loss >= 0.0);
        let exact = label.map(|v| if v == 1.0 { 1.0 } else { 0.0 });
        let (zero, _) = focal_loss_with_grad(&exact, &exact, FocalParams::default()).unwrap();
        prop_assert!(zero < 1e-12);
    }

    #[test]
    fn negative_penalty_is_non_increasing_in_the_label(y in 0.0f64..1.0, a in 0.0f64..0.999, b in 0.0f64..0.999) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let one = |l: f64| focal_loss_with_grad(&Tensor::full([1, 1], y), &Tensor::full([1, 1], l), FocalParams::default()).unwrap().0;
        prop_assert!(one(hi) <= one(lo));
    }
}

#[test]
fn exhaustive_oracle_helper_is_sane() {
    assert_eq!(grid_distance(GridPoint { x: 3, y: 4 }, 8), 0);
    assert_eq!(grid_distance(GridPoint { x: 0, y: 4 }, 8), 3);
    assert_eq!(grid_distance(GridPoint { x: 7, y: 6 }, 8), 3);
}
