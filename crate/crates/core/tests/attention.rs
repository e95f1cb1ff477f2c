//! Attending operators, PiCANet modules and pooling baselines.

use picanet_core::net::{NetworkSpec, SaliencyNet};
use picanet_core::nn::{self, random_tensor, Group, Init, ParamRegistry};
use picanet_core::ops::Mode;
use picanet_core::picanet::{self, attention_positions, Footprint, GlobalConfig, LocalConfig, PoolMode};
use picanet_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

#[path = "common/oracles.rs"]
mod oracles;
use oracles::*;

#[test]
fn global_attend_matches_brute_force() {
    let mut r = rng(1);
    // the paper's 28×28 map, 10×10 grid, dilation 3, then random configs
    let mut configs = vec![(28, 28, (10, 10), 3), (8, 8, (3, 3), 3)];
    while configs.len() < 24 {
        configs.push((r.random_range(2..13), r.random_range(2..13), (r.random_range(1..6), r.random_range(1..6)), r.random_range(1..5)));
    }
    for (k, &(h, w, grid, d)) in configs.iter().enumerate() {
        let n = r.random_range(1..3);
        let c = r.random_range(1..4);
        let positions = attention_positions(w, h, grid, d);
        let f: Tensor<f64> = random_tensor(&mut r, &[n, c, h, w], 1.0);
        let a = random_attention(&mut r, n, grid.0 * grid.1, h, w);
        let diff = run_global(&f, &a, &positions).max_abs_diff(&brute_global(&f, &a, &positions));
        assert!(diff <= 1e-6, "config {k} {:?}: {diff}", (h, w, grid, d));
    }
}

#[test]
fn local_attend_matches_brute_force() {
    let mut r = rng(2);
    // 13×13 context from a 7×7 grid at dilation 2, and the 5×5 d=2 example
    let mut configs = vec![(14, 14, (7, 7), 2), (9, 9, (5, 5), 2)];
    while configs.len() < 24 {
        let g = (2 * r.random_range(0..4) + 1, 2 * r.random_range(0..4) + 1);
        configs.push((r.random_range(1..12), r.random_range(1..12), g, r.random_range(1..4)));
    }
    for (k, &(h, w, grid, d)) in configs.iter().enumerate() {
        let n = r.random_range(1..3);
        let c = r.random_range(1..4);
        let f: Tensor<f64> = random_tensor(&mut r, &[n, c, h, w], 1.0);
        let a = random_attention(&mut r, n, grid.0 * grid.1, h, w);
        let diff = run_local(&f, &a, grid, d).max_abs_diff(&brute_local(&f, &a, grid, d));
        assert!(diff <= 1e-6, "config {k} {:?}: {diff}", (h, w, grid, d));
    }
}

#[test]
fn one_hot_global_attention_copies_the_anchor() {
    let mut r = rng(3);
    let (h, w) = (6, 7);
    let positions = attention_positions(w, h, (3, 2), 2);
    let f: Tensor<f64> = random_tensor(&mut r, &[1, 2, h, w], 1.0);
    let i = 4;
    let a = Tensor::from_fn(&[1, 6, h, w], |idx| if idx / (h * w) == i { 1.0 } else { 0.0 });
    let out = run_global(&f, &a, &positions);
    let (pr, pc) = positions[i];
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                assert_eq!(out.at4(0, c, y, x), f.at4(0, c, pr as usize, pc as usize));
            }
        }
    }
}

#[test]
fn uniform_dense_global_attention_is_the_mean() {
    let mut r = rng(4);
    let (h, w) = (5, 4);
    let positions = attention_positions(w, h, (w, h), 1);
    let f: Tensor<f64> = random_tensor(&mut r, &[1, 3, h, w], 1.0);
    let a = Tensor::full(&[1, h * w, h, w], 1.0 / (h * w) as f64);
    let out = run_global(&f, &a, &positions);
    for c in 0..3 {
        let mean: f64 = (0..h * w).map(|p| f.at4(0, c, p / w, p % w)).sum::<f64>() / (h * w) as f64;
        for p in 0..h * w {
            assert!((out.at4(0, c, p / w, p % w) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn center_one_hot_local_attention_is_exact_identity() {
    let mut r = rng(5);
    for (grid, d) in [((3, 3), 1), ((7, 7), 2), ((5, 3), 3)] {
        let f: Tensor<f64> = random_tensor(&mut r, &[2, 3, 6, 5], 1.0);
        let dd = grid.0 * grid.1;
        let a = Tensor::from_fn(&[2, dd, 6, 5], |idx| if (idx / 30) % dd == dd / 2 { 1.0 } else { 0.0 });
        assert_eq!(run_local(&f, &a, grid, d), f);
    }
}

#[test]
fn attention_fields_are_normalized_on_1000_random_pixels() {
    let mut r = rng(6);
    let mut fields = Vec::new();
    for seed in 0..3 {
        let mut spec = NetworkSpec::toy();
        spec.input_size = 32;
        let net = SaliencyNet::new(spec).unwrap();
        let params = net.init_params::<f32>(seed).unwrap();
        let images: Tensor<f32> = random_tensor(&mut r, &[2, 3, 32, 32], 1.0);
        fields.extend(net.attention_fields(&params, &images).unwrap().into_iter().map(|(_, _, f)| f.weights.cast::<f64>()));
    }
    // standalone modules in train mode too
    let g = GlobalConfig { renet_hidden: 4, attn_grid: (4, 4), dilation: 3, bn_before_softmax: true, renet_passes: 1 };
    let l = LocalConfig::toy();
    let mut reg = ParamRegistry::<f64>::new();
    picanet::register_global(&mut reg, &mut Init::new(1), "g", 8, &g, Group::Decoder).unwrap();
    picanet::register_local(&mut reg, &mut Init::new(2), "l", 8, &l, Group::Decoder).unwrap();
    let mut t = Tape::new();
    let mut bind = reg.bind(&mut t);
    let f = t.constant(random_tensor(&mut r, &[2, 8, 12, 12], 3.0));
    let ga = picanet::global_picanet_forward(&mut t, &mut bind, "g", f, &g, Mode::Train).unwrap();
    let la = picanet::local_picanet_forward(&mut t, &mut bind, "l", f, &l, Mode::Train).unwrap();
    assert_eq!(t.shape(ga.features), &[2, 8, 12, 12]);
    fields.push(t.value(ga.attention).clone());
    fields.push(t.value(la.attention).clone());

    for _ in 0..1000 {
        let field = &fields[r.random_range(0..fields.len())];
        let s = field.shape();
        let (n, y, x) = (r.random_range(0..s[0]), r.random_range(0..s[2]), r.random_range(0..s[3]));
        let ws: Vec<f64> = (0..s[1]).map(|i| field.at4(n, i, y, x)).collect();
        assert!(ws.iter().all(|&v| v >= 0.0));
        assert!((ws.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn renet_on_a_single_pixel_is_two_length_one_bilstms() {
    let mut r = rng(7);
    let hidden = 3;
    let mut reg = ParamRegistry::<f64>::new();
    picanet::register_renet(&mut reg, &mut Init::new(7), "r", 4, hidden, 1, Group::Decoder).unwrap();
    for e in reg.entries_mut() {
        e.tensor = random_tensor(&mut r, e.tensor.shape(), 0.8);
    }
    let x: Tensor<f64> = random_tensor(&mut r, &[2, 4, 1, 1], 1.0);
    let mut t = Tape::new();
    let bind = reg.bind(&mut t);
    let f = t.constant(x.clone());
    let out = picanet::renet_sweep(&mut t, &bind, "r", f, 1).unwrap();

    let seq = t.constant(x.reshape(&[2, 4]).unwrap());
    let fwd = nn::lstm_weights(&bind, "r.pass0.rows.fwd").unwrap();
    let bwd = nn::lstm_weights(&bind, "r.pass0.rows.bwd").unwrap();
    let rows = nn::bilstm_scan(&mut t, &[seq], &fwd, &bwd).unwrap();
    let fwd = nn::lstm_weights(&bind, "r.pass0.cols.fwd").unwrap();
    let bwd = nn::lstm_weights(&bind, "r.pass0.cols.bwd").unwrap();
    let cols = nn::bilstm_scan(&mut t, &rows, &fwd, &bwd).unwrap();
    assert_eq!(t.value(out).data(), t.value(cols[0]).data());
}

#[test]
fn renet_with_zero_parameters_outputs_zero() {
    let mut reg = ParamRegistry::<f64>::new();
    picanet::register_renet(&mut reg, &mut Init::new(0), "r", 3, 4, 2, Group::Decoder).unwrap();
    for e in reg.entries_mut() {
        e.tensor = Tensor::zeros(e.tensor.shape());
    }
    let mut t = Tape::new();
    let bind = reg.bind(&mut t);
    let f = t.constant(random_tensor(&mut rng(8), &[1, 3, 4, 5], 1.0));
    let out = picanet::renet_sweep(&mut t, &bind, "r", f, 2).unwrap();
    assert_eq!(t.shape(out), &[1, 8, 4, 5]);
    assert!(t.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn renet_has_a_global_receptive_field() {
    let mut r = rng(9);
    let mut reg = ParamRegistry::<f64>::new();
    picanet::register_renet(&mut reg, &mut Init::new(9), "r", 2, 3, 1, Group::Decoder).unwrap();
    let x: Tensor<f64> = random_tensor(&mut r, &[1, 2, 6, 6], 1.0);
    let eval = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let bind = reg.bind(&mut t);
        let f = t.constant(x.clone());
        let out = picanet::renet_sweep(&mut t, &bind, "r", f, 1).unwrap();
        t.value(out).clone()
    };
    let base = eval(&x);
    for y in 0..6 {
        for xx in 0..6 {
            let mut probe = x.clone();
            probe.data_mut()[y * 6 + xx] += 0.5;
            let out = eval(&probe);
            let (cy, cx) = (if y < 3 { 5 } else { 0 }, if xx < 3 { 5 } else { 0 });
            let moved = (0..6).any(|c| (out.at4(0, c, cy, cx) - base.at4(0, c, cy, cx)).abs() > 1e-12);
            assert!(moved, "pixel ({y},{xx}) does not reach corner ({cy},{cx})");
        }
    }
}

#[test]
fn bilstm_reversal_swaps_halves() {
    let mut r = rng(10);
    let hidden = 3;
    let mut reg = ParamRegistry::<f64>::new();
    nn::register_bilstm(&mut reg, &mut Init::new(10), "b", 2, hidden, Group::Decoder).unwrap();
    let seq: Vec<Tensor<f64>> = (0..5).map(|_| random_tensor(&mut r, &[2, 2], 1.0)).collect();
    let mut t = Tape::new();
    let bind = reg.bind(&mut t);
    let fwd = nn::lstm_weights(&bind, "b.fwd").unwrap();
    let bwd = nn::lstm_weights(&bind, "b.bwd").unwrap();
    let vars: Vec<Var> = seq.iter().map(|s| t.constant(s.clone())).collect();
    let rev: Vec<Var> = vars.iter().rev().copied().collect();
    let out = nn::bilstm_scan(&mut t, &vars, &fwd, &bwd).unwrap();
    // directions trade places when both the sequence and the weights swap
    let out_rev = nn::bilstm_scan(&mut t, &rev, &bwd, &fwd).unwrap();
    for k in 0..5 {
        let a = t.value(out[k]);
        let b = t.value(out_rev[4 - k]);
        for s in 0..2 {
            for j in 0..hidden {
                assert_eq!(a.data()[s * 2 * hidden + j], b.data()[s * 2 * hidden + hidden + j]);
                assert_eq!(a.data()[s * 2 * hidden + hidden + j], b.data()[s * 2 * hidden + j]);
            }
        }
    }
    // length one: both halves see the same single input
    let one = nn::bilstm_scan(&mut t, &vars[..1], &fwd, &fwd).unwrap();
    let v = t.value(one[0]).data();
    assert_eq!(&v[..hidden], &v[hidden..2 * hidden]);
}

#[test]
fn local_module_output_ignores_inputs_beyond_its_reach() {
    let cfg = LocalConfig {
        context_kernel: 3,
        context_dilation: 2,
        context_channels: 4,
        attn_grid: (3, 3),
        attend_dilation: 2,
        bn_before_softmax: true,
    };
    let mut reg = ParamRegistry::<f64>::new();
    picanet::register_local(&mut reg, &mut Init::new(11), "l", 2, &cfg, Group::Decoder).unwrap();
    // eval mode so batch statistics do not couple distant pixels
    let x: Tensor<f64> = random_tensor(&mut rng(11), &[1, 2, 15, 15], 1.0);
    let (py, px) = (7usize, 6usize);
    let reach = 2isize; // max(context radius 1·2, attend radius 1·2)
    let eval = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let mut bind = reg.bind(&mut t);
        let f = t.constant(x.clone());
        let out = picanet::local_picanet_forward(&mut t, &mut bind, "l", f, &cfg, Mode::Eval).unwrap();
        (0..2).map(|c| t.value(out.features).at4(0, c, py, px)).collect::<Vec<_>>()
    };
    let masked = Tensor::from_fn(&[1, 2, 15, 15], |i| {
        let (y, xx) = ((i / 15 % 15) as isize, (i % 15) as isize);
        if (y - py as isize).abs() <= reach && (xx - px as isize).abs() <= reach {
            x.data()[i]
        } else {
            0.0
        }
    });
    assert_eq!(eval(&x), eval(&masked));
    // a pixel at the edge of the reach does matter
    let mut probe = x.clone();
    probe.data_mut()[py * 15 + px + 2] += 1.0;
    assert_ne!(eval(&x), eval(&probe));
}

#[test]
fn local_average_pool_is_uniform_local_attention() {
    let mut r = rng(12);
    let f: Tensor<f64> = random_tensor(&mut r, &[2, 3, 5, 6], 1.0);
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let pooled = t.pooled_context(fv, PoolMode::Avg, &Footprint::Local { grid: (3, 3), dilation: 1 }).unwrap();
    let a = t.constant(Tensor::full(&[2, 9, 5, 6], 1.0 / 9.0));
    let attended = t.local_attend(fv, a, (3, 3), 1).unwrap();
    assert!(t.value(pooled).max_abs_diff(t.value(attended)) <= 1e-6);
}

#[test]
fn global_picanet_shapes_and_normalization() {
    let g = GlobalConfig { renet_hidden: 5, attn_grid: (4, 4), dilation: 3, bn_before_softmax: true, renet_passes: 1 };
    let mut reg = ParamRegistry::<f32>::new();
    picanet::register_global(&mut reg, &mut Init::new(3), "g", 8, &g, Group::Decoder).unwrap();
    let mut t = Tape::new();
    let mut bind = reg.bind(&mut t);
    let f = t.constant(random_tensor(&mut rng(13), &[1, 8, 12, 12], 1.0));
    let out = picanet::global_picanet_forward(&mut t, &mut bind, "g", f, &g, Mode::Train).unwrap();
    assert_eq!(t.shape(out.features), &[1, 8, 12, 12]);
    assert_eq!(t.shape(out.attention), &[1, 16, 12, 12]);
    let field = picanet::AttentionField { weights: t.value(out.attention).clone(), grid: (4, 4), dilation: 3 };
    assert!(field.max_normalization_error() <= 1e-6);
}

#[test]
fn fd_certification_of_the_modules() {
    for op in ["renet_sweep", "global_attend", "local_attend", "global_picanet_forward", "local_picanet_forward"] {
        for seed in [11, 12] {
            let e = picanet_core::gradcheck::check_op(op, seed, None).unwrap();
            assert!(e <= picanet_core::gradcheck::FD_TOLERANCE, "{op} seed {seed}: {e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attended_outputs_are_convex_combinations(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, d in 1usize..4, g in 0usize..3) {
        let mut r = rng(seed);
        let grid = (2 * g + 1, 2 * g + 1);
        let f: Tensor<f64> = random_tensor(&mut r, &[1, 2, h, w], 1.0);
        let a = random_attention(&mut r, 1, grid.0 * grid.1, h, w);
        let local = run_local(&f, &a, grid, d);
        let positions = attention_positions(w, h, grid, d);
        let global = run_global(&f, &a, &positions);
        for c in 0..2 { for y in 0..h { for x in 0..w {
            let (lo, hi) = min_max_context(&f, 0, c, &taps(y, x, grid, d));
            let v = local.at4(0, c, y, x);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            let (lo, hi) = min_max_context(&f, 0, c, &positions);
            let v = global.at4(0, c, y, x);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }}}
    }

    #[test]
    fn attending_is_linear_in_features(seed in any::<u64>(), a_ in -2.0f64..2.0, b_ in -2.0f64..2.0) {
        let mut r = rng(seed);
        let (h, w) = (5, 6);
        let f1: Tensor<f64> = random_tensor(&mut r, &[1, 2, h, w], 1.0);
        let f2: Tensor<f64> = random_tensor(&mut r, &[1, 2, h, w], 1.0);
        let mix = Tensor::from_fn(&[1, 2, h, w], |i| a_ * f1.data()[i] + b_ * f2.data()[i]);
        let att = random_attention(&mut r, 1, 9, h, w);
        let positions = attention_positions(w, h, (3, 3), 2);
        let combine = |x: Tensor<f64>, y: Tensor<f64>| Tensor::from_fn(x.shape(), |i| a_ * x.data()[i] + b_ * y.data()[i]);
        let lhs = run_global(&mix, &att, &positions);
        let rhs = combine(run_global(&f1, &att, &positions), run_global(&f2, &att, &positions));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
        let lhs = run_local(&mix, &att, (3, 3), 2);
        let rhs = combine(run_local(&f1, &att, (3, 3), 2), run_local(&f2, &att, (3, 3), 2));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn anchors_follow_the_centering_formula(w in 1usize..40, a in 1usize..12, d in 1usize..5) {
        let p = attention_positions(w, w, (a, a), d);
        prop_assert_eq!(p.len(), a * a);
        let span = ((a - 1) * d + 1) as isize;
        let offset = (w as isize - span).div_euclid(2);
        prop_assert_eq!(p[0], (offset, offset));
        prop_assert_eq!(p[a - 1].1 - p[0].1, span - 1);
    }
}
