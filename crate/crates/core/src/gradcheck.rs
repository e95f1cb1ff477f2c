//! Finite differences and the analytic-vs-numeric comparison used to
//! certify every backward rule.
//!
//! Numeric derivatives are Richardson-extrapolated central differences.
//! Each coordinate is estimated at steps h and h/2; when the two disagree
//! the step shrinks by 10, which steps past ReLU and max-pool kinks that a
//! fixed step would straddle. The estimate with the smallest disagreement
//! is kept.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::net::{NetworkSpec, SaliencyNet};
use crate::nn::{self, Group, Init, ParamRegistry};
use crate::ops::{LstmWeights, Mode, RunningStats};
use crate::picanet::{self, attention_positions, GlobalConfig, LocalConfig};
use crate::tensor::Tensor;

/// Plain central-difference step in 64-bit mode.
pub const FD_STEP: f64 = 1e-4;
/// Starting step of [`refined_derivative`].
pub const REFINE_STEP: f64 = 1e-3;
/// Pass threshold on the maximum relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;
const SHRINKS: usize = 6;
const AGREEMENT: f64 = 1e-6;

/// Central difference, plus the larger magnitude of the two probes.
fn central(f: &mut impl FnMut(&Tensor<f64>) -> f64, probe: &mut Tensor<f64>, i: usize, h: f64) -> (f64, f64) {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let up = f(probe);
    probe.data_mut()[i] = orig - h;
    let down = f(probe);
    probe.data_mut()[i] = orig;
    ((up - down) / (2.0 * h), up.abs().max(down.abs()))
}

/// Numeric partial derivative along coordinate `i`, refined as described
/// in the module docs. Each level is scored by the coarse/fine gap plus the
/// rounding noise expected at that step, so tiny steps whose differences
/// have collapsed to a few ulps do not win.
pub fn refined_derivative(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, i: usize, step: f64) -> f64 {
    let mut probe = x.clone();
    let mut h = step;
    let mut best = (f64::INFINITY, f64::NAN);
    for _ in 0..SHRINKS {
        let (coarse, scale) = central(&mut f, &mut probe, i, h);
        let (fine, _) = central(&mut f, &mut probe, i, h / 2.0);
        let extrapolated = (4.0 * fine - coarse) / 3.0;
        let noise = 16.0 * f64::EPSILON * scale.max(1.0) / h;
        let score = (coarse - fine).abs() + noise;
        if score < best.0 {
            best = (score, extrapolated);
        }
        if score <= AGREEMENT * extrapolated.abs().max(REL_FLOOR) + noise {
            break;
        }
        h /= 10.0;
    }
    best.1
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        grad.data_mut()[i] = central(&mut f, &mut probe, i, step).0;
    }
    grad
}

/// [`refined_derivative`] over every coordinate of `x`.
pub fn refined_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        grad.data_mut()[i] = refined_derivative(&mut f, x, i, step);
    }
    grad
}

/// `|a − b| / max(REL_FLOOR, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let e = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// How a gradient check probes its inputs.
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub coords_per_input: Option<usize>,
    pub seed: u64,
    /// Op whose backward rule is deliberately corrupted (negative control).
    pub fault: Option<&'static str>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: REFINE_STEP, coords_per_input: None, seed: 0, fault: None }
    }
}

/// Compare backward() against refined finite differences for a scalar
/// function of several inputs. `build` records the computation on a fresh tape given
/// one parameter leaf per input and returns the scalar output.
///
/// Returns the maximum relative error over all coordinates of all inputs.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_opts(build, inputs, &CheckOptions { step, ..CheckOptions::default() })
}

/// As [`check_gradients`], optionally injecting a backward fault into the
/// named op.
pub fn check_gradients_with<F>(build: F, inputs: &[Tensor<f64>], step: f64, fault: Option<&'static str>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_opts(build, inputs, &CheckOptions { step, fault, ..CheckOptions::default() })
}

pub fn check_gradients_opts<F>(build: F, inputs: &[Tensor<f64>], opts: &CheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    if let Some(op) = opts.fault {
        tape.inject_backward_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(&tape, v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = inputs[k].len();
        let coords: Vec<usize> = match opts.coords_per_input {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut values = inputs.to_vec();
        let mut failure = None;
        for i in coords {
            let numeric = refined_derivative(
                |probe| {
                    values[k] = probe.clone();
                    eval(&values).unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        f64::NAN
                    })
                },
                &inputs[k],
                i,
                opts.step,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let e = relative_error(analytic.data()[i], numeric);
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// One row of the operator certification table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Operators certified by [`run_suite`], in table order.
pub const SUITE: &[&str] = &[
    "conv2d",
    "batch_norm",
    "channel_softmax",
    "lstm_cell",
    "renet_sweep",
    "global_attend",
    "local_attend",
    "global_picanet_forward",
    "local_picanet_forward",
    "bilinear_upsample2x",
    "max_pool2",
    "bce",
    "network",
];

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    nn::random_tensor(rng, shape, scale)
}

/// `Σ rᵢ·yᵢ` with fixed random weights, so every output coordinate reaches
/// the gradient with a distinct factor.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(rand_t(&mut rng, &shape, 1.0));
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

/// Small registry-backed module check: the registry's trainable tensors
/// and the extra inputs all become probed leaves.
fn check_module<F>(reg: &ParamRegistry<f64>, extra: Vec<Tensor<f64>>, opts: &CheckOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &mut nn::Binding<f64>, &[Var]) -> Result<Var>,
{
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(reg.entries().iter().filter(|e| e.trainable).map(|e| e.tensor.clone()));
    check_gradients_opts(
        |tape, vars| {
            let mut bind = reg.bind_with(&vars[n_extra..])?;
            f(tape, &mut bind, &vars[..n_extra])
        },
        &inputs,
        opts,
    )
}

/// Toy network shrunk to a 32×32 input and batch 2 so that sampled
/// coordinates of every parameter tensor fit the time budget.
pub fn suite_network_spec() -> NetworkSpec {
    let mut spec = NetworkSpec::toy();
    spec.input_size = 32;
    spec
}

/// Maximum relative error of `op` over one random instance.
pub fn check_op(op: &str, seed: u64, fault: Option<&'static str>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0xc0ff_ee);
    let opts = CheckOptions { seed, fault, ..CheckOptions::default() };
    let s = seed;
    match op {
        "conv2d" => {
            // cycle through stride, dilation and kernel geometries
            let (k, stride, dil) = [(3, 1, 1), (3, 1, 2), (3, 2, 1), (1, 1, 1), (5, 1, 2)][(seed % 5) as usize];
            let pad = dil * (k - 1) / 2;
            let x = rand_t(&mut rng, &[2, 3, 7, 6], 1.0);
            let w = rand_t(&mut rng, &[4, 3, k, k], 0.5);
            let b = rand_t(&mut rng, &[4], 0.5);
            check_gradients_opts(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, dil, pad)?;
                    weighted_sum(t, y, s)
                },
                &[x, w, b],
                &opts,
            )
        }
        "batch_norm" => {
            let x = rand_t(&mut rng, &[3, 4, 3, 2], 1.0);
            let g = rand_t(&mut rng, &[4], 1.5);
            let b = rand_t(&mut rng, &[4], 0.5);
            check_gradients_opts(
                |t, v| {
                    let mut state = RunningStats::new(4);
                    let y = t.batch_norm(v[0], v[1], v[2], Mode::Train, &mut state)?;
                    weighted_sum(t, y, s)
                },
                &[x, g, b],
                &opts,
            )
        }
        "channel_softmax" => {
            let x = rand_t(&mut rng, &[2, 5, 3, 4], 3.0);
            check_gradients_opts(
                |t, v| {
                    let y = t.channel_softmax(v[0])?;
                    weighted_sum(t, y, s)
                },
                &[x],
                &opts,
            )
        }
        "lstm_cell" => {
            let (b, i, h) = (3, 4, 5);
            let inputs = vec![
                rand_t(&mut rng, &[b, i], 1.0),
                rand_t(&mut rng, &[b, h], 1.0),
                rand_t(&mut rng, &[b, h], 1.0),
                rand_t(&mut rng, &[i, 4 * h], 0.7),
                rand_t(&mut rng, &[h, 4 * h], 0.7),
                rand_t(&mut rng, &[4 * h], 0.5),
            ];
            check_gradients_opts(
                |t, v| {
                    let w = LstmWeights { w_input: v[3], w_hidden: v[4], bias: v[5] };
                    let (h1, c1) = t.lstm_cell(v[0], v[1], v[2], &w)?;
                    let both = t.concat(&[h1, c1], 1)?;
                    weighted_sum(t, both, s)
                },
                &inputs,
                &opts,
            )
        }
        "renet_sweep" => {
            let passes = 1 + (seed % 2) as usize;
            let mut reg = ParamRegistry::new();
            picanet::register_renet(&mut reg, &mut Init::new(seed), "r", 3, 3, passes, Group::Decoder)?;
            let f = rand_t(&mut rng, &[2, 3, 4, 3], 1.0);
            check_module(&reg, vec![f], &opts, |t, bind, v| {
                let y = picanet::renet_sweep(t, bind, "r", v[0], passes)?;
                weighted_sum(t, y, s)
            })
        }
        "global_attend" => {
            let (h, w) = (5, 6);
            let positions = attention_positions(w, h, (3, 3), 2);
            let f = rand_t(&mut rng, &[2, 3, h, w], 1.0);
            let a = rand_t(&mut rng, &[2, 9, h, w], 1.0);
            check_gradients_opts(
                |t, v| {
                    let y = t.global_attend(v[0], v[1], &positions)?;
                    weighted_sum(t, y, s)
                },
                &[f, a],
                &opts,
            )
        }
        "local_attend" => {
            let f = rand_t(&mut rng, &[2, 3, 5, 6], 1.0);
            let a = rand_t(&mut rng, &[2, 9, 5, 6], 1.0);
            let dil = 1 + (seed % 2) as usize;
            check_gradients_opts(
                |t, v| {
                    let y = t.local_attend(v[0], v[1], (3, 3), dil)?;
                    weighted_sum(t, y, s)
                },
                &[f, a],
                &opts,
            )
        }
        "global_picanet_forward" => {
            let cfg = GlobalConfig { renet_hidden: 3, attn_grid: (3, 3), dilation: 2, bn_before_softmax: true, renet_passes: 1 };
            let mut reg = ParamRegistry::new();
            picanet::register_global(&mut reg, &mut Init::new(seed), "g", 3, &cfg, Group::Decoder)?;
            let f = rand_t(&mut rng, &[2, 3, 5, 5], 1.0);
            check_module(&reg, vec![f], &opts, |t, bind, v| {
                let out = picanet::global_picanet_forward(t, bind, "g", v[0], &cfg, Mode::Train)?;
                weighted_sum(t, out.features, s)
            })
        }
        "local_picanet_forward" => {
            let cfg = LocalConfig {
                context_kernel: 3,
                context_dilation: 2,
                context_channels: 4,
                attn_grid: (3, 3),
                attend_dilation: 2,
                bn_before_softmax: true,
            };
            let mut reg = ParamRegistry::new();
            picanet::register_local(&mut reg, &mut Init::new(seed), "l", 3, &cfg, Group::Decoder)?;
            let f = rand_t(&mut rng, &[2, 3, 5, 5], 1.0);
            check_module(&reg, vec![f], &opts, |t, bind, v| {
                let out = picanet::local_picanet_forward(t, bind, "l", v[0], &cfg, Mode::Train)?;
                weighted_sum(t, out.features, s)
            })
        }
        "bilinear_upsample2x" => {
            let x = rand_t(&mut rng, &[2, 2, 3, 4], 1.0);
            check_gradients_opts(
                |t, v| {
                    let y = t.bilinear_upsample2x(v[0])?;
                    weighted_sum(t, y, s)
                },
                &[x],
                &opts,
            )
        }
        "max_pool2" => {
            let x = rand_t(&mut rng, &[2, 2, 4, 6], 1.0);
            check_gradients_opts(
                |t, v| {
                    let y = t.max_pool2(v[0])?;
                    weighted_sum(t, y, s)
                },
                &[x],
                &opts,
            )
        }
        "bce" => {
            let p = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random_range(0.05..0.95));
            let target = Tensor::from_fn(&[2, 1, 3, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            check_gradients_opts(|t, v| t.bce_mean(v[0], &target), &[p], &opts)
        }
        "network" => {
            let net = SaliencyNet::new(suite_network_spec())?;
            let reg = net.init_params::<f64>(seed)?;
            let size = net.spec().input_size;
            let image = rand_t(&mut rng, &[2, 3, size, size], 1.0);
            let gt = Tensor::from_fn(&[2, 1, size, size], |i| {
                let (r, c) = ((i / size) % size, i % size);
                if (r as isize - 14).abs() + (c as isize - 17).abs() < 9 {
                    1.0
                } else {
                    0.0
                }
            });
            let opts = CheckOptions { coords_per_input: Some(2), ..opts };
            check_module(&reg, vec![image], &opts, |t, bind, v| {
                let out = net.forward(t, bind, v[0], Mode::Train)?;
                net.loss(t, &out, &gt)
            })
        }
        other => Err(crate::error::Error::usage(format!("no gradient check for `{other}`; known: {}", SUITE.join(", ")))),
    }
}

/// Check every operator in [`SUITE`] over `seeds` random instances each.
/// `on_row` sees each row as soon as it is finished.
pub fn run_suite(seeds: &[u64], fault: Option<&'static str>, mut on_row: impl FnMut(&CheckRow)) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::with_capacity(SUITE.len());
    for &op in SUITE {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(check_op(op, seed, fault)?);
        }
        let row = CheckRow { op, max_rel_error: worst, passed: worst <= FD_TOLERANCE };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
