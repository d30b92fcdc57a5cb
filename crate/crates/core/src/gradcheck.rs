//! Finite-difference verification of the reverse-mode gradients.
//!
//! Every case builds a scalar loss from a few tensors on a fresh tape,
//! differentiates it, and compares each probed gradient entry against the
//! central difference `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gating::{hard_concrete, stochastic_gate_with_noise, GateConfig, GateError};
use crate::nets::{build_reconstructor, build_selector, Granularity, NetError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::trainer::pipeline::{dds_forward, Bound, GateNoise, Gating, MaskSource};
use crate::trainer::TrainError;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("gradient check {case}: {message}")]
    Invalid { case: String, message: String },
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one checked function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    /// Gradient entries compared.
    pub checked: usize,
    /// Entries skipped because the loss has a kink within one step: the
    /// two one-sided slopes disagree and the analytic value matches one.
    pub kinks: usize,
    pub max_rel_err: f64,
    /// Input index and flat element of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Masked features whose input gradient was not exactly zero.
    pub zero_grad_violations: usize,
}

impl CaseReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance && self.zero_grad_violations == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CaseReport> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.checked).sum()
    }

    pub fn kinks(&self) -> usize {
        self.cases.iter().map(|c| c.kinks).sum()
    }

    pub fn zero_grad_violations(&self) -> usize {
        self.cases.iter().map(|c| c.zero_grad_violations).sum()
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.cases.iter().all(|c| c.passed(tolerance))
    }

    pub fn extend(&mut self, other: GradcheckReport) {
        self.cases.extend(other.cases);
    }
}

/// Which entries of each input to probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Probes {
    All,
    /// At most this many distinct entries per input, drawn at random.
    Sample(usize),
    /// The listed entries of each input.
    Explicit(Vec<Vec<usize>>),
}

type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradcheckError> + 'a;

fn evaluate(inputs: &[Tensor<f64>], build: &Builder<'_>) -> Result<f64, GradcheckError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item().unwrap_or(f64::NAN))
}

/// Compares analytic and numeric gradients of `build` with respect to every
/// input. `corrupt` names an op whose backward rule is deliberately broken
/// for the analytic pass.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    probes: &Probes,
    rng: &mut impl Rng,
    corrupt: Option<&'static str>,
    build: &Builder<'_>,
) -> Result<CaseReport, GradcheckError> {
    let mut tape = Tape::new();
    if let Some(op) = corrupt {
        tape.corrupt_backward(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.shape(loss).is_empty() {
        return Err(GradcheckError::Invalid {
            case: name.into(),
            message: format!("loss has shape {:?}", tape.shape(loss)),
        });
    }
    tape.backward(loss)?;
    let f0 = tape.value(loss).item().unwrap_or(f64::NAN);

    let mut report = CaseReport {
        name: name.into(),
        checked: 0,
        kinks: 0,
        max_rel_err: 0.0,
        worst: None,
        zero_grad_violations: 0,
    };
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        let n = inputs[k].numel();
        let indices: Vec<usize> = match probes {
            Probes::All => (0..n).collect(),
            Probes::Sample(s) if *s >= n => (0..n).collect(),
            Probes::Sample(s) => rand::seq::index::sample(rng, n, *s).into_vec(),
            Probes::Explicit(lists) => lists.get(k).cloned().unwrap_or_default(),
        };
        for i in indices {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let fp = evaluate(&work, build)?;
            work[k].data_mut()[i] = orig - STEP;
            let fm = evaluate(&work, build)?;
            work[k].data_mut()[i] = orig;
            let a = analytic[i];
            let central = (fp - fm) / (2.0 * STEP);
            let mut err = relative_error(a, central);
            if !err.is_finite() {
                err = f64::INFINITY;
            }
            if err > TOLERANCE {
                let forward = (fp - f0) / STEP;
                let backward = (f0 - fm) / STEP;
                let one_sided = relative_error(a, forward).min(relative_error(a, backward));
                if one_sided <= TOLERANCE && relative_error(forward, backward) > TOLERANCE {
                    report.kinks += 1;
                    continue;
                }
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst = Some((k, i));
            }
        }
    }
    Ok(report)
}

/// Reduces `out` to a scalar with fixed random weights, so every entry of
/// the output contributes a distinct slope.
fn weighted_sum(
    tape: &mut Tape<f64>,
    out: Var,
    weights: &Tensor<f64>,
) -> Result<Var, GradcheckError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod)?)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values whose magnitude is at least `gap`, with random sign.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn out_weights(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradcheckError>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    apply: OpFn,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let b = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=3);
    let hw = 2 * rng.gen_range(2..=3);
    let img = [b, c, hw, hw];
    let mut cases = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor<f64>>, apply: OpFn| {
        cases.push(OpCase {
            name,
            inputs,
            apply,
        })
    };

    type Bin = fn(&mut Tape<f64>, Var, Var) -> Result<Var, TensorError>;
    let binaries: [(&'static str, Bin); 4] = [
        ("add", Tape::add),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
        ("div", Tape::div),
    ];
    for (name, op) in binaries {
        let denom = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            Tensor::from_fn(shape.to_vec(), |_| {
                let m = rng.gen_range(0.5..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
        };
        let shapes: [(&'static str, Vec<usize>, Vec<usize>); 5] = [
            ("same", img.to_vec(), img.to_vec()),
            ("right_scalar", img.to_vec(), vec![]),
            ("left_scalar", vec![], img.to_vec()),
            ("right_batch", img.to_vec(), img[1..].to_vec()),
            ("right_unit_batch", img.to_vec(), vec![1, c, hw, hw]),
        ];
        for (label, sa, sb) in shapes {
            let a = uniform(rng, &sa, -1.0, 1.0);
            let bt = if name == "div" {
                denom(rng, &sb)
            } else {
                uniform(rng, &sb, -1.0, 1.0)
            };
            let out_shape = if sa.is_empty() {
                sb.clone()
            } else {
                sa.clone()
            };
            let w = out_weights(rng, &out_shape);
            let full: &'static str = Box::leak(format!("{name}/{label}").into_boxed_str());
            push(
                full,
                vec![a, bt],
                Box::new(move |t, v| {
                    let y = op(t, v[0], v[1])?;
                    weighted_sum(t, y, &w)
                }),
            );
        }
    }

    let x = uniform(rng, &img, -1.0, 1.0);
    let w = out_weights(rng, &img);
    let k: f64 = rng.gen_range(-2.0..2.0);
    {
        let w = w.clone();
        push(
            "add_scalar",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.add_scalar(v[0], k)?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let w = w.clone();
        push(
            "mul_scalar",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.mul_scalar(v[0], k)?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let w = w.clone();
        let d = if k.abs() < 0.5 { 0.5 + k.abs() } else { k };
        push(
            "div_scalar",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.div_scalar(v[0], d)?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let w = w.clone();
        push(
            "relu",
            vec![away_from_zero(rng, &img, 0.05)],
            Box::new(move |t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let w = w.clone();
        let xs = uniform(rng, &img, -6.0, 6.0);
        push(
            "sigmoid",
            vec![xs],
            Box::new(move |t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let w = w.clone();
        let xc = Tensor::from_fn(img.to_vec(), |_| match rng.gen_range(0..3) {
            0 => rng.gen_range(-1.0..-0.05),
            1 => rng.gen_range(0.05..0.95),
            _ => rng.gen_range(1.05..2.0),
        });
        push(
            "clamp01",
            vec![xc],
            Box::new(move |t, v| {
                let y = t.clamp01(v[0])?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let (n, kk, m) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=5),
            rng.gen_range(1..=4),
        );
        let a = uniform(rng, &[n, kk], -1.0, 1.0);
        let bm = uniform(rng, &[kk, m], -1.0, 1.0);
        let w = out_weights(rng, &[n, m]);
        push(
            "matmul",
            vec![a, bm],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    for (label, kernel, stride) in [("conv2d/k3s1", 3, 1), ("conv2d/k4s2", 4, 2)] {
        let cout = rng.gen_range(1..=3);
        let kt = uniform(rng, &[cout, c, kernel, kernel], -1.0, 1.0);
        let out_hw = (hw + 2 - kernel) / stride + 1;
        let w = out_weights(rng, &[b, cout, out_hw, out_hw]);
        push(
            label,
            vec![x.clone(), kt],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], stride, 1)?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let w = w.clone();
        let bias = uniform(rng, &[c], -1.0, 1.0);
        push(
            "channel_bias",
            vec![x.clone(), bias],
            Box::new(move |t, v| {
                let y = t.channel_bias(v[0], v[1])?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let scale: f64 = rng.gen_range(0.5..2.0);
        push(
            "sum",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.sum(v[0])?;
                Ok(t.mul_scalar(y, scale)?)
            }),
        );
    }
    {
        let target = uniform(rng, &img, -1.0, 1.0);
        push(
            "mse",
            vec![x.clone(), target],
            Box::new(move |t, v| Ok(t.mse(v[0], v[1])?)),
        );
    }
    {
        let flat = vec![b, c * hw * hw];
        let w = out_weights(rng, &flat);
        push(
            "reshape",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.reshape(v[0], flat.clone())?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let w = out_weights(rng, &[b, c, 2 * hw, 2 * hw]);
        push(
            "upsample2x",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.upsample2x(v[0])?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let reps = rng.gen_range(1..=3);
        let single = uniform(rng, &[b, 1, hw, hw], -1.0, 1.0);
        let w = out_weights(rng, &[b, reps, hw, hw]);
        push(
            "expand_channels",
            vec![single],
            Box::new(move |t, v| {
                let y = t.expand_channels(v[0], reps)?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let cfg = GateConfig::eval(1);
        let w = w.clone();
        let xg = gate_inputs(rng, &img, &cfg);
        push(
            "hard_concrete",
            vec![xg],
            Box::new(move |t, v| {
                let y = hard_concrete(t, v[0], &cfg)?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    {
        let cfg = GateConfig {
            kappa: 1.0,
            ..GateConfig::train(1)
        };
        let u = Tensor::from_fn(img.to_vec(), |_| rng.gen_range(0.05..0.95));
        let xg = Tensor::from_fn(img.to_vec(), |_| rng.gen_range(-0.6..0.6));
        push(
            "stochastic_gate",
            vec![xg],
            Box::new(move |t, v| {
                let y = stochastic_gate_with_noise(t, v[0], &u, &cfg)?;
                weighted_sum(t, y, &w)
            }),
        );
    }
    cases
}

/// Logits whose gate value stays clear of the clamp corners.
fn gate_inputs(rng: &mut impl Rng, shape: &[usize], cfg: &GateConfig<f64>) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let s: f64 = rng.gen_range(0.05..0.95);
        let stretched_inside = (cfg.gamma.max(0.0) - cfg.gamma) / (cfg.zeta - cfg.gamma);
        let s = s.max(stretched_inside + 0.05);
        cfg.beta * (s / (1.0 - s)).ln()
    })
}

/// Every tape op, with every broadcast form, at random shapes and values
/// chosen away from non-differentiable points.
pub fn op_suite(
    seed: u64,
    corrupt: Option<&'static str>,
) -> Result<GradcheckReport, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = op_cases(&mut rng);
    let mut report = GradcheckReport::default();
    for case in cases {
        report.cases.push(check_gradients(
            case.name,
            &case.inputs,
            &Probes::All,
            &mut rng,
            corrupt,
            &*case.apply,
        )?);
    }
    Ok(report)
}

/// A three-layer perceptron with ReLU hidden layers.
pub fn mlp_check(seed: u64, corrupt: Option<&'static str>) -> Result<CaseReport, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [5, 7, 6, 3];
    let batch = 4;
    let mut inputs = vec![uniform(&mut rng, &[batch, dims[0]], -1.0, 1.0)];
    for w in dims.windows(2) {
        inputs.push(uniform(&mut rng, &[w[0], w[1]], -0.8, 0.8));
        inputs.push(uniform(&mut rng, &[w[1]], -0.2, 0.2));
    }
    let target = uniform(&mut rng, &[batch, dims[3]], -1.0, 1.0);
    check_gradients(
        "mlp",
        &inputs,
        &Probes::All,
        &mut rng,
        corrupt,
        &move |t, v| {
            let mut h = v[0];
            for layer in 0..3 {
                let z = t.matmul(h, v[1 + 2 * layer])?;
                let z = t.add(z, v[2 + 2 * layer])?;
                h = if layer < 2 { t.relu(z)? } else { z };
            }
            let y = t.constant(target.clone());
            Ok(t.mse(h, y)?)
        },
    )
}

/// The selector → gate → reconstructor composition on a random image with
/// a fixed mask and fixed gate noise.
///
/// Two cases are produced. In `composition/self` the selector reads the
/// gated input itself, so its gradient reaches `x` too. In
/// `composition/detached` the selector reads a constant copy of `x`; the
/// input gradient must then be exactly zero on every masked feature.
pub fn composition_check(
    seed: u64,
    corrupt: Option<&'static str>,
    param_probes: usize,
) -> Result<GradcheckReport, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = rng.gen_range(1..=2);
    let size = 8;
    let batch = 2;
    let shape = [channels, size, size];
    let granularity = if rng.gen_bool(0.5) {
        Granularity::Pixel
    } else {
        Granularity::Feature
    };
    let selector = build_selector::<f64>(2, &shape, true, granularity, &mut rng)?;
    let reconstructor = build_reconstructor::<f64>(2, 4, &shape, rng.gen_bool(0.5), &mut rng)?;
    let x = uniform(&mut rng, &[batch, channels, size, size], 0.0, 1.0);
    let score_channels = match granularity {
        Granularity::Pixel => 1,
        Granularity::Feature => channels,
    };
    let score_shape = [batch, score_channels, size, size];
    let per_row = score_channels * size * size;
    let m = rng.gen_range(1..per_row);
    let mut mask = Tensor::zeros(score_shape.to_vec());
    for row in 0..batch {
        for j in rand::seq::index::sample(&mut rng, per_row, m) {
            mask.data_mut()[row * per_row + j] = 1.0;
        }
    }
    let u = Tensor::from_fn(score_shape.to_vec(), |_| rng.gen_range(0.05..0.95));
    let gate = GateConfig::train(m);
    let target = uniform(&mut rng, &[batch, channels, size, size], 0.0, 1.0);

    let n_sel = selector.params.len();
    let mut inputs = vec![x.clone()];
    inputs.extend(selector.params.iter().map(|p| p.value.clone()));
    inputs.extend(reconstructor.params.iter().map(|p| p.value.clone()));

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let param_total: usize = sizes[1..].iter().sum();
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    lists[0] = (0..sizes[0]).collect();
    for pick in rand::seq::index::sample(&mut rng, param_total, param_probes.min(param_total)) {
        let mut rest = pick;
        for (k, &n) in sizes.iter().enumerate().skip(1) {
            if rest < n {
                lists[k].push(rest);
                break;
            }
            rest -= n;
        }
    }
    let probes = Probes::Explicit(lists);

    let mut report = GradcheckReport::default();
    for detached in [false, true] {
        let build = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, GradcheckError> {
            let sel_in = if detached {
                t.constant(x.clone())
            } else {
                v[0]
            };
            let fwd = dds_forward(
                t,
                Bound {
                    net: &selector,
                    params: &v[1..1 + n_sel],
                },
                Bound {
                    net: &reconstructor,
                    params: &v[1 + n_sel..],
                },
                v[0],
                sel_in,
                Gating {
                    config: &gate,
                    noise: GateNoise::Fixed(&u),
                    mask: MaskSource::Fixed(&mask),
                },
            )?;
            let y = t.constant(target.clone());
            Ok(t.mse(fwd.output, y)?)
        };
        let name = if detached {
            "composition/detached"
        } else {
            "composition/self"
        };
        let mut case = check_gradients(name, &inputs, &probes, &mut rng, corrupt, &build)?;
        if detached {
            case.zero_grad_violations = masked_input_violations(&inputs, &mask, &build)?;
        }
        report.cases.push(case);
    }
    Ok(report)
}

/// Counts masked features of input 0 whose gradient is not exactly zero.
fn masked_input_violations(
    inputs: &[Tensor<f64>],
    mask: &Tensor<f64>,
    build: &Builder<'_>,
) -> Result<usize, GradcheckError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grad = tape
        .grad(vars[0])
        .map(|g| g.data().to_vec())
        .unwrap_or_default();
    let xs = inputs[0].shape();
    let (batch, channels, plane) = (xs[0], xs[1], xs[2] * xs[3]);
    let mask_channels = mask.shape()[1];
    let mut violations = 0;
    for b in 0..batch {
        for c in 0..channels {
            let mc = if mask_channels == 1 { 0 } else { c };
            for p in 0..plane {
                let masked = mask.data()[(b * mask_channels + mc) * plane + p] == 0.0;
                let g = grad
                    .get((b * channels + c) * plane + p)
                    .copied()
                    .unwrap_or(0.0);
                if masked && g != 0.0 {
                    violations += 1;
                }
            }
        }
    }
    Ok(violations)
}

/// Settings of a full gradient-check run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub seeds: u64,
    /// Parameter entries probed per composition case.
    pub param_probes: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 1,
            param_probes: 48,
        }
    }
}

/// Op suite, perceptron and composition for seeds `first..first + seeds`.
pub fn run_suite(
    first: u64,
    options: SuiteOptions,
    corrupt: Option<&'static str>,
) -> Result<GradcheckReport, GradcheckError> {
    let mut report = GradcheckReport::default();
    for seed in first..first + options.seeds {
        report.extend(op_suite(seed, corrupt)?);
        report.cases.push(mlp_check(seed, corrupt)?);
        report.extend(composition_check(seed, corrupt, options.param_probes)?);
    }
    Ok(report)
}
