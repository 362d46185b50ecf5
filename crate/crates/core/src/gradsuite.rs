//! The finite-difference gradient suite: every tape op, every loss, the
//! curve step and both networks, checked on 8x8 inputs in both precisions.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curve::{aac_step_var, enhance_iterative_var};
use crate::error::Result;
use crate::losses::{
    expected_luminance, global_color_loss, local_color_loss, luminance_loss, smoothness_loss, ssim, stage1_total,
    stage2_total, LossWeights, SSIM_SIGMA, SSIM_WINDOW,
};
use crate::nets::{DenoisingNet, LuminanceNet, Network};
use crate::retinex::{estimation_factor_var, DEFAULT_EPSILON};
use crate::tensor::gradcheck::{check, check_against_f64, GradCheckConfig, GradCheckReport, Input};
use crate::tensor::{GaussianWindow, Real, Tape, Var};

pub const SIDE: usize = 8;
/// Tolerance for single ops in single precision.
pub const TOL_OP_F32: f64 = 1e-3;
/// Tolerance for composed graphs (losses, networks) in single precision.
pub const TOL_COMPOSED_F32: f64 = 1e-2;
pub const TOL_F64: f64 = 1e-6;
pub const STEP_F32: f64 = 1e-3;
pub const STEP_F64: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Composed,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub precision: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

type Build<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

struct Case<T: Real> {
    name: &'static str,
    kind: CaseKind,
    inputs: Vec<Input<T>>,
    /// Elements checked per input; `None` checks all.
    sample: Option<usize>,
    build: Build<T>,
}

/// Random values in `[lo, hi]` that avoid `(-gap, gap)` around each of `kinks`.
fn values<T: Real>(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                // Single-precision representable, so both passes see identical inputs.
                break T::of(v as f32 as f64);
            }
        })
        .collect()
}

/// Reduces `v` to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
fn project<T: Real>(tape: &mut Tape<T>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f6a);
    let w = values(&mut rng, n, -1.0, 1.0, &[], 0.0);
    let w = tape.constant(&shape, w)?;
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn cases<T: Real>(seed: u64) -> Vec<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = SIDE;
    let plane = vec![2, s, s];
    let img = vec![3, s, s];
    let n2 = 2 * s * s;
    let n3 = 3 * s * s;
    let mut out: Vec<Case<T>> = Vec::new();

    macro_rules! unary {
        ($name:expr, $lo:expr, $hi:expr, $kinks:expr, |$t:ident, $x:ident| $body:expr) => {{
            let x = values(&mut rng, n2, $lo, $hi, &$kinks, 0.05);
            out.push(Case {
                name: $name,
                kind: CaseKind::Op,
                inputs: vec![(plane.clone(), x)],
                sample: None,
                build: Box::new(move |$t: &mut Tape<T>, v: &[Var]| {
                    let $x = v[0];
                    let y = $body?;
                    project($t, y, seed)
                }),
            });
        }};
    }
    macro_rules! binary {
        ($name:expr, $lo:expr, $hi:expr, |$t:ident, $a:ident, $b:ident| $body:expr) => {{
            let a = values(&mut rng, n2, -1.0, 1.0, &[], 0.0);
            let b = values(&mut rng, n2, $lo, $hi, &[], 0.0);
            out.push(Case {
                name: $name,
                kind: CaseKind::Op,
                inputs: vec![(plane.clone(), a), (plane.clone(), b)],
                sample: None,
                build: Box::new(move |$t: &mut Tape<T>, v: &[Var]| {
                    let ($a, $b) = (v[0], v[1]);
                    let y = $body?;
                    project($t, y, seed)
                }),
            });
        }};
    }

    binary!("add", -1.0, 1.0, |t, a, b| t.add(a, b));
    binary!("sub", -1.0, 1.0, |t, a, b| t.sub(a, b));
    binary!("mul", -1.0, 1.0, |t, a, b| t.mul(a, b));
    binary!("div", 0.5, 1.5, |t, a, b| t.div(a, b));
    {
        let a = values(&mut rng, n2, -1.0, 1.0, &[], 0.0);
        let c = values(&mut rng, 1, 0.5, 1.5, &[], 0.0);
        out.push(Case {
            name: "mul_broadcast",
            kind: CaseKind::Op,
            inputs: vec![(plane.clone(), a), (vec![1], c)],
            sample: None,
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, seed)
            }),
        });
    }
    unary!("sigmoid", -3.0, 3.0, [], |t, x| Ok::<_, crate::Error>(t.sigmoid(x)));
    unary!("tanh", -2.0, 2.0, [], |t, x| Ok::<_, crate::Error>(t.tanh(x)));
    unary!("relu", -1.0, 1.0, [0.0], |t, x| Ok::<_, crate::Error>(t.relu(x)));
    unary!("abs", -1.0, 1.0, [0.0], |t, x| Ok::<_, crate::Error>(t.abs(x)));
    unary!("pow2", -1.0, 1.0, [], |t, x| Ok::<_, crate::Error>(t.pow2(x)));
    unary!("clamp", -1.0, 1.0, [-0.5, 0.5], |t, x| Ok::<_, crate::Error>(t.clamp(x, -0.5, 0.5)));
    unary!("mean", -1.0, 1.0, [], |t, x| {
        let m = t.mean(x);
        Ok::<_, crate::Error>(t.pow2(m))
    });
    unary!("sum", -1.0, 1.0, [], |t, x| {
        let m = t.sum(x);
        Ok::<_, crate::Error>(t.pow2(m))
    });
    unary!("channel_sum", -1.0, 1.0, [], |t, x| t.channel_sum(x));
    unary!("spatial_sum", -1.0, 1.0, [], |t, x| t.spatial_sum(x));
    unary!("slice_channels", -1.0, 1.0, [], |t, x| t.slice_channels(x, 1, 1));
    unary!("repeat_channels", -1.0, 1.0, [], |t, x| {
        let one = t.slice_channels(x, 0, 1)?;
        t.repeat_channels(one, 3)
    });
    unary!("diff_x", -1.0, 1.0, [], |t, x| t.diff_x(x));
    unary!("diff_y", -1.0, 1.0, [], |t, x| t.diff_y(x));
    {
        let window = Arc::new(GaussianWindow::new(SSIM_WINDOW, SSIM_SIGMA));
        unary!("blur", -1.0, 1.0, [], |t, x| t.blur(x, window.clone()));
    }
    {
        let x = values(&mut rng, n2, -1.0, 1.0, &[], 0.0);
        let w = values(&mut rng, 3 * 2 * 9, -0.5, 0.5, &[], 0.0);
        let b = values(&mut rng, 3, -0.5, 0.5, &[], 0.0);
        out.push(Case {
            name: "conv2d",
            kind: CaseKind::Op,
            inputs: vec![(plane.clone(), x), (vec![3, 2, 3, 3], w), (vec![3], b)],
            sample: None,
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                project(t, y, seed)
            }),
        });
    }

    // ---- losses and the curve ----
    let image = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (img.clone(), values::<T>(rng, n3, lo, hi, &[], 0.0));
    {
        let a = image(&mut rng, 0.05, 0.95);
        out.push(Case {
            name: "estimation_factor",
            kind: CaseKind::Composed,
            inputs: vec![a],
            sample: None,
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                let e = estimation_factor_var(t, v[0], DEFAULT_EPSILON)?;
                project(t, e, seed)
            }),
        });
    }
    {
        let a = image(&mut rng, 0.05, 0.95);
        let b = image(&mut rng, 0.05, 0.95);
        out.push(Case {
            name: "local_color_loss",
            kind: CaseKind::Composed,
            inputs: vec![a, b],
            sample: None,
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let eo = estimation_factor_var(t, v[0], DEFAULT_EPSILON)?;
                let ee = estimation_factor_var(t, v[1], DEFAULT_EPSILON)?;
                local_color_loss(t, eo, ee)
            }),
        });
    }
    {
        let a = image(&mut rng, 0.05, 0.95);
        out.push(Case {
            name: "global_color_loss",
            kind: CaseKind::Composed,
            inputs: vec![a],
            sample: None,
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| global_color_loss(t, v[0])),
        });
    }
    {
        let a = image(&mut rng, 0.05, 0.95);
        let b = image(&mut rng, 0.05, 0.95);
        out.push(Case {
            name: "luminance_loss",
            kind: CaseKind::Composed,
            inputs: vec![a, b],
            sample: None,
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let eo = estimation_factor_var(t, v[0], DEFAULT_EPSILON)?;
                let h = expected_luminance(t, eo, 0.8)?;
                luminance_loss(t, v[1], h)
            }),
        });
    }
    {
        let a = image(&mut rng, -1.0, 1.0);
        out.push(Case {
            name: "smoothness_loss",
            kind: CaseKind::Composed,
            inputs: vec![a],
            sample: None,
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| smoothness_loss(t, v[0])),
        });
    }
    {
        let a = image(&mut rng, 0.05, 0.95);
        let b = image(&mut rng, 0.05, 0.95);
        out.push(Case {
            name: "ssim",
            kind: CaseKind::Composed,
            inputs: vec![a, b],
            sample: None,
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| ssim(t, v[0], v[1])),
        });
    }
    {
        let a = image(&mut rng, 0.05, 0.95);
        let b = image(&mut rng, 0.05, 0.95);
        out.push(Case {
            name: "stage2_total",
            kind: CaseKind::Composed,
            inputs: vec![a, b],
            sample: None,
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| Ok(stage2_total(t, v[0], v[1], &LossWeights::default())?.total)),
        });
    }
    {
        let i = image(&mut rng, 0.05, 0.6);
        let a = image(&mut rng, -0.9, 0.9);
        let b = image(&mut rng, 0.55, 0.95);
        out.push(Case {
            name: "aac_step",
            kind: CaseKind::Composed,
            inputs: vec![i, a, b],
            sample: None,
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                let y = aac_step_var(t, v[0], v[1], v[2])?;
                project(t, y, seed)
            }),
        });
    }
    {
        // Input image and three iterations of curve maps, through the full
        // Stage I objective.
        let mut inputs = vec![image(&mut rng, 0.05, 0.4)];
        for _ in 0..3 {
            inputs.push(image(&mut rng, -0.5, 0.5));
            inputs.push(image(&mut rng, 0.6, 0.9));
        }
        out.push(Case {
            name: "stage1_total",
            kind: CaseKind::Composed,
            inputs,
            sample: None,
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let steps: Vec<(Var, Var)> = v[1..].chunks(2).map(|p| (p[0], p[1])).collect();
                let e = enhance_iterative_var(t, v[0], &steps)?;
                Ok(stage1_total(t, v[0], e, &steps, &LossWeights::default())?.total)
            }),
        });
    }

    // ---- networks ----
    {
        let mut net = LuminanceNet::new(7, 32, seed).expect("valid architecture");
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c756d);
        for l in 0..net.depth() {
            let head = &mut net.layers_mut()[2 * l + 1];
            head.weight.data.iter_mut().for_each(|w| *w = wrng.random_range(-0.05..0.05));
        }
        let inputs: Vec<Input<T>> = net
            .parameters()
            .iter()
            .map(|p| (p.shape.clone(), p.data.iter().map(|&x| T::of(x as f64)).collect()))
            .collect();
        let x = values::<T>(&mut rng, n3, 0.05, 0.4, &[], 0.0);
        out.push(Case {
            name: "luminance_net_stage1",
            kind: CaseKind::Composed,
            inputs,
            sample: Some(6),
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                let input = t.constant(&[3, s, s], x.clone())?;
                let steps = luminance_forward(t, input, v)?;
                let e = enhance_iterative_var(t, input, &steps)?;
                Ok(stage1_total(t, input, e, &steps, &LossWeights::default())?.total)
            }),
        });
    }
    {
        let mut net = DenoisingNet::new(20, 64, seed).expect("valid architecture");
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x646e);
        let last = net.layers().len() - 1;
        net.layers_mut()[last]
            .weight
            .data
            .iter_mut()
            .for_each(|w| *w = wrng.random_range(-0.02..0.02));
        let inputs: Vec<Input<T>> = net
            .parameters()
            .iter()
            .map(|p| (p.shape.clone(), p.data.iter().map(|&x| T::of(x as f64)).collect()))
            .collect();
        let target = values::<T>(&mut rng, n3, 0.2, 0.8, &[], 0.0);
        let noisy = values::<T>(&mut rng, n3, 0.2, 0.8, &[], 0.0);
        out.push(Case {
            name: "denoising_net_stage2",
            kind: CaseKind::Composed,
            inputs,
            sample: Some(3),
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                let e = t.constant(&[3, s, s], target.clone())?;
                let x = t.constant(&[3, s, s], noisy.clone())?;
                let mut feat = x;
                let last = v.len() / 2 - 1;
                for (i, wb) in v.chunks(2).enumerate() {
                    feat = t.conv2d(feat, wb[0], wb[1])?;
                    if i < last {
                        feat = t.relu(feat);
                    }
                }
                let r = t.sub(x, feat)?;
                let d = t.clamp(r, 0.0, 1.0);
                Ok(stage2_total(t, e, d, &LossWeights::default())?.total)
            }),
        });
    }
    out
}

/// Luminance-Net forward where the parameters are given as tape vars
/// (body, head interleaved, weight then bias).
fn luminance_forward<T: Real>(t: &mut Tape<T>, input: Var, params: &[Var]) -> Result<Vec<(Var, Var)>> {
    let mut feat = input;
    let mut steps = Vec::new();
    for layer in params.chunks(4) {
        let z = t.conv2d(feat, layer[0], layer[1])?;
        feat = t.relu(z);
        let raw = t.conv2d(feat, layer[2], layer[3])?;
        let a = t.slice_channels(raw, 0, 3)?;
        let b = t.slice_channels(raw, 3, 3)?;
        let alpha = t.tanh(a);
        let b = t.sigmoid(b);
        let b = t.mul_scalar(b, 0.5);
        let beta = t.add_scalar(b, 0.5);
        steps.push((alpha, beta));
    }
    Ok(steps)
}

/// Single-precision gradients against double-precision central
/// differences with step 1e-3.
pub fn run_f32(seed: u64) -> Result<Vec<CaseResult>> {
    cases::<f32>(seed)
        .into_iter()
        .zip(cases::<f64>(seed))
        .map(|(c, oracle)| {
            let cfg = GradCheckConfig {
                step: STEP_F32,
                sample_limit: c.sample,
                seed,
                richardson: false,
            };
            Ok(CaseResult {
                name: c.name,
                precision: "f32",
                tolerance: match c.kind {
                    CaseKind::Op => TOL_OP_F32,
                    CaseKind::Composed => TOL_COMPOSED_F32,
                },
                report: check_against_f64(&c.inputs, &cfg, &c.build, &oracle.build)?,
            })
        })
        .collect()
}

pub fn run_f64(seed: u64) -> Result<Vec<CaseResult>> {
    cases::<f64>(seed)
        .into_iter()
        .map(|c| {
            let cfg = GradCheckConfig {
                step: STEP_F64,
                sample_limit: c.sample,
                seed,
                richardson: true,
            };
            Ok(CaseResult {
                name: c.name,
                precision: "f64",
                tolerance: TOL_F64,
                report: check(&c.inputs, &cfg, &c.build)?,
            })
        })
        .collect()
}

/// Both passes.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut all = run_f32(seed)?;
    all.extend(run_f64(seed)?);
    Ok(all)
}
