//! Adaptive adjustment curves.
//!
//! One curve step maps an intensity `I` to
//!
//! ```text
//! I + alpha * (1 / beta) * S(beta; I) * I * (beta - I),   S = sigmoid(-I + beta - 0.1)
//! ```
//!
//! with `alpha` in `[-1, 1]` and `beta` in `[0.5, 1]`, per pixel and channel.
//! Every step is followed by a clamp to `[0, 1]`. Enhancement applies the
//! steps in sequence, each with its own parameter maps.

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::{Real, Tape, Var};

pub const ALPHA_RANGE: (f64, f64) = (-1.0, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.5, 1.0);
/// Shift inside the sigmoid gate.
pub const GATE_SHIFT: f64 = 0.1;

/// How out-of-range curve parameters are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RangeMode {
    /// Reject any parameter outside its range.
    #[default]
    Checked,
    /// Clamp parameters into range silently.
    Clamp,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `sigmoid(-I + beta - 0.1)`.
#[inline]
pub fn s_curve<T: Real>(intensity: T, beta: T) -> T {
    sigmoid(beta - intensity - T::of(GATE_SHIFT))
}

/// One curve step without the output clamp.
#[inline]
pub fn aac_raw<T: Real>(intensity: T, alpha: T, beta: T) -> T {
    let gap = beta - intensity;
    let gate = sigmoid(gap - T::of(GATE_SHIFT));
    intensity + alpha / beta * gate * intensity * gap
}

/// One curve step followed by the `[0, 1]` clamp.
#[inline]
pub fn aac<T: Real>(intensity: T, alpha: T, beta: T) -> T {
    aac_raw(intensity, alpha, beta).max(T::zero()).min(T::one())
}

/// `alpha` and `beta` for one iteration, interleaved `H x W x 3` like
/// [`ImageTensor`].
#[derive(Clone, Debug, PartialEq)]
pub struct CurveMaps {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveParams {
    pub height: usize,
    pub width: usize,
    pub iterations: Vec<CurveMaps>,
}

impl CurveParams {
    /// The same scalar `(alpha, beta)` at every pixel for each iteration.
    pub fn uniform(height: usize, width: usize, schedule: &[(f32, f32)]) -> Self {
        let n = height * width * 3;
        CurveParams {
            height,
            width,
            iterations: schedule
                .iter()
                .map(|&(a, b)| CurveMaps {
                    alpha: vec![a; n],
                    beta: vec![b; n],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Checks map sizes and parameter ranges.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width * 3;
        for maps in &self.iterations {
            check_maps(&maps.alpha, &maps.beta, n, RangeMode::Checked)?;
        }
        Ok(())
    }
}

fn check_range(name: &'static str, values: &[f32], (lo, hi): (f64, f64)) -> Result<()> {
    match values.iter().find(|&&v| !(v as f64 >= lo && v as f64 <= hi)) {
        Some(&v) => Err(Error::OutOfRange {
            name,
            value: v as f64,
            lo,
            hi,
        }),
        None => Ok(()),
    }
}

fn check_maps(alpha: &[f32], beta: &[f32], n: usize, mode: RangeMode) -> Result<()> {
    if alpha.len() != n || beta.len() != n {
        return Err(Error::shape("curve maps", &[n], &[alpha.len(), beta.len()]));
    }
    if mode == RangeMode::Checked {
        check_range("alpha", alpha, ALPHA_RANGE)?;
        check_range("beta", beta, BETA_RANGE)?;
    }
    Ok(())
}

/// Applies one curve step to every pixel.
pub fn aac_step(img: &ImageTensor, alpha: &[f32], beta: &[f32], mode: RangeMode) -> Result<ImageTensor> {
    check_maps(alpha, beta, img.data().len(), mode)?;
    let (alo, ahi) = (ALPHA_RANGE.0 as f32, ALPHA_RANGE.1 as f32);
    let (blo, bhi) = (BETA_RANGE.0 as f32, BETA_RANGE.1 as f32);
    let data = img
        .data()
        .iter()
        .zip(alpha.iter().zip(beta))
        .map(|(&i, (&a, &b))| aac(i, a.clamp(alo, ahi), b.clamp(blo, bhi)))
        .collect();
    ImageTensor::new(img.height(), img.width(), data)
}

/// Applies the curve steps in order; step `i` consumes the output of step `i - 1`.
pub fn enhance_iterative(img: &ImageTensor, params: &CurveParams, mode: RangeMode) -> Result<ImageTensor> {
    if params.is_empty() {
        return Err(Error::InvalidArgument("curve parameters need at least one iteration".into()));
    }
    if params.height != img.height() || params.width != img.width() {
        return Err(Error::shape(
            "enhance_iterative",
            &[img.height(), img.width()],
            &[params.height, params.width],
        ));
    }
    let mut cur = img.clone();
    for maps in &params.iterations {
        cur = aac_step(&cur, &maps.alpha, &maps.beta, mode)?;
    }
    Ok(cur)
}

/// Samples the curve produced by `n_iter` steps with constant parameters at
/// `n_samples` evenly spaced inputs on `[0, 1]`.
pub fn curve_table(alpha: f64, beta: f64, n_samples: usize, n_iter: usize) -> Result<Vec<(f64, f64)>> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!("curve needs at least 2 samples, got {n_samples}")));
    }
    Ok((0..n_samples)
        .map(|k| {
            let x = k as f64 / (n_samples - 1) as f64;
            let y = (0..n_iter).fold(x, |v, _| aac(v, alpha, beta));
            (x, y)
        })
        .collect())
}

/// Renders a curve table as `input,output` CSV.
pub fn curve_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("input,output\n");
    for (x, y) in rows {
        s.push_str(&format!("{x:.6},{y:.6}\n"));
    }
    s
}

// ---- differentiable versions ----

/// `sigmoid(-I + beta - 0.1)` on the tape.
pub fn s_curve_var<T: Real>(tape: &mut Tape<T>, intensity: Var, beta: Var) -> Result<Var> {
    let gap = tape.sub(beta, intensity)?;
    let shifted = tape.add_scalar(gap, -GATE_SHIFT);
    Ok(tape.sigmoid(shifted))
}

/// One clamped curve step on the tape; all three inputs share a shape.
pub fn aac_step_var<T: Real>(tape: &mut Tape<T>, intensity: Var, alpha: Var, beta: Var) -> Result<Var> {
    if tape.shape(alpha) != tape.shape(intensity) {
        return Err(Error::shape("aac_step", tape.shape(intensity), tape.shape(alpha)));
    }
    if tape.shape(beta) != tape.shape(intensity) {
        return Err(Error::shape("aac_step", tape.shape(intensity), tape.shape(beta)));
    }
    let gap = tape.sub(beta, intensity)?;
    let shifted = tape.add_scalar(gap, -GATE_SHIFT);
    let gate = tape.sigmoid(shifted);
    let ratio = tape.div(alpha, beta)?;
    let term = tape.mul(ratio, gate)?;
    let term = tape.mul(term, intensity)?;
    let term = tape.mul(term, gap)?;
    let raw = tape.add(intensity, term)?;
    Ok(tape.clamp(raw, 0.0, 1.0))
}

/// Iterated curve on the tape with one `(alpha, beta)` pair per step.
pub fn enhance_iterative_var<T: Real>(tape: &mut Tape<T>, intensity: Var, steps: &[(Var, Var)]) -> Result<Var> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("curve parameters need at least one iteration".into()));
    }
    steps
        .iter()
        .try_fold(intensity, |cur, &(a, b)| aac_step_var(tape, cur, a, b))
}
