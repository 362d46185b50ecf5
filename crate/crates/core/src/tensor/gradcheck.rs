//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it does not share any
//! code path with [`Tape::backward`](super::Tape::backward).
//!
//! Relative error per element is `|a - n| / max(|a|, |n|, floor)` where
//! `floor` is 1% of the largest gradient magnitude seen for the same input.
//! The floor keeps elements whose true gradient is negligible next to the
//! rest of the tensor from being judged on rounding noise alone.
//!
//! A central difference is only meaningful when both probes stay on the
//! same smooth piece as the unperturbed point. When a probe crosses a
//! `relu`, `abs` or `clamp` kink (see [`Tape::kink_signature`]) the step is
//! shrunk tenfold, at most four times.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation applied to each element (central difference uses ±step).
    pub step: f64,
    /// Check at most this many elements per input; `None` checks all.
    pub sample_limit: Option<usize>,
    pub seed: u64,
    /// Also probe at ±2·step and extrapolate away the second-order error.
    pub richardson: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            sample_limit: None,
            seed: 0,
            richardson: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose step had to be shrunk to avoid a kink.
    pub refined: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// An input tensor to a checked function: shape and values.
pub type Input<T> = (Vec<usize>, Vec<T>);

/// Compares backward gradients of `build` against central differences
/// evaluated in the same precision.
///
/// `build` receives one [`Var`] per input and must return a scalar.
pub fn check<T, F>(inputs: &[Input<T>], cfg: &GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &build)?;
    compare(inputs, cfg, &analytic, |perturbed| forward(perturbed, &build))
}

/// Like [`check`], but the finite differences come from `oracle`, the same
/// graph built in double precision at the same (exactly widened) inputs.
/// This separates backward errors from single-precision forward rounding.
pub fn check_against_f64<T, F, G>(inputs: &[Input<T>], cfg: &GradCheckConfig, build: F, oracle: G) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &build)?;
    compare(inputs, cfg, &analytic, |perturbed| {
        let wide: Vec<Input<f64>> = perturbed
            .iter()
            .map(|(s, d)| (s.clone(), d.iter().map(|v| v.as_f64()).collect()))
            .collect();
        forward(&wide, &oracle)
    })
}

fn analytic_grads<T, F>(inputs: &[Input<T>], build: &F) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<T>::new();
    let vars = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(shape, data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, data))| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; data.len()],
        })
        .collect())
}

fn forward<T, F>(inputs: &[Input<T>], build: &F) -> Result<(f64, u64)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut t = Tape::<T>::new();
    let vs = inputs
        .iter()
        .map(|(s, d)| t.constant(s, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let r = build(&mut t, &vs)?;
    Ok((t.item(r).as_f64(), t.kink_signature()))
}

fn compare<T, E>(inputs: &[Input<T>], cfg: &GradCheckConfig, analytic: &[Vec<f64>], mut eval: E) -> Result<GradCheckReport>
where
    T: Real,
    E: FnMut(&[Input<T>]) -> Result<(f64, u64)>,
{
    const MAX_REFINE: usize = 4;
    let (_, base) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Input<T>> = inputs.to_vec();
    for (k, (_, data)) in inputs.iter().enumerate() {
        let n = data.len();
        let indices: Vec<usize> = match cfg.sample_limit {
            Some(limit) if limit < n => {
                let mut idx = sample(&mut rng, n, limit).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut pairs = Vec::with_capacity(indices.len());
        for &i in &indices {
            let orig = data[i];
            let mut step = cfg.step;
            let mut refine = 0;
            let reach = if cfg.richardson { 2 } else { 1 };
            let numeric = loop {
                let mut slopes = [0.0; 2];
                let mut spans = [0.0; 2];
                let mut clean = true;
                for r in 0..reach {
                    let h = step * (r + 1) as f64;
                    let plus_x = T::of(orig.as_f64() + h);
                    let minus_x = T::of(orig.as_f64() - h);
                    work[k].1[i] = plus_x;
                    let (plus, sp) = eval(&work)?;
                    work[k].1[i] = minus_x;
                    let (minus, sm) = eval(&work)?;
                    work[k].1[i] = orig;
                    // Divide by the step actually taken after rounding to T.
                    spans[r] = plus_x.as_f64() - minus_x.as_f64();
                    slopes[r] = (plus - minus) / spans[r];
                    clean &= sp == base && sm == base;
                }
                if clean || refine == MAX_REFINE {
                    break if cfg.richardson {
                        let ratio = (spans[1] / spans[0]).powi(2);
                        slopes[0] + (slopes[0] - slopes[1]) / (ratio - 1.0)
                    } else {
                        slopes[0]
                    };
                }
                refine += 1;
                step /= 10.0;
            };
            if refine > 0 {
                report.refined += 1;
            }
            pairs.push((i, analytic[k][i], numeric));
        }
        let scale = pairs
            .iter()
            .map(|&(_, a, n)| a.abs().max(n.abs()))
            .fold(0.0, f64::max);
        let floor = (1e-2 * scale).max(f64::MIN_POSITIVE);
        for (i, a, num) in pairs {
            let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Mismatch {
                    input: k,
                    index: i,
                    analytic: a,
                    numeric: num,
                });
            }
        }
    }
    Ok(report)
}
