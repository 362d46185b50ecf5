//! Training objectives.
//!
//! Stage I combines four self-reference terms computed from the input and
//! enhanced images: local color (estimation factors should not move), global
//! color (gray world), luminance (channel sum should reach a target derived
//! from the input chromaticity) and spatial smoothness of the curve maps.
//! Stage II scores a denoised image against a pseudo ground truth with SSIM
//! and gradient terms.
//!
//! Every squared norm over an image is reduced by the mean over pixels, so
//! the weights do not depend on resolution.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::retinex::{channel_averages_var, estimation_factor_var, DEFAULT_EPSILON};
use crate::tensor::{GaussianWindow, Real, Tape, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Where the curve smoothness penalty is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SmoothnessMode {
    /// Sum of the penalty over every iteration's maps.
    #[default]
    PerIteration,
    /// Penalty on the mean map over iterations.
    MeanMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub w_lcol: f64,
    pub w_gcol: f64,
    pub w_lum: f64,
    pub w_alpha: f64,
    pub w_beta: f64,
    pub w_s: f64,
    pub w_g: f64,
    /// Expected luminance level of a neutral pixel.
    pub y: f64,
    pub smoothness: SmoothnessMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_lcol: 1000.0,
            w_gcol: 1500.0,
            w_lum: 5.0,
            w_alpha: 1000.0,
            w_beta: 5000.0,
            w_s: 10.0,
            w_g: 40.0,
            y: 0.8,
            smoothness: SmoothnessMode::PerIteration,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_lcol, self.w_gcol, self.w_lum, self.w_alpha, self.w_beta, self.w_s, self.w_g];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if !(self.y > 0.0 && self.y <= 1.0) {
            return Err(Error::OutOfRange {
                name: "y",
                value: self.y,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Breakdown {
    pub lcol: f64,
    pub gcol: f64,
    pub lum: f64,
    pub smo_alpha: f64,
    pub smo_beta: f64,
    pub total: f64,
}

impl Stage1Breakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.w_lcol * self.lcol
            + w.w_gcol * self.gcol
            + w.w_lum * self.lum
            + w.w_alpha * self.smo_alpha
            + w.w_beta * self.smo_beta
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage2Breakdown {
    pub ssim: f64,
    pub grad_match: f64,
    pub grad_mag: f64,
    pub total: f64,
}

impl Stage2Breakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        -w.w_s * self.ssim + w.w_g * self.grad_match + self.grad_mag
    }
}

/// Tape handles of every Stage I component.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Vars {
    pub lcol: Var,
    pub gcol: Var,
    pub lum: Var,
    pub smo_alpha: Var,
    pub smo_beta: Var,
    pub total: Var,
}

impl Stage1Vars {
    pub fn read<T: Real>(&self, tape: &Tape<T>) -> Stage1Breakdown {
        Stage1Breakdown {
            lcol: tape.item(self.lcol).as_f64(),
            gcol: tape.item(self.gcol).as_f64(),
            lum: tape.item(self.lum).as_f64(),
            smo_alpha: tape.item(self.smo_alpha).as_f64(),
            smo_beta: tape.item(self.smo_beta).as_f64(),
            total: tape.item(self.total).as_f64(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Vars {
    pub ssim: Var,
    pub grad_match: Var,
    pub grad_mag: Var,
    pub total: Var,
}

impl Stage2Vars {
    pub fn read<T: Real>(&self, tape: &Tape<T>) -> Stage2Breakdown {
        Stage2Breakdown {
            ssim: tape.item(self.ssim).as_f64(),
            grad_match: tape.item(self.grad_match).as_f64(),
            grad_mag: tape.item(self.grad_mag).as_f64(),
            total: tape.item(self.total).as_f64(),
        }
    }
}

/// Puts an image on the tape as a planar `[3, H, W]` constant.
pub fn image_constant<T: Real>(tape: &mut Tape<T>, img: &ImageTensor) -> Result<Var> {
    let data = img.to_planar().into_iter().map(|v| T::of(v as f64)).collect();
    tape.constant(&[3, img.height(), img.width()], data)
}

fn plane_size<T: Real>(tape: &Tape<T>, v: Var) -> Result<usize> {
    match *tape.shape(v) {
        [_, h, w] => Ok(h * w),
        ref s => Err(Error::InvalidArgument(format!("expected a [C, H, W] tensor, got {s:?}"))),
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) == tape.shape(b) {
        Ok(())
    } else {
        Err(Error::shape(op, tape.shape(a), tape.shape(b)))
    }
}

/// `sum_c mean_pixels (E_o^c - E_e^c)^2`.
pub fn local_color_loss<T: Real>(tape: &mut Tape<T>, e_o: Var, e_e: Var) -> Result<Var> {
    same_shape(tape, "local_color_loss", e_o, e_e)?;
    let n = plane_size(tape, e_o)?;
    let d = tape.sub(e_o, e_e)?;
    let sq = tape.pow2(d);
    let s = tape.sum(sq);
    Ok(tape.mul_scalar(s, 1.0 / n as f64))
}

/// `sum_c (A^c - 1/3)^2` over the channel averages of `img_e`.
pub fn global_color_loss<T: Real>(tape: &mut Tape<T>, img_e: Var) -> Result<Var> {
    let a = channel_averages_var(tape, img_e, DEFAULT_EPSILON)?;
    let d = tape.add_scalar(a, -1.0 / 3.0);
    let sq = tape.pow2(d);
    Ok(tape.sum(sq))
}

/// Target channel sum per pixel, `max(0, 3y (1 - sum_c |E_o^c - 1/3|))`,
/// shape `[1, H, W]`.
pub fn expected_luminance<T: Real>(tape: &mut Tape<T>, e_o: Var, y: f64) -> Result<Var> {
    if !(y > 0.0 && y <= 1.0) {
        return Err(Error::OutOfRange {
            name: "y",
            value: y,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let centered = tape.add_scalar(e_o, -1.0 / 3.0);
    let dist = tape.abs(centered);
    let dist = tape.channel_sum(dist)?;
    let h = tape.mul_scalar(dist, -3.0 * y);
    let h = tape.add_scalar(h, 3.0 * y);
    Ok(tape.relu(h))
}

/// `mean_pixels (H - sum_c I_e^c)^2`.
pub fn luminance_loss<T: Real>(tape: &mut Tape<T>, img_e: Var, target: Var) -> Result<Var> {
    let s = tape.channel_sum(img_e)?;
    same_shape(tape, "luminance_loss", target, s)?;
    let d = tape.sub(target, s)?;
    let sq = tape.pow2(d);
    Ok(tape.mean(sq))
}

/// `(1/N) sum_c |grad zeta^c|^2` with forward differences.
pub fn smoothness_loss<T: Real>(tape: &mut Tape<T>, map: Var) -> Result<Var> {
    let n = plane_size(tape, map)?;
    let dx = tape.diff_x(map)?;
    let dy = tape.diff_y(map)?;
    let sx = tape.pow2(dx);
    let sy = tape.pow2(dy);
    let sx = tape.sum(sx);
    let sy = tape.sum(sy);
    let s = tape.add(sx, sy)?;
    Ok(tape.mul_scalar(s, 1.0 / n as f64))
}

fn smoothness_over<T: Real>(tape: &mut Tape<T>, maps: &[Var], mode: SmoothnessMode) -> Result<Var> {
    match mode {
        SmoothnessMode::PerIteration => {
            let mut acc = smoothness_loss(tape, maps[0])?;
            for &m in &maps[1..] {
                let s = smoothness_loss(tape, m)?;
                acc = tape.add(acc, s)?;
            }
            Ok(acc)
        }
        SmoothnessMode::MeanMap => {
            let mut acc = maps[0];
            for &m in &maps[1..] {
                acc = tape.add(acc, m)?;
            }
            let mean = tape.mul_scalar(acc, 1.0 / maps.len() as f64);
            smoothness_loss(tape, mean)
        }
    }
}

/// Weighted Stage I objective. `steps` are the per-iteration `(alpha, beta)`
/// maps used to produce `i_e` from `i_o`.
pub fn stage1_total<T: Real>(
    tape: &mut Tape<T>,
    i_o: Var,
    i_e: Var,
    steps: &[(Var, Var)],
    w: &LossWeights,
) -> Result<Stage1Vars> {
    same_shape(tape, "stage1_total", i_o, i_e)?;
    if steps.is_empty() {
        return Err(Error::InvalidArgument("stage1_total needs at least one curve iteration".into()));
    }
    let e_o = estimation_factor_var(tape, i_o, DEFAULT_EPSILON)?;
    let e_e = estimation_factor_var(tape, i_e, DEFAULT_EPSILON)?;
    let lcol = local_color_loss(tape, e_o, e_e)?;
    let gcol = global_color_loss(tape, i_e)?;
    let target = expected_luminance(tape, e_o, w.y)?;
    let lum = luminance_loss(tape, i_e, target)?;
    let alphas: Vec<Var> = steps.iter().map(|s| s.0).collect();
    let betas: Vec<Var> = steps.iter().map(|s| s.1).collect();
    let smo_alpha = smoothness_over(tape, &alphas, w.smoothness)?;
    let smo_beta = smoothness_over(tape, &betas, w.smoothness)?;

    let mut total = tape.mul_scalar(lcol, w.w_lcol);
    for (term, weight) in [(gcol, w.w_gcol), (lum, w.w_lum), (smo_alpha, w.w_alpha), (smo_beta, w.w_beta)] {
        let t = tape.mul_scalar(term, weight);
        total = tape.add(total, t)?;
    }
    Ok(Stage1Vars {
        lcol,
        gcol,
        lum,
        smo_alpha,
        smo_beta,
        total,
    })
}

/// Horizontal and vertical forward differences, zero on the trailing edge.
pub fn spatial_gradient<T: Real>(tape: &mut Tape<T>, img: Var) -> Result<(Var, Var)> {
    Ok((tape.diff_x(img)?, tape.diff_y(img)?))
}

fn ssim_window() -> Arc<GaussianWindow> {
    static WINDOW: OnceLock<Arc<GaussianWindow>> = OnceLock::new();
    WINDOW
        .get_or_init(|| Arc::new(GaussianWindow::new(SSIM_WINDOW, SSIM_SIGMA)))
        .clone()
}

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), averaged over
/// channels. The window is renormalized where it overlaps the border, so the
/// output map has the input's size.
pub fn ssim<T: Real>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    same_shape(tape, "ssim", x, y)?;
    let win = ssim_window();
    let mu_x = tape.blur(x, win.clone())?;
    let mu_y = tape.blur(y, win.clone())?;
    let xx = tape.pow2(x);
    let yy = tape.pow2(y);
    let xy = tape.mul(x, y)?;
    let e_xx = tape.blur(xx, win.clone())?;
    let e_yy = tape.blur(yy, win.clone())?;
    let e_xy = tape.blur(xy, win)?;
    let mu_xx = tape.pow2(mu_x);
    let mu_yy = tape.pow2(mu_y);
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let a = tape.mul_scalar(mu_xy, 2.0);
    let a = tape.add_scalar(a, SSIM_C1);
    let b = tape.mul_scalar(cov, 2.0);
    let b = tape.add_scalar(b, SSIM_C2);
    let num = tape.mul(a, b)?;
    let c = tape.add(mu_xx, mu_yy)?;
    let c = tape.add_scalar(c, SSIM_C1);
    let d = tape.add(var_x, var_y)?;
    let d = tape.add_scalar(d, SSIM_C2);
    let den = tape.mul(c, d)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

fn mean_sq_pair<T: Real>(tape: &mut Tape<T>, gx: Var, gy: Var) -> Result<Var> {
    let count = 2 * tape.value(gx).len();
    let sx = tape.pow2(gx);
    let sy = tape.pow2(gy);
    let sx = tape.sum(sx);
    let sy = tape.sum(sy);
    let s = tape.add(sx, sy)?;
    Ok(tape.mul_scalar(s, 1.0 / count as f64))
}

/// `-w_s SSIM(I_e, I_d) + w_g |grad I_e - grad I_d|^2 + |grad I_d|^2`, both
/// gradient norms averaged over the `H x W x 3 x 2` gradient stack.
pub fn stage2_total<T: Real>(tape: &mut Tape<T>, i_e: Var, i_d: Var, w: &LossWeights) -> Result<Stage2Vars> {
    same_shape(tape, "stage2_total", i_e, i_d)?;
    let s = ssim(tape, i_e, i_d)?;
    let (ex, ey) = spatial_gradient(tape, i_e)?;
    let (dx, dy) = spatial_gradient(tape, i_d)?;
    let mx = tape.sub(ex, dx)?;
    let my = tape.sub(ey, dy)?;
    let grad_match = mean_sq_pair(tape, mx, my)?;
    let grad_mag = mean_sq_pair(tape, dx, dy)?;
    let t = tape.mul_scalar(s, -w.w_s);
    let g = tape.mul_scalar(grad_match, w.w_g);
    let total = tape.add(t, g)?;
    let total = tape.add(total, grad_mag)?;
    Ok(Stage2Vars {
        ssim: s,
        grad_match,
        grad_mag,
        total,
    })
}

// ---- plain evaluation on images ----

/// Stage I breakdown for fixed images and curve maps (interleaved `H x W x 3`).
pub fn stage1_breakdown(
    i_o: &ImageTensor,
    i_e: &ImageTensor,
    params: &crate::curve::CurveParams,
    w: &LossWeights,
) -> Result<Stage1Breakdown> {
    i_o.check_same_size(i_e, "stage1_total")?;
    let mut tape = Tape::<f64>::new();
    let o = image_constant(&mut tape, i_o)?;
    let e = image_constant(&mut tape, i_e)?;
    let (h, wd) = (i_o.height(), i_o.width());
    let mut steps = Vec::with_capacity(params.len());
    for maps in &params.iterations {
        let to_var = |tape: &mut Tape<f64>, m: &[f32]| -> Result<Var> {
            if m.len() != h * wd * 3 {
                return Err(Error::shape("stage1_total", &[h, wd, 3], &[m.len()]));
            }
            tape.constant(&[3, h, wd], interleaved_to_planar(m, h * wd))
        };
        let a = to_var(&mut tape, &maps.alpha)?;
        let b = to_var(&mut tape, &maps.beta)?;
        steps.push((a, b));
    }
    Ok(stage1_total(&mut tape, o, e, &steps, w)?.read(&tape))
}

fn interleaved_to_planar(m: &[f32], plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane * 3];
    for (p, px) in m.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px[c] as f64;
        }
    }
    out
}

pub fn stage2_breakdown(i_e: &ImageTensor, i_d: &ImageTensor, w: &LossWeights) -> Result<Stage2Breakdown> {
    i_e.check_same_size(i_d, "stage2_total")?;
    let mut tape = Tape::<f64>::new();
    let e = image_constant(&mut tape, i_e)?;
    let d = image_constant(&mut tape, i_d)?;
    Ok(stage2_total(&mut tape, e, d, w)?.read(&tape))
}

/// SSIM of two images, evaluated in double precision.
pub fn ssim_images(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    x.check_same_size(y, "ssim")?;
    let mut tape = Tape::<f64>::new();
    let a = image_constant(&mut tape, x)?;
    let b = image_constant(&mut tape, y)?;
    let s = ssim(&mut tape, a, b)?;
    Ok(tape.item(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::CurveParams;

    fn var(t: &mut Tape<f64>, img: &ImageTensor) -> Var {
        image_constant(t, img).unwrap()
    }

    fn factor(t: &mut Tape<f64>, img: &ImageTensor) -> Var {
        let v = var(t, img);
        estimation_factor_var(t, v, DEFAULT_EPSILON).unwrap()
    }

    #[test]
    fn local_color_cases() {
        let mut t = Tape::<f64>::new();
        let img = ImageTensor::new(1, 2, vec![0.1, 0.2, 0.3, 0.6, 0.5, 0.4]).unwrap();
        let e = factor(&mut t, &img);
        let l = local_color_loss(&mut t, e, e).unwrap();
        assert_eq!(t.item(l), 0.0);

        let red = ImageTensor::filled(2, 2, [1.0, 0.0, 0.0]).unwrap();
        let green = ImageTensor::filled(2, 2, [0.0, 1.0, 0.0]).unwrap();
        let (er, eg) = (factor(&mut t, &red), factor(&mut t, &green));
        let l = local_color_loss(&mut t, er, eg).unwrap();
        assert!((t.item(l) - 2.0).abs() < 1e-3, "{}", t.item(l));
    }

    #[test]
    fn global_color_cases() {
        let mut t = Tape::<f64>::new();
        let gray = ImageTensor::filled(3, 3, [0.6; 3]).unwrap();
        let g = var(&mut t, &gray);
        let l = global_color_loss(&mut t, g).unwrap();
        assert!(t.item(l) < 1e-9);
        let red = ImageTensor::filled(2, 2, [1.0, 0.0, 0.0]).unwrap();
        let r = var(&mut t, &red);
        let l = global_color_loss(&mut t, r).unwrap();
        assert!((t.item(l) - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn global_color_ignores_pixel_order() {
        let a = ImageTensor::new(1, 3, vec![0.1, 0.2, 0.3, 0.9, 0.1, 0.5, 0.4, 0.4, 0.0]).unwrap();
        let b = ImageTensor::new(1, 3, vec![0.4, 0.4, 0.0, 0.1, 0.2, 0.3, 0.9, 0.1, 0.5]).unwrap();
        let mut t = Tape::<f64>::new();
        let (va, vb) = (var(&mut t, &a), var(&mut t, &b));
        let la = global_color_loss(&mut t, va).unwrap();
        let lb = global_color_loss(&mut t, vb).unwrap();
        assert!((t.item(la) - t.item(lb)).abs() < 1e-15);
    }

    #[test]
    fn expected_luminance_cases() {
        let mut t = Tape::<f64>::new();
        let e = t.constant(&[3, 1, 2], vec![1.0 / 3.0, 1.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0]).unwrap();
        let h = expected_luminance(&mut t, e, 0.8).unwrap();
        assert!((t.value(h)[0] - 2.4).abs() < 1e-12);
        assert_eq!(t.value(h)[1], 0.0);
        assert!(expected_luminance(&mut t, e, 0.0).is_err());
    }

    #[test]
    fn expected_luminance_grows_toward_neutral() {
        let start = [0.7, 0.2, 0.1];
        let mut last = -1.0;
        for k in 0..=10 {
            let s = k as f64 / 10.0;
            let px: Vec<f64> = start.iter().map(|&v| v + s * (1.0 / 3.0 - v)).collect();
            let mut t = Tape::<f64>::new();
            let e = t.constant(&[3, 1, 1], px).unwrap();
            let h = expected_luminance(&mut t, e, 0.8).unwrap();
            assert!(t.value(h)[0] >= last);
            last = t.value(h)[0];
        }
    }

    #[test]
    fn luminance_cases() {
        let mut t = Tape::<f64>::new();
        let orig = ImageTensor::filled(2, 2, [0.2; 3]).unwrap();
        let eo = factor(&mut t, &orig);
        let h = expected_luminance(&mut t, eo, 0.8).unwrap();
        let bright = ImageTensor::filled(2, 2, [0.8; 3]).unwrap();
        let b = var(&mut t, &bright);
        let l = luminance_loss(&mut t, b, h).unwrap();
        // zero up to the epsilon offset in the estimation factor
        assert!(t.item(l) < 1e-6);
        let black = ImageTensor::filled(2, 2, [0.0; 3]).unwrap();
        let k = var(&mut t, &black);
        let l = luminance_loss(&mut t, k, h).unwrap();
        let h_exact = 2.4 * (1.0 - 3.0 * (1.0 / 3.0 - 0.2f32 as f64 / (3.0 * 0.2f32 as f64 + 1e-4)));
        assert!((t.item(l) - h_exact * h_exact).abs() < 1e-9);
        assert!((t.item(l) - 5.76).abs() < 3e-3);
        // Moving intensity between channels keeps the channel sum.
        let shuffled = ImageTensor::filled(2, 2, [0.6, 1.0, 0.8]).unwrap();
        let s = var(&mut t, &shuffled);
        let l = luminance_loss(&mut t, s, h).unwrap();
        assert!(t.item(l) < 1e-6);
    }

    #[test]
    fn smoothness_cases() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(&[3, 4, 4], vec![0.7; 48]).unwrap();
        let l = smoothness_loss(&mut t, c).unwrap();
        assert_eq!(t.item(l), 0.0);
        let m = t.constant(&[3, 2, 2], [0.0, 1.0, 0.0, 1.0].repeat(3)).unwrap();
        let l = smoothness_loss(&mut t, m).unwrap();
        assert!((t.item(l) - 1.5).abs() < 1e-15);
        let m2 = t.mul_scalar(m, 2.0);
        let l2 = smoothness_loss(&mut t, m2).unwrap();
        assert!((t.item(l2) - 6.0).abs() < 1e-15);
    }

    #[test]
    fn stage1_identity_on_bright_gray_is_zero() {
        let img = ImageTensor::filled(4, 4, [0.8; 3]).unwrap();
        let params = CurveParams::uniform(4, 4, &[(0.0, 0.75); 7]);
        let b = stage1_breakdown(&img, &img, &params, &LossWeights::default()).unwrap();
        assert_eq!(b.lcol, 0.0);
        assert!(b.gcol < 1e-10);
        assert!(b.lum < 1e-6, "{}", b.lum);
        assert_eq!((b.smo_alpha, b.smo_beta), (0.0, 0.0));
        assert!(b.total < 1e-5);
    }

    #[test]
    fn stage1_total_is_linear_in_weights() {
        let o = ImageTensor::new(1, 2, vec![0.1, 0.05, 0.2, 0.3, 0.1, 0.1]).unwrap();
        let e = ImageTensor::new(1, 2, vec![0.3, 0.2, 0.5, 0.6, 0.3, 0.4]).unwrap();
        let params = CurveParams::uniform(1, 2, &[(0.5, 0.8), (0.2, 0.6)]);
        let w = LossWeights::default();
        let b1 = stage1_breakdown(&o, &e, &params, &w).unwrap();
        let w2 = LossWeights { w_lum: 2.0 * w.w_lum, ..w.clone() };
        let b2 = stage1_breakdown(&o, &e, &params, &w2).unwrap();
        assert!((b2.total - b1.total - w.w_lum * b1.lum).abs() < 1e-9 * b1.total.abs().max(1.0));
        assert!((b1.weighted_sum(&w) - b1.total).abs() <= 1e-6 * b1.total.abs());
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(&[3, 3, 4], vec![0.4; 36]).unwrap();
        let (gx, gy) = spatial_gradient(&mut t, c).unwrap();
        assert!(t.value(gx).iter().chain(t.value(gy)).all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..36).map(|i| (i % 4) as f64 * 0.25).collect();
        let r = t.constant(&[3, 3, 4], ramp).unwrap();
        let (gx, gy) = spatial_gradient(&mut t, r).unwrap();
        for (i, &v) in t.value(gx).iter().enumerate() {
            assert_eq!(v, if i % 4 == 3 { 0.0 } else { 0.25 });
        }
        assert!(t.value(gy).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = ImageTensor::new(2, 3, (0..18).map(|i| (i as f32 * 0.31).fract()).collect()).unwrap();
        assert!((ssim_images(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let a = ImageTensor::filled(8, 8, [0.5; 3]).unwrap();
        let b = ImageTensor::filled(8, 8, [0.25; 3]).unwrap();
        let expected = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        assert!((ssim_images(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.80006).abs() < 1e-5);
    }

    #[test]
    fn stage2_special_cases() {
        let w = LossWeights::default();
        let c = ImageTensor::filled(5, 5, [0.3, 0.6, 0.2]).unwrap();
        let b = stage2_breakdown(&c, &c, &w).unwrap();
        assert!((b.total + 10.0).abs() < 1e-12);
        let g = ImageTensor::new(2, 2, vec![0.1, 0.2, 0.3, 0.5, 0.1, 0.9, 0.0, 0.4, 0.4, 1.0, 0.7, 0.2]).unwrap();
        let b = stage2_breakdown(&g, &g, &w).unwrap();
        assert_eq!(b.grad_match, 0.0);
        assert!((b.total - (-10.0 + b.grad_mag)).abs() < 1e-12);
        assert!(b.grad_mag > 0.0);
        let small = ImageTensor::filled(2, 3, [0.0; 3]).unwrap();
        assert!(stage2_breakdown(&c, &small, &w).is_err());
    }
}
