//! Shared fixtures: hashed inputs that `oracles/losses.py` reproduces exactly,
//! and plain-loop reference versions of the losses.

#![allow(dead_code)]

use sdace::curve::{CurveMaps, CurveParams};
use sdace::ImageTensor;

const EPS: f64 = 1e-4;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 24-bit uniform value in `[0, 1)` for element `k` of `stream`.
pub fn unit(stream: u64, k: u64) -> f64 {
    (mix((stream << 32) | k) >> 40) as f64 / 16_777_216.0
}

/// `h x w x 3` interleaved values in `[lo, hi)`.
pub fn field(stream: u64, h: usize, w: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..(h * w * 3) as u64)
        .map(|k| (lo + (hi - lo) * unit(stream, k)) as f32)
        .collect()
}

pub fn image(stream: u64, h: usize, w: usize, lo: f64, hi: f64) -> ImageTensor {
    ImageTensor::new(h, w, field(stream, h, w, lo, hi)).unwrap()
}

pub struct Stage1Case {
    pub i_o: ImageTensor,
    pub i_e: ImageTensor,
    pub params: CurveParams,
}

/// Random original, enhanced image and `iters` curve map pairs.
pub fn stage1_case(base: u64, size: usize, iters: usize) -> Stage1Case {
    let iterations = (0..iters as u64)
        .map(|i| CurveMaps {
            alpha: field(base + 10 + i, size, size, -1.0, 1.0),
            beta: field(base + 20 + i, size, size, 0.5, 1.0),
        })
        .collect();
    Stage1Case {
        i_o: image(base + 1, size, size, 0.02, 0.5),
        i_e: image(base + 2, size, size, 0.05, 0.95),
        params: CurveParams {
            height: size,
            width: size,
            iterations,
        },
    }
}

fn px(img: &ImageTensor) -> Vec<[f64; 3]> {
    img.data()
        .chunks_exact(3)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect()
}

fn factor(p: [f64; 3]) -> [f64; 3] {
    let s = p[0] + p[1] + p[2] + EPS;
    [p[0] / s, p[1] / s, p[2] / s]
}

/// Forward-difference energy of an interleaved map divided by pixel count.
pub fn smooth(map: &[f32], h: usize, w: usize) -> f64 {
    let at = |y: usize, x: usize, c: usize| map[(y * w + x) * 3 + c] as f64;
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                if x + 1 < w {
                    s += (at(y, x + 1, c) - at(y, x, c)).powi(2);
                }
                if y + 1 < h {
                    s += (at(y + 1, x, c) - at(y, x, c)).powi(2);
                }
            }
        }
    }
    s / (h * w) as f64
}

/// `[lcol, gcol, lum, smo_alpha, smo_beta, total]` with default weights.
pub fn stage1_reference(case: &Stage1Case) -> [f64; 6] {
    let (h, w) = (case.i_o.height(), case.i_o.width());
    let n = (h * w) as f64;
    let o = px(&case.i_o);
    let e = px(&case.i_e);
    let mut lcol = 0.0;
    let mut lum = 0.0;
    let mut sums = [0.0; 3];
    for (po, pe) in o.iter().zip(&e) {
        let (fo, fe) = (factor(*po), factor(*pe));
        for c in 0..3 {
            lcol += (fo[c] - fe[c]).powi(2);
            sums[c] += pe[c];
        }
        let dist: f64 = fo.iter().map(|v| (v - 1.0 / 3.0).abs()).sum();
        let target = (2.4 * (1.0 - dist)).max(0.0);
        lum += (target - pe.iter().sum::<f64>()).powi(2);
    }
    lcol /= n;
    lum /= n;
    let total_sum: f64 = sums.iter().sum::<f64>() + EPS;
    let gcol: f64 = sums.iter().map(|s| (s / total_sum - 1.0 / 3.0).powi(2)).sum();
    let sa: f64 = case.params.iterations.iter().map(|m| smooth(&m.alpha, h, w)).sum();
    let sb: f64 = case.params.iterations.iter().map(|m| smooth(&m.beta, h, w)).sum();
    let total = 1000.0 * lcol + 1500.0 * gcol + 5.0 * lum + 1000.0 * sa + 5000.0 * sb;
    [lcol, gcol, lum, sa, sb, total]
}

fn gauss() -> [f64; 11] {
    let mut g = [0.0; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / 4.5).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Gaussian average of one plane, truncated at the border and renormalized.
fn blur(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gauss();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let (yy, xx) = (y as isize + dy as isize - 5, x as isize + dx as isize - 5);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        let k = g[dy] * g[dx];
                        acc += k * p[yy as usize * w + xx as usize];
                        wsum += k;
                    }
                }
            }
            out[y * w + x] = acc / wsum;
        }
    }
    out
}

pub fn ssim_reference(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w) = (a.height(), a.width());
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (mx, my) = (blur(&x, h, w), blur(&y, h, w));
        let (exx, eyy, exy) = (blur(&prod(&x, &x), h, w), blur(&prod(&y, &y), h, w), blur(&prod(&x, &y), h, w));
        let mut s = 0.0;
        for i in 0..h * w {
            let (vx, vy, cov) = (exx[i] - mx[i] * mx[i], eyy[i] - my[i] * my[i], exy[i] - mx[i] * my[i]);
            s += (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += s / (h * w) as f64;
    }
    total / 3.0
}

/// `[ssim, grad_match, grad_mag, total]` with default weights.
pub fn stage2_reference(i_e: &ImageTensor, i_d: &ImageTensor) -> [f64; 4] {
    let (h, w) = (i_e.height(), i_e.width());
    let (e, d) = (i_e.data(), i_d.data());
    let at = |v: &[f32], y: usize, x: usize, c: usize| v[(y * w + x) * 3 + c] as f64;
    let (mut matched, mut mag) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut grads = Vec::with_capacity(2);
                if x + 1 < w {
                    grads.push((at(e, y, x + 1, c) - at(e, y, x, c), at(d, y, x + 1, c) - at(d, y, x, c)));
                }
                if y + 1 < h {
                    grads.push((at(e, y + 1, x, c) - at(e, y, x, c), at(d, y + 1, x, c) - at(d, y, x, c)));
                }
                for (ge, gd) in grads {
                    matched += (ge - gd).powi(2);
                    mag += gd * gd;
                }
            }
        }
    }
    let count = (2 * h * w * 3) as f64;
    let s = ssim_reference(i_e, i_d);
    let (matched, mag) = (matched / count, mag / count);
    [s, matched, mag, -10.0 * s + 40.0 * matched + mag]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// The 34 published CIEDE2000 test pairs: `(L1, a1, b1, L2, a2, b2, dE00)`.
pub const SHARMA_PAIRS: [[f64; 7]; 34] = [
    [50.0000, 2.6772, -79.7751, 50.0000, 0.0000, -82.7485, 2.0425],
    [50.0000, 3.1571, -77.2803, 50.0000, 0.0000, -82.7485, 2.8615],
    [50.0000, 2.8361, -74.0200, 50.0000, 0.0000, -82.7485, 3.4412],
    [50.0000, -1.3802, -84.2814, 50.0000, 0.0000, -82.7485, 1.0000],
    [50.0000, -1.1848, -84.8006, 50.0000, 0.0000, -82.7485, 1.0000],
    [50.0000, -0.9009, -85.5211, 50.0000, 0.0000, -82.7485, 1.0000],
    [50.0000, 0.0000, 0.0000, 50.0000, -1.0000, 2.0000, 2.3669],
    [50.0000, -1.0000, 2.0000, 50.0000, 0.0000, 0.0000, 2.3669],
    [50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0009, 7.1792],
    [50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0010, 7.1792],
    [50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0011, 7.2195],
    [50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0012, 7.2195],
    [50.0000, -0.0010, 2.4900, 50.0000, 0.0009, -2.4900, 4.8045],
    [50.0000, -0.0010, 2.4900, 50.0000, 0.0010, -2.4900, 4.8045],
    [50.0000, -0.0010, 2.4900, 50.0000, 0.0011, -2.4900, 4.7461],
    [50.0000, 2.5000, 0.0000, 50.0000, 0.0000, -2.5000, 4.3065],
    [50.0000, 2.5000, 0.0000, 73.0000, 25.0000, -18.0000, 27.1492],
    [50.0000, 2.5000, 0.0000, 61.0000, -5.0000, 29.0000, 22.8977],
    [50.0000, 2.5000, 0.0000, 56.0000, -27.0000, -3.0000, 31.9030],
    [50.0000, 2.5000, 0.0000, 58.0000, 24.0000, 15.0000, 19.4535],
    [50.0000, 2.5000, 0.0000, 50.0000, 3.1736, 0.5854, 1.0000],
    [50.0000, 2.5000, 0.0000, 50.0000, 3.2972, 0.0000, 1.0000],
    [50.0000, 2.5000, 0.0000, 50.0000, 1.8634, 0.5757, 1.0000],
    [50.0000, 2.5000, 0.0000, 50.0000, 3.2592, 0.3350, 1.0000],
    [60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644],
    [63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630],
    [61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731],
    [35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645],
    [22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373],
    [36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146],
    [90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441],
    [90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381],
    [6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377],
    [2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082],
];
