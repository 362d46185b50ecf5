//! Full-reference quality metrics and the directory evaluation harness.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{list_images, load_image, resize_bilinear, srgb_to_lab, ImageTensor, LabPixel};
use crate::losses::ssim_images;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    x.check_same_size(y, "psnr")?;
    let sse: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    let mse = sse / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// SSIM with exactly the configuration used by the Stage II loss.
pub fn ssim_metric(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    ssim_images(x, y)
}

/// CIEDE2000 colour difference with `k_L = k_C = k_H = 1`.
pub fn ciede2000(p: LabPixel, q: LabPixel) -> f64 {
    let deg = |r: f64| r * 180.0 / PI;
    let rad = |d: f64| d * PI / 180.0;

    let c1 = p.a.hypot(p.b);
    let c2 = q.a.hypot(q.b);
    let c_bar = (c1 + c2) / 2.0;
    let c7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c7 / (c7 + 25f64.powi(7))).sqrt());
    let a1 = (1.0 + g) * p.a;
    let a2 = (1.0 + g) * q.a;
    let c1p = a1.hypot(p.b);
    let c2p = a2.hypot(q.b);
    let hue = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = deg(b.atan2(a));
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1 = hue(p.b, a1);
    let h2 = hue(q.b, a2);

    let dl = q.l - p.l;
    let dc = c2p - c1p;
    let dh = if c1p * c2p == 0.0 {
        0.0
    } else if (h2 - h1).abs() <= 180.0 {
        h2 - h1
    } else if h2 - h1 > 180.0 {
        h2 - h1 - 360.0
    } else {
        h2 - h1 + 360.0
    };
    let dh_big = 2.0 * (c1p * c2p).sqrt() * rad(dh / 2.0).sin();

    let l_bar = (p.l + q.l) / 2.0;
    let cp_bar = (c1p + c2p) / 2.0;
    let h_bar = if c1p * c2p == 0.0 {
        h1 + h2
    } else if (h1 - h2).abs() <= 180.0 {
        (h1 + h2) / 2.0
    } else if h1 + h2 < 360.0 {
        (h1 + h2 + 360.0) / 2.0
    } else {
        (h1 + h2 - 360.0) / 2.0
    };
    let t = 1.0 - 0.17 * rad(h_bar - 30.0).cos() + 0.24 * rad(2.0 * h_bar).cos() + 0.32 * rad(3.0 * h_bar + 6.0).cos()
        - 0.20 * rad(4.0 * h_bar - 63.0).cos();
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let cp7 = cp_bar.powi(7);
    let r_c = 2.0 * (cp7 / (cp7 + 25f64.powi(7))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * cp_bar;
    let s_h = 1.0 + 0.015 * cp_bar * t;
    let r_t = -rad(2.0 * d_theta).sin() * r_c;

    let tl = dl / s_l;
    let tc = dc / s_c;
    let th = dh_big / s_h;
    (tl * tl + tc * tc + th * th + r_t * tc * th).sqrt()
}

/// Mean per-pixel CIEDE2000 after sRGB to Lab conversion.
pub fn ciede2000_image(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    x.check_same_size(y, "ciede2000")?;
    let lx = srgb_to_lab(x);
    let ly = srgb_to_lab(y);
    let total: f64 = lx.pixels.iter().zip(&ly.pixels).map(|(a, b)| ciede2000(*a, *b)).sum();
    Ok(total / lx.pixels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Psnr,
    Ssim,
    Ciede2000,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::Ciede2000];
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "ciede2000" | "ciede" => Ok(Metric::Ciede2000),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Scores of one image pair; metrics that were not requested are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub filename: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ciede2000: Option<f64>,
}

impl MetricRow {
    pub fn score(x: &ImageTensor, y: &ImageTensor, filename: String, metrics: &[Metric]) -> Result<Self> {
        let want = |m| metrics.contains(&m);
        Ok(MetricRow {
            filename,
            psnr: want(Metric::Psnr).then(|| psnr(x, y)).transpose()?,
            ssim: want(Metric::Ssim).then(|| ssim_metric(x, y)).transpose()?,
            ciede2000: want(Metric::Ciede2000).then(|| ciede2000_image(x, y)).transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Paired images in lexicographic file-name order.
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    /// Files present in only one directory; excluded from the means.
    pub unpaired: Vec<String>,
}

impl MetricsReport {
    fn from_rows(rows: Vec<MetricRow>, unpaired: Vec<String>) -> Self {
        let avg = |f: fn(&MetricRow) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mean = MetricRow {
            filename: "MEAN".into(),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            ciede2000: avg(|r| r.ciede2000),
        };
        MetricsReport { rows, mean, unpaired }
    }

    /// `filename,psnr,ssim,ciede2000` rows, unpaired files with `NA`
    /// scores, then the `MEAN` row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = String::from("filename,psnr,ssim,ciede2000\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.filename, cell(r.psnr), cell(r.ssim), cell(r.ciede2000));
        }
        for name in &self.unpaired {
            let _ = writeln!(s, "{name},NA,NA,NA");
        }
        let m = &self.mean;
        let _ = writeln!(s, "MEAN,{},{},{}", cell(m.psnr), cell(m.ssim), cell(m.ciede2000));
        s
    }
}

/// Pairing key: the file stem, minus an `_enh` suffix added by `enhance`.
fn pair_key(path: &Path) -> String {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    stem.strip_suffix("_enh").unwrap_or(&stem).to_string()
}

fn keyed(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?.into_iter().map(|p| (pair_key(&p), p)).collect())
}

/// Scores every prediction against the ground truth of the same name.
/// With `resize`, both images are resampled to `resize x resize` first.
pub fn evaluate_dirs(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    metrics: &[Metric],
    resize: Option<usize>,
) -> Result<MetricsReport> {
    let pred = keyed(pred_dir.as_ref())?;
    let gt = keyed(gt_dir.as_ref())?;
    let mut pairs = Vec::new();
    let mut unpaired = Vec::new();
    for (key, p) in &pred {
        match gt.get(key) {
            Some(g) => pairs.push((p.clone(), g.clone())),
            None => unpaired.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned()),
        }
    }
    for (key, g) in &gt {
        if !pred.contains_key(key) {
            unpaired.push(g.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    unpaired.sort();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no image pairs between {} and {}",
            pred_dir.as_ref().display(),
            gt_dir.as_ref().display()
        )));
    }
    let rows = pairs
        .par_iter()
        .map(|(p, g)| {
            let mut x = load_image(p)?;
            let mut y = load_image(g)?;
            if let Some(n) = resize {
                x = resize_bilinear(&x, n, n)?;
                y = resize_bilinear(&y, n, n)?;
            }
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            MetricRow::score(&x, &y, name, metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows, unpaired))
}
