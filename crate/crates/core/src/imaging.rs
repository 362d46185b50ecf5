//! RGB images in `[0, 1]`, file I/O, resizing and CIE L*a*b* conversion.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// An `H x W x 3` RGB image, row-major and interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image from interleaved RGB data, rejecting values outside
    /// `[0, 1]` (and NaN).
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                name: "pixel",
                value: *v as f64,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(ImageTensor { height, width, data })
    }

    /// Like [`new`](Self::new) but clamps into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// From a planar `[3, H, W]` buffer, clamping into range.
    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * 3 {
            return Err(Error::shape("from_planar", &[3, height, width], &[planar.len()]));
        }
        let data = (0..plane)
            .flat_map(|p| (0..3).map(move |c| planar[c * plane + p]))
            .collect();
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` copy, the layout used on the autodiff tape.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.pixel_count();
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    /// Mean over pixels of the per-pixel channel sum.
    pub fn mean_channel_sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.pixel_count() as f64
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same_size(&self, other: &ImageTensor, op: &'static str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::shape(op, &[self.height, self.width, 3], &[other.height, other.width, 3]))
        }
    }
}

/// Reads an 8- or 16-bit PNG/JPEG/BMP file. Gray inputs are replicated to
/// three channels and alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?;
    from_dynamic(img, path)
}

fn from_dynamic(img: DynamicImage, path: &Path) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedChannels {
                path: path.to_path_buf(),
                layout: format!("{:?}", other.color()),
            })
        }
    };
    ImageTensor::new(h, w, data)
}

/// Quantizes one value to 8 bits: clamp, scale, round half up.
pub fn quantize_u8(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v as f64 * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::ImageEncode {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes a single-channel plane (values clamped to `[0, 1]`) as a gray PNG.
pub fn save_gray(height: usize, width: usize, plane: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = plane.iter().map(|&v| quantize_u8(v)).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::InvalidArgument("gray plane size mismatch".into()))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::ImageEncode {
            path: path.to_path_buf(),
            source,
        })
}

/// Image files (png, jpg, jpeg, bmp) directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path.is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
                .unwrap_or(false);
        if is_image {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Resampling filter for dataset preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResizeFilter {
    #[default]
    Bilinear,
    Nearest,
}

impl FromStr for ResizeFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bilinear" => Ok(ResizeFilter::Bilinear),
            "nearest" => Ok(ResizeFilter::Nearest),
            other => Err(Error::InvalidArgument(format!("unknown resize filter {other:?} (bilinear, nearest)"))),
        }
    }
}

pub fn resize(img: &ImageTensor, out_h: usize, out_w: usize, filter: ResizeFilter) -> Result<ImageTensor> {
    match filter {
        ResizeFilter::Bilinear => resize_bilinear(img, out_h, out_w),
        ResizeFilter::Nearest => resize_nearest(img, out_h, out_w),
    }
}

/// Nearest-neighbour resampling; each output pixel copies the input pixel
/// containing its centre.
pub fn resize_nearest(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} has a zero dimension")));
    }
    let pick = |o: usize, out_len: usize, in_len: usize| (((o as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        let sy = pick(y, out_h, img.height);
        for x in 0..out_w {
            data.extend_from_slice(&img.pixel(sy, pick(x, out_w, img.width)));
        }
    }
    ImageTensor::new(out_h, out_w, data)
}

/// Bilinear resampling with half-pixel-centre alignment.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} has a zero dimension")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let ys = sample_positions(img.height, out_h);
    let xs = sample_positions(img.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..3 {
                let top = lerp(img.get(y0, x0, c), img.get(y0, x1, c), tx);
                let bottom = lerp(img.get(y1, x0, c), img.get(y1, x1, c), tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    ImageTensor::from_clamped(out_h, out_w, data)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a * (1.0 - t) + b * t
}

fn sample_positions(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabPixel {
    pub fn new(l: f64, a: f64, b: f64) -> Self {
        LabPixel { l, a, b }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<LabPixel>,
}

// Linear sRGB -> XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB triple in `[0, 1]` to L*a*b* under D65 / 2°.
///
/// The white point is the image of RGB (1, 1, 1) under the conversion
/// matrix, so neutral inputs land exactly on the L axis.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> LabPixel {
    let lin = rgb.map(srgb_decode);
    let xyz: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| RGB_TO_XYZ[r][c] * lin[c]).sum());
    let white: [f64; 3] = std::array::from_fn(|r| RGB_TO_XYZ[r].iter().sum());
    let [fx, fy, fz] = std::array::from_fn(|i| lab_f(xyz[i] / white[i]));
    LabPixel {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

pub fn srgb_to_lab(img: &ImageTensor) -> LabImage {
    let pixels = img
        .data
        .chunks_exact(3)
        .map(|p| srgb_pixel_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect();
    LabImage {
        height: img.height,
        width: img.width,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rules() {
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(1.2), 255);
        assert_eq!(quantize_u8(-0.3), 0);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 2, vec![0.0; 3]).is_err());
        let img = ImageTensor::from_clamped(1, 1, vec![-1.0, 2.0, f32::NAN]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn planar_round_trip() {
        let img = ImageTensor::new(2, 2, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        let planar = img.to_planar();
        assert_eq!(planar[0], img.get(0, 0, 0));
        assert_eq!(planar[4], img.get(0, 0, 1));
        assert_eq!(ImageTensor::from_planar(2, 2, &planar).unwrap(), img);
    }

    #[test]
    fn checkerboard_collapses_to_half() {
        let img = ImageTensor::new(2, 2, vec![0., 0., 0., 1., 1., 1., 1., 1., 1., 0., 0., 0.]).unwrap();
        let one = resize_bilinear(&img, 1, 1).unwrap();
        assert_eq!(one.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageTensor::new(3, 4, (0..36).map(|i| (i as f32 * 0.37).fract()).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 4).unwrap(), img);
        let flat = ImageTensor::filled(5, 7, [0.2, 0.4, 0.6]).unwrap();
        let r = resize_bilinear(&flat, 11, 3).unwrap();
        for px in r.data().chunks(3) {
            assert!((px[0] - 0.2).abs() < 1e-6 && (px[1] - 0.4).abs() < 1e-6 && (px[2] - 0.6).abs() < 1e-6);
        }
        assert!(resize_bilinear(&flat, 0, 3).is_err());
    }

    #[test]
    fn resize_round_trip_of_smooth_gradient() {
        let (h, w) = (48, 64);
        let data = (0..h * w)
            .flat_map(|p| {
                let (y, x) = ((p / w) as f32 / h as f32, (p % w) as f32 / w as f32);
                [x, y, 0.5 * (x + y)]
            })
            .collect();
        let img = ImageTensor::new(h, w, data).unwrap();
        let down = resize_bilinear(&img, 31, 45).unwrap();
        let back = resize_bilinear(&down, h, w).unwrap();
        let mad: f64 = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / img.data().len() as f64;
        assert!(mad <= 0.02, "mean abs diff {mad}");
    }

    #[test]
    fn lab_anchors() {
        let white = srgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert!((white.l - 100.0).abs() < 1e-9 && white.a.abs() < 1e-9 && white.b.abs() < 1e-9);
        let black = srgb_pixel_to_lab([0.0, 0.0, 0.0]);
        assert_eq!((black.l, black.a, black.b), (0.0, 0.0, 0.0));
        let gray = srgb_pixel_to_lab([0.5, 0.5, 0.5]);
        // Independently: Y = ((0.5 + 0.055) / 1.055)^2.4 = 0.214041...,
        // L = 116 * Y^(1/3) - 16 = 53.3890...
        assert!((gray.l - 53.389).abs() < 1e-3, "{}", gray.l);
        assert!(gray.a.abs() < 1e-9 && gray.b.abs() < 1e-9);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImageTensor::new(3, 5, (0..45).map(|i| ((i * 7919) % 1000) as f32 / 999.0).collect()).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn eight_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayImage::from_raw(2, 1, vec![255, 128]).unwrap().save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0; 3]);
        assert!((img.get(0, 1, 2) - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, vec![65535u16, 0, 32768])
            .unwrap()
            .save(&path)
            .unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
    }

    #[test]
    fn corrupt_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("bad.png"), "{err}");
    }

    #[test]
    fn nearest_resize() {
        let img = ImageTensor::new(2, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.2, 0.2, 0.2, 0.4, 0.4, 0.4]).unwrap();
        let up = resize_nearest(&img, 4, 4).unwrap();
        assert_eq!(up.pixel(0, 1), [0.0; 3]);
        assert_eq!(up.pixel(1, 2), [1.0; 3]);
        assert_eq!(up.pixel(3, 0), [0.2; 3]);
        assert_eq!(resize_nearest(&up, 2, 2).unwrap(), img);
        assert_eq!(resize(&img, 2, 2, ResizeFilter::Nearest).unwrap(), img);
        assert_eq!("Bilinear".parse::<ResizeFilter>().unwrap(), ResizeFilter::Bilinear);
        assert!("cubic".parse::<ResizeFilter>().is_err());
    }

}
