//! Luminance-Net (curve parameter estimator) and Denoising-Net (residual
//! noise estimator), plus architecture descriptors and complexity counts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curve::{enhance_iterative, CurveMaps, CurveParams, RangeMode};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::kernels::conv2d_forward;
use crate::tensor::{ConvGeometry, Parameter, Real, Tape, Var};

pub const KERNEL: usize = 3;
pub const LUMINANCE_DEPTH: usize = 7;
pub const LUMINANCE_WIDTH: usize = 32;
pub const DENOISING_DEPTH: usize = 20;
pub const DENOISING_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Luminance,
    Denoising,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::Luminance => "luminance",
            NetKind::Denoising => "denoising",
        }
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "luminance" => Ok(NetKind::Luminance),
            "denoising" => Ok(NetKind::Denoising),
            other => Err(Error::BadDescriptor(format!("unknown network kind {other:?}"))),
        }
    }
}

/// Architecture of either network. `depth` counts body layers for the
/// Luminance-Net (one head per body layer) and all layers for the
/// Denoising-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDescriptor {
    pub kind: NetKind,
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
}

impl NetDescriptor {
    pub fn luminance() -> Self {
        NetDescriptor {
            kind: NetKind::Luminance,
            depth: LUMINANCE_DEPTH,
            width: LUMINANCE_WIDTH,
            kernel: KERNEL,
        }
    }

    pub fn denoising() -> Self {
        NetDescriptor {
            kind: NetKind::Denoising,
            depth: DENOISING_DEPTH,
            width: DENOISING_WIDTH,
            kernel: KERNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_depth = match self.kind {
            NetKind::Luminance => 1,
            NetKind::Denoising => 2,
        };
        if self.depth < min_depth || self.width == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::BadDescriptor(format!("invalid architecture: {self}")));
        }
        Ok(())
    }

    /// `(c_in, c_out)` of every conv layer in parameter order.
    pub fn conv_layers(&self) -> Vec<(usize, usize)> {
        let w = self.width;
        match self.kind {
            NetKind::Luminance => (0..self.depth)
                .flat_map(|i| [(if i == 0 { 3 } else { w }, w), (w, 6)])
                .collect(),
            NetKind::Denoising => (0..self.depth)
                .map(|i| {
                    let c_in = if i == 0 { 3 } else { w };
                    let c_out = if i + 1 == self.depth { 3 } else { w };
                    (c_in, c_out)
                })
                .collect(),
        }
    }

    /// Shapes of all parameters: weight then bias, layer by layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let k = self.kernel;
        self.conv_layers()
            .into_iter()
            .flat_map(|(ci, co)| [vec![co, ci, k, k], vec![co]])
            .collect()
    }
}

impl fmt::Display for NetDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} depth={} width={} kernel={}",
            self.kind.name(),
            self.depth,
            self.width,
            self.kernel
        )
    }
}

impl FromStr for NetDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind: NetKind = parts.next().ok_or_else(|| Error::BadDescriptor(s.into()))?.parse()?;
        let (mut depth, mut width, mut kernel) = (None, None, None);
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(|| Error::BadDescriptor(s.into()))?;
            let value: usize = value.parse().map_err(|_| Error::BadDescriptor(s.into()))?;
            match key {
                "depth" => depth = Some(value),
                "width" => width = Some(value),
                "kernel" => kernel = Some(value),
                _ => return Err(Error::BadDescriptor(s.into())),
            }
        }
        let d = NetDescriptor {
            kind,
            depth: depth.ok_or_else(|| Error::BadDescriptor(s.into()))?,
            width: width.ok_or_else(|| Error::BadDescriptor(s.into()))?,
            kernel: kernel.ok_or_else(|| Error::BadDescriptor(s.into()))?,
        };
        d.validate()?;
        Ok(d)
    }
}

/// Trainable scalars and multiply-accumulates for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub params: u64,
    pub macs: u64,
}

/// Truncates to three decimals in units of `scale`: 68,522 reads as 0.068 M.
fn truncated(count: u64, scale: u64) -> String {
    let milli = count / (scale / 1000);
    format!("{}.{:03}", milli / 1000, milli % 1000)
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "params={}M macs={}G",
            truncated(self.params, 1_000_000),
            truncated(self.macs, 1_000_000_000)
        )
    }
}

/// MACs are `H * W * k^2 * C_in * C_out` summed over conv layers; biases
/// count as parameters only.
pub fn count_complexity(desc: &NetDescriptor, height: usize, width: usize) -> Complexity {
    let k2 = (desc.kernel * desc.kernel) as u64;
    let hw = (height * width) as u64;
    let (mut params, mut macs) = (0u64, 0u64);
    for (ci, co) in desc.conv_layers() {
        let (ci, co) = (ci as u64, co as u64);
        params += k2 * ci * co + co;
        macs += hw * k2 * ci * co;
    }
    Complexity { params, macs }
}

/// One same-padded convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvLayer {
            weight: Parameter::zeros(&[c_out, c_in, k, k]),
            bias: Parameter::zeros(&[c_out]),
        }
    }

    /// Weights uniform in `+-sqrt(6 / fan_in)`, zero bias.
    pub fn uniform<R: Rng>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut layer = Self::zeros(c_in, c_out, k);
        for w in &mut layer.weight.data {
            *w = rng.random_range(-bound..bound) as f32;
        }
        layer
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1]
    }

    fn geometry(&self, height: usize, width: usize) -> ConvGeometry {
        ConvGeometry {
            c_in: self.c_in(),
            c_out: self.c_out(),
            height,
            width,
            kernel: self.weight.shape[2],
        }
    }

    fn forward(&self, input: &[f32], height: usize, width: usize) -> Vec<f32> {
        conv2d_forward(&self.geometry(height, width), input, &self.weight.data, &self.bias.data)
    }

    /// Copies the weights onto the tape as leaves.
    fn leaves<T: Real>(&self, tape: &mut Tape<T>) -> Result<(Var, Var)> {
        let w = tape.leaf(&self.weight.shape, self.weight.data.iter().map(|&v| T::of(v as f64)).collect())?;
        let b = tape.leaf(&self.bias.shape, self.bias.data.iter().map(|&v| T::of(v as f64)).collect())?;
        Ok((w, b))
    }
}

fn relu_in_place(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn check_input(img: &ImageTensor, min: usize) -> Result<()> {
    if img.height() < min || img.width() < min {
        return Err(Error::InvalidArgument(format!(
            "network input must be at least {min}x{min}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn layers_from_weights(desc: &NetDescriptor, weights: &[f32]) -> Result<Vec<ConvLayer>> {
    let expected = count_complexity(desc, 0, 0).params as usize;
    if weights.len() != expected {
        return Err(Error::DescriptorMismatch {
            expected: format!("{desc} ({expected} weights)"),
            found: format!("{} weights", weights.len()),
        });
    }
    let mut offset = 0;
    let mut take = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let p = Parameter::new(shape, weights[offset..offset + n].to_vec());
        offset += n;
        p
    };
    Ok(desc
        .conv_layers()
        .into_iter()
        .map(|(ci, co)| ConvLayer {
            weight: take(&[co, ci, desc.kernel, desc.kernel]),
            bias: take(&[co]),
        })
        .collect())
}

/// Common parameter access for both networks.
pub trait Network {
    fn descriptor(&self) -> NetDescriptor;
    fn layers(&self) -> &[ConvLayer];
    fn layers_mut(&mut self) -> &mut [ConvLayer];

    fn parameters(&self) -> Vec<&Parameter> {
        self.layers().iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers_mut().iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// All weights concatenated in parameter order.
    fn flat_weights(&self) -> Vec<f32> {
        self.parameters().iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}

/// Tape handles produced by [`LuminanceNet::forward_tape`].
#[derive(Clone, Debug)]
pub struct LuminanceTape {
    /// Per-iteration `(alpha, beta)` maps, each planar `[3, H, W]`.
    pub steps: Vec<(Var, Var)>,
    /// Parameter leaves in [`Network::parameters`] order.
    pub params: Vec<Var>,
}

/// Seven-layer plain CNN whose every layer feeds a head emitting one
/// iteration's `(alpha, beta)` maps.
///
/// Layers are stored interleaved: body 0, head 0, body 1, head 1, ...
#[derive(Clone, Debug, PartialEq)]
pub struct LuminanceNet {
    depth: usize,
    width: usize,
    layers: Vec<ConvLayer>,
}

impl LuminanceNet {
    /// Random body, zero heads: starts as the identity enhancement.
    pub fn new(depth: usize, width: usize, seed: u64) -> Result<Self> {
        let desc = NetDescriptor {
            depth,
            width,
            ..NetDescriptor::luminance()
        };
        desc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = desc
            .conv_layers()
            .into_iter()
            .enumerate()
            .map(|(i, (ci, co))| {
                if i % 2 == 0 {
                    ConvLayer::uniform(ci, co, KERNEL, &mut rng)
                } else {
                    ConvLayer::zeros(ci, co, KERNEL)
                }
            })
            .collect();
        Ok(LuminanceNet { depth, width, layers })
    }

    pub fn from_weights(desc: &NetDescriptor, weights: &[f32]) -> Result<Self> {
        if desc.kind != NetKind::Luminance {
            return Err(Error::DescriptorMismatch {
                expected: "luminance network".into(),
                found: desc.to_string(),
            });
        }
        desc.validate()?;
        Ok(LuminanceNet {
            depth: desc.depth,
            width: desc.width,
            layers: layers_from_weights(desc, weights)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn body(&self, i: usize) -> &ConvLayer {
        &self.layers[2 * i]
    }

    pub fn head(&self, i: usize) -> &ConvLayer {
        &self.layers[2 * i + 1]
    }

    /// Differentiable forward pass; `input` is a planar `[3, H, W]` tensor.
    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<LuminanceTape> {
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        let mut steps = Vec::with_capacity(self.depth);
        let mut feat = input;
        for i in 0..self.depth {
            let (bw, bb) = self.body(i).leaves(tape)?;
            let (hw, hb) = self.head(i).leaves(tape)?;
            params.extend([bw, bb, hw, hb]);
            let z = tape.conv2d(feat, bw, bb)?;
            feat = tape.relu(z);
            let raw = tape.conv2d(feat, hw, hb)?;
            let a_raw = tape.slice_channels(raw, 0, 3)?;
            let b_raw = tape.slice_channels(raw, 3, 3)?;
            let alpha = tape.tanh(a_raw);
            let b = tape.sigmoid(b_raw);
            let b = tape.mul_scalar(b, 0.5);
            let beta = tape.add_scalar(b, 0.5);
            steps.push((alpha, beta));
        }
        Ok(LuminanceTape { steps, params })
    }

    /// Curve maps for `img` without recording gradients.
    pub fn curve_params(&self, img: &ImageTensor) -> Result<CurveParams> {
        check_input(img, KERNEL)?;
        let (h, w) = (img.height(), img.width());
        let plane = h * w;
        let mut feat = img.to_planar();
        let mut iterations = Vec::with_capacity(self.depth);
        for i in 0..self.depth {
            feat = self.body(i).forward(&feat, h, w);
            relu_in_place(&mut feat);
            let raw = self.head(i).forward(&feat, h, w);
            let mut alpha = vec![0.0f32; plane * 3];
            let mut beta = vec![0.0f32; plane * 3];
            for c in 0..3 {
                for p in 0..plane {
                    alpha[p * 3 + c] = raw[c * plane + p].tanh();
                    let s = 1.0 / (1.0 + (-raw[(c + 3) * plane + p]).exp());
                    beta[p * 3 + c] = 0.5 + 0.5 * s;
                }
            }
            iterations.push(CurveMaps { alpha, beta });
        }
        Ok(CurveParams {
            height: h,
            width: w,
            iterations,
        })
    }

    /// Stage-I enhancement `I_e`.
    pub fn enhance(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let params = self.curve_params(img)?;
        enhance_iterative(img, &params, RangeMode::Clamp)
    }
}

impl Network for LuminanceNet {
    fn descriptor(&self) -> NetDescriptor {
        NetDescriptor {
            depth: self.depth,
            width: self.width,
            ..NetDescriptor::luminance()
        }
    }

    fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }
}

/// Tape handles produced by [`DenoisingNet::forward_tape`].
#[derive(Clone, Debug)]
pub struct DenoisingTape {
    /// Estimated noise, planar `[3, H, W]`.
    pub noise: Var,
    /// `clamp(input - noise, 0, 1)`.
    pub denoised: Var,
    pub params: Vec<Var>,
}

/// Plain residual CNN (conv + ReLU stack, linear last layer) predicting the
/// noise to subtract.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingNet {
    width: usize,
    layers: Vec<ConvLayer>,
}

impl DenoisingNet {
    /// Random layers, zero last layer: starts as the identity.
    pub fn new(depth: usize, width: usize, seed: u64) -> Result<Self> {
        let desc = NetDescriptor {
            depth,
            width,
            ..NetDescriptor::denoising()
        };
        desc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = desc
            .conv_layers()
            .into_iter()
            .enumerate()
            .map(|(i, (ci, co))| {
                if i + 1 == depth {
                    ConvLayer::zeros(ci, co, KERNEL)
                } else {
                    ConvLayer::uniform(ci, co, KERNEL, &mut rng)
                }
            })
            .collect();
        Ok(DenoisingNet { width, layers })
    }

    pub fn from_weights(desc: &NetDescriptor, weights: &[f32]) -> Result<Self> {
        if desc.kind != NetKind::Denoising {
            return Err(Error::DescriptorMismatch {
                expected: "denoising network".into(),
                found: desc.to_string(),
            });
        }
        desc.validate()?;
        Ok(DenoisingNet {
            width: desc.width,
            layers: layers_from_weights(desc, weights)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<DenoisingTape> {
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        let mut feat = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = layer.leaves(tape)?;
            params.extend([w, b]);
            feat = tape.conv2d(feat, w, b)?;
            if i < last {
                feat = tape.relu(feat);
            }
        }
        let residual = tape.sub(input, feat)?;
        let denoised = tape.clamp(residual, 0.0, 1.0);
        Ok(DenoisingTape {
            noise: feat,
            denoised,
            params,
        })
    }

    /// Estimated noise, interleaved `H x W x 3`.
    pub fn estimate_noise(&self, img: &ImageTensor) -> Result<Vec<f32>> {
        check_input(img, 1)?;
        let (h, w) = (img.height(), img.width());
        let mut feat = img.to_planar();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            feat = layer.forward(&feat, h, w);
            if i < last {
                relu_in_place(&mut feat);
            }
        }
        let plane = h * w;
        let mut out = vec![0.0; plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                out[p * 3 + c] = feat[c * plane + p];
            }
        }
        Ok(out)
    }

    /// `clamp(img - net(img), 0, 1)`.
    pub fn denoise(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let noise = self.estimate_noise(img)?;
        let data = img.data().iter().zip(noise).map(|(v, n)| v - n).collect();
        ImageTensor::from_clamped(img.height(), img.width(), data)
    }
}

impl Network for DenoisingNet {
    fn descriptor(&self) -> NetDescriptor {
        NetDescriptor {
            depth: self.layers.len(),
            width: self.width,
            ..NetDescriptor::denoising()
        }
    }

    fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }
}
