//! Coarse rotation classifier: an 8-stage convolutional network mapping a
//! 512x512 downsampled palm to 24 rotation classes of 15° each, plus the
//! stage-3 foreground mask and a classifier-free fallback.

use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use thiserror::Error;

use crate::ght::{best_pose, vote_at, GhtParams, ReferenceField};
use crate::image::{BinaryMask, GrayImage};
use crate::orientation::{flip_field, rotate_field, OrientationField, BLOCK};

pub const INPUT_SIZE: usize = 512;
pub const CLASSES: usize = 24;
pub const CHANNELS: [usize; 8] = [16, 24, 32, 48, 64, 96, 128, 256];
pub const KERNELS: [usize; 8] = [9, 3, 3, 3, 3, 3, 3, 3];
/// Flattened length after the last pool: 256 channels x 2 x 2.
pub const FC_INPUTS: usize = 1024;
pub const MIN_CONFIDENCE: f64 = 0.35;
const MASK_STAGE: usize = 3;
const MAGIC: &[u8; 4] = b"PCNN";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("weight file format: {0}")]
    Format(String),
    #[error("tensor shape: {0}")]
    Shape(String),
    #[error("i/o failure")]
    Io(#[from] io::Error),
}

/// Convolution, batch-norm (inference form) and ELU, then 3x3/2 max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub bn_scale: Vec<f32>,
    pub bn_shift: Vec<f32>,
    pub bn_mean: Vec<f32>,
    pub bn_var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcStage {
    /// `[out][in]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub stages: Vec<ConvStage>,
    pub fc: FcStage,
}

/// Channel-major activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub logits: Vec<f64>,
    pub y: Vec<f64>,
    pub y_s: Vec<f64>,
    pub m_s: f64,
    pub argmax_class: usize,
}

impl ClassScores {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let y = softmax(&logits);
        let y_s = smooth_scores(&y);
        let (argmax_class, m_s) = argmax(&y_s);
        Self {
            logits,
            y,
            y_s,
            m_s,
            argmax_class,
        }
    }
}

/// Coarse rotation decision. Class `i` means the palm is rotated by
/// `i * 15°`, and `mirrored` says the class was found on the flipped input
/// (only the fallback sets it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseDecision {
    pub accepted: bool,
    pub class: usize,
    pub m_s: f64,
    pub mirrored: bool,
}

impl CoarseDecision {
    pub fn angle_deg(&self) -> f64 {
        self.class as f64 * 15.0
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| v / s).collect()
}

/// Circular moving average with a window of 3.
pub fn smooth_scores(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| (y[(i + n - 1) % n] + y[i] + y[(i + 1) % n]) / 3.0)
        .collect()
}

/// Accepts the smoothed argmax iff `m_s > 0.35`.
pub fn decide_rotation(scores: &ClassScores) -> CoarseDecision {
    CoarseDecision {
        accepted: scores.m_s > MIN_CONFIDENCE,
        class: scores.argmax_class,
        m_s: scores.m_s,
        mirrored: false,
    }
}

#[inline]
pub fn elu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl ConvStage {
    fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
            bn_scale: vec![1.0; out_channels],
            bn_shift: vec![0.0; out_channels],
            bn_mean: vec![0.0; out_channels],
            bn_var: vec![1.0; out_channels],
        }
    }

    /// Same-padded convolution, batch-norm and ELU (no pooling).
    pub fn activate(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.channels, self.in_channels, "channel mismatch");
        let (h, w, k) = (input.height, input.width, self.kernel);
        let pad = k / 2;
        let n = h * w;
        let mut out = Tensor::zeros(self.out_channels, h, w);
        out.data.par_chunks_mut(n).enumerate().for_each(|(o, plane)| {
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.plane(i);
                let kbase = (o * self.in_channels + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weights[kbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // output x range whose source column x + kx - pad is inside
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let srow = &src[(sy - pad) * w..(sy - pad + 1) * w];
                            let drow = &mut plane[y * w..(y + 1) * w];
                            let s0 = x_lo + kx - pad;
                            for (d, s) in drow[x_lo..x_hi].iter_mut().zip(&srow[s0..s0 + (x_hi - x_lo)]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / self.bn_var[o].sqrt();
            let (scale, shift, mean) = (self.bn_scale[o], self.bn_shift[o], self.bn_mean[o]);
            for v in plane.iter_mut() {
                *v = elu((*v - mean) * inv * scale + shift);
            }
        });
        out
    }
}

/// 3x3 max-pool with stride 2; windows are centered on even coordinates so
/// the output is `ceil(n / 2)` per axis.
pub fn max_pool(input: &Tensor) -> Tensor {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(input.channels, oh, ow);
    out.data.par_chunks_mut(oh * ow).enumerate().for_each(|(c, plane)| {
        let src = input.plane(c);
        for oy in 0..oh {
            let y0 = (2 * oy).saturating_sub(1);
            let y1 = (2 * oy + 1).min(h - 1);
            for ox in 0..ow {
                let x0 = (2 * ox).saturating_sub(1);
                let x1 = (2 * ox + 1).min(w - 1);
                let mut m = f32::NEG_INFINITY;
                for y in y0..=y1 {
                    for &v in &src[y * w + x0..=y * w + x1] {
                        m = m.max(v);
                    }
                }
                plane[oy * ow + ox] = m;
            }
        }
    });
    out
}

/// Bilinear downsample to the network input, scaled to `[0, 1]`.
pub fn preprocess(img: &GrayImage) -> Tensor {
    let data = img
        .resize_bilinear(INPUT_SIZE, INPUT_SIZE)
        .into_iter()
        .map(|v| v / 255.0)
        .collect();
    Tensor {
        channels: 1,
        height: INPUT_SIZE,
        width: INPUT_SIZE,
        data,
    }
}

impl CnnModel {
    /// All weights and biases zero, batch-norm identity.
    pub fn zeros() -> Self {
        let mut stages = Vec::with_capacity(8);
        let mut in_c = 1;
        for (&c, &k) in CHANNELS.iter().zip(&KERNELS) {
            stages.push(ConvStage::zeros(in_c, c, k));
            in_c = c;
        }
        Self {
            stages,
            fc: FcStage {
                weights: vec![0.0; CLASSES * FC_INPUTS],
                bias: vec![0.0; CLASSES],
            },
        }
    }

    /// Deterministic He-initialized weights with mild random batch-norm
    /// statistics, for shape and oracle tests.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros();
        for s in &mut m.stages {
            let fan_in = (s.in_channels * s.kernel * s.kernel) as f32;
            let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
            s.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            let small = Uniform::new(-0.1f32, 0.1).expect("valid range");
            let var = Uniform::new(0.5f32, 1.5).expect("valid range");
            let scale = Uniform::new(0.8f32, 1.2).expect("valid range");
            for o in 0..s.out_channels {
                s.bias[o] = small.sample(&mut rng);
                s.bn_scale[o] = scale.sample(&mut rng);
                s.bn_shift[o] = small.sample(&mut rng);
                s.bn_mean[o] = small.sample(&mut rng);
                s.bn_var[o] = var.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0f32, (1.0 / FC_INPUTS as f32).sqrt()).expect("finite std");
        m.fc.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        m
    }

    /// Checks every tensor against the fixed architecture.
    pub fn validate(&self) -> Result<(), CnnError> {
        if self.stages.len() != CHANNELS.len() {
            return Err(CnnError::Shape(format!("{} conv stages, expected 8", self.stages.len())));
        }
        let mut in_c = 1;
        for (i, s) in self.stages.iter().enumerate() {
            let (c, k) = (CHANNELS[i], KERNELS[i]);
            if s.kernel != k {
                return Err(CnnError::Shape(format!("stage {} kernel {}x{}, expected {k}x{k}", i + 1, s.kernel, s.kernel)));
            }
            if s.in_channels != in_c || s.out_channels != c {
                return Err(CnnError::Shape(format!(
                    "stage {} maps {} -> {} channels, expected {in_c} -> {c}",
                    i + 1,
                    s.in_channels,
                    s.out_channels
                )));
            }
            if s.weights.len() != c * in_c * k * k {
                return Err(CnnError::Shape(format!("stage {} kernel tensor has {} values", i + 1, s.weights.len())));
            }
            for (name, v) in [
                ("bias", &s.bias),
                ("bn scale", &s.bn_scale),
                ("bn shift", &s.bn_shift),
                ("bn mean", &s.bn_mean),
                ("bn variance", &s.bn_var),
            ] {
                if v.len() != c {
                    return Err(CnnError::Shape(format!("stage {} {name} has {} values, expected {c}", i + 1, v.len())));
                }
            }
            if s.bn_var.iter().any(|&v| v.is_nan() || v <= 0.0) {
                return Err(CnnError::Shape(format!("stage {} has a non-positive variance", i + 1)));
            }
            in_c = c;
        }
        if self.fc.weights.len() != CLASSES * FC_INPUTS || self.fc.bias.len() != CLASSES {
            return Err(CnnError::Shape(format!(
                "fc has {} weights and {} biases, expected {} and {CLASSES}",
                self.fc.weights.len(),
                self.fc.bias.len(),
                CLASSES * FC_INPUTS
            )));
        }
        Ok(())
    }

    /// Runs the conv stages on a preprocessed input and returns the pooled
    /// output of the last one.
    pub fn features(&self, input: &Tensor) -> Tensor {
        let mut t = input.clone();
        for s in &self.stages {
            t = max_pool(&s.activate(&t));
        }
        t
    }

    pub fn logits(&self, input: &Tensor) -> Vec<f64> {
        let f = self.features(input);
        assert_eq!(f.data.len(), FC_INPUTS, "input resolution must be {INPUT_SIZE}");
        (0..CLASSES)
            .map(|o| {
                let row = &self.fc.weights[o * FC_INPUTS..(o + 1) * FC_INPUTS];
                let dot: f64 = row.iter().zip(&f.data).map(|(&w, &x)| w as f64 * x as f64).sum();
                dot + self.fc.bias[o] as f64
            })
            .collect()
    }

    pub fn serialize(&self) -> Vec<u8> {
        fn tensor(out: &mut Vec<u8>, dims: &[usize], values: &[f32]) {
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        for s in &self.stages {
            let c = s.out_channels;
            tensor(&mut out, &[c, s.in_channels, s.kernel, s.kernel], &s.weights);
            tensor(&mut out, &[c], &s.bias);
            tensor(&mut out, &[c], &s.bn_scale);
            tensor(&mut out, &[c], &s.bn_shift);
            tensor(&mut out, &[c], &s.bn_mean);
            tensor(&mut out, &[c], &s.bn_var);
        }
        tensor(&mut out, &[CLASSES, FC_INPUTS], &self.fc.weights);
        tensor(&mut out, &[CLASSES], &self.fc.bias);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, CnnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CnnError::Format("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(CnnError::Format(format!("unsupported version {version}")));
        }
        let mut stages = Vec::with_capacity(8);
        for _ in 0..CHANNELS.len() {
            let (dims, weights) = r.tensor()?;
            if dims.len() != 4 || dims[2] != dims[3] {
                return Err(CnnError::Shape(format!("kernel tensor dims {dims:?}")));
            }
            let mut vec1 = || -> Result<Vec<f32>, CnnError> {
                let (d, v) = r.tensor()?;
                if d.len() != 1 {
                    return Err(CnnError::Shape(format!("expected a vector, got dims {d:?}")));
                }
                Ok(v)
            };
            stages.push(ConvStage {
                out_channels: dims[0],
                in_channels: dims[1],
                kernel: dims[2],
                weights,
                bias: vec1()?,
                bn_scale: vec1()?,
                bn_shift: vec1()?,
                bn_mean: vec1()?,
                bn_var: vec1()?,
            });
            // reject wrong shapes before reading further
            let i = stages.len() - 1;
            if stages[i].kernel != KERNELS[i] {
                return Err(CnnError::Shape(format!(
                    "stage {} kernel {}x{}, expected {}x{}",
                    i + 1,
                    stages[i].kernel,
                    stages[i].kernel,
                    KERNELS[i],
                    KERNELS[i]
                )));
            }
        }
        let (_, weights) = r.tensor()?;
        let (_, bias) = r.tensor()?;
        if r.pos != bytes.len() {
            return Err(CnnError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Self {
            stages,
            fc: FcStage { weights, bias },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CnnError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::deserialize(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CnnError> {
        std::fs::File::create(path)?.write_all(&self.serialize())?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CnnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CnnError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CnnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>), CnnError> {
        let rank = self.u32()?;
        if rank == 0 || rank > 4 {
            return Err(CnnError::Format(format!("tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c <= self.bytes.len() / 4)
            .ok_or_else(|| CnnError::Format(format!("tensor dims {dims:?} exceed the file")))?;
        let raw = self.take(count * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((dims, values))
    }
}

/// Class probabilities for an image of any size (downsampled first).
pub fn infer(model: &CnnModel, img: &GrayImage) -> ClassScores {
    ClassScores::from_logits(model.logits(&preprocess(img)))
}

/// Foreground mask from the stage-3 activations: mean absolute activation
/// over channels, min-max normalized, thresholded at 0.5 and upsampled
/// (nearest) to the image size.
pub fn extract_mask(model: &CnnModel, img: &GrayImage) -> BinaryMask {
    let mut t = preprocess(img);
    for s in &model.stages[..MASK_STAGE - 1] {
        t = max_pool(&s.activate(&t));
    }
    let act = model.stages[MASK_STAGE - 1].activate(&t);
    let n = act.height * act.width;
    let mut mean = vec![0f32; n];
    for c in 0..act.channels {
        for (m, v) in mean.iter_mut().zip(act.plane(c)) {
            *m += v.abs();
        }
    }
    let lo = mean.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = mean.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let (w, h) = (img.width(), img.height());
    if !(hi - lo > 1e-12) {
        return BinaryMask::new(w, h, false);
    }
    let small: Vec<bool> = mean.iter().map(|&m| (m - lo) / (hi - lo) >= 0.5).collect();
    upsample_nearest(&small, act.width, act.height, w, h)
}

fn upsample_nearest(small: &[bool], sw: usize, sh: usize, w: usize, h: usize) -> BinaryMask {
    let mut bits = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (y * sh / h.max(1)).min(sh - 1);
        for x in 0..w {
            let sx = (x * sw / w.max(1)).min(sw - 1);
            bits.push(small[sy * sw + sx]);
        }
    }
    BinaryMask::from_vec(w, h, bits)
}

/// Classifier-free foreground mask: 16x16 blocks whose mean squared Sobel
/// magnitude exceeds `threshold`.
pub fn energy_mask(img: &GrayImage, threshold: f64) -> BinaryMask {
    let (w, h) = (img.width(), img.height());
    let (cols, rows) = (w.div_ceil(BLOCK), h.div_ceil(BLOCK));
    let mut energy = vec![0f64; cols * rows];
    let mut count = vec![0u32; cols * rows];
    let px = img.pixels();
    for y in 0..h {
        let ym = y.saturating_sub(1) * w;
        let y0 = y * w;
        let yp = (y + 1).min(h - 1) * w;
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let p = |r: usize, c: usize| px[r + c] as i32;
            let gx = (p(ym, xp) + 2 * p(y0, xp) + p(yp, xp)) - (p(ym, xm) + 2 * p(y0, xm) + p(yp, xm));
            let gy = (p(yp, xm) + 2 * p(yp, x) + p(yp, xp)) - (p(ym, xm) + 2 * p(ym, x) + p(ym, xp));
            let b = (y / BLOCK) * cols + x / BLOCK;
            energy[b] += (gx * gx + gy * gy) as f64;
            count[b] += 1;
        }
    }
    let small: Vec<bool> = energy
        .iter()
        .zip(&count)
        .map(|(&e, &c)| c > 0 && e / c as f64 > threshold)
        .collect();
    let mut bits = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            bits.push(small[(y / BLOCK) * cols + x / BLOCK]);
        }
    }
    BinaryMask::from_vec(w, h, bits)
}

/// Scores every 15° class by single-rotation Hough voting of the field
/// (and its mirror) rotated back by the class angle. The best `q2` wins
/// and is accepted iff it exceeds `params.min_q2`.
pub fn fallback_coarse_rotation(
    f: &OrientationField,
    reference: &ReferenceField,
    params: &GhtParams,
    vote_stride: usize,
) -> CoarseDecision {
    let flipped = flip_field(f);
    let mut best = CoarseDecision {
        accepted: false,
        class: 0,
        m_s: 0.0,
        mirrored: false,
    };
    for (mirrored, side) in [(false, f), (true, &flipped)] {
        let scores: Vec<f64> = (0..CLASSES)
            .into_par_iter()
            .map(|i| {
                let g = rotate_field(side, -(i as f64) * PI / 12.0);
                vote_at(&g, reference, &[0.0], params, vote_stride)
                    .map(|acc| best_pose(&acc).q2)
                    .unwrap_or(0.0)
            })
            .collect();
        for (i, &q2) in scores.iter().enumerate() {
            if q2 > best.m_s {
                best = CoarseDecision {
                    accepted: false,
                    class: i,
                    m_s: q2,
                    mirrored,
                };
            }
        }
    }
    best.accepted = best.m_s > params.min_q2;
    best
}
