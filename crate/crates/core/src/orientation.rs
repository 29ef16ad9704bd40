//! Block-wise orientation field estimation (squared-gradient method).
//!
//! Every 16x16 block carries a ridge orientation in `[0, π)`, a coherence
//! quality in `[0, 1]` and a foreground flag.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{normalize_pi, Point, RigidPose};
use crate::image::{BinaryMask, GrayImage};

pub const BLOCK: usize = 16;
const COHERENCE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OrientationError {
    #[error("image {width}x{height} is not a multiple of the {BLOCK}px block size")]
    NotBlockAligned { width: usize, height: usize },
    #[error("no block passed the foreground test")]
    AllBackground,
    #[error("mask is {mask_w}x{mask_h}, image is {width}x{height}")]
    MaskSize {
        mask_w: usize,
        mask_h: usize,
        width: usize,
        height: usize,
    },
    #[error("field file: {0}")]
    Format(String),
    #[error("i/o failure")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationParams {
    /// Minimum mean squared Sobel magnitude per pixel.
    pub energy_threshold: f64,
    pub min_coherence: f64,
    /// Fraction of mask-positive pixels needed when a mask is supplied.
    pub mask_fraction: f64,
}

impl Default for OrientationParams {
    fn default() -> Self {
        Self {
            energy_threshold: 100.0,
            min_coherence: 0.2,
            mask_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Block {
    pub angle: f64,
    pub quality: f64,
    pub foreground: bool,
}

impl Block {
    pub const BACKGROUND: Block = Block {
        angle: 0.0,
        quality: 0.0,
        foreground: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationField {
    cols: usize,
    rows: usize,
    blocks: Vec<Block>,
}

impl OrientationField {
    pub fn new(cols: usize, rows: usize, blocks: Vec<Block>) -> Self {
        assert_eq!(blocks.len(), cols * rows, "block count mismatch");
        let blocks = blocks
            .into_iter()
            .map(|b| Block {
                angle: normalize_pi(b.angle),
                quality: b.quality.clamp(0.0, 1.0),
                foreground: b.foreground && b.quality > 0.0,
            })
            .collect();
        Self { cols, rows, blocks }
    }

    pub fn background(cols: usize, rows: usize) -> Self {
        Self {
            cols,
            rows,
            blocks: vec![Block::BACKGROUND; cols * rows],
        }
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width_px(&self) -> usize {
        self.cols * BLOCK
    }

    pub fn height_px(&self) -> usize {
        self.rows * BLOCK
    }

    pub fn center(&self) -> Point {
        Point::new(self.width_px() as f64 / 2.0, self.height_px() as f64 / 2.0)
    }

    #[inline]
    pub fn block(&self, col: usize, row: usize) -> &Block {
        &self.blocks[row * self.cols + col]
    }

    #[inline]
    pub fn block_mut(&mut self, col: usize, row: usize) -> &mut Block {
        &mut self.blocks[row * self.cols + col]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Pixel-space center of a block.
    #[inline]
    pub fn block_center(col: usize, row: usize) -> Point {
        Point::new(
            (col * BLOCK) as f64 + BLOCK as f64 / 2.0,
            (row * BLOCK) as f64 + BLOCK as f64 / 2.0,
        )
    }

    /// Block containing a pixel-space point, if inside the field.
    pub fn block_at(&self, p: Point) -> Option<(usize, usize)> {
        if p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let (c, r) = ((p.x / BLOCK as f64) as usize, (p.y / BLOCK as f64) as usize);
        (c < self.cols && r < self.rows).then_some((c, r))
    }

    pub fn foreground_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.foreground).count()
    }

    /// `(col, row, block)` for every foreground block, row-major.
    pub fn foreground_blocks(&self) -> impl Iterator<Item = (usize, usize, &Block)> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.foreground)
            .map(|(i, b)| (i % self.cols, i / self.cols, b))
    }

    /// Pixel mask covering every foreground block.
    pub fn foreground_mask(&self) -> BinaryMask {
        let (w, h) = (self.width_px(), self.height_px());
        let mut bits = vec![false; w * h];
        for (c, r, _) in self.foreground_blocks() {
            for y in r * BLOCK..(r + 1) * BLOCK {
                bits[y * w + c * BLOCK..y * w + (c + 1) * BLOCK].fill(true);
            }
        }
        BinaryMask::from_vec(w, h, bits)
    }

    /// Doubled-angle 3x3 average over foreground neighbours; background
    /// blocks are left untouched.
    pub fn smoothed(&self) -> OrientationField {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.block(c, r).foreground {
                    continue;
                }
                let (mut sx, mut sy) = (0.0, 0.0);
                for rr in r.saturating_sub(1)..(r + 2).min(self.rows) {
                    for cc in c.saturating_sub(1)..(c + 2).min(self.cols) {
                        let b = self.block(cc, rr);
                        if b.foreground {
                            sx += b.quality * (2.0 * b.angle).cos();
                            sy += b.quality * (2.0 * b.angle).sin();
                        }
                    }
                }
                if sx != 0.0 || sy != 0.0 {
                    out.block_mut(c, r).angle = normalize_pi(0.5 * sy.atan2(sx));
                }
            }
        }
        out
    }

    pub fn to_ofld(&self) -> String {
        let mut s = format!("OFLD v1 {} {}\n", self.cols, self.rows);
        for b in &self.blocks {
            let mrad = (b.angle * 1000.0).round() as i64;
            let _ = writeln!(s, "{} {:.6} {}", mrad, b.quality, b.foreground as u8);
        }
        s
    }

    pub fn from_ofld(text: &str) -> Result<Self, OrientationError> {
        let bad = |m: &str| OrientationError::Format(m.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty file"))?
            .split_whitespace()
            .collect();
        if header.len() != 4 || header[0] != "OFLD" || header[1] != "v1" {
            return Err(bad("expected header `OFLD v1 cols rows`"));
        }
        let cols: usize = header[2].parse().map_err(|_| bad("bad cols"))?;
        let rows: usize = header[3].parse().map_err(|_| bad("bad rows"))?;
        let mut blocks = Vec::with_capacity(cols * rows);
        for line in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 3 {
                return Err(bad(&format!("bad block line {line:?}")));
            }
            let mrad: f64 = t[0].parse().map_err(|_| bad("bad angle"))?;
            let quality: f64 = t[1].parse().map_err(|_| bad("bad quality"))?;
            let foreground = match t[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad foreground flag")),
            };
            blocks.push(Block {
                angle: mrad / 1000.0,
                quality,
                foreground,
            });
        }
        if blocks.len() != cols * rows {
            return Err(bad(&format!(
                "expected {} blocks, found {}",
                cols * rows,
                blocks.len()
            )));
        }
        Ok(Self::new(cols, rows, blocks))
    }

    pub fn read_ofld(path: impl AsRef<Path>) -> Result<Self, OrientationError> {
        Self::from_ofld(&std::fs::read_to_string(path)?)
    }

    pub fn write_ofld(&self, path: impl AsRef<Path>) -> Result<(), OrientationError> {
        std::fs::write(path, self.to_ofld())?;
        Ok(())
    }
}

/// Per-block squared-gradient orientation, coherence quality and
/// foreground flag.
pub fn estimate_orientation_field(
    img: &GrayImage,
    mask: Option<&BinaryMask>,
    params: &OrientationParams,
) -> Result<OrientationField, OrientationError> {
    let (w, h) = (img.width(), img.height());
    if w % BLOCK != 0 || h % BLOCK != 0 || w == 0 || h == 0 {
        return Err(OrientationError::NotBlockAligned {
            width: w,
            height: h,
        });
    }
    if let Some(m) = mask {
        if (m.width(), m.height()) != (w, h) {
            return Err(OrientationError::MaskSize {
                mask_w: m.width(),
                mask_h: m.height(),
                width: w,
                height: h,
            });
        }
    }
    let (cols, rows) = (w / BLOCK, h / BLOCK);
    let px = img.pixels();
    // [gxx, gyy, gxy] per block
    let mut sums = vec![[0.0f64; 3]; cols * rows];
    let mut row_acc = vec![[0.0f64; 3]; cols];
    for y in 0..h {
        let ym = y.saturating_sub(1) * w;
        let y0 = y * w;
        let yp = (y + 1).min(h - 1) * w;
        row_acc.iter_mut().for_each(|a| *a = [0.0; 3]);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let p = |r: usize, c: usize| px[r + c] as i32;
            let gx = (p(ym, xp) + 2 * p(y0, xp) + p(yp, xp)) - (p(ym, xm) + 2 * p(y0, xm) + p(yp, xm));
            let gy = (p(yp, xm) + 2 * p(yp, x) + p(yp, xp)) - (p(ym, xm) + 2 * p(ym, x) + p(ym, xp));
            let a = &mut row_acc[x / BLOCK];
            a[0] += (gx * gx) as f64;
            a[1] += (gy * gy) as f64;
            a[2] += (gx * gy) as f64;
        }
        let r = y / BLOCK;
        for (c, a) in row_acc.iter().enumerate() {
            let s = &mut sums[r * cols + c];
            s[0] += a[0];
            s[1] += a[1];
            s[2] += a[2];
        }
    }

    let mask_sat = mask.map(|m| m.integral());
    let mut blocks = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let [gxx, gyy, gxy] = sums[r * cols + c];
            let energy = (gxx + gyy) / (BLOCK * BLOCK) as f64;
            let (angle, quality) = block_orientation(gxx, gyy, gxy);
            let mut fg = energy > params.energy_threshold && quality >= params.min_coherence;
            if let Some(sat) = &mask_sat {
                let stride = w + 1;
                let (x0, y0, x1, y1) = (c * BLOCK, r * BLOCK, (c + 1) * BLOCK, (r + 1) * BLOCK);
                let inside = sat[y1 * stride + x1] + sat[y0 * stride + x0]
                    - sat[y0 * stride + x1]
                    - sat[y1 * stride + x0];
                fg &= inside as f64 >= params.mask_fraction * (BLOCK * BLOCK) as f64;
            }
            blocks.push(Block {
                angle,
                quality,
                foreground: fg && quality > 0.0,
            });
        }
    }
    let field = OrientationField { cols, rows, blocks };
    if field.foreground_count() == 0 {
        return Err(OrientationError::AllBackground);
    }
    Ok(field)
}

/// Ridge angle and coherence from block gradient moments.
#[inline]
pub fn block_orientation(gxx: f64, gyy: f64, gxy: f64) -> (f64, f64) {
    let num = ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt();
    let coherence = (num / (gxx + gyy + COHERENCE_EPS)).clamp(0.0, 1.0);
    let angle = normalize_pi(0.5 * (2.0 * gxy).atan2(gxx - gyy) + PI / 2.0);
    (angle, coherence)
}

/// Resamples a field through a rigid pose about the field center
/// (nearest block), adding the pose rotation to each block angle.
pub fn transform_field(f: &OrientationField, pose: &RigidPose) -> OrientationField {
    let center = f.center();
    let inv = pose.inverse();
    let mut out = OrientationField::background(f.cols, f.rows);
    for r in 0..f.rows {
        for c in 0..f.cols {
            let src = inv.apply(OrientationField::block_center(c, r), center);
            if let Some((sc, sr)) = f.block_at(src) {
                let b = f.block(sc, sr);
                *out.block_mut(c, r) = Block {
                    angle: normalize_pi(b.angle + pose.theta),
                    ..*b
                };
            }
        }
    }
    out
}

/// Rotates block positions about the field center by `theta` and adds
/// `theta` to every block angle.
pub fn rotate_field(f: &OrientationField, theta: f64) -> OrientationField {
    if theta == 0.0 {
        return f.clone();
    }
    transform_field(f, &RigidPose::rotation(theta))
}

/// Mirror about the vertical axis: columns reversed, `a -> π - a`.
pub fn flip_field(f: &OrientationField) -> OrientationField {
    let mut out = f.clone();
    for r in 0..f.rows {
        for c in 0..f.cols {
            let b = f.block(f.cols - 1 - c, r);
            *out.block_mut(c, r) = Block {
                angle: normalize_pi(PI - b.angle),
                ..*b
            };
        }
    }
    out
}

/// Fraction of all blocks that are foreground.
pub fn compute_q1(f: &OrientationField) -> f64 {
    if f.blocks.is_empty() {
        return 0.0;
    }
    f.foreground_count() as f64 / f.blocks.len() as f64
}
