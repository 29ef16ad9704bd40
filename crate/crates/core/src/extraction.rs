//! Minutia extraction: ridge frequency, Gabor enhancement, binarization,
//! thinning, crossing-number detection and refinement.
//!
//! Ridges are the bright phase of the image (positive Gabor response).
//! Minutia coordinates are pixel centers, i.e. `(col + 0.5, row + 0.5)`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::geometry::{angle_diff_2pi, normalize_2pi, normalize_pi, Point};
use crate::image::{BinaryMask, GrayImage};
use crate::orientation::{OrientationField, BLOCK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MinutiaKind {
    Ending,
    Bifurcation,
    /// Kind is not stored in templates, so deserialized minutiae carry this.
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    /// Direction in `[0, 2π)`.
    pub theta: f64,
    pub kind: MinutiaKind,
}

impl Minutia {
    pub fn new(x: f64, y: f64, theta: f64, kind: MinutiaKind) -> Self {
        Self {
            x,
            y,
            theta: normalize_2pi(theta),
            kind,
        }
    }

    pub fn pos(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionParams {
    pub min_period: f64,
    pub max_period: f64,
    pub fallback_period: f64,
    pub gabor_sigma: f64,
    /// Kernel side, odd.
    pub gabor_size: usize,
    /// Skeleton steps traced to get a minutia direction.
    pub trace_len: usize,
    /// Minutiae closer than this to the mask border are dropped.
    pub border_px: usize,
    pub spur_len: usize,
    pub opposing_dist: f64,
    pub bif_ending_dist: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            min_period: 5.0,
            max_period: 15.0,
            fallback_period: 9.0,
            gabor_sigma: 4.0,
            gabor_size: 11,
            trace_len: 10,
            border_px: 16,
            spur_len: 10,
            opposing_dist: 8.0,
            bif_ending_dist: 6.0,
        }
    }
}

/// Ridge period in pixels per orientation block.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyField {
    pub cols: usize,
    pub rows: usize,
    pub periods: Vec<f64>,
}

impl FrequencyField {
    pub fn period(&self, col: usize, row: usize) -> f64 {
        self.periods[row * self.cols + col]
    }
}

/// Signed enhancement output, same geometry as the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Enhanced {
    /// 8-bit rendering for debugging: zero maps to 128.
    pub fn to_gray(&self) -> GrayImage {
        let peak = self.values.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-6);
        let px = self
            .values
            .iter()
            .map(|v| (128.0 + 127.0 * v / peak).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::from_vec(self.width, self.height, px).expect("matching size")
    }
}

/// One-pixel-wide ridge skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton(pub BinaryMask);

impl Skeleton {
    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    fn at(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width() && (y as usize) < self.height() && self.0.get(x as usize, y as usize)
    }

    /// Ring bits N, NE, E, SE, S, SW, W, NW as bits 0..8.
    fn ring(&self, x: usize, y: usize) -> u8 {
        let (x, y) = (x as isize, y as isize);
        let mut bits = 0u8;
        for (i, (dx, dy)) in RING.iter().enumerate() {
            if self.at(x + dx, y + dy) {
                bits |= 1 << i;
            }
        }
        bits
    }

    pub fn crossing_number(&self, x: usize, y: usize) -> u32 {
        crossing_number(self.ring(x, y))
    }

    pub fn has_square(&self) -> bool {
        let (w, h) = (self.width(), self.height());
        (0..h.saturating_sub(1)).any(|y| {
            (0..w - 1).any(|x| self.0.get(x, y) && self.0.get(x + 1, y) && self.0.get(x, y + 1) && self.0.get(x + 1, y + 1))
        })
    }
}

const RING: [(isize, isize); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

#[inline]
fn crossing_number(ring: u8) -> u32 {
    (ring ^ ring.rotate_right(1)).count_ones() / 2
}

/// Pixel mask of the foreground blocks after filling small holes, the
/// region where ridges are enhanced and minutiae accepted.
pub fn extraction_mask(field: &OrientationField) -> BinaryMask {
    let (cols, rows) = (field.cols(), field.rows());
    let mut fg: Vec<bool> = field.blocks().iter().map(|b| b.foreground).collect();
    for _ in 0..2 {
        let prev = fg.clone();
        for r in 0..rows {
            for c in 0..cols {
                if prev[r * cols + c] {
                    continue;
                }
                let mut n = 0;
                for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                    for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                        n += prev[rr * cols + cc] as usize;
                    }
                }
                if n >= 6 {
                    fg[r * cols + c] = true;
                }
            }
        }
    }
    let (w, h) = (field.width_px(), field.height_px());
    let bits = (0..w * h).map(|i| fg[(i / w / BLOCK) * cols + (i % w) / BLOCK]).collect();
    BinaryMask::from_vec(w, h, bits)
}

/// Ridge period per foreground block from the x-signature: a 32x16 window
/// aligned with the block orientation is projected onto the ridge normal
/// and the period is the mean spacing of the signature peaks. Blocks where
/// this fails borrow the mean of valid 3x3 neighbours, else the fallback.
pub fn estimate_frequency(img: &GrayImage, field: &OrientationField, params: &ExtractionParams) -> FrequencyField {
    let (cols, rows) = (field.cols(), field.rows());
    let raw: Vec<Option<f64>> = (0..cols * rows)
        .into_par_iter()
        .map(|i| {
            let (c, r) = (i % cols, i / cols);
            let b = field.block(c, r);
            if !b.foreground {
                return None;
            }
            let p = signature_period(img, OrientationField::block_center(c, r), b.angle);
            p.filter(|p| (params.min_period..=params.max_period).contains(p))
        })
        .collect();
    let mut periods = vec![params.fallback_period; cols * rows];
    for r in 0..rows {
        for c in 0..cols {
            if !field.block(c, r).foreground {
                continue;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                    if let Some(p) = raw[rr * cols + cc] {
                        sum += p;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                periods[r * cols + c] = sum / n as f64;
            }
        }
    }
    FrequencyField { cols, rows, periods }
}

fn signature_period(img: &GrayImage, center: Point, angle: f64) -> Option<f64> {
    const LEN: usize = 32;
    const WIDTH: usize = 16;
    let (t, n) = ((angle.cos(), angle.sin()), (-angle.sin(), angle.cos()));
    let mut sig = [0f64; LEN];
    for (k, s) in sig.iter_mut().enumerate() {
        let u = k as f64 - (LEN as f64 - 1.0) / 2.0;
        for l in 0..WIDTH {
            let v = l as f64 - (WIDTH as f64 - 1.0) / 2.0;
            *s += img.sample_bilinear(center.x - 0.5 + u * n.0 + v * t.0, center.y - 0.5 + u * n.1 + v * t.1, 0.0);
        }
    }
    let mut smooth = sig;
    for k in 1..LEN - 1 {
        smooth[k] = 0.25 * sig[k - 1] + 0.5 * sig[k] + 0.25 * sig[k + 1];
    }
    let (lo, hi) = smooth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < WIDTH as f64 {
        return None;
    }
    let peaks: Vec<usize> = (1..LEN - 1)
        .filter(|&k| smooth[k] > smooth[k - 1] && smooth[k] >= smooth[k + 1])
        .collect();
    if peaks.len() < 2 {
        return None;
    }
    Some((peaks[peaks.len() - 1] - peaks[0]) as f64 / (peaks.len() - 1) as f64)
}

const ANGLE_BINS: usize = 32;
const PERIOD_STEP: f64 = 0.5;
/// Orientation and period are interpolated on this pixel grid.
const CELL: usize = 4;

struct GaborBank {
    size: usize,
    min_period: f64,
    n_periods: usize,
    kernels: Vec<f32>,
}

impl GaborBank {
    fn new(params: &ExtractionParams) -> Self {
        let size = params.gabor_size | 1;
        let n_periods = ((params.max_period - params.min_period) / PERIOD_STEP).round() as usize + 1;
        let half = (size / 2) as f64;
        let s2 = 2.0 * params.gabor_sigma * params.gabor_sigma;
        let mut kernels = Vec::with_capacity(ANGLE_BINS * n_periods * size * size);
        for a in 0..ANGLE_BINS {
            let angle = a as f64 * PI / ANGLE_BINS as f64;
            let (sn, cs) = angle.sin_cos();
            for p in 0..n_periods {
                let period = params.min_period + p as f64 * PERIOD_STEP;
                let mut k: Vec<f64> = (0..size * size)
                    .map(|i| {
                        let (u, v) = ((i % size) as f64 - half, (i / size) as f64 - half);
                        let across = -u * sn + v * cs;
                        (-(u * u + v * v) / s2).exp() * (2.0 * PI * across / period).cos()
                    })
                    .collect();
                let mean = k.iter().sum::<f64>() / k.len() as f64;
                k.iter_mut().for_each(|v| *v -= mean);
                kernels.extend(k.iter().map(|&v| v as f32));
            }
        }
        Self {
            size,
            min_period: params.min_period,
            n_periods,
            kernels,
        }
    }

    fn index(&self, angle: f64, period: f64) -> usize {
        let a = (normalize_pi(angle) / PI * ANGLE_BINS as f64).round() as usize % ANGLE_BINS;
        let p = ((period - self.min_period) / PERIOD_STEP).round().clamp(0.0, (self.n_periods - 1) as f64) as usize;
        a * self.n_periods + p
    }

    fn kernel(&self, idx: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.kernels[idx * n..(idx + 1) * n]
    }
}

/// Per-cell kernel index from orientation and period bilinearly
/// interpolated between foreground block centers.
fn kernel_map(field: &OrientationField, freq: &FrequencyField, bank: &GaborBank, w: usize, h: usize) -> Vec<usize> {
    let smoothed = field.smoothed();
    let (cols, rows) = (field.cols(), field.rows());
    let (cw, ch) = (w.div_ceil(CELL), h.div_ceil(CELL));
    let mut map = vec![0usize; cw * ch];
    for cy in 0..ch {
        for cx in 0..cw {
            let px = (cx * CELL) as f64 + CELL as f64 / 2.0;
            let py = (cy * CELL) as f64 + CELL as f64 / 2.0;
            let u = ((px - BLOCK as f64 / 2.0) / BLOCK as f64).clamp(0.0, (cols - 1) as f64);
            let v = ((py - BLOCK as f64 / 2.0) / BLOCK as f64).clamp(0.0, (rows - 1) as f64);
            let (c0, r0) = (u.floor() as usize, v.floor() as usize);
            let (fu, fv) = (u - c0 as f64, v - r0 as f64);
            let (mut sx, mut sy, mut sp, mut sw) = (0.0, 0.0, 0.0, 0.0);
            for (dc, dr, wt) in [(0, 0, (1.0 - fu) * (1.0 - fv)), (1, 0, fu * (1.0 - fv)), (0, 1, (1.0 - fu) * fv), (1, 1, fu * fv)] {
                let (c, r) = ((c0 + dc).min(cols - 1), (r0 + dr).min(rows - 1));
                let b = smoothed.block(c, r);
                if b.foreground && wt > 0.0 {
                    sx += wt * (2.0 * b.angle).cos();
                    sy += wt * (2.0 * b.angle).sin();
                    sp += wt * freq.period(c, r);
                    sw += wt;
                }
            }
            let (angle, period) = if sw > 0.0 && (sx != 0.0 || sy != 0.0) {
                (0.5 * sy.atan2(sx), sp / sw)
            } else {
                let (c, r) = (((px as usize) / BLOCK).min(cols - 1), ((py as usize) / BLOCK).min(rows - 1));
                (smoothed.block(c, r).angle, freq.period(c, r))
            };
            map[cy * cw + cx] = bank.index(angle, period);
        }
    }
    map
}

/// Even-symmetric Gabor filtering tuned to the local orientation and
/// period. Only pixels inside `mask` are filtered, the rest are zero.
pub fn gabor_enhance(
    img: &GrayImage,
    field: &OrientationField,
    freq: &FrequencyField,
    mask: &BinaryMask,
    params: &ExtractionParams,
) -> Enhanced {
    let (w, h) = (img.width(), img.height());
    let bank = GaborBank::new(params);
    let kmap = kernel_map(field, freq, &bank, w, h);
    let cw = w.div_ceil(CELL);
    let half = bank.size / 2;
    // edge-replicated float copy
    let pw = w + 2 * half;
    let src: Vec<f32> = (0..(h + 2 * half) * pw)
        .map(|i| {
            let x = (i % pw).saturating_sub(half).min(w - 1);
            let y = (i / pw).saturating_sub(half).min(h - 1);
            img.get(x, y) as f32
        })
        .collect();
    let mut values = vec![0f32; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            if !mask.get(x, y) {
                continue;
            }
            let k = bank.kernel(kmap[(y / CELL) * cw + x / CELL]);
            let mut acc = 0f32;
            for ky in 0..bank.size {
                let s = &src[(y + ky) * pw + x..(y + ky) * pw + x + bank.size];
                let kr = &k[ky * bank.size..(ky + 1) * bank.size];
                acc += kr.iter().zip(s).map(|(a, b)| a * b).sum::<f32>();
            }
            *out = acc;
        }
    });
    Enhanced { width: w, height: h, values }
}

/// Positive response is ridge.
pub fn binarize(e: &Enhanced) -> BinaryMask {
    BinaryMask::from_vec(e.width, e.height, e.values.iter().map(|&v| v > 0.0).collect())
}

fn zs_luts() -> [[bool; 256]; 2] {
    let mut lut = [[false; 256]; 2];
    for cfg in 0..256usize {
        let p = |i: usize| (cfg >> i) & 1 == 1;
        let b = cfg.count_ones();
        let a = (0..8).filter(|&i| !p(i) && p((i + 1) % 8)).count();
        let (n, e, s, wst) = (p(0), p(2), p(4), p(6));
        let base = (2..=6).contains(&b) && a == 1;
        lut[0][cfg] = base && !(n && e && s) && !(e && s && wst);
        lut[1][cfg] = base && !(n && e && wst) && !(n && s && wst);
    }
    lut
}

/// Deletable without changing topology and not an end point: the set
/// neighbours form one 8-connected group and some 4-neighbour is unset.
fn simple_lut() -> [bool; 256] {
    let mut lut = [false; 256];
    for cfg in 0..256usize {
        let p = |i: usize| (cfg >> i) & 1 == 1;
        if cfg.count_ones() < 2 || (p(0) && p(2) && p(4) && p(6)) {
            continue;
        }
        let mut parent: [usize; 8] = std::array::from_fn(|i| i);
        fn find(p: &mut [usize; 8], i: usize) -> usize {
            let mut i = i;
            while p[i] != i {
                i = p[i];
            }
            i
        }
        let mut join = |a: usize, b: usize| {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        };
        for i in 0..8 {
            if p(i) && p((i + 1) % 8) {
                join(i, (i + 1) % 8);
            }
            if i % 2 == 0 && p(i) && p((i + 2) % 8) {
                join(i, (i + 2) % 8);
            }
        }
        let roots: std::collections::BTreeSet<usize> = (0..8).filter(|&i| p(i)).map(|i| find(&mut parent, i)).collect();
        lut[cfg] = roots.len() == 1;
    }
    lut
}

/// Zhang-Suen thinning to a fixpoint, followed by removal of redundant
/// staircase pixels. A 2x2 block survives only where each of its pixels
/// anchors a separate branch, so no deletion keeps the topology.
pub fn thin(bin: &BinaryMask) -> Skeleton {
    let (w, h) = (bin.width(), bin.height());
    let pw = w + 2;
    let mut g = vec![0u8; pw * (h + 2)];
    let mut active = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if bin.get(x, y) {
                let i = (y + 1) * pw + x + 1;
                g[i] = 1;
                active.push(i);
            }
        }
    }
    let offs: [isize; 8] = RING.map(|(dx, dy)| dy * pw as isize + dx);
    let ring = |g: &[u8], i: usize| -> usize {
        let mut c = 0;
        for (k, o) in offs.iter().enumerate() {
            c |= (g[(i as isize + o) as usize] as usize) << k;
        }
        c
    };
    let luts = zs_luts();
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for lut in &luts {
            doomed.clear();
            doomed.extend(active.iter().copied().filter(|&i| lut[ring(&g, i)]));
            for &i in &doomed {
                g[i] = 0;
            }
            changed |= !doomed.is_empty();
            active.retain(|&i| g[i] == 1);
        }
        if !changed {
            break;
        }
    }
    let simple = simple_lut();
    loop {
        let mut changed = false;
        for &i in &active {
            if g[i] == 1 && simple[ring(&g, i)] {
                g[i] = 0;
                changed = true;
            }
        }
        active.retain(|&i| g[i] == 1);
        if !changed {
            break;
        }
    }
    let bits = (0..w * h).map(|i| g[(i / w + 1) * pw + i % w + 1] == 1).collect();
    Skeleton(BinaryMask::from_vec(w, h, bits))
}

struct Trace {
    end: (usize, usize),
    steps: usize,
    /// First crossing (CN >= 3) pixel met, if any.
    junction: Option<(usize, usize)>,
}

/// Follows the skeleton from `start` through `first` for up to `max`
/// steps, stopping at end points and junctions.
fn trace(sk: &Skeleton, start: (usize, usize), first: (usize, usize), max: usize) -> Trace {
    let mut visited = vec![start, first];
    let mut cur = first;
    let mut steps = 1;
    loop {
        if sk.crossing_number(cur.0, cur.1) >= 3 {
            return Trace { end: cur, steps, junction: Some(cur) };
        }
        if steps >= max {
            break;
        }
        let next = neighbours(sk, cur).into_iter().find(|p| !visited.contains(p));
        match next {
            Some(n) => {
                visited.push(n);
                cur = n;
                steps += 1;
            }
            None => break,
        }
    }
    Trace { end: cur, steps, junction: None }
}

/// Set 8-neighbours, 4-neighbours first.
fn neighbours(sk: &Skeleton, p: (usize, usize)) -> Vec<(usize, usize)> {
    let (x, y) = (p.0 as isize, p.1 as isize);
    [0, 2, 4, 6, 1, 3, 5, 7]
        .iter()
        .map(|&i| (x + RING[i].0, y + RING[i].1))
        .filter(|&(nx, ny)| sk.at(nx, ny))
        .map(|(nx, ny)| (nx as usize, ny as usize))
        .collect()
}

/// One start pixel per run of set ring pixels, preferring 4-neighbours.
fn branch_starts(sk: &Skeleton, p: (usize, usize)) -> Vec<(usize, usize)> {
    let ring = sk.ring(p.0, p.1);
    let mut starts = Vec::new();
    for i in 0..8 {
        // run begins where the previous ring pixel is unset
        if ring & (1 << i) == 0 || ring & (1 << ((i + 7) % 8)) != 0 {
            continue;
        }
        let mut best = i;
        let mut j = i;
        while ring & (1 << j) != 0 {
            if j % 2 == 0 {
                best = j;
                break;
            }
            j = (j + 1) % 8;
            if j == i {
                break;
            }
        }
        let (dx, dy) = RING[best];
        starts.push(((p.0 as isize + dx) as usize, (p.1 as isize + dy) as usize));
    }
    starts
}

/// A detected minutia with the skeleton evidence refinement needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawMinutia {
    pub minutia: Minutia,
    pub pixel: (usize, usize),
    /// Length of the traced branch for endings.
    pub branch_len: usize,
    /// Junction or end point reached by an ending's trace before `trace_len`.
    pub reached: Option<(usize, usize)>,
    pub reached_junction: bool,
}

fn direction(from: (usize, usize), to: (usize, usize)) -> f64 {
    (to.1 as f64 - from.1 as f64).atan2(to.0 as f64 - from.0 as f64)
}

/// Crossing-number detection on skeleton pixels at least `border_px` away
/// from any unset mask pixel or the image edge.
pub fn detect_minutiae(sk: &Skeleton, mask: &BinaryMask, params: &ExtractionParams) -> Vec<RawMinutia> {
    let (w, h) = (sk.width(), sk.height());
    let sat = mask.integral();
    let b = params.border_px;
    let inside = |x: usize, y: usize| -> bool {
        if x < b || y < b || x + b >= w || y + b >= h {
            return false;
        }
        let (x0, y0, x1, y1) = (x - b, y - b, x + b + 1, y + b + 1);
        let s = w + 1;
        let n = sat[y1 * s + x1] + sat[y0 * s + x0] - sat[y0 * s + x1] - sat[y1 * s + x0];
        n as usize == (2 * b + 1) * (2 * b + 1)
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !sk.0.get(x, y) {
                continue;
            }
            let cn = sk.crossing_number(x, y);
            if (cn != 1 && cn != 3) || !inside(x, y) {
                continue;
            }
            let p = (x, y);
            let starts = branch_starts(sk, p);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if cn == 1 {
                let Some(&first) = starts.first() else { continue };
                let t = trace(sk, p, first, params.trace_len);
                let ended_early = t.steps < params.trace_len;
                out.push(RawMinutia {
                    minutia: Minutia::new(px, py, direction(p, t.end), MinutiaKind::Ending),
                    pixel: p,
                    branch_len: t.steps,
                    reached: ended_early.then_some(t.end),
                    reached_junction: t.junction.is_some(),
                });
            } else {
                if starts.len() != 3 {
                    continue;
                }
                let dirs: Vec<f64> = starts.iter().map(|&s| direction(p, trace(sk, p, s, params.trace_len).end)).collect();
                let mut best = (f64::INFINITY, 0.0);
                for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                    let d = angle_diff_2pi(dirs[i], dirs[j]);
                    if d.abs() < best.0 {
                        best = (d.abs(), dirs[j] + d / 2.0);
                    }
                }
                out.push(RawMinutia {
                    minutia: Minutia::new(px, py, best.1, MinutiaKind::Bifurcation),
                    pixel: p,
                    branch_len: 0,
                    reached: None,
                    reached_junction: false,
                });
            }
        }
    }
    out
}

/// Detection without the refinement bookkeeping.
pub fn extract_minutiae(sk: &Skeleton, mask: &BinaryMask, params: &ExtractionParams) -> Vec<Minutia> {
    detect_minutiae(sk, mask, params).into_iter().map(|r| r.minutia).collect()
}

/// Removes spurs and short fragments (an ending whose branch stops within
/// `spur_len` steps, together with the junction it runs into), facing
/// ending pairs closer than `opposing_dist` and bifurcation/ending pairs
/// closer than `bif_ending_dist`. Adjacent duplicate bifurcations collapse
/// into one.
pub fn refine_minutiae(raw: &[RawMinutia], params: &ExtractionParams) -> Vec<Minutia> {
    let n = raw.len();
    let mut keep = vec![true; n];
    let near = |a: (usize, usize), b: (usize, usize), r: usize| a.0.abs_diff(b.0) <= r && a.1.abs_diff(b.1) <= r;

    for i in 0..n {
        let r = &raw[i];
        if r.minutia.kind != MinutiaKind::Ending || r.branch_len >= params.spur_len {
            continue;
        }
        if let Some(end) = r.reached {
            keep[i] = false;
            for j in 0..n {
                let other = &raw[j];
                let hit = if r.reached_junction {
                    other.minutia.kind == MinutiaKind::Bifurcation && near(other.pixel, end, 1)
                } else {
                    other.minutia.kind == MinutiaKind::Ending && other.pixel == end
                };
                if hit {
                    keep[j] = false;
                }
            }
        }
    }

    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&raw[i].minutia, &raw[j].minutia);
            let d = a.pos().dist(b.pos());
            let remove = match (a.kind, b.kind) {
                (MinutiaKind::Ending, MinutiaKind::Ending) => {
                    d < params.opposing_dist && angle_diff_2pi(a.theta, b.theta + PI).abs() < PI / 3.0
                }
                (MinutiaKind::Ending, MinutiaKind::Bifurcation) | (MinutiaKind::Bifurcation, MinutiaKind::Ending) => {
                    d < params.bif_ending_dist
                }
                _ => false,
            };
            if remove {
                keep[i] = false;
                keep[j] = false;
            }
        }
    }

    for i in 0..n {
        if !keep[i] || raw[i].minutia.kind != MinutiaKind::Bifurcation {
            continue;
        }
        for j in i + 1..n {
            if keep[j] && raw[j].minutia.kind == MinutiaKind::Bifurcation && near(raw[i].pixel, raw[j].pixel, 2) {
                keep[j] = false;
            }
        }
    }
    raw.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r.minutia).collect()
}

/// Intermediate products of an extraction run.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub minutiae: Vec<Minutia>,
    pub raw_count: usize,
    pub frequency: FrequencyField,
    pub enhanced: Enhanced,
    pub skeleton: Skeleton,
    pub mask: BinaryMask,
}

/// Full chain on an image whose orientation field is already known.
pub fn extract(img: &GrayImage, field: &OrientationField, params: &ExtractionParams) -> Extraction {
    let mask = extraction_mask(field);
    let frequency = estimate_frequency(img, field, params);
    let enhanced = gabor_enhance(img, field, &frequency, &mask, params);
    let skeleton = thin(&binarize(&enhanced));
    let raw = detect_minutiae(&skeleton, &mask, params);
    let minutiae = refine_minutiae(&raw, params);
    Extraction {
        minutiae,
        raw_count: raw.len(),
        frequency,
        enhanced,
        skeleton,
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orientation::{estimate_orientation_field, OrientationParams};
    use crate::synth::{self, SynthSpec};

    fn stripes(size: usize, period: f64, angle: f64) -> GrayImage {
        let (s, c) = angle.sin_cos();
        GrayImage::from_fn(size, size, |x, y| {
            let across = -(x as f64) * s + y as f64 * c;
            (128.0 + 100.0 * (2.0 * PI * across / period).cos()).round() as u8
        })
    }

    fn sk_from(w: usize, h: usize, pts: &[(usize, usize)]) -> Skeleton {
        let mut m = BinaryMask::new(w, h, false);
        for &(x, y) in pts {
            m.set(x, y, true);
        }
        Skeleton(m)
    }

    #[test]
    fn frequency_of_stripes() {
        let params = ExtractionParams::default();
        for (period, angle) in [(10.0, 0.3), (7.0, 1.2), (13.0, 2.0)] {
            let img = stripes(256, period, angle);
            let f = estimate_orientation_field(&img, None, &OrientationParams::default()).unwrap();
            let freq = estimate_frequency(&img, &f, &params);
            for (c, r, _) in f.foreground_blocks() {
                if c > 1 && r > 1 && c < f.cols() - 2 && r < f.rows() - 2 {
                    assert!((freq.period(c, r) - period).abs() <= 1.0, "{period}: {}", freq.period(c, r));
                }
            }
        }
        let flat = GrayImage::filled(64, 64, 0);
        let bg = OrientationField::background(4, 4);
        let freq = estimate_frequency(&flat, &bg, &params);
        assert!(freq.periods.iter().all(|&p| p == 9.0));
    }

    #[test]
    fn constant_image_has_no_response() {
        let img = GrayImage::filled(64, 64, 77);
        let f = estimate_orientation_field(&stripes(64, 9.0, 0.5), None, &OrientationParams::default()).unwrap();
        let params = ExtractionParams::default();
        let freq = estimate_frequency(&img, &f, &params);
        let e = gabor_enhance(&img, &f, &freq, &BinaryMask::new(64, 64, true), &params);
        assert!(e.values.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn binarized_stripes_keep_period() {
        let period = 9.0;
        let img = stripes(256, period, 0.0);
        let f = estimate_orientation_field(&img, None, &OrientationParams::default()).unwrap();
        let params = ExtractionParams::default();
        let freq = estimate_frequency(&img, &f, &params);
        let bin = binarize(&gabor_enhance(&img, &f, &freq, &BinaryMask::new(256, 256, true), &params));
        // ridges run along x, so count ridge rows along a column
        let col: Vec<bool> = (40..216).map(|y| bin.get(128, y)).collect();
        let starts: Vec<usize> = (1..col.len()).filter(|&i| col[i] && !col[i - 1]).collect();
        let spacing = (starts[starts.len() - 1] - starts[0]) as f64 / (starts.len() - 1) as f64;
        assert!((spacing - period).abs() <= 1.0, "{spacing}");
    }

    #[test]
    fn binarize_signs() {
        let pos = Enhanced { width: 3, height: 2, values: vec![0.5; 6] };
        assert_eq!(binarize(&pos).count(), 6);
        let neg = Enhanced { width: 3, height: 2, values: vec![-0.5; 6] };
        assert_eq!(binarize(&neg).count(), 0);
    }

    #[test]
    fn square_with_four_branches_is_kept() {
        // 2x2 block with a diagonal branch leaving each corner
        let mut m = BinaryMask::new(12, 12, false);
        for (x, y) in [(5, 5), (6, 5), (5, 6), (6, 6)] {
            m.set(x, y, true);
        }
        for k in 1..4 {
            m.set(5 - k, 5 - k, true);
            m.set(6 + k, 5 - k, true);
            m.set(5 - k, 6 + k, true);
            m.set(6 + k, 6 + k, true);
        }
        let sk = thin(&m);
        assert_eq!(sk.0, m);
        assert!(sk.has_square());
    }

    #[test]
    fn thin_bar_and_disk() {
        let mut bar = BinaryMask::new(60, 20, false);
        for y in 8..13 {
            for x in 10..50 {
                bar.set(x, y, true);
            }
        }
        let sk = thin(&bar);
        assert!(!sk.has_square());
        for x in 14..46 {
            assert_eq!((0..20).filter(|&y| sk.0.get(x, y)).count(), 1, "column {x}");
        }
        let xs: Vec<usize> = (0..60).filter(|&x| (0..20).any(|y| sk.0.get(x, y))).collect();
        // medial axis of the bar runs from x = 12 to x = 47
        assert!(xs[0].abs_diff(12) <= 2 && xs.last().unwrap().abs_diff(47) <= 2, "{xs:?}");

        let again = thin(&sk.0);
        assert_eq!(again, sk);

        let mut disk = BinaryMask::new(60, 60, false);
        for y in 0..60 {
            for x in 0..60 {
                if (x as f64 - 30.0).powi(2) + (y as f64 - 30.0).powi(2) <= 400.0 {
                    disk.set(x, y, true);
                }
            }
        }
        let sk = thin(&disk);
        assert!(!sk.has_square());
        assert!(sk.0.count() <= 4 && sk.0.count() >= 1, "{}", sk.0.count());
    }

    #[test]
    fn segment_gives_two_opposite_endings() {
        let pts: Vec<(usize, usize)> = (20..60).map(|x| (x, 40)).collect();
        let sk = sk_from(80, 80, &pts);
        let mask = BinaryMask::new(80, 80, true);
        let ms = extract_minutiae(&sk, &mask, &ExtractionParams::default());
        assert_eq!(ms.len(), 2);
        assert!(ms.iter().all(|m| m.kind == MinutiaKind::Ending));
        let d = angle_diff_2pi(ms[0].theta, ms[1].theta + PI).abs();
        assert!(d < 15f64.to_radians());
        // left end points right along the ridge
        assert!(angle_diff_2pi(ms[0].theta, 0.0).abs() < 1e-9);
    }

    #[test]
    fn y_junction() {
        let mut pts: Vec<(usize, usize)> = (20..50).map(|x| (x, 50)).collect();
        for k in 1..25 {
            pts.push((49 + k, 50 - k));
            pts.push((49 + k, 50 + k));
        }
        let sk = sk_from(100, 100, &pts);
        let mask = BinaryMask::new(100, 100, true);
        let ms = extract_minutiae(&sk, &mask, &ExtractionParams::default());
        let bif: Vec<_> = ms.iter().filter(|m| m.kind == MinutiaKind::Bifurcation).collect();
        assert_eq!(bif.len(), 1);
        assert_eq!(ms.iter().filter(|m| m.kind == MinutiaKind::Ending).count(), 3);
        // points between the two forks
        assert!(angle_diff_2pi(bif[0].theta, 0.0).abs() < 10f64.to_radians());
    }

    #[test]
    fn crossing_numbers_bounded() {
        for cfg in 0..=255u8 {
            assert!(crossing_number(cfg) <= 4);
        }
    }

    #[test]
    fn border_minutiae_dropped() {
        let pts: Vec<(usize, usize)> = (5..60).map(|x| (x, 40)).collect();
        let sk = sk_from(80, 80, &pts);
        let ms = extract_minutiae(&sk, &BinaryMask::new(80, 80, true), &ExtractionParams::default());
        assert_eq!(ms.len(), 1);
        assert!(ms[0].x > 50.0);
    }

    #[test]
    fn refinement_rules() {
        let params = ExtractionParams::default();
        let mask = BinaryMask::new(120, 120, true);
        // long ridge with a 5 px spur
        let mut pts: Vec<(usize, usize)> = (20..100).map(|x| (x, 60)).collect();
        pts.extend((1..=5).map(|k| (60, 60 - k)));
        let sk = sk_from(120, 120, &pts);
        let raw = detect_minutiae(&sk, &mask, &params);
        assert_eq!(raw.len(), 4);
        let refined = refine_minutiae(&raw, &params);
        assert_eq!(refined.len(), 2);
        assert!(refined.iter().all(|m| m.kind == MinutiaKind::Ending && m.y == 60.5));

        // two collinear ridges with a 20 px gap keep all four endings
        let mut pts: Vec<(usize, usize)> = (20..50).map(|x| (x, 60)).collect();
        pts.extend((70..100).map(|x| (x, 60)));
        let raw = detect_minutiae(&sk_from(120, 120, &pts), &mask, &params);
        assert_eq!(refine_minutiae(&raw, &params).len(), 4);

        // a 4 px gap is a broken ridge
        let mut pts: Vec<(usize, usize)> = (20..58).map(|x| (x, 60)).collect();
        pts.extend((62..100).map(|x| (x, 60)));
        let raw = detect_minutiae(&sk_from(120, 120, &pts), &mask, &params);
        assert_eq!(refine_minutiae(&raw, &params).len(), 2);
    }

    fn recall_precision(found: &[Minutia], truth: &[Minutia], mask: &BinaryMask, border: f64) -> (f64, f64) {
        let tol_d = 12.0;
        let tol_a = 30f64.to_radians();
        let usable = |m: &Minutia| {
            let (x, y) = (m.x as usize, m.y as usize);
            let b = border as usize;
            x >= b && y >= b && x + b < mask.width() && y + b < mask.height() && {
                (y - b..=y + b).step_by(4).all(|yy| (x - b..=x + b).step_by(4).all(|xx| mask.get(xx, yy)))
            }
        };
        let truth: Vec<&Minutia> = truth.iter().filter(|m| usable(m)).collect();
        let hit = |a: &Minutia, b: &Minutia| a.pos().dist(b.pos()) <= tol_d && angle_diff_2pi(a.theta, b.theta).abs() <= tol_a;
        let recalled = truth.iter().filter(|t| found.iter().any(|f| hit(f, t))).count();
        let all_truth: Vec<&Minutia> = truth.to_vec();
        let precise = found.iter().filter(|f| all_truth.iter().any(|t| hit(f, t))).count();
        (recalled as f64 / truth.len() as f64, precise as f64 / found.len().max(1) as f64)
    }

    #[test]
    fn synthetic_palm_recall_and_precision() {
        let palm = synth::generate(&SynthSpec {
            seed: 11,
            size: 1024,
            n_minutiae: 150,
            noise_snr_db: Some(15.0),
            ..Default::default()
        });
        let f = estimate_orientation_field(&palm.image, None, &OrientationParams::default()).unwrap();
        let ex = extract(&palm.image, &f, &ExtractionParams::default());
        assert!(!ex.skeleton.has_square());
        let (recall, precision) = recall_precision(&ex.minutiae, &palm.minutiae, &ex.mask, 24.0);
        assert!(recall >= 0.8 && precision >= 0.8, "recall {recall:.3} precision {precision:.3} n {}", ex.minutiae.len());
    }

    #[test]
    fn translation_equivariance() {
        let palm = synth::generate(&SynthSpec {
            seed: 5,
            size: 512,
            n_minutiae: 30,
            noise_snr_db: Some(20.0),
            ..Default::default()
        });
        let shifted = GrayImage::from_fn(528, 528, |x, y| if x < 16 || y < 16 { 0 } else { palm.image.get(x - 16, y - 16) });
        let padded = GrayImage::from_fn(528, 528, |x, y| if x >= 512 || y >= 512 { 0 } else { palm.image.get(x, y) });
        let op = OrientationParams::default();
        let params = ExtractionParams::default();
        let a = extract(&padded, &estimate_orientation_field(&padded, None, &op).unwrap(), &params).minutiae;
        let b = extract(&shifted, &estimate_orientation_field(&shifted, None, &op).unwrap(), &params).minutiae;
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!((p.x + 16.0, p.y + 16.0, p.theta, p.kind), (q.x, q.y, q.theta, q.kind));
        }
    }
}
