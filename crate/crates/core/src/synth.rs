//! Synthetic palm-like ridge images with known pose, minutiae and
//! foreground.
//!
//! Ridges follow the level sets of the signed distance to a tilted
//! parabola whose vertex sits near the palm edge, which gives a flow with
//! curvature, real orientation spread and no mirror symmetry. Minutiae are
//! planted as pairs of opposite phase vortices: a pair centered on a valley
//! line becomes a short ridge (two endings), one centered on a ridge line
//! becomes a lake (two bifurcations).

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::extraction::{Minutia, MinutiaKind};
use crate::geometry::{angle_diff_2pi, mirror_direction, mirror_x, normalize_pi, Point, RigidPose};
use crate::image::{BinaryMask, GrayImage};
use crate::orientation::{Block, OrientationField, BLOCK};

const MEAN_LEVEL: f64 = 128.0;
const AMPLITUDE: f64 = 96.0;
const PAIR_LEN: (f64, f64) = (24.0, 48.0);
const PAIR_GAP: f64 = 18.0;
const MARGIN: f64 = 40.0;
const GRID: f64 = 64.0;
const LATTICE: f64 = 8.0;
// vortex pair phase window, in units of the pair length
const INNER: f64 = 1.25;
const OUTER: f64 = 2.5;

/// Foreground shape: an ellipse (semi-axes as fractions of the image size)
/// with a random low-order radial wobble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub semi_x: f64,
    pub semi_y: f64,
    pub irregularity: f64,
    /// Width of the soft intensity ramp at the boundary, px.
    pub edge_px: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            semi_x: 0.32,
            semi_y: 0.40,
            irregularity: 0.06,
            edge_px: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub size: usize,
    pub ridge_period: f64,
    pub n_minutiae: usize,
    pub blob: BlobSpec,
    /// Maps the canonical palm into the output image.
    pub pose: RigidPose,
    /// Render the mirror image of the canonical (left) palm.
    pub mirrored: bool,
    pub noise_snr_db: Option<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 2048,
            ridge_period: 9.0,
            n_minutiae: 600,
            blob: BlobSpec::default(),
            pose: RigidPose::IDENTITY,
            mirrored: false,
            noise_snr_db: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthPalm {
    pub image: GrayImage,
    /// Analytic orientation field of the posed palm, quality 1 inside.
    pub field: OrientationField,
    /// Planted minutiae in output-image coordinates.
    pub minutiae: Vec<Minutia>,
    pub foreground: BinaryMask,
}

/// Ridge flow: level sets of the signed distance to `y = κ x²` in a local
/// frame anchored at `vertex`.
#[derive(Debug, Clone, Copy)]
struct Flow {
    vertex: Point,
    ex: (f64, f64),
    ey: (f64, f64),
    kappa: f64,
}

impl Flow {
    fn canonical(size: f64, kappa_scale: f64) -> Self {
        let tilt = 45f64.to_radians();
        // opening direction, pointing away from the palm center
        let ey = (tilt.sin(), -tilt.cos());
        let ex = (ey.1, -ey.0);
        let c = size / 2.0;
        Self {
            vertex: Point::new(c + 0.35 * size * ey.0, c + 0.35 * size * ey.1),
            ex,
            ey,
            kappa: 10.0 / size * kappa_scale,
        }
    }

    #[inline]
    fn local(&self, q: Point) -> (f64, f64) {
        let (px, py) = (q.x - self.vertex.x, q.y - self.vertex.y);
        (px * self.ex.0 + py * self.ex.1, px * self.ey.0 + py * self.ey.1)
    }

    /// Curve parameter of the closest point on the parabola.
    #[inline]
    fn foot(&self, xl: f64, yl: f64, mut t: f64) -> f64 {
        let k = self.kappa;
        // monotone cubic wherever 2κ·yl < 1, which holds over the palm
        let lin = (1.0 - 2.0 * k * yl).max(1e-3);
        for _ in 0..30 {
            let f = 2.0 * k * k * t * t * t + lin * t - xl;
            let fp = 6.0 * k * k * t * t + lin;
            let step = f / fp;
            t -= step;
            if step.abs() < 1e-7 {
                break;
            }
        }
        t
    }

    /// Signed distance (positive on the concave side) and the curve
    /// parameter, warm-started from `hint`.
    #[inline]
    fn distance(&self, q: Point, hint: f64) -> (f64, f64) {
        let (xl, yl) = self.local(q);
        let t = self.foot(xl, yl, hint);
        let d = (t - xl).hypot(self.kappa * t * t - yl);
        let s = if yl > self.kappa * xl * xl { 1.0 } else { -1.0 };
        (s * d, t)
    }

    /// Ridge orientation in `[0, π)`: the curve tangent at the foot point.
    fn orientation(&self, q: Point) -> f64 {
        let (xl, yl) = self.local(q);
        let t = self.foot(xl, yl, xl);
        let s = 2.0 * self.kappa * t;
        normalize_pi((self.ex.1 + self.ey.1 * s).atan2(self.ex.0 + self.ey.0 * s))
    }

    /// Unit normal (direction of increasing signed distance).
    fn normal(&self, q: Point) -> (f64, f64) {
        let a = self.orientation(q);
        let n = (-a.sin(), a.cos());
        let probe = Point::new(q.x + n.0, q.y + n.1);
        if self.distance(probe, 0.0).0 >= self.distance(q, 0.0).0 {
            n
        } else {
            (-n.0, -n.1)
        }
    }
}

#[derive(Debug, Clone)]
struct Blob {
    center: Point,
    sx: f64,
    sy: f64,
    harmonics: Vec<(f64, f64)>,
    /// Sum of the harmonic amplitudes.
    band: f64,
    edge: f64,
}

impl Blob {
    /// Approximate signed distance to the boundary in px, positive inside.
    fn inside_distance(&self, q: Point) -> f64 {
        let u = (q.x - self.center.x) / self.sx;
        let v = (q.y - self.center.y) / self.sy;
        let r2 = u * u + v * v;
        // far from the wobble band only the sign and "clears the ramp"
        // matter to callers, so skip the angular term there
        let scale = self.sx.min(self.sy);
        let slack = self.band + 4.0 * self.edge.max(MARGIN) / scale;
        if r2 < (1.0 - slack).max(0.0).powi(2) || r2 > (1.0 + slack).powi(2) {
            return (1.0 - r2.sqrt()) * scale;
        }
        let r = r2.sqrt();
        let phi = v.atan2(u);
        let rho = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| a * ((i + 2) as f64 * phi + b).cos())
                .sum::<f64>();
        (rho - r) * scale
    }

    fn weight_of(&self, inside: f64) -> f64 {
        let t = (inside / self.edge).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

}

#[derive(Debug, Clone, Copy)]
struct Vortex {
    a: Point,
    b: Point,
    mid: Point,
    len: f64,
}

impl Vortex {
    /// Windowed phase of the +1/-1 vortex pair at `q`.
    #[inline]
    fn phase(&self, q: Point) -> f64 {
        let (inner, outer) = (INNER * self.len, OUTER * self.len);
        let r2 = (q.x - self.mid.x).powi(2) + (q.y - self.mid.y).powi(2);
        if r2 >= outer * outer {
            return 0.0;
        }
        let r = r2.sqrt();
        let (ux, uy) = (q.x - self.a.x, q.y - self.a.y);
        let (vx, vy) = (q.x - self.b.x, q.y - self.b.y);
        // arg((q - a) / (q - b))
        let phi = (uy * vx - ux * vy).atan2(ux * vx + uy * vy);
        if r <= inner {
            phi
        } else {
            let t = (outer - r) / (outer - inner);
            phi * t * t * (3.0 - 2.0 * t)
        }
    }
}

struct Palm {
    period: f64,
    phase0: f64,
    flow: Flow,
    blob: Blob,
    vortices: Vec<Vortex>,
    grid_cols: usize,
    grid: Vec<Vec<u32>>,
    /// Base phase sampled every `LATTICE` px, for fast rendering.
    lattice: Vec<f64>,
    lattice_n: usize,
}

impl Palm {
    fn base_phase(&self, q: Point, hint: f64) -> (f64, f64) {
        let (d, t) = self.flow.distance(q, hint);
        (TAU * d / self.period + self.phase0, t)
    }

    fn build_lattice(&mut self, size: f64) {
        let n = (size / LATTICE).ceil() as usize + 2;
        let mut lat = vec![0.0; n * n];
        lat.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
            let mut hint = 0.0;
            for (i, v) in row.iter_mut().enumerate() {
                let (phi, t) = self.base_phase(Point::new(i as f64 * LATTICE, j as f64 * LATTICE), hint);
                hint = t;
                *v = phi;
            }
        });
        self.lattice = lat;
        self.lattice_n = n;
    }

    /// Bilinear interpolation of the base phase lattice.
    #[inline]
    fn lattice_phase(&self, q: Point) -> f64 {
        let n = self.lattice_n;
        let fx = (q.x / LATTICE).clamp(0.0, (n - 1) as f64 - 1e-9);
        let fy = (q.y / LATTICE).clamp(0.0, (n - 1) as f64 - 1e-9);
        let (i, j) = (fx as usize, fy as usize);
        let (ax, ay) = (fx - i as f64, fy - j as f64);
        let at = |i: usize, j: usize| self.lattice[j * n + i];
        let top = at(i, j) * (1.0 - ax) + at(i + 1, j) * ax;
        let bottom = at(i, j + 1) * (1.0 - ax) + at(i + 1, j + 1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    #[inline]
    fn cell(&self, q: Point) -> Option<usize> {
        let (gx, gy) = ((q.x / GRID).floor(), (q.y / GRID).floor());
        if gx < 0.0 || gy < 0.0 || gx as usize >= self.grid_cols || gy as usize >= self.grid_cols {
            return None;
        }
        Some(gy as usize * self.grid_cols + gx as usize)
    }

    fn vortex_phase(&self, q: Point, skip: Option<usize>) -> f64 {
        let Some(cell) = self.cell(q) else {
            return 0.0;
        };
        self.grid[cell]
            .iter()
            .filter(|&&i| Some(i as usize) != skip)
            .map(|&i| self.vortices[i as usize].phase(q))
            .sum()
    }

    fn insert_grid(&mut self, idx: usize) {
        let v = self.vortices[idx];
        // also covers every midpoint a conflicting pair could have
        let reach = (OUTER * v.len).max(v.len / 2.0 + PAIR_GAP + PAIR_LEN.1 / 2.0);
        let lo = |c: f64| ((c - reach) / GRID).floor().max(0.0) as usize;
        let hi = |c: f64| (((c + reach) / GRID).floor().max(0.0) as usize).min(self.grid_cols - 1);
        for gy in lo(v.mid.y)..=hi(v.mid.y) {
            for gx in lo(v.mid.x)..=hi(v.mid.x) {
                self.grid[gy * self.grid_cols + gx].push(idx as u32);
            }
        }
    }
}

fn build_palm(spec: &SynthSpec) -> (Palm, Vec<Minutia>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size as f64;
    let flow = Flow::canonical(size, rng.random_range(0.95..1.05));
    let phase0 = rng.random_range(0.0..TAU);
    let harmonics: Vec<(f64, f64)> = (0..4)
        .map(|i| {
            let a = rng.random_range(0.0..=spec.blob.irregularity / (i + 1) as f64);
            (a, rng.random_range(0.0..TAU))
        })
        .collect();
    let blob = Blob {
        center: Point::new(size / 2.0, size / 2.0),
        sx: spec.blob.semi_x * size,
        sy: spec.blob.semi_y * size,
        band: harmonics.iter().map(|h: &(f64, f64)| h.0).sum(),
        harmonics,
        edge: spec.blob.edge_px.max(1e-3),
    };
    let grid_cols = (size / GRID).ceil().max(1.0) as usize;
    let mut palm = Palm {
        period: spec.ridge_period,
        phase0,
        flow,
        blob,
        vortices: Vec::new(),
        grid_cols,
        grid: vec![Vec::new(); grid_cols * grid_cols],
        lattice: Vec::new(),
        lattice_n: 0,
    };
    palm.build_lattice(size);

    let pairs = spec.n_minutiae / 2;
    let k = TAU / palm.period;
    let mut attempts = 0;
    while palm.vortices.len() < pairs && attempts < 60 * pairs.max(1) {
        attempts += 1;
        let p = Point::new(
            rng.random_range(palm.blob.center.x - palm.blob.sx * 1.2..palm.blob.center.x + palm.blob.sx * 1.2),
            rng.random_range(palm.blob.center.y - palm.blob.sy * 1.2..palm.blob.center.y + palm.blob.sy * 1.2),
        );
        let ending = rng.random_bool(0.5);
        let len = rng.random_range(PAIR_LEN.0..PAIR_LEN.1);
        let forward = rng.random_bool(0.5);
        if palm.blob.inside_distance(p) < MARGIN {
            continue;
        }
        // snap onto a valley line (short ridge) or a ridge line (lake),
        // counting the phase already added by nearby pairs
        let target = if ending { PI } else { 0.0 };
        let snap = |palm: &Palm, q: Point, target: f64| {
            let mut q = q;
            for _ in 0..2 {
                let phi = palm.base_phase(q, 0.0).0 + palm.vortex_phase(q, None);
                let n = palm.flow.normal(q);
                let delta = angle_diff_2pi(target, phi) / k;
                q = Point::new(q.x + n.0 * delta, q.y + n.1 * delta);
            }
            q
        };
        let a = snap(&palm, p, target);
        let dir = palm.flow.orientation(a) + if forward { 0.0 } else { PI };
        let b0 = Point::new(a.x + len * dir.cos(), a.y + len * dir.sin());
        let b = snap(&palm, b0, target);
        if palm.blob.inside_distance(a) < MARGIN || palm.blob.inside_distance(b) < MARGIN {
            continue;
        }
        // a pair within the gap has its midpoint closer than its own
        // influence radius to ours, so it is registered in our cell
        let mid = Point::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0);
        let clear = palm.cell(mid).is_none_or(|cell| {
            palm.grid[cell].iter().all(|&i| {
                let v = &palm.vortices[i as usize];
                segment_distance(a, b, v.a, v.b) >= PAIR_GAP
            })
        });
        if !clear {
            continue;
        }
        let len = a.dist(b);
        palm.vortices.push(Vortex {
            a,
            b,
            mid: Point::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0),
            len,
        });
        let idx = palm.vortices.len() - 1;
        palm.insert_grid(idx);
    }

    let mut minutiae = Vec::with_capacity(2 * palm.vortices.len());
    for (i, v) in palm.vortices.iter().enumerate() {
        let ab = (v.b.y - v.a.y).atan2(v.b.x - v.a.x);
        let (ka, toward_a) = end_label(&palm, i, 0.0);
        let (kb, toward_b) = end_label(&palm, i, 1.0);
        minutiae.push(Minutia::new(v.a.x, v.a.y, ab + if toward_a { 0.0 } else { PI }, ka));
        minutiae.push(Minutia::new(v.b.x, v.b.y, ab + if toward_b { PI } else { 0.0 }, kb));
    }
    (palm, minutiae)
}

/// Kind of the end of pair `i` at `t` (0 for A, 1 for B) and whether its
/// direction points toward the partner.
///
/// Between its ends the pair shifts the phase by π, so the line it sits on
/// swaps ridge and valley, and the phase count across the segment changes
/// by one period. When the ambient phase (everything but this pair) grows
/// across the segment toward `(-u_y, u_x)`, `u` the unit vector A→B, a line
/// is inserted: a ridge on a valley line (endings) or a valley on a ridge
/// line (bifurcations), both opening toward the partner. Otherwise a line
/// is removed: the ridge on a ridge line is cut (endings) or the two
/// ridges around a valley line merge (bifurcations), both opening away
/// from the partner. The ambient phase is sampled just inside the segment.
fn end_label(palm: &Palm, i: usize, t: f64) -> (MinutiaKind, bool) {
    let v = &palm.vortices[i];
    let probe = (v.len * 0.2).min(6.0) / v.len;
    let t = if t < 0.5 { probe } else { 1.0 - probe };
    let (ux, uy) = ((v.b.x - v.a.x) / v.len, (v.b.y - v.a.y) / v.len);
    let ambient = |q: Point| palm.base_phase(q, 0.0).0 + palm.vortex_phase(q, Some(i));
    let q = Point::new(v.a.x + t * (v.b.x - v.a.x), v.a.y + t * (v.b.y - v.a.y));
    let on_ridge = ambient(q).cos() > 0.0;
    let h = 0.5;
    let grad = angle_diff_2pi(
        ambient(Point::new(q.x - uy * h, q.y + ux * h)),
        ambient(Point::new(q.x + uy * h, q.y - ux * h)),
    );
    let inserts = grad > 0.0;
    let kind = if on_ridge == inserts {
        MinutiaKind::Bifurcation
    } else {
        MinutiaKind::Ending
    };
    (kind, inserts)
}

fn segment_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    fn point_seg(p: Point, a: Point, b: Point) -> f64 {
        let (vx, vy) = (b.x - a.x, b.y - a.y);
        let l2 = vx * vx + vy * vy;
        let t = if l2 > 0.0 {
            (((p.x - a.x) * vx + (p.y - a.y) * vy) / l2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        p.dist(Point::new(a.x + t * vx, a.y + t * vy))
    }
    let cross = |o: Point, p: Point, q: Point| (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
    let (d1, d2) = (cross(a, b, c), cross(a, b, d));
    let (d3, d4) = (cross(c, d, a), cross(c, d, b));
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return 0.0;
    }
    point_seg(c, a, b)
        .min(point_seg(d, a, b))
        .min(point_seg(a, c, d))
        .min(point_seg(b, c, d))
}

/// Output pixel position to canonical palm coordinates.
#[derive(Debug, Clone, Copy)]
struct ToCanonical {
    cos: f64,
    sin: f64,
    inv: RigidPose,
    center: Point,
    mirrored: bool,
    size: f64,
}

impl ToCanonical {
    fn new(pose: &RigidPose, mirrored: bool, size: f64) -> Self {
        let inv = pose.inverse();
        let (sin, cos) = inv.theta.sin_cos();
        Self {
            cos,
            sin,
            inv,
            center: Point::new(size / 2.0, size / 2.0),
            mirrored,
            size,
        }
    }

    #[inline]
    fn map(&self, p: Point) -> Point {
        let (u, v) = (p.x - self.center.x, p.y - self.center.y);
        let q = Point::new(
            self.center.x + self.cos * u - self.sin * v + self.inv.dx,
            self.center.y + self.sin * u + self.cos * v + self.inv.dy,
        );
        if self.mirrored {
            mirror_x(q, self.size)
        } else {
            q
        }
    }
}

/// Renders a palm per `spec`. Output is deterministic for a fixed spec.
pub fn generate(spec: &SynthSpec) -> SynthPalm {
    let (palm, canon_minutiae) = build_palm(spec);
    let n = spec.size;
    let size = n as f64;
    let center = Point::new(size / 2.0, size / 2.0);
    let tc = ToCanonical::new(&spec.pose, spec.mirrored, size);

    let mut values = vec![0f32; n * n];
    let mut fg = vec![false; n * n];
    values
        .par_chunks_mut(n.max(1))
        .zip(fg.par_chunks_mut(n.max(1)))
        .enumerate()
        .for_each(|(y, (row, fg_row))| {
            for (x, (out, inside)) in row.iter_mut().zip(fg_row.iter_mut()).enumerate() {
                let q = tc.map(Point::new(x as f64 + 0.5, y as f64 + 0.5));
                let d = palm.blob.inside_distance(q);
                *inside = d > 0.0;
                let w = palm.blob.weight_of(d);
                if w <= 0.0 {
                    continue;
                }
                let phi = palm.lattice_phase(q) + palm.vortex_phase(q, None);
                *out = (w * (MEAN_LEVEL + AMPLITUDE * phi.cos())) as f32;
            }
        });
    let image = finish(values, n, spec.noise_snr_db, AMPLITUDE * AMPLITUDE / 2.0, spec.seed);
    let foreground = BinaryMask::from_vec(n, n, fg);

    let (cols, rows) = (n / BLOCK, n / BLOCK);
    let mut blocks = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let q = tc.map(OrientationField::block_center(c, r));
            if palm.blob.inside_distance(q) > 0.0 {
                let mut a = palm.flow.orientation(q);
                if spec.mirrored {
                    a = PI - a;
                }
                blocks.push(Block {
                    angle: a + spec.pose.theta,
                    quality: 1.0,
                    foreground: true,
                });
            } else {
                blocks.push(Block::BACKGROUND);
            }
        }
    }
    let field = OrientationField::new(cols, rows, blocks);

    let minutiae = canon_minutiae
        .iter()
        .filter_map(|m| {
            let (mut q, mut theta) = (m.pos(), m.theta);
            if spec.mirrored {
                q = mirror_x(q, size);
                theta = mirror_direction(theta);
            }
            let p = spec.pose.apply(q, center);
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < size && p.y < size;
            inside.then(|| Minutia::new(p.x, p.y, spec.pose.apply_direction(theta), m.kind))
        })
        .collect();

    SynthPalm {
        image,
        field,
        minutiae,
        foreground,
    }
}

/// Quantizes float intensities, adding Gaussian noise at the requested SNR
/// relative to `signal_power`.
fn finish(values: Vec<f32>, n: usize, snr_db: Option<f64>, signal_power: f64, seed: u64) -> GrayImage {
    let noise = snr_db.map(|db| {
        let sigma = (signal_power / 10f64.powf(db / 10.0)).sqrt();
        (Normal::new(0.0, sigma).expect("finite sigma"), ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500))
    });
    let pixels = match noise {
        None => values.iter().map(|&v| (v as f64).round().clamp(0.0, 255.0) as u8).collect(),
        Some((dist, mut rng)) => values
            .iter()
            .map(|&v| (v as f64 + dist.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
            .collect(),
    };
    GrayImage::from_vec(n, values.len() / n.max(1), pixels).expect("sized buffer")
}

/// Rigid motion, smooth elastic jitter and additive noise applied to an
/// existing image (a second impression of the same palm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub pose: RigidPose,
    /// Bound on the jitter displacement, px.
    pub jitter_px: f64,
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            pose: RigidPose::IDENTITY,
            jitter_px: 0.0,
            noise_snr_db: None,
            seed: 0,
        }
    }
}

/// Sum of two plane waves per axis, bounded by `jitter_px`.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    amp: f64,
    waves: [(f64, f64, f64); 2],
}

impl Jitter {
    fn new(p: &Perturbation) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x6a69_7474_6572);
        let mut wave = || {
            let dir = rng.random_range(0.0..TAU);
            let k = TAU / rng.random_range(300.0..600.0);
            (k * dir.cos(), k * dir.sin(), rng.random_range(0.0..TAU))
        };
        Self {
            amp: p.jitter_px.max(0.0) / 2f64.sqrt(),
            waves: [wave(), wave()],
        }
    }

    #[inline]
    fn at(&self, p: Point) -> (f64, f64) {
        if self.amp == 0.0 {
            return (0.0, 0.0);
        }
        let [(ax, ay, ap), (bx, by, bp)] = self.waves;
        (
            self.amp * (ax * p.x + ay * p.y + ap).sin(),
            self.amp * (bx * p.x + by * p.y + bp).sin(),
        )
    }
}

/// Applies `p` to `img`: each output pixel samples the source at
/// `pose⁻¹(x) + jitter(x)` (bilinear, black outside).
pub fn perturb(img: &GrayImage, p: &Perturbation) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let identity = p.pose == RigidPose::IDENTITY && p.jitter_px == 0.0;
    if identity && p.noise_snr_db.is_none() {
        return img.clone();
    }
    let center = Point::new(w as f64 / 2.0, h as f64 / 2.0);
    let inv = p.pose.inverse();
    let jitter = Jitter::new(p);
    let mut values = vec![0f32; w * h];
    values.par_chunks_mut(w.max(1)).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let o = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            let s = inv.apply(o, center);
            let (jx, jy) = jitter.at(o);
            *out = img.sample_bilinear(s.x + jx, s.y + jy, 0.0) as f32;
        }
    });
    // signal power from the nonzero source pixels
    let (mut sum, mut sq, mut cnt) = (0.0f64, 0.0f64, 0usize);
    for &v in img.pixels().iter().filter(|&&v| v > 0) {
        sum += v as f64;
        sq += (v as f64) * (v as f64);
        cnt += 1;
    }
    let power = if cnt > 0 {
        (sq / cnt as f64 - (sum / cnt as f64).powi(2)).max(1.0)
    } else {
        1.0
    };
    finish(values, w, p.noise_snr_db, power, p.seed)
}

/// Where a source-image point lands in the perturbed image.
pub fn perturb_point(q: Point, p: &Perturbation, width: usize, height: usize) -> Point {
    let center = Point::new(width as f64 / 2.0, height as f64 / 2.0);
    let jitter = Jitter::new(p);
    // solve pose⁻¹(o) + jitter(o) = q by fixed-point iteration
    let mut o = p.pose.apply(q, center);
    for _ in 0..20 {
        let (jx, jy) = jitter.at(o);
        o = p.pose.apply(Point::new(q.x - jx, q.y - jy), center);
    }
    o
}

/// Maps ground-truth minutiae through a perturbation, dropping those that
/// leave the frame.
pub fn perturb_minutiae(ms: &[Minutia], p: &Perturbation, width: usize, height: usize) -> Vec<Minutia> {
    ms.iter()
        .filter_map(|m| {
            let o = perturb_point(m.pos(), p, width, height);
            let inside = o.x >= 0.0 && o.y >= 0.0 && o.x < width as f64 && o.y < height as f64;
            inside.then(|| Minutia::new(o.x, o.y, p.pose.apply_direction(m.theta), m.kind))
        })
        .collect()
}

/// Analytic orientation field of the canonical palm (no wobble), suitable
/// as a registration reference.
pub fn reference_field(size: usize) -> OrientationField {
    let s = size as f64;
    let flow = Flow::canonical(s, 1.0);
    let blob = BlobSpec::default();
    let shape = Blob {
        center: Point::new(s / 2.0, s / 2.0),
        sx: blob.semi_x * s,
        sy: blob.semi_y * s,
        harmonics: Vec::new(),
        band: 0.0,
        edge: blob.edge_px,
    };
    let (cols, rows) = (size / BLOCK, size / BLOCK);
    let mut blocks = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let q = OrientationField::block_center(c, r);
            blocks.push(if shape.inside_distance(q) > 0.0 {
                Block {
                    angle: flow.orientation(q),
                    quality: 1.0,
                    foreground: true,
                }
            } else {
                Block::BACKGROUND
            });
        }
    }
    OrientationField::new(cols, rows, blocks)
}

/// Uniform random noise image.
pub fn noise_image(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(width, height, |_, _| rng.random())
}

/// Plain-text ground truth: `key: value` lines, one `minutia:` line each.
pub fn truth_text(spec: &SynthSpec, palm: &SynthPalm) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "seed: {}", spec.seed);
    let _ = writeln!(s, "size: {}", spec.size);
    let _ = writeln!(s, "ridge_period: {}", spec.ridge_period);
    let _ = writeln!(s, "mirrored: {}", spec.mirrored);
    let _ = writeln!(s, "pose_theta_deg: {:.6}", spec.pose.theta_degrees());
    let _ = writeln!(s, "pose_dx: {:.3}", spec.pose.dx);
    let _ = writeln!(s, "pose_dy: {:.3}", spec.pose.dy);
    let _ = writeln!(s, "minutiae: {}", palm.minutiae.len());
    for m in &palm.minutiae {
        let kind = match m.kind {
            MinutiaKind::Ending => "ending",
            MinutiaKind::Bifurcation => "bifurcation",
            MinutiaKind::Unknown => "unknown",
        };
        let _ = writeln!(s, "minutia: {:.3} {:.3} {:.6} {}", m.x, m.y, m.theta, kind);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_diff_pi;
    use crate::orientation::{estimate_orientation_field, OrientationParams};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            size: 512,
            n_minutiae: 40,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small(3));
        let b = generate(&small(3));
        assert_eq!(a.image, b.image);
        assert_eq!(a.minutiae, b.minutiae);
        let c = generate(&small(4));
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn estimated_field_matches_truth() {
        let palm = generate(&SynthSpec {
            seed: 11,
            size: 1024,
            n_minutiae: 100,
            ..SynthSpec::default()
        });
        let est = estimate_orientation_field(&palm.image, None, &OrientationParams::default()).unwrap();
        let (mut good, mut total) = (0, 0);
        for (c, r, b) in palm.field.foreground_blocks() {
            let e = est.block(c, r);
            if !e.foreground {
                continue;
            }
            total += 1;
            if angle_diff_pi(e.angle, b.angle) <= 6f64.to_radians() {
                good += 1;
            }
        }
        assert!(total > 0);
        assert!(good as f64 >= 0.9 * total as f64, "{good}/{total}");
    }

    #[test]
    fn pose_moves_truth() {
        let base = generate(&small(5));
        let pose = RigidPose::from_degrees(30.0, 20.0, -10.0);
        let posed = generate(&SynthSpec { pose, ..small(5) });
        assert_eq!(base.minutiae.len(), posed.minutiae.len());
        let c = Point::new(256.0, 256.0);
        for (a, b) in base.minutiae.iter().zip(&posed.minutiae) {
            assert!(pose.apply(a.pos(), c).dist(b.pos()) < 1e-9);
            assert!(angle_diff_2pi(a.theta + pose.theta, b.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn planted_pairs_are_spaced() {
        let palm = generate(&small(9));
        assert!(palm.minutiae.len() >= 30);
        let pairs: Vec<_> = palm.minutiae.chunks(2).collect();
        for (i, a) in pairs.iter().enumerate() {
            for b in &pairs[i + 1..] {
                for p in a.iter() {
                    for q in b.iter() {
                        assert!(p.pos().dist(q.pos()) >= PAIR_GAP - 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_perturbation_is_a_copy() {
        let palm = generate(&small(1));
        assert_eq!(perturb(&palm.image, &Perturbation::default()), palm.image);
    }

    #[test]
    fn perturbed_truth_follows_the_image() {
        let p = Perturbation {
            pose: RigidPose::from_degrees(10.0, 5.0, 3.0),
            jitter_px: 4.0,
            noise_snr_db: None,
            seed: 2,
        };
        let jitter = Jitter::new(&p);
        let center = Point::new(256.0, 256.0);
        for &(x, y) in &[(100.0, 120.0), (300.0, 250.0), (411.0, 60.0)] {
            let q = Point::new(x, y);
            let o = perturb_point(q, &p, 512, 512);
            let s = p.pose.inverse().apply(o, center);
            let (jx, jy) = jitter.at(o);
            assert!(Point::new(s.x + jx, s.y + jy).dist(q) < 1e-6);
            assert!(o.dist(p.pose.apply(q, center)) <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn flow_is_not_mirror_symmetric() {
        let f = reference_field(1024);
        let m = crate::orientation::flip_field(&f);
        let mut diffs: Vec<f64> = f
            .foreground_blocks()
            .filter(|(c, r, _)| m.block(*c, *r).foreground)
            .map(|(c, r, b)| angle_diff_pi(b.angle, m.block(c, r).angle))
            .collect();
        diffs.sort_by(f64::total_cmp);
        assert!(diffs[diffs.len() / 2] > 30f64.to_radians());
    }
}
