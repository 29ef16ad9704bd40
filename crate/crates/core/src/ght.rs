//! Registration refinement against a reference orientation field by
//! weighted generalized Hough voting over `(theta, dx, dy)`.
//!
//! Every pair of foreground blocks whose orientations agree (after the
//! candidate rotation) casts a vote weighted by the product of the two
//! block qualities. The winning bin gives the pose, and `q2` is the
//! fraction of input blocks that voted for it.

use std::f64::consts::PI;

use thiserror::Error;

use crate::geometry::{normalize_pi, Point, RigidPose};
use crate::orientation::{compute_q1, flip_field, transform_field, OrientationField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GhtError {
    #[error("field has no foreground block")]
    EmptyForeground,
    #[error("fields have different block geometry: {0}x{1} vs {2}x{3}")]
    Geometry(usize, usize, usize, usize),
    #[error("no fields to combine")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hand {
    Left,
    Right,
    Unknown,
}

impl Hand {
    pub fn mirrored(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
            Hand::Unknown => Hand::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
            Hand::Unknown => "unknown",
        }
    }
}

/// Outcome class of registration; selects the local-matching gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegistrationClass {
    Registered,
    CoarseOnly,
    Unregistered,
}

impl RegistrationClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RegistrationClass::Registered => "registered",
            RegistrationClass::CoarseOnly => "coarse_only",
            RegistrationClass::Unregistered => "unregistered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhtParams {
    pub max_rotation_deg: f64,
    pub rotation_step_deg: f64,
    pub max_displacement: f64,
    pub bin_px: f64,
    pub angle_tolerance_deg: f64,
    pub min_q1: f64,
    pub min_q2: f64,
    /// Only input blocks on every `vote_stride`-th row and column cast
    /// votes; `q2` is still counted over all foreground blocks.
    pub vote_stride: usize,
}

impl Default for GhtParams {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            rotation_step_deg: 3.0,
            max_displacement: 500.0,
            bin_px: 16.0,
            angle_tolerance_deg: 7.5,
            min_q1: 0.3,
            min_q2: 0.5,
            vote_stride: 2,
        }
    }
}

impl GhtParams {
    /// Candidate rotations, symmetric around zero.
    pub fn thetas(&self) -> Vec<f64> {
        let n = (self.max_rotation_deg / self.rotation_step_deg + 1e-9).floor() as i64;
        (-n..=n)
            .map(|k| (k as f64 * self.rotation_step_deg).to_radians())
            .collect()
    }

    fn half_bins(&self) -> i32 {
        (self.max_displacement / self.bin_px).round() as i32
    }
}

#[derive(Debug, Clone, Copy)]
struct VoteBlock {
    x: f64,
    y: f64,
    angle: f64,
    quality: f64,
}

const ANGLE_BUCKETS: usize = 36;

/// An orientation field designated as the registration target, with an
/// angle-bucketed index of its foreground blocks.
#[derive(Debug, Clone)]
pub struct ReferenceField {
    field: OrientationField,
    // each bucket sorted by x
    buckets: Vec<Vec<VoteBlock>>,
}

impl ReferenceField {
    pub fn new(field: OrientationField) -> Result<Self, GhtError> {
        if field.foreground_count() == 0 {
            return Err(GhtError::EmptyForeground);
        }
        let mut buckets = vec![Vec::new(); ANGLE_BUCKETS];
        for (c, r, b) in field.foreground_blocks() {
            let p = OrientationField::block_center(c, r);
            buckets[angle_bucket(b.angle)].push(VoteBlock {
                x: p.x,
                y: p.y,
                angle: b.angle,
                quality: b.quality,
            });
        }
        for bucket in &mut buckets {
            bucket.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        }
        Ok(Self { field, buckets })
    }

    pub fn field(&self) -> &OrientationField {
        &self.field
    }

    pub fn into_field(self) -> OrientationField {
        self.field
    }
}

#[inline]
fn angle_bucket(a: f64) -> usize {
    ((a / PI * ANGLE_BUCKETS as f64) as usize).min(ANGLE_BUCKETS - 1)
}

/// Nearest bin index of a displacement (halves round up). Valid for
/// `|v| * inv_bin < 64`, which the displacement limit guarantees.
#[inline]
fn quantize(v: f64, inv_bin: f64) -> i32 {
    (v * inv_bin + 64.5) as i32 - 64
}

/// Unsigned orientation difference for angles already in `[0, π)`.
#[inline]
fn orient_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d > PI / 2.0 {
        PI - d
    } else {
        d
    }
}

/// Weighted votes over `(theta, dy, dx)` plus per-bin distinct voter counts.
#[derive(Debug, Clone)]
pub struct HoughAccumulator {
    thetas: Vec<f64>,
    half: i32,
    side: usize,
    weights: Vec<f64>,
    voters: Vec<u32>,
    input: Vec<VoteBlock>,
    reference: OrientationField,
    params: GhtParams,
}

impl HoughAccumulator {
    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// Number of displacement bins along each axis.
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    fn index(&self, t: usize, by: i32, bx: i32) -> usize {
        (t * self.side + (by + self.half) as usize) * self.side + (bx + self.half) as usize
    }

    pub fn weight(&self, t: usize, by: i32, bx: i32) -> f64 {
        self.weights[self.index(t, by, bx)]
    }

    pub fn voters(&self, t: usize, by: i32, bx: i32) -> u32 {
        self.voters[self.index(t, by, bx)]
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Number of input foreground blocks (the `q2` denominator).
    pub fn input_blocks(&self) -> usize {
        self.input.len()
    }
}

/// Votes over the configured rotation range.
pub fn vote(
    f: &OrientationField,
    reference: &ReferenceField,
    params: &GhtParams,
) -> Result<HoughAccumulator, GhtError> {
    vote_at(f, reference, &params.thetas(), params, params.vote_stride)
}

/// Votes at an explicit list of rotations. With `stride > 1` only blocks on
/// every `stride`-th row and column of the input field cast votes.
pub fn vote_at(
    f: &OrientationField,
    reference: &ReferenceField,
    thetas: &[f64],
    params: &GhtParams,
    stride: usize,
) -> Result<HoughAccumulator, GhtError> {
    let rf = &reference.field;
    if (f.cols(), f.rows()) != (rf.cols(), rf.rows()) {
        return Err(GhtError::Geometry(f.cols(), f.rows(), rf.cols(), rf.rows()));
    }
    let stride = stride.max(1);
    let mut input = Vec::with_capacity(f.foreground_count());
    let mut voting = Vec::new();
    for (c, r, b) in f.foreground_blocks() {
        let p = OrientationField::block_center(c, r);
        let vb = VoteBlock {
            x: p.x,
            y: p.y,
            angle: b.angle,
            quality: b.quality,
        };
        input.push(vb);
        if c % stride == 0 && r % stride == 0 {
            voting.push(vb);
        }
    }
    if input.is_empty() {
        return Err(GhtError::EmptyForeground);
    }
    if voting.is_empty() {
        // sparse fields: fall back to every block
        voting = input.clone();
    }
    let half = params.half_bins();
    let side = (2 * half + 1) as usize;
    let nbins = thetas.len() * side * side;
    let mut weights = vec![0.0f64; nbins];
    let mut voters = vec![0u32; nbins];
    let mut stamp = vec![0u32; nbins];

    let center = f.center();
    let maxd = params.max_displacement;
    let bin = params.bin_px;
    let tol = params.angle_tolerance_deg.to_radians();
    let bucket_w = PI / ANGLE_BUCKETS as f64;
    let trig: Vec<(f64, f64)> = thetas.iter().map(|t| t.sin_cos()).collect();

    let inv_bin = 1.0 / bin;
    for (ii, b) in voting.iter().enumerate() {
        let mark = ii as u32 + 1;
        let (u, v) = (b.x - center.x, b.y - center.y);
        for (ti, (&theta, &(s, c))) in thetas.iter().zip(&trig).enumerate() {
            let rx = center.x + c * u - s * v;
            let ry = center.y + s * u + c * v;
            let target = normalize_pi(b.angle + theta);
            let lo = ((target - tol) / bucket_w).floor() as i64;
            let hi = ((target + tol) / bucket_w).floor() as i64;
            let plane = ti * side * side;
            for k in lo..=hi {
                // buckets strictly inside the tolerance window need no angle test
                let exact = k > lo && k < hi;
                let bucket = &reference.buckets[k.rem_euclid(ANGLE_BUCKETS as i64) as usize];
                let start = bucket.partition_point(|e| e.x < rx - maxd);
                for e in &bucket[start..] {
                    let dx = e.x - rx;
                    if dx > maxd {
                        break;
                    }
                    let dy = e.y - ry;
                    if dy.abs() > maxd || (!exact && orient_diff(target, e.angle) > tol) {
                        continue;
                    }
                    let bx = quantize(dx, inv_bin);
                    let by = quantize(dy, inv_bin);
                    if bx.abs() > half || by.abs() > half {
                        continue;
                    }
                    let idx = plane + (by + half) as usize * side + (bx + half) as usize;
                    weights[idx] += b.quality * e.quality;
                    if stamp[idx] != mark {
                        stamp[idx] = mark;
                        voters[idx] += 1;
                    }
                }
            }
        }
    }

    Ok(HoughAccumulator {
        thetas: thetas.to_vec(),
        half,
        side,
        weights,
        voters,
        input,
        reference: reference.field.clone(),
        params: *params,
    })
}

/// Winning pose of an accumulator and its `q2` support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestPose {
    pub pose: RigidPose,
    pub q2: f64,
    pub theta_index: usize,
    pub bin_x: i32,
    pub bin_y: i32,
}

/// Argmax of the 3x3x3 box-smoothed weights. `q2` is the fraction of input
/// blocks with at least one vote inside the winning bin's 26-neighbourhood.
pub fn best_pose(acc: &HoughAccumulator) -> BestPose {
    let smoothed = box_smooth(acc);
    let (nt, side, half) = (acc.thetas.len(), acc.side, acc.half);
    let mut best: Option<(f64, usize, i32, i32)> = None;
    let tie_key = |t: usize, by: i32, bx: i32| {
        (
            acc.thetas[t].abs(),
            ((bx * bx + by * by) as f64).sqrt(),
            acc.thetas[t],
            bx,
            by,
        )
    };
    for t in 0..nt {
        for by in -half..=half {
            for bx in -half..=half {
                let v = smoothed[(t * side + (by + half) as usize) * side + (bx + half) as usize];
                let replace = match best {
                    None => true,
                    Some((bv, bt, bby, bbx)) => {
                        let tol = 1e-9 * bv.abs().max(1.0);
                        if v > bv + tol {
                            true
                        } else if v >= bv - tol {
                            tie_key(t, by, bx)
                                .partial_cmp(&tie_key(bt, bby, bbx))
                                .is_some_and(|o| o.is_lt())
                        } else {
                            false
                        }
                    }
                };
                if replace {
                    best = Some((v, t, by, bx));
                }
            }
        }
    }
    let (_, t, by, bx) = best.expect("accumulator has at least one bin");
    let q2 = neighbourhood_support(acc, t, by, bx) as f64 / acc.input.len() as f64;
    BestPose {
        pose: RigidPose::new(
            acc.thetas[t],
            bx as f64 * acc.params.bin_px,
            by as f64 * acc.params.bin_px,
        ),
        q2,
        theta_index: t,
        bin_x: bx,
        bin_y: by,
    }
}

fn box_smooth(acc: &HoughAccumulator) -> Vec<f64> {
    let (nt, side) = (acc.thetas.len(), acc.side);
    let mut a = acc.weights.clone();
    let mut b = vec![0.0; a.len()];
    // dx
    for t in 0..nt {
        for y in 0..side {
            let row = (t * side + y) * side;
            for x in 0..side {
                let mut s = a[row + x];
                if x > 0 {
                    s += a[row + x - 1];
                }
                if x + 1 < side {
                    s += a[row + x + 1];
                }
                b[row + x] = s;
            }
        }
    }
    // dy
    for t in 0..nt {
        for y in 0..side {
            for x in 0..side {
                let at = |yy: usize| b[(t * side + yy) * side + x];
                let mut s = at(y);
                if y > 0 {
                    s += at(y - 1);
                }
                if y + 1 < side {
                    s += at(y + 1);
                }
                a[(t * side + y) * side + x] = s;
            }
        }
    }
    // theta
    let plane = side * side;
    for t in 0..nt {
        for i in 0..plane {
            let mut s = a[t * plane + i];
            if t > 0 {
                s += a[(t - 1) * plane + i];
            }
            if t + 1 < nt {
                s += a[(t + 1) * plane + i];
            }
            b[t * plane + i] = s;
        }
    }
    b
}

/// Counts input blocks with at least one admissible vote in the 3x3x3
/// neighbourhood of bin `(t, by, bx)`.
fn neighbourhood_support(acc: &HoughAccumulator, t: usize, by: i32, bx: i32) -> usize {
    let rf = &acc.reference;
    let center = rf.center();
    let p = &acc.params;
    let (bin, maxd, half) = (p.bin_px, p.max_displacement, acc.half);
    let tol = p.angle_tolerance_deg.to_radians();
    let t_lo = t.saturating_sub(1);
    let t_hi = (t + 1).min(acc.thetas.len() - 1);
    let bs = crate::orientation::BLOCK as f64;
    let mut count = 0;
    'blocks: for b in &acc.input {
        for tt in t_lo..=t_hi {
            let theta = acc.thetas[tt];
            let r = Point::new(b.x, b.y).rotate_about(center, theta);
            let target = normalize_pi(b.angle + theta);
            // ref positions whose displacement rounds into [b-1, b+1]
            let x_lo = r.x + (bx - 1) as f64 * bin - bin / 2.0;
            let x_hi = r.x + (bx + 1) as f64 * bin + bin / 2.0;
            let y_lo = r.y + (by - 1) as f64 * bin - bin / 2.0;
            let y_hi = r.y + (by + 1) as f64 * bin + bin / 2.0;
            let c_lo = ((x_lo / bs).floor().max(0.0)) as usize;
            let c_hi = ((x_hi / bs).ceil().max(0.0) as usize).min(rf.cols());
            let r_lo = ((y_lo / bs).floor().max(0.0)) as usize;
            let r_hi = ((y_hi / bs).ceil().max(0.0) as usize).min(rf.rows());
            for row in r_lo..r_hi {
                for col in c_lo..c_hi {
                    let e = rf.block(col, row);
                    if !e.foreground || orient_diff(target, e.angle) > tol {
                        continue;
                    }
                    let q = OrientationField::block_center(col, row);
                    let (dx, dy) = (q.x - r.x, q.y - r.y);
                    if dx.abs() > maxd || dy.abs() > maxd {
                        continue;
                    }
                    let (vx, vy) = (quantize(dx, 1.0 / bin), quantize(dy, 1.0 / bin));
                    if vx.abs() > half || vy.abs() > half {
                        continue;
                    }
                    if (vx - bx).abs() <= 1 && (vy - by).abs() <= 1 {
                        count += 1;
                        continue 'blocks;
                    }
                }
            }
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationResult {
    pub pose: RigidPose,
    pub q1: f64,
    pub q2: f64,
    pub hand: Hand,
    pub reg_class: RegistrationClass,
    pub q2_original: f64,
    pub q2_flipped: f64,
    /// Whether the pose was found on the mirrored field.
    pub mirrored: bool,
}

impl RegistrationResult {
    fn unregistered(q1: f64) -> Self {
        Self {
            pose: RigidPose::IDENTITY,
            q1,
            q2: 0.0,
            hand: Hand::Unknown,
            reg_class: RegistrationClass::Unregistered,
            q2_original: 0.0,
            q2_flipped: 0.0,
            mirrored: false,
        }
    }
}

/// Registers `f` and its mirror against the (left-hand) reference and
/// decides handedness from the larger `q2`.
pub fn register(
    f: &OrientationField,
    reference: &ReferenceField,
    params: &GhtParams,
) -> RegistrationResult {
    let q1 = compute_q1(f);
    let original = vote(f, reference, params).map(|acc| best_pose(&acc));
    let flipped = vote(&flip_field(f), reference, params).map(|acc| best_pose(&acc));
    let (original, flipped) = match (original, flipped) {
        (Ok(o), Ok(fl)) => (o, fl),
        _ => return RegistrationResult::unregistered(q1),
    };
    let mirrored = !(original.q2 > flipped.q2);
    let win = if mirrored { flipped } else { original };
    let registered = q1 >= params.min_q1 && win.q2 > params.min_q2;
    RegistrationResult {
        pose: win.pose,
        q1,
        q2: win.q2,
        hand: match (registered, mirrored) {
            (false, _) => Hand::Unknown,
            (true, false) => Hand::Left,
            (true, true) => Hand::Right,
        },
        reg_class: if registered {
            RegistrationClass::Registered
        } else {
            RegistrationClass::CoarseOnly
        },
        q2_original: original.q2,
        q2_flipped: flipped.q2,
        mirrored,
    }
}

/// Averages pre-aligned fields into a reference: per block, the
/// quality-weighted doubled-angle mean of the foreground contributions.
/// A block is foreground when at least half the inputs are foreground there
/// and the resultant quality reaches `min_quality`.
pub fn build_reference(
    fields: &[OrientationField],
    poses: &[RigidPose],
    min_quality: f64,
) -> Result<ReferenceField, GhtError> {
    let first = fields.first().ok_or(GhtError::EmptyInput)?;
    let (cols, rows) = (first.cols(), first.rows());
    for f in fields {
        if (f.cols(), f.rows()) != (cols, rows) {
            return Err(GhtError::Geometry(f.cols(), f.rows(), cols, rows));
        }
    }
    let aligned: Vec<OrientationField> = fields
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let pose = poses.get(i).copied().unwrap_or(RigidPose::IDENTITY);
            if pose == RigidPose::IDENTITY {
                f.clone()
            } else {
                transform_field(f, &pose)
            }
        })
        .collect();
    let mut out = OrientationField::background(cols, rows);
    for r in 0..rows {
        for c in 0..cols {
            let (mut sx, mut sy, mut total, mut n_fg) = (0.0, 0.0, 0.0, 0usize);
            for f in &aligned {
                let b = f.block(c, r);
                if b.foreground {
                    n_fg += 1;
                    sx += b.quality * (2.0 * b.angle).cos();
                    sy += b.quality * (2.0 * b.angle).sin();
                    total += b.quality;
                }
            }
            if 2 * n_fg < aligned.len() || total <= 0.0 {
                continue;
            }
            let quality = (sx.hypot(sy) / total).clamp(0.0, 1.0);
            let blk = out.block_mut(c, r);
            blk.angle = normalize_pi(0.5 * sy.atan2(sx));
            blk.quality = quality;
            blk.foreground = quality >= min_quality && quality > 0.0;
        }
    }
    ReferenceField::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_diff_pi;
    use crate::orientation::{rotate_field, Block};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth non-symmetric toy field on a `cols x rows` grid with a
    /// rectangular foreground.
    fn toy_field(cols: usize, rows: usize) -> OrientationField {
        let mut f = OrientationField::background(cols, rows);
        let (cx, cy) = (cols as f64 / 2.0, rows as f64 / 2.0);
        for r in 0..rows {
            for c in 0..cols {
                let (u, v) = ((c as f64 - cx) / cols as f64, (r as f64 - cy) / rows as f64);
                let inside = u.abs() < 0.3 && v.abs() < 0.35;
                *f.block_mut(c, r) = Block {
                    angle: normalize_pi(0.4 + 2.2 * u + 1.3 * v * v + 1.7 * u * v),
                    quality: if inside { 0.5 + 0.4 * (3.0 * u).cos() } else { 0.0 },
                    foreground: inside,
                };
            }
        }
        f
    }

    fn shifted(f: &OrientationField, dc: i64, dr: i64) -> OrientationField {
        let mut out = OrientationField::background(f.cols(), f.rows());
        for r in 0..f.rows() as i64 {
            for c in 0..f.cols() as i64 {
                let (sc, sr) = (c - dc, r - dr);
                if sc >= 0 && sr >= 0 && (sc as usize) < f.cols() && (sr as usize) < f.rows() {
                    *out.block_mut(c as usize, r as usize) = *f.block(sc as usize, sr as usize);
                }
            }
        }
        out
    }

    fn noise_field(cols: usize, rows: usize, rng: &mut ChaCha8Rng) -> OrientationField {
        let blocks = (0..cols * rows)
            .map(|_| Block {
                angle: rng.random_range(0.0..PI),
                quality: rng.random_range(0.2..1.0),
                foreground: true,
            })
            .collect();
        OrientationField::new(cols, rows, blocks)
    }

    #[test]
    fn thetas_cover_range() {
        let t = GhtParams::default().thetas();
        assert_eq!(t.len(), 11);
        assert!((t[0] + 15f64.to_radians()).abs() < 1e-12);
        assert_eq!(t[5], 0.0);
        assert_eq!(GhtParams::default().half_bins(), 31);
    }

    #[test]
    fn self_alignment() {
        let f = toy_field(48, 48);
        let reference = ReferenceField::new(f.clone()).unwrap();
        let best = best_pose(&vote(&f, &reference, &GhtParams::default()).unwrap());
        assert_eq!(best.pose, RigidPose::IDENTITY);
        assert_eq!(best.q2, 1.0);
    }

    #[test]
    fn translation_recovered() {
        let f = toy_field(48, 48);
        let reference = ReferenceField::new(f.clone()).unwrap();
        let moved = shifted(&f, 4, -2); // (+64, -32) px
        let best = best_pose(&vote(&moved, &reference, &GhtParams::default()).unwrap());
        assert_eq!(best.pose.theta, 0.0);
        assert!((best.pose.dx + 64.0).abs() <= 16.0, "{:?}", best.pose);
        assert!((best.pose.dy - 32.0).abs() <= 16.0, "{:?}", best.pose);
    }

    #[test]
    fn rotation_recovered_with_opposite_sign() {
        let f = toy_field(64, 64);
        let reference = ReferenceField::new(f.clone()).unwrap();
        let rotated = rotate_field(&f, 9f64.to_radians());
        let best = best_pose(&vote(&rotated, &reference, &GhtParams::default()).unwrap());
        assert!((best.pose.theta + 9f64.to_radians()).abs() < 1e-9, "{:?}", best.pose);
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let reference = ReferenceField::new(toy_field(16, 16)).unwrap();
        let empty = OrientationField::background(16, 16);
        assert_eq!(
            vote(&empty, &reference, &GhtParams::default()).unwrap_err(),
            GhtError::EmptyForeground
        );
        assert!(ReferenceField::new(empty).is_err());
    }

    /// Brute force over every (pair, theta) on 8x8-block fields.
    #[test]
    fn total_weight_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = GhtParams {
            max_displacement: 80.0,
            vote_stride: 1,
            ..GhtParams::default()
        };
        for _ in 0..20 {
            let a = noise_field(8, 8, &mut rng);
            let mut b = noise_field(8, 8, &mut rng);
            *b.block_mut(0, 0) = Block::BACKGROUND;
            let reference = ReferenceField::new(b.clone()).unwrap();
            let acc = vote(&a, &reference, &params).unwrap();
            let center = a.center();
            let tol = params.angle_tolerance_deg.to_radians();
            let mut expected = 0.0;
            for theta in params.thetas() {
                for (c, r, bi) in a.foreground_blocks() {
                    let p = OrientationField::block_center(c, r).rotate_about(center, theta);
                    for (c2, r2, br) in b.foreground_blocks() {
                        let q = OrientationField::block_center(c2, r2);
                        let (dx, dy) = (q.x - p.x, q.y - p.y);
                        if dx.abs() <= params.max_displacement
                            && dy.abs() <= params.max_displacement
                            && angle_diff_pi(bi.angle + theta, br.angle) <= tol
                        {
                            expected += bi.quality * br.quality;
                        }
                    }
                }
            }
            assert!((acc.total_weight() - expected).abs() < 1e-9 * expected.max(1.0));
        }
    }

    #[test]
    fn noise_field_has_low_q2() {
        let f = toy_field(40, 40);
        let reference = ReferenceField::new(f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut low = 0;
        for _ in 0..100 {
            let noise = noise_field(40, 40, &mut rng);
            let best = best_pose(&vote(&noise, &reference, &GhtParams::default()).unwrap());
            assert!((0.0..=1.0).contains(&best.q2));
            if best.q2 < 0.5 {
                low += 1;
            }
        }
        assert!(low >= 95, "only {low}/100 noise fields below 0.5");
    }

    #[test]
    fn register_self_and_mirror() {
        let f = toy_field(48, 48);
        let reference = ReferenceField::new(f.clone()).unwrap();
        let params = GhtParams::default();
        let r = register(&f, &reference, &params);
        assert_eq!(r.hand, Hand::Left);
        assert_eq!(r.reg_class, RegistrationClass::Registered);
        assert_eq!(r.pose, RigidPose::IDENTITY);
        assert_eq!(r.q2, 1.0);

        let m = register(&flip_field(&f), &reference, &params);
        assert_eq!(m.hand, Hand::Right);
        assert!(m.mirrored);
        assert_eq!(m.q2, 1.0);
    }

    #[test]
    fn low_q1_is_coarse_only() {
        // small foreground: q1 well under 0.3 even though q2 is perfect
        let mut f = OrientationField::background(32, 32);
        for r in 12..20 {
            for c in 12..20 {
                *f.block_mut(c, r) = Block {
                    angle: 0.05 * (c * r) as f64,
                    quality: 0.9,
                    foreground: true,
                };
            }
        }
        let reference = ReferenceField::new(f.clone()).unwrap();
        let r = register(&f, &reference, &GhtParams::default());
        assert!(r.q1 < 0.3);
        assert_eq!(r.reg_class, RegistrationClass::CoarseOnly);
        assert_eq!(r.hand, Hand::Unknown);
    }

    #[test]
    fn register_empty_is_unregistered() {
        let reference = ReferenceField::new(toy_field(16, 16)).unwrap();
        let r = register(&OrientationField::background(16, 16), &reference, &GhtParams::default());
        assert_eq!(r.reg_class, RegistrationClass::Unregistered);
    }

    #[test]
    fn build_reference_examples() {
        let f = toy_field(20, 20);
        let single = build_reference(std::slice::from_ref(&f), &[RigidPose::IDENTITY], 0.2).unwrap();
        for (a, b) in f.blocks().iter().zip(single.field().blocks()) {
            assert_eq!(a.foreground, b.foreground);
            if a.foreground {
                assert!(angle_diff_pi(a.angle, b.angle) < 1e-9);
                assert!((b.quality - 1.0).abs() < 1e-12);
            }
        }

        let twice = build_reference(&[f.clone(), f.clone()], &[], 0.2).unwrap();
        for (a, b) in f.blocks().iter().zip(twice.field().blocks()) {
            if a.foreground {
                assert!(angle_diff_pi(a.angle, b.angle) < 1e-9);
            }
        }

        let mut g = f.clone();
        for r in 0..20 {
            for c in 0..20 {
                let b = g.block_mut(c, r);
                b.angle = normalize_pi(b.angle + PI / 2.0);
            }
        }
        let cancelled = build_reference(&[f.clone(), g, f.clone()], &[], 0.2).unwrap();
        // two of three agree, so the block survives
        assert!(cancelled.field().foreground_count() > 0);
        let mut h = f.clone();
        for r in 0..20 {
            for c in 0..20 {
                let b = h.block_mut(c, r);
                b.angle = normalize_pi(b.angle + PI / 2.0);
            }
        }
        assert_eq!(
            build_reference(&[f, h], &[], 0.2).unwrap_err(),
            GhtError::EmptyForeground
        );
        assert_eq!(build_reference(&[], &[], 0.2).unwrap_err(), GhtError::EmptyInput);
    }

    #[test]
    fn double_flip_gives_identical_q2() {
        let f = toy_field(40, 40);
        let reference = ReferenceField::new(rotate_field(&f, 0.1)).unwrap();
        let params = GhtParams::default();
        let a = best_pose(&vote(&f, &reference, &params).unwrap());
        let b = best_pose(&vote(&flip_field(&flip_field(&f)), &reference, &params).unwrap());
        assert_eq!(a.q2, b.q2);
    }
}
