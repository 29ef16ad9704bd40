//! Bit-valued cylinder descriptors (8x8 cells x 5 direction sections) and
//! gated local similarity.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::extraction::Minutia;
use crate::geometry::angle_diff_2pi;
use crate::ght::RegistrationClass;

pub const DESCRIPTOR_BITS: usize = 320;
pub const DESCRIPTOR_BYTES: usize = DESCRIPTOR_BITS / 8;
const WORDS: usize = DESCRIPTOR_BITS / 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MccParams {
    /// Cells per cylinder diameter.
    pub n_s: usize,
    /// Direction sections.
    pub n_d: usize,
    pub radius: f64,
    pub sigma_s: f64,
    pub sigma_d: f64,
    pub psi_threshold: f64,
    pub min_bits: u32,
}

impl Default for MccParams {
    fn default() -> Self {
        Self {
            n_s: 8,
            n_d: 5,
            radius: 75.0,
            sigma_s: 28.0 / 3.0,
            sigma_d: 0.52,
            psi_threshold: 0.005,
            min_bits: 8,
        }
    }
}

impl MccParams {
    pub fn bit_len(&self) -> usize {
        self.n_s * self.n_s * self.n_d
    }
}

/// 320 bits; bit `(k * n_s + i) * n_s + j` is section `k`, cell row `i`,
/// cell column `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MccDescriptor {
    words: [u64; WORDS],
    valid: bool,
}

impl MccDescriptor {
    pub fn from_words(words: [u64; WORDS], min_bits: u32) -> Self {
        let pop: u32 = words.iter().map(|w| w.count_ones()).sum();
        Self {
            words,
            valid: pop >= min_bits,
        }
    }

    /// Bit 0 is the least significant bit of byte 0.
    pub fn from_bytes(bytes: &[u8; DESCRIPTOR_BYTES], min_bits: u32) -> Self {
        let mut words = [0u64; WORDS];
        for (w, chunk) in words.iter_mut().zip(bytes.chunks_exact(8)) {
            *w = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Self::from_words(words, min_bits)
    }

    pub fn to_bytes(&self) -> [u8; DESCRIPTOR_BYTES] {
        let mut out = [0u8; DESCRIPTOR_BYTES];
        for (chunk, w) in out.chunks_exact_mut(8).zip(&self.words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn words(&self) -> &[u64; WORDS] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn hamming(&self, other: &MccDescriptor) -> u32 {
        self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

#[inline]
fn gaussian(v: f64, sigma: f64) -> f64 {
    (-v * v / (2.0 * sigma * sigma)).exp()
}

/// Cylinder of minutia `idx` of `all`.
pub fn build_descriptor(idx: usize, all: &[Minutia], p: &MccParams) -> MccDescriptor {
    assert!(p.bit_len() <= DESCRIPTOR_BITS, "descriptor longer than {DESCRIPTOR_BITS} bits");
    let m = &all[idx];
    let reach = p.radius + 3.0 * p.sigma_s;
    let neighbours: Vec<(f64, f64, f64)> = all
        .iter()
        .enumerate()
        .filter(|&(i, n)| i != idx && (n.x - m.x).abs() <= reach && (n.y - m.y).abs() <= reach)
        .map(|(_, n)| (n.x, n.y, angle_diff_2pi(m.theta, n.theta)))
        .collect();
    let mut d = MccDescriptor::default();
    if neighbours.is_empty() {
        return d;
    }
    let cell = 2.0 * p.radius / p.n_s as f64;
    let (sn, cs) = m.theta.sin_cos();
    let cutoff2 = (3.0 * p.sigma_s).powi(2);
    let sections: Vec<f64> = (0..p.n_d).map(|k| -PI + (k as f64 + 0.5) * TAU / p.n_d as f64).collect();
    let mut spatial = Vec::with_capacity(neighbours.len());
    for i in 0..p.n_s {
        for j in 0..p.n_s {
            let (u, v) = (
                (j as f64 + 0.5 - p.n_s as f64 / 2.0) * cell,
                (i as f64 + 0.5 - p.n_s as f64 / 2.0) * cell,
            );
            if u.hypot(v) > p.radius {
                continue;
            }
            let (cx, cy) = (m.x + u * cs - v * sn, m.y + u * sn + v * cs);
            spatial.clear();
            for &(nx, ny, dtheta) in &neighbours {
                let d2 = (nx - cx).powi(2) + (ny - cy).powi(2);
                if d2 <= cutoff2 {
                    spatial.push((gaussian(d2.sqrt(), p.sigma_s), dtheta));
                }
            }
            if spatial.is_empty() {
                continue;
            }
            for (k, &phi) in sections.iter().enumerate() {
                let acc: f64 = spatial.iter().map(|&(g, dt)| g * gaussian(angle_diff_2pi(phi, dt), p.sigma_d)).sum();
                if acc >= p.psi_threshold {
                    d.set((k * p.n_s + i) * p.n_s + j);
                }
            }
        }
    }
    d.valid = d.popcount() >= p.min_bits;
    d
}

pub fn build_descriptors(all: &[Minutia], p: &MccParams) -> Vec<MccDescriptor> {
    (0..all.len()).into_par_iter().map(|i| build_descriptor(i, all, p)).collect()
}

/// `1 - |a xor b| / (|a| + |b|)` with `|x| = sqrt(popcount(x))`; zero when
/// either descriptor is invalid.
#[inline]
pub fn local_similarity(a: &MccDescriptor, b: &MccDescriptor) -> f64 {
    if !a.valid || !b.valid {
        return 0.0;
    }
    let (pa, pb) = (a.popcount() as f64, b.popcount() as f64);
    1.0 - (a.hamming(b) as f64).sqrt() / (pa.sqrt() + pb.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatingThresholds {
    pub t_x: f64,
    pub t_y: f64,
    /// Radians.
    pub t_rot: f64,
}

impl GatingThresholds {
    pub const REGISTERED: GatingThresholds = GatingThresholds {
        t_x: 500.0,
        t_y: 500.0,
        t_rot: 20.0 * PI / 180.0,
    };
    pub const COARSE_ONLY: GatingThresholds = GatingThresholds {
        t_x: 1600.0,
        t_y: 1600.0,
        t_rot: 30.0 * PI / 180.0,
    };
    pub const UNREGISTERED: GatingThresholds = GatingThresholds {
        t_x: 2048.0,
        t_y: 2048.0,
        t_rot: PI,
    };

    pub fn for_class(c: RegistrationClass) -> Self {
        match c {
            RegistrationClass::Registered => Self::REGISTERED,
            RegistrationClass::CoarseOnly => Self::COARSE_ONLY,
            RegistrationClass::Unregistered => Self::UNREGISTERED,
        }
    }

    /// Gates for comparing two templates: the looser class wins.
    pub fn for_pair(a: RegistrationClass, b: RegistrationClass) -> Self {
        Self::for_class(a.max(b))
    }

    #[inline]
    pub fn passes(&self, a: &Minutia, b: &Minutia) -> bool {
        (a.x - b.x).abs() <= self.t_x && (a.y - b.y).abs() <= self.t_y && abs_angle_diff(a.theta, b.theta) <= self.t_rot
    }
}

/// `|angle_diff_2pi(a, b)|` without the modulo for angles in `[0, 2π)`.
#[inline]
fn abs_angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d <= PI {
        d
    } else if d < TAU {
        TAU - d
    } else {
        angle_diff_2pi(a, b).abs()
    }
}

/// Configurable gates per registration class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateTable {
    pub registered: GatingThresholds,
    pub coarse_only: GatingThresholds,
    pub unregistered: GatingThresholds,
}

impl Default for GateTable {
    fn default() -> Self {
        Self {
            registered: GatingThresholds::REGISTERED,
            coarse_only: GatingThresholds::COARSE_ONLY,
            unregistered: GatingThresholds::UNREGISTERED,
        }
    }
}

impl GateTable {
    pub fn for_class(&self, c: RegistrationClass) -> GatingThresholds {
        match c {
            RegistrationClass::Registered => self.registered,
            RegistrationClass::CoarseOnly => self.coarse_only,
            RegistrationClass::Unregistered => self.unregistered,
        }
    }

    pub fn for_pair(&self, a: RegistrationClass, b: RegistrationClass) -> GatingThresholds {
        self.for_class(a.max(b))
    }
}

pub fn gated_similarity(ma: &Minutia, da: &MccDescriptor, mb: &Minutia, db: &MccDescriptor, g: &GatingThresholds) -> f64 {
    if g.passes(ma, mb) {
        local_similarity(da, db)
    } else {
        0.0
    }
}

/// Nonzero gate-passing local similarities, sorted by (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, u32, f64)>,
    /// Pairs that passed the gates (including zero similarities).
    pub comparisons: usize,
}

impl SparseMatrix {
    pub fn density(&self) -> f64 {
        if self.rows * self.cols == 0 {
            0.0
        } else {
            self.entries.len() as f64 / (self.rows * self.cols) as f64
        }
    }

    /// Gate-passing fraction of all `rows x cols` pairs.
    pub fn comparison_ratio(&self) -> f64 {
        if self.rows * self.cols == 0 {
            0.0
        } else {
            self.comparisons as f64 / (self.rows * self.cols) as f64
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for &(r, c, v) in &self.entries {
            d[r as usize][c as usize] = v;
        }
        d
    }
}

/// Minutiae and their descriptors, the matcher's view of a template.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a> {
    pub minutiae: &'a [Minutia],
    pub descriptors: &'a [MccDescriptor],
}

/// Local similarity matrix of every gate-passing pair. B is bucketed by
/// direction (bucket width at least `t_rot`, so only neighbouring buckets
/// can pass) and sorted by x inside a bucket, so each row scans three x
/// windows.
pub fn build_similarity_matrix(a: FeatureView<'_>, b: FeatureView<'_>, g: &GatingThresholds) -> SparseMatrix {
    assert_eq!(a.minutiae.len(), a.descriptors.len());
    assert_eq!(b.minutiae.len(), b.descriptors.len());
    let nb = b.minutiae.len();
    let n_buckets = if g.t_rot > 0.0 { ((TAU / g.t_rot).floor() as usize).clamp(1, 64) } else { 64 };
    let width = TAU / n_buckets as f64;
    let bucket = |theta: f64| ((theta.rem_euclid(TAU) / width) as usize).min(n_buckets - 1);
    let mut order: Vec<u32> = (0..nb as u32).collect();
    let key = |i: u32| {
        let m = &b.minutiae[i as usize];
        (bucket(m.theta), m.x)
    };
    order.sort_by(|&i, &j| {
        let (ki, kj) = (key(i), key(j));
        ki.0.cmp(&kj.0).then(ki.1.total_cmp(&kj.1))
    });
    let mut starts = vec![0usize; n_buckets + 1];
    for &i in &order {
        starts[key(i).0 + 1] += 1;
    }
    for k in 0..n_buckets {
        starts[k + 1] += starts[k];
    }
    // B in (bucket, x) order, struct of arrays
    let xs: Vec<f64> = order.iter().map(|&i| b.minutiae[i as usize].x).collect();
    let ys: Vec<f64> = order.iter().map(|&i| b.minutiae[i as usize].y).collect();
    let ts: Vec<f64> = order.iter().map(|&i| b.minutiae[i as usize].theta).collect();
    let words: Vec<[u64; WORDS]> = order.iter().map(|&i| b.descriptors[i as usize].words).collect();
    // local_similarity with the square roots tabulated; invalid descriptors
    // get root 0 and are skipped
    let root = |d: &MccDescriptor| if d.valid { (d.popcount() as f64).sqrt() } else { 0.0 };
    let roots: Vec<f64> = order.iter().map(|&i| root(&b.descriptors[i as usize])).collect();
    let ham_root: Vec<f64> = (0..=DESCRIPTOR_BITS).map(|h| (h as f64).sqrt()).collect();

    let mut entries = Vec::new();
    let mut comparisons = 0;
    // row values by B index, read back in column order
    let mut dense = vec![0.0f64; nb];
    let mut touched: Vec<u32> = Vec::new();
    let mut scan: Vec<usize> = Vec::with_capacity(3);
    for (r, ma) in a.minutiae.iter().enumerate() {
        let da = &a.descriptors[r];
        let ra = root(da);
        let k = bucket(ma.theta);
        scan.clear();
        if n_buckets <= 3 {
            scan.extend(0..n_buckets);
        } else {
            scan.extend([(k + n_buckets - 1) % n_buckets, k, (k + 1) % n_buckets]);
        }
        touched.clear();
        for &bk in &scan {
            let run = &xs[starts[bk]..starts[bk + 1]];
            let lo = starts[bk] + run.partition_point(|&x| x < ma.x - g.t_x);
            let hi = starts[bk] + run.partition_point(|&x| x <= ma.x + g.t_x);
            for k in lo..hi {
                if (ma.y - ys[k]).abs() > g.t_y || abs_angle_diff(ma.theta, ts[k]) > g.t_rot {
                    continue;
                }
                comparisons += 1;
                let rb = roots[k];
                if ra == 0.0 || rb == 0.0 {
                    continue;
                }
                let h: u32 = da.words.iter().zip(&words[k]).map(|(p, q)| (p ^ q).count_ones()).sum();
                let s = 1.0 - ham_root[h as usize] / (ra + rb);
                if s > 0.0 {
                    let c = order[k];
                    dense[c as usize] = s;
                    touched.push(c);
                }
            }
        }
        if touched.len() * 8 < nb {
            touched.sort_unstable();
            for &c in &touched {
                entries.push((r as u32, c, dense[c as usize]));
                dense[c as usize] = 0.0;
            }
        } else if !touched.is_empty() {
            for (c, v) in dense.iter_mut().enumerate() {
                if *v > 0.0 {
                    entries.push((r as u32, c as u32, *v));
                    *v = 0.0;
                }
            }
        }
    }
    SparseMatrix {
        rows: a.minutiae.len(),
        cols: nb,
        entries,
        comparisons,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::MinutiaKind;
    use crate::geometry::{Point, RigidPose};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(x: f64, y: f64, t: f64) -> Minutia {
        Minutia::new(x, y, t, MinutiaKind::Ending)
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<Minutia> {
        (0..n)
            .map(|_| m(rng.random_range(0.0..span), rng.random_range(0.0..span), rng.random_range(0.0..TAU)))
            .collect()
    }

    fn with_popcount(p: usize, offset: usize) -> MccDescriptor {
        let mut d = MccDescriptor::default();
        for i in 0..p {
            d.set(offset + i);
        }
        MccDescriptor::from_words(d.words, 8)
    }

    #[test]
    fn isolated_minutia_is_invalid() {
        let d = build_descriptor(0, &[m(100.0, 100.0, 0.3)], &MccParams::default());
        assert_eq!(d.popcount(), 0);
        assert!(!d.is_valid());
    }

    #[test]
    fn neighbour_at_cell_center_sets_its_bit() {
        let p = MccParams::default();
        // cell (i, j) = (5, 4): offset (0.5, 1.5) cells in the minutia frame
        let cell = 2.0 * p.radius / p.n_s as f64;
        let theta: f64 = 0.7;
        let (u, v) = (0.5 * cell, 1.5 * cell);
        let centre = Point::new(200.0 + u * theta.cos() - v * theta.sin(), 200.0 + u * theta.sin() + v * theta.cos());
        // section 2 is centred on 0
        let k = 2;
        let phi = -PI + (k as f64 + 0.5) * TAU / p.n_d as f64;
        assert!(phi.abs() < 1e-12);
        let all = [m(200.0, 200.0, theta), m(centre.x, centre.y, theta - phi)];
        let d = build_descriptor(0, &all, &p);
        assert!(d.bit((k * p.n_s + 5) * p.n_s + 4));
    }

    #[test]
    fn similarity_examples() {
        let a = with_popcount(20, 0);
        assert_eq!(local_similarity(&a, &a), 1.0);
        let b = with_popcount(20, 100);
        let expect = 1.0 - (40f64).sqrt() / (2.0 * 20f64.sqrt());
        assert!((local_similarity(&a, &b) - expect).abs() < 1e-12);
        assert!((expect - 0.2929).abs() < 1e-4);
        let invalid = with_popcount(3, 0);
        assert_eq!(local_similarity(&a, &invalid), 0.0);
        assert_eq!(local_similarity(&invalid, &invalid), 0.0);
    }

    #[test]
    fn gate_presets() {
        let d = with_popcount(30, 7);
        let a = m(1000.0, 1000.0, 1.0);
        let g = GatingThresholds::REGISTERED;
        assert_eq!(gated_similarity(&a, &d, &m(1501.0, 1000.0, 1.0), &d, &g), 0.0);
        assert_eq!(gated_similarity(&a, &d, &a, &d, &g), 1.0);
        let turned = m(1000.0, 1000.0, 1.0 + 25f64.to_radians());
        assert_eq!(gated_similarity(&a, &d, &turned, &d, &g), 0.0);
        assert!(gated_similarity(&a, &d, &turned, &d, &GatingThresholds::COARSE_ONLY) > 0.0);
        // wrap-around counts as close
        let near_zero = m(1000.0, 1000.0, 0.05);
        let near_tau = m(1000.0, 1000.0, TAU - 0.05);
        assert!(g.passes(&near_zero, &near_tau));
        assert_eq!(
            GatingThresholds::for_pair(RegistrationClass::Registered, RegistrationClass::CoarseOnly),
            GatingThresholds::COARSE_ONLY
        );
    }

    #[test]
    fn descriptors_survive_rigid_motion() {
        let p = MccParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0u64;
        let mut count = 0u64;
        for _ in 0..20 {
            let set = random_set(&mut rng, 60, 400.0);
            let pose = RigidPose::new(rng.random_range(-PI..PI), rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0));
            let c = Point::new(200.0, 200.0);
            let moved: Vec<Minutia> = set
                .iter()
                .map(|q| {
                    let r = pose.apply(q.pos(), c);
                    m(r.x, r.y, pose.apply_direction(q.theta))
                })
                .collect();
            let (a, b) = (build_descriptors(&set, &p), build_descriptors(&moved, &p));
            for (x, y) in a.iter().zip(&b) {
                total += x.hamming(y) as u64;
                count += 1;
            }
        }
        assert!((total as f64 / count as f64) <= 1.0);
    }

    #[test]
    fn sparse_matrix_matches_dense_gating() {
        let p = MccParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_set(&mut rng, 80, 900.0);
        let b = random_set(&mut rng, 70, 900.0);
        let (da, db) = (build_descriptors(&a, &p), build_descriptors(&b, &p));
        for g in [GatingThresholds::REGISTERED, GatingThresholds::COARSE_ONLY, GatingThresholds::UNREGISTERED] {
            let s = build_similarity_matrix(
                FeatureView { minutiae: &a, descriptors: &da },
                FeatureView { minutiae: &b, descriptors: &db },
                &g,
            );
            let dense = s.to_dense();
            let mut comparisons = 0;
            for i in 0..a.len() {
                for j in 0..b.len() {
                    comparisons += g.passes(&a[i], &b[j]) as usize;
                    assert_eq!(dense[i][j], gated_similarity(&a[i], &da[i], &b[j], &db[j], &g));
                }
            }
            assert_eq!(comparisons, s.comparisons);
            assert!(s.entries.iter().all(|e| e.2 > 0.0 && e.2 <= 1.0));
            assert!(s.entries.windows(2).all(|w| (w[0].0, w[0].1) < (w[1].0, w[1].1)));
        }
        let self_m = build_similarity_matrix(
            FeatureView { minutiae: &a, descriptors: &da },
            FeatureView { minutiae: &a, descriptors: &da },
            &GatingThresholds::REGISTERED,
        );
        let dense = self_m.to_dense();
        for (i, d) in da.iter().enumerate() {
            if d.is_valid() {
                assert_eq!(dense[i][i], 1.0);
            }
        }
    }

    #[test]
    fn direction_buckets_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let near_seam = |rng: &mut ChaCha8Rng| rng.random_range(-0.6f64..0.6).rem_euclid(TAU);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> (Vec<Minutia>, Vec<MccDescriptor>) {
            let ms = (0..n)
                .map(|i| {
                    let t = if i % 2 == 0 { near_seam(rng) } else { rng.random_range(0.0..TAU) };
                    m(rng.random_range(0.0..400.0), rng.random_range(0.0..400.0), t)
                })
                .collect();
            let ds = (0..n).map(|_| MccDescriptor::from_words(rng.random(), 8)).collect();
            (ms, ds)
        };
        for deg in [0.0, 1.0, 7.0, 20.0, 50.0, 100.0, 130.0, 170.0, 180.0] {
            let g = GatingThresholds {
                t_x: 150.0,
                t_y: 150.0,
                t_rot: f64::to_radians(deg),
            };
            let (a, da) = mk(&mut rng, 60);
            let (b, db) = mk(&mut rng, 55);
            let s = build_similarity_matrix(
                FeatureView { minutiae: &a, descriptors: &da },
                FeatureView { minutiae: &b, descriptors: &db },
                &g,
            );
            let dense = s.to_dense();
            let mut comparisons = 0;
            for i in 0..a.len() {
                for j in 0..b.len() {
                    comparisons += g.passes(&a[i], &b[j]) as usize;
                    assert_eq!(dense[i][j], gated_similarity(&a[i], &da[i], &b[j], &db[j], &g), "t_rot {deg}");
                }
            }
            assert_eq!(comparisons, s.comparisons, "t_rot {deg}");
        }
    }

    #[test]
    fn loosening_gates_keeps_entries() {
        let p = MccParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_set(&mut rng, 50, 1500.0);
        let b = random_set(&mut rng, 50, 1500.0);
        let (da, db) = (build_descriptors(&a, &p), build_descriptors(&b, &p));
        let va = FeatureView { minutiae: &a, descriptors: &da };
        let vb = FeatureView { minutiae: &b, descriptors: &db };
        let tight = build_similarity_matrix(va, vb, &GatingThresholds::REGISTERED);
        let loose = build_similarity_matrix(va, vb, &GatingThresholds::COARSE_ONLY);
        let loosest = build_similarity_matrix(va, vb, &GatingThresholds::UNREGISTERED);
        for e in &tight.entries {
            assert!(loose.entries.contains(e));
        }
        for e in &loose.entries {
            assert!(loosest.entries.contains(e));
        }
        assert_eq!(loosest.comparisons, 2500);
    }

    fn arb_descriptor() -> impl Strategy<Value = MccDescriptor> {
        prop::array::uniform5(any::<u64>()).prop_map(|w| MccDescriptor::from_words(w, 8))
    }

    proptest! {
        #[test]
        fn similarity_symmetric_and_bounded(a in arb_descriptor(), b in arb_descriptor()) {
            let (s, t) = (local_similarity(&a, &b), local_similarity(&b, &a));
            prop_assert_eq!(s, t);
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn popcount_identity(a in arb_descriptor(), b in arb_descriptor()) {
            let and: u32 = a.words().iter().zip(b.words()).map(|(x, y)| (x & y).count_ones()).sum();
            prop_assert_eq!(a.hamming(&b) + 2 * and, a.popcount() + b.popcount());
        }

        #[test]
        fn bytes_round_trip(a in arb_descriptor()) {
            let back = MccDescriptor::from_bytes(&a.to_bytes(), 8);
            prop_assert_eq!(back, a);
        }
    }
}
