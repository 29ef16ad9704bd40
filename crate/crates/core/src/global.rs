//! Global score from the sparse local similarity matrix: normalization,
//! top pair selection, relaxation by geometric compatibility and
//! efficiency-based averaging.

use std::f64::consts::PI;

use thiserror::Error;

use crate::extraction::Minutia;
use crate::geometry::angle_diff_2pi;
use crate::mcc::{build_similarity_matrix, FeatureView, GatingThresholds, SparseMatrix};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GlobalError {
    #[error("templates too small: N_A + N_B must exceed 2")]
    DegenerateTemplates,
    #[error("no nonzero local similarities")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalParams {
    pub n_r_max: usize,
    pub w_r: f64,
    pub n_rel: usize,
    pub n_p: usize,
    pub mu_rho: [f64; 3],
    pub tau_rho: [f64; 3],
}

impl Default for GlobalParams {
    fn default() -> Self {
        Self {
            n_r_max: 70,
            w_r: 0.5,
            n_rel: 5,
            n_p: 50,
            mu_rho: [0.3, PI / 6.0, PI / 6.0],
            tau_rho: [-30.0, -15.0, -15.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinutiaPair {
    pub r_t: usize,
    pub c_t: usize,
    pub s_hat_0: f64,
    pub s_hat_final: f64,
    pub efficiency: f64,
}

/// Each nonzero entry scaled by one minus the mean of the other entries
/// in its row and column; sparsity is preserved.
pub fn normalize(s: &SparseMatrix) -> Result<SparseMatrix, GlobalError> {
    let denom = s.rows + s.cols;
    if denom <= 2 {
        return Err(GlobalError::DegenerateTemplates);
    }
    let mut row = vec![0.0; s.rows];
    let mut col = vec![0.0; s.cols];
    for &(r, c, v) in &s.entries {
        row[r as usize] += v;
        col[c as usize] += v;
    }
    let denom = (denom - 2) as f64;
    let entries = s
        .entries
        .iter()
        .map(|&(r, c, v)| {
            let others = (col[c as usize] - v) + (row[r as usize] - v);
            (r, c, (1.0 - others / denom) * v)
        })
        .collect();
    Ok(SparseMatrix { entries, ..s.clone() })
}

/// Top `n_r_max` positive entries by value, ties by (row, col).
pub fn select_pairs(s_hat: &SparseMatrix, p: &GlobalParams) -> Result<Vec<MinutiaPair>, GlobalError> {
    let mut cand: Vec<&(u32, u32, f64)> = s_hat.entries.iter().filter(|e| e.2 > 0.0).collect();
    if cand.is_empty() {
        return Err(GlobalError::NoCandidates);
    }
    let order = |a: &&(u32, u32, f64), b: &&(u32, u32, f64)| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1)));
    let n = p.n_r_max.min(cand.len());
    if n == 0 {
        return Err(GlobalError::NoCandidates);
    }
    if n < cand.len() {
        cand.select_nth_unstable_by(n - 1, order);
        cand.truncate(n);
    }
    cand.sort_unstable_by(order);
    Ok(cand
        .into_iter()
        .map(|&(r, c, v)| MinutiaPair {
            r_t: r as usize,
            c_t: c as usize,
            s_hat_0: v,
            s_hat_final: v,
            efficiency: 1.0,
        })
        .collect())
}

/// Logistic `1 / (1 + e^(-τ(v - μ)))`.
#[inline]
pub fn sigmoid(v: f64, mu: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (-tau * (v - mu)).exp())
}

/// Angle between the direction of `a` and the segment from `a` to `b`.
#[inline]
fn radial_angle(a: &Minutia, b: &Minutia) -> f64 {
    angle_diff_2pi(a.theta, (b.y - a.y).atan2(b.x - a.x))
}

/// Relative distance, direction and radial-angle discrepancies of pairs
/// `t` and `k`.
pub fn discrepancies(t: &MinutiaPair, k: &MinutiaPair, a: &[Minutia], b: &[Minutia]) -> [f64; 3] {
    let (at, ak, bt, bk) = (&a[t.r_t], &a[k.r_t], &b[t.c_t], &b[k.c_t]);
    let da = at.pos().dist(ak.pos());
    let db = bt.pos().dist(bk.pos());
    let longest = da.max(db);
    let d1 = if longest == 0.0 { 0.0 } else { (da - db).abs() / longest };
    let d2 = angle_diff_2pi(angle_diff_2pi(at.theta, ak.theta), angle_diff_2pi(bt.theta, bk.theta)).abs();
    let d3 = angle_diff_2pi(radial_angle(at, ak), radial_angle(bt, bk)).abs();
    [d1, d2, d3]
}

pub fn compatibility(t: &MinutiaPair, k: &MinutiaPair, a: &[Minutia], b: &[Minutia], p: &GlobalParams) -> f64 {
    let d = discrepancies(t, k, a, b);
    (0..3).map(|i| sigmoid(d[i], p.mu_rho[i], p.tau_rho[i])).product()
}

/// Row-major `n x n` compatibilities; the diagonal is unused and zero.
pub fn compatibility_matrix(pairs: &[MinutiaPair], a: &[Minutia], b: &[Minutia], p: &GlobalParams) -> Vec<f64> {
    let n = pairs.len();
    let mut rho = vec![0.0; n * n];
    for t in 0..n {
        for k in 0..n {
            if t != k {
                rho[t * n + k] = compatibility(&pairs[t], &pairs[k], a, b, p);
            }
        }
    }
    rho
}

/// `n_rel` synchronous updates
/// `s_t <- w_R s_t + (1 - w_R) Σ_{k≠t} ρ(t,k) s_k / (n - 1)`.
/// A single pair is left unchanged.
pub fn relax(pairs: &mut [MinutiaPair], rho: &[f64], p: &GlobalParams) {
    let n = pairs.len();
    assert_eq!(rho.len(), n * n);
    if n < 2 {
        return;
    }
    let mut s: Vec<f64> = pairs.iter().map(|q| q.s_hat_0).collect();
    let mut next = vec![0.0; n];
    for _ in 0..p.n_rel {
        for t in 0..n {
            let support: f64 = (0..n).filter(|&k| k != t).map(|k| rho[t * n + k] * s[k]).sum();
            next[t] = p.w_r * s[t] + (1.0 - p.w_r) * support / (n - 1) as f64;
        }
        std::mem::swap(&mut s, &mut next);
    }
    for (q, v) in pairs.iter_mut().zip(s) {
        q.s_hat_final = v;
        q.efficiency = if q.s_hat_0 > 0.0 { v / q.s_hat_0 } else { 0.0 };
    }
}

/// Mean relaxed similarity of the `n_p` most efficient pairs; ties by the
/// higher relaxed similarity, then pair index.
pub fn global_score(pairs: &[MinutiaPair], p: &GlobalParams) -> f64 {
    let mut idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].s_hat_0 > 0.0).collect();
    if idx.is_empty() || p.n_p == 0 {
        return 0.0;
    }
    idx.sort_by(|&i, &j| {
        let (a, b) = (&pairs[i], &pairs[j]);
        b.efficiency
            .total_cmp(&a.efficiency)
            .then(b.s_hat_final.total_cmp(&a.s_hat_final))
            .then(i.cmp(&j))
    });
    let top = &idx[..p.n_p.min(idx.len())];
    top.iter().map(|&i| pairs[i].s_hat_final).sum::<f64>() / top.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub score: f64,
    /// Gate-passing pairs.
    pub comparisons: usize,
    /// `comparisons / (N_A * N_B)`.
    pub comparison_ratio: f64,
    pub pairs: Vec<MinutiaPair>,
}

/// Local matrix, normalization, selection, relaxation and scoring. A
/// matrix without candidates scores zero.
pub fn match_features(
    a: FeatureView<'_>,
    b: FeatureView<'_>,
    gates: &GatingThresholds,
    p: &GlobalParams,
) -> Result<MatchResult, GlobalError> {
    let s = build_similarity_matrix(a, b, gates);
    score_matrix(&s, a.minutiae, b.minutiae, p)
}

/// Global stage on an already built local matrix.
pub fn score_matrix(s: &SparseMatrix, a: &[Minutia], b: &[Minutia], p: &GlobalParams) -> Result<MatchResult, GlobalError> {
    let s_hat = normalize(s)?;
    let mut result = MatchResult {
        score: 0.0,
        comparisons: s.comparisons,
        comparison_ratio: s.comparison_ratio(),
        pairs: Vec::new(),
    };
    let mut pairs = match select_pairs(&s_hat, p) {
        Ok(pairs) => pairs,
        Err(GlobalError::NoCandidates) => return Ok(result),
        Err(e) => return Err(e),
    };
    let rho = compatibility_matrix(&pairs, a, b, p);
    relax(&mut pairs, &rho, p);
    result.score = global_score(&pairs, p);
    result.pairs = pairs;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::MinutiaKind;
    use crate::mcc::build_descriptors;
    use crate::mcc::MccParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse(rows: usize, cols: usize, dense: &[Vec<f64>]) -> SparseMatrix {
        let mut entries = Vec::new();
        for (r, row) in dense.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    entries.push((r as u32, c as u32, v));
                }
            }
        }
        SparseMatrix {
            rows,
            cols,
            comparisons: entries.len(),
            entries,
        }
    }

    fn pair(s: f64) -> MinutiaPair {
        MinutiaPair {
            r_t: 0,
            c_t: 0,
            s_hat_0: s,
            s_hat_final: s,
            efficiency: 1.0,
        }
    }

    #[test]
    fn normalize_examples() {
        let single = sparse(3, 3, &[vec![0.0, 0.0, 0.0], vec![0.0, 0.7, 0.0], vec![0.0; 3]]);
        assert_eq!(normalize(&single).unwrap().entries, vec![(1, 1, 0.7)]);
        let ones = sparse(2, 2, &[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(normalize(&ones).unwrap().entries.iter().all(|e| e.2 == 0.0));
        let tiny = sparse(1, 1, &[vec![0.5]]);
        assert_eq!(normalize(&tiny), Err(GlobalError::DegenerateTemplates));
    }

    #[test]
    fn normalize_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let dense: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..12).map(|_| if rng.random_bool(0.3) { rng.random_range(0.01..1.0) } else { 0.0 }).collect())
                .collect();
            let got = normalize(&sparse(10, 12, &dense)).unwrap().to_dense();
            for i in 0..10 {
                for j in 0..12 {
                    let mut others = 0.0;
                    for k in 0..10 {
                        if k != i {
                            others += dense[k][j];
                        }
                    }
                    for k in 0..12 {
                        if k != j {
                            others += dense[i][k];
                        }
                    }
                    let expect = (1.0 - others / 20.0) * dense[i][j];
                    assert!((got[i][j] - expect).abs() < 1e-12);
                    assert!(got[i][j] <= dense[i][j]);
                }
            }
        }
    }

    #[test]
    fn selection_examples() {
        let p = GlobalParams::default();
        let three = sparse(3, 3, &[vec![0.2, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, 0.1]]);
        let sel = select_pairs(&three, &p).unwrap();
        assert_eq!(sel.iter().map(|q| (q.r_t, q.c_t)).collect::<Vec<_>>(), vec![(1, 1), (0, 0), (2, 2)]);
        let tied = sparse(2, 2, &[vec![0.4, 0.4], vec![0.4, 0.4]]);
        let sel = select_pairs(&tied, &GlobalParams { n_r_max: 3, ..p }).unwrap();
        assert_eq!(sel.iter().map(|q| (q.r_t, q.c_t)).collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 0)]);
        assert_eq!(select_pairs(&sparse(2, 2, &[vec![0.0; 2], vec![0.0; 2]]), &p), Err(GlobalError::NoCandidates));
    }

    #[test]
    fn selection_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GlobalParams { n_r_max: 17, ..Default::default() };
        for _ in 0..30 {
            // coarse values force ties
            let dense: Vec<Vec<f64>> =
                (0..15).map(|_| (0..15).map(|_| if rng.random_bool(0.4) { rng.random_range(1..6) as f64 / 8.0 } else { 0.0 }).collect()).collect();
            let m = sparse(15, 15, &dense);
            let mut all: Vec<(u32, u32, f64)> = m.entries.clone();
            all.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
            all.truncate(17);
            let got: Vec<(u32, u32, f64)> = select_pairs(&m, &p).unwrap().iter().map(|q| (q.r_t as u32, q.c_t as u32, q.s_hat_0)).collect();
            assert_eq!(got, all);
        }
    }

    #[test]
    fn sigmoid_midpoint_and_rigid_copy() {
        for tau in [-30.0, -1.0, 4.0] {
            assert_eq!(sigmoid(0.7, 0.7, tau), 0.5);
        }
        let a = vec![
            Minutia::new(100.0, 100.0, 0.3, MinutiaKind::Ending),
            Minutia::new(180.0, 140.0, 2.0, MinutiaKind::Ending),
        ];
        let pose = crate::geometry::RigidPose::new(1.1, 40.0, -25.0);
        let c = crate::geometry::Point::new(0.0, 0.0);
        let b: Vec<Minutia> = a
            .iter()
            .map(|m| {
                let q = pose.apply(m.pos(), c);
                Minutia::new(q.x, q.y, pose.apply_direction(m.theta), m.kind)
            })
            .collect();
        let (t, k) = (
            MinutiaPair { r_t: 0, c_t: 0, ..pair(0.5) },
            MinutiaPair { r_t: 1, c_t: 1, ..pair(0.5) },
        );
        let d = discrepancies(&t, &k, &a, &b);
        assert!(d.iter().all(|v| v.abs() < 1e-9), "{d:?}");
        let p = GlobalParams::default();
        let expect: f64 = (0..3).map(|i| sigmoid(0.0, p.mu_rho[i], p.tau_rho[i])).product();
        assert!((compatibility(&t, &k, &a, &b, &p) - expect).abs() < 1e-9);
        assert!(expect > 0.99);
    }

    #[test]
    fn zero_distance_pairs() {
        let a = vec![Minutia::new(5.0, 5.0, 0.0, MinutiaKind::Ending); 2];
        let t = MinutiaPair { r_t: 0, c_t: 0, ..pair(0.5) };
        let k = MinutiaPair { r_t: 1, c_t: 1, ..pair(0.5) };
        assert_eq!(discrepancies(&t, &k, &a, &a)[0], 0.0);
    }

    #[test]
    fn relaxation_fixed_points() {
        let p = GlobalParams::default();
        let mut pairs = vec![pair(0.4); 4];
        let ones: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
        relax(&mut pairs, &ones, &p);
        assert!(pairs.iter().all(|q| (q.s_hat_final - 0.4).abs() < 1e-15));
        assert!((global_score(&pairs, &p) - 0.4).abs() < 1e-15);

        let mut pairs = vec![pair(0.4), pair(0.8), pair(0.2)];
        relax(&mut pairs, &[0.0; 9], &p);
        for (q, s0) in pairs.iter().zip([0.4, 0.8, 0.2]) {
            assert!((q.s_hat_final - s0 * 0.5f64.powi(5)).abs() < 1e-15);
        }

        let mut single = vec![pair(0.6)];
        relax(&mut single, &[0.0], &p);
        assert_eq!(single[0].s_hat_final, 0.6);
        assert_eq!(global_score(&[], &p), 0.0);
    }

    #[test]
    fn relaxation_hand_rolled() {
        let p = GlobalParams::default();
        let s0 = [0.9, 0.5, 0.3];
        let rho = [0.0, 0.8, 0.1, 0.7, 0.0, 0.4, 0.2, 0.6, 0.0];
        let mut s = s0;
        for _ in 0..5 {
            s = [
                0.5 * s[0] + 0.5 * (0.8 * s[1] + 0.1 * s[2]) / 2.0,
                0.5 * s[1] + 0.5 * (0.7 * s[0] + 0.4 * s[2]) / 2.0,
                0.5 * s[2] + 0.5 * (0.2 * s[0] + 0.6 * s[1]) / 2.0,
            ];
        }
        let mut pairs: Vec<MinutiaPair> = s0.iter().map(|&v| pair(v)).collect();
        relax(&mut pairs, &rho, &p);
        for (q, e) in pairs.iter().zip(s) {
            assert!((q.s_hat_final - e).abs() < 1e-12);
        }
    }

    fn random_minutiae(rng: &mut ChaCha8Rng, n: usize) -> Vec<Minutia> {
        (0..n)
            .map(|_| {
                Minutia::new(
                    rng.random_range(200.0..800.0),
                    rng.random_range(200.0..800.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    MinutiaKind::Ending,
                )
            })
            .collect()
    }

    #[test]
    fn self_match_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mp = MccParams::default();
        let p = GlobalParams::default();
        let a = random_minutiae(&mut rng, 120);
        let b = random_minutiae(&mut rng, 120);
        let (da, db) = (build_descriptors(&a, &mp), build_descriptors(&b, &mp));
        let va = FeatureView { minutiae: &a, descriptors: &da };
        let vb = FeatureView { minutiae: &b, descriptors: &db };
        let g = GatingThresholds::REGISTERED;
        let own = match_features(va, va, &g, &p).unwrap().score;
        assert!(own >= 0.9, "{own}");
        let ab = match_features(va, vb, &g, &p).unwrap().score;
        let ba = match_features(vb, va, &g, &p).unwrap().score;
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab < own);
        let again = match_features(va, vb, &g, &p).unwrap().score;
        assert_eq!(ab.to_bits(), again.to_bits());
    }

    #[test]
    fn no_gate_passing_pairs_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mp = MccParams::default();
        let a = random_minutiae(&mut rng, 30);
        let b: Vec<Minutia> = a.iter().map(|m| Minutia::new(m.x + 1500.0, m.y, m.theta, m.kind)).collect();
        let (da, db) = (build_descriptors(&a, &mp), build_descriptors(&b, &mp));
        let r = match_features(
            FeatureView { minutiae: &a, descriptors: &da },
            FeatureView { minutiae: &b, descriptors: &db },
            &GatingThresholds::REGISTERED,
            &GlobalParams::default(),
        )
        .unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.comparisons, 0);
    }
}
