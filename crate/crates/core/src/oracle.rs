//! Brute-force reference computations used to validate the fast paths.
//!
//! Everything here favors obviousness over speed: exhaustive pair scans,
//! dense parameter sweeps, and plain central-difference stencils. Tests
//! treat these as ground truth and compare the optimized implementations
//! against them.

use crate::error::Error;
use crate::geometry::grid::PointGrid;
use crate::geometry::{local_hausdorff_set_plane, AffinePlane, PitchPolicy};
use crate::Result;
use serde::{Deserialize, Serialize};

/// A point that attains a reported extremum, with enough context to
/// re-evaluate it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleWitness {
    /// Index of the attaining point in its own set.
    pub index: usize,
    /// Index of the partner (nearest point of the other set), if any.
    pub partner: Option<usize>,
    pub point: Vec<f64>,
    pub value: f64,
}

/// Exhaustive two-sided Hausdorff distance between finite point sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BilateralReport {
    /// max(sup_a_to_b, sup_b_to_a): the classical Hausdorff distance.
    pub value: f64,
    pub sup_a_to_b: f64,
    pub sup_b_to_a: f64,
    pub witness_a: OracleWitness,
    pub witness_b: OracleWitness,
    /// Number of pair distance evaluations.
    pub cost: u64,
}

fn one_sided_sup(a: &[f64], b: &[f64], n: usize) -> (OracleWitness, u64) {
    let mut worst = OracleWitness { index: 0, partner: None, point: vec![], value: -1.0 };
    let mut cost = 0u64;
    for (i, p) in a.chunks_exact(n).enumerate() {
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for (j, q) in b.chunks_exact(n).enumerate() {
            let d2 = crate::geometry::vecn::dist2(p, q);
            cost += 1;
            if d2 < best {
                best = d2;
                best_j = j;
            }
        }
        let dist = best.sqrt();
        if dist > worst.value {
            worst = OracleWitness {
                index: i,
                partner: Some(best_j),
                point: p.to_vec(),
                value: dist,
            };
        }
    }
    (worst, cost)
}

/// Hausdorff distance by exhaustive pair scan, with witnesses for both
/// one-sided sups. Coordinates are flat n-vectors.
pub fn hausdorff_bilateral(a: &[f64], b: &[f64], n: usize) -> Result<BilateralReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    if a.len() % n != 0 || b.len() % n != 0 {
        return Err(Error::InvalidInput("coordinate buffer not a multiple of n".into()));
    }
    let (wa, ca) = one_sided_sup(a, b, n);
    let (wb, cb) = one_sided_sup(b, a, n);
    Ok(BilateralReport {
        value: wa.value.max(wb.value),
        sup_a_to_b: wa.value,
        sup_b_to_a: wb.value,
        witness_a: wa,
        witness_b: wb,
        cost: ca + cb,
    })
}

/// Result of the dense angle sweep for gamma in the plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub value: f64,
    pub angle: f64,
    /// Number of bilateral evaluations spent (grid probes + refinements).
    pub cost: u64,
    /// Grid minimum before local refinement, for diagnosing basins.
    pub grid_value: f64,
}

/// Reference gamma in n = 2 by dense sweep over `n_angles` line directions
/// through x, each scored with the same bilateral measurement the production
/// path uses, followed by golden-section refinement of the best few local
/// basins. Independent of the production optimizer (principal components,
/// probe alignment, rotation search).
pub fn gamma_sweep_2d(
    set: &PointGrid,
    x: &[f64],
    r: f64,
    sample_gap: f64,
    n_angles: usize,
) -> Result<SweepReport> {
    if set.dim() != 2 {
        return Err(Error::InvalidInput(format!(
            "angle sweep is a planar oracle, got n={}",
            set.dim()
        )));
    }
    if !set.has_point_within(x, r) {
        return Err(Error::EmptyBall { radius: r });
    }
    let mut cost = 0u64;
    let mut eval = |theta: f64| -> f64 {
        cost += 1;
        let plane = AffinePlane {
            base: x.to_vec(),
            frame: vec![vec![theta.cos(), theta.sin()]],
        };
        local_hausdorff_set_plane(set, &plane, x, r, sample_gap, PitchPolicy::Strict)
            .map(|b| b.value)
            .unwrap_or(f64::INFINITY)
    };
    let mut values = Vec::with_capacity(n_angles);
    for k in 0..n_angles {
        values.push(eval(k as f64 * std::f64::consts::PI / n_angles as f64));
    }
    let grid_best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, v)| (i, *v))
        .unwrap();
    // local minima of the cyclic probe sequence, best few refined
    let mut basins: Vec<(usize, f64)> = (0..n_angles)
        .filter(|&i| {
            let prev = values[(i + n_angles - 1) % n_angles];
            let next = values[(i + 1) % n_angles];
            values[i] <= prev && values[i] <= next
        })
        .map(|i| (i, values[i]))
        .collect();
    basins.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    basins.truncate(5);
    let span = std::f64::consts::PI / n_angles as f64;
    let mut best_t = grid_best.0 as f64 * span;
    let mut best_v = grid_best.1;
    for (i, _) in basins {
        let center = i as f64 * span;
        let (t, v) = refine_min(&mut eval, center - span, center + span, 1e-13);
        if v < best_v {
            best_v = v;
            best_t = t;
        }
    }
    Ok(SweepReport {
        value: best_v,
        angle: best_t.rem_euclid(std::f64::consts::PI),
        cost,
        grid_value: grid_best.1,
    })
}

/// Golden-section scalar minimization, kept local so the oracle does not
/// lean on the production search code. Returns the best evaluated point.
fn refine_min(f: &mut dyn FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for _ in 0..200 {
        if (b - a).abs() < tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Central-difference stencil (offsets in grid steps, coefficients) for the
/// k-th derivative: even orders use powers of the 3-point second difference,
/// odd orders compose one 3-point first difference on top.
pub fn central_stencil(k: usize) -> (Vec<i64>, Vec<f64>) {
    let mut coeffs: Vec<f64> = vec![1.0];
    let second = [1.0, -2.0, 1.0];
    for _ in 0..(k / 2) {
        coeffs = convolve(&coeffs, &second);
    }
    if k % 2 == 1 {
        coeffs = convolve(&coeffs, &[-0.5, 0.0, 0.5]);
    }
    let half = (coeffs.len() / 2) as i64;
    let offsets = (0..coeffs.len() as i64).map(|i| i - half).collect();
    (offsets, coeffs)
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Mixed partial derivative estimate of f at t0: `alpha[i]` is the
/// derivative order along axis i, `h` the step. Tensor product of
/// one-dimensional central stencils; exact on polynomials of degree
/// alpha[i]+1 per axis.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    t0: &[f64],
    h: f64,
    alpha: &[usize],
) -> f64 {
    let d = t0.len();
    assert_eq!(alpha.len(), d, "one order per axis");
    let axis: Vec<(Vec<i64>, Vec<f64>)> = alpha.iter().map(|&k| central_stencil(k)).collect();
    let mut total = 0.0;
    let mut idx = vec![0usize; d];
    let mut t = vec![0.0; d];
    'outer: loop {
        let mut coeff = 1.0;
        for i in 0..d {
            coeff *= axis[i].1[idx[i]];
            t[i] = t0[i] + axis[i].0[idx[i]] as f64 * h;
        }
        if coeff != 0.0 {
            total += coeff * f(&t);
        }
        for i in 0..d {
            if idx[i] + 1 < axis[i].0.len() {
                idx[i] += 1;
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    let k_total: usize = alpha.iter().sum();
    total / h.powi(k_total as i32)
}

/// Derivative estimate at steps h and 2h plus their relative gap, the
/// standard consistency check for a converged stencil. The gap divides by
/// the larger magnitude (0 when both vanish).
pub fn richardson_pair(
    f: &mut dyn FnMut(&[f64]) -> f64,
    t0: &[f64],
    h: f64,
    alpha: &[usize],
) -> (f64, f64, f64) {
    let v1 = central_difference(f, t0, h, alpha);
    let v2 = central_difference(f, t0, 2.0 * h, alpha);
    let denom = v1.abs().max(v2.abs());
    let gap = if denom > 0.0 { (v1 - v2).abs() / denom } else { 0.0 };
    (v1, v2, gap)
}

/// All derivative multi-indices of exact total order k in d variables,
/// lexicographic. Used to take sup norms over |alpha| = k.
pub fn multi_indices(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; d];
    fill(&mut out, &mut cur, 0, k);
    fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, axis: usize, left: usize) {
        if axis + 1 == cur.len() {
            cur[axis] = left;
            out.push(cur.clone());
            cur[axis] = 0;
            return;
        }
        for take in (0..=left).rev() {
            cur[axis] = take;
            fill(out, cur, axis + 1, left - take);
            cur[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hausdorff_singletons() {
        let r = hausdorff_bilateral(&[0.0, 0.0], &[3.0, 4.0], 2).unwrap();
        assert!((r.value - 5.0).abs() < 1e-12);
        assert_eq!(r.sup_a_to_b, r.sup_b_to_a);
    }

    #[test]
    fn hausdorff_identical_sets() {
        let pts = [0.0, 0.0, 1.0, 0.5, -2.0, 3.0];
        let r = hausdorff_bilateral(&pts, &pts, 2).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn hausdorff_asymmetric_witness() {
        // A has an outlier far from B; B is inside A's hull
        let a = [0.0, 0.0, 10.0, 0.0];
        let b = [0.0, 0.0, 1.0, 0.0];
        let r = hausdorff_bilateral(&a, &b, 2).unwrap();
        assert!((r.sup_a_to_b - 9.0).abs() < 1e-12);
        assert!((r.sup_b_to_a - 1.0).abs() < 1e-12);
        assert_eq!(r.witness_a.index, 1);
        assert_eq!(r.value, r.sup_a_to_b);
    }

    #[test]
    fn stencils_match_known_tables() {
        let (o1, c1) = central_stencil(1);
        assert_eq!(o1, vec![-1, 0, 1]);
        assert_eq!(c1, vec![-0.5, 0.0, 0.5]);
        let (o2, c2) = central_stencil(2);
        assert_eq!(o2, vec![-1, 0, 1]);
        assert_eq!(c2, vec![1.0, -2.0, 1.0]);
        let (_, c3) = central_stencil(3);
        assert_eq!(c3, vec![-0.5, 1.0, 0.0, -1.0, 0.5]);
        let (_, c4) = central_stencil(4);
        assert_eq!(c4, vec![1.0, -4.0, 6.0, -4.0, 1.0]);
    }

    #[test]
    fn central_difference_exact_on_quadratic() {
        let mut f = |t: &[f64]| 3.0 * t[0] * t[0] + 2.0 * t[0] * t[1] - t[1] * t[1];
        let d2x = central_difference(&mut f, &[0.3, -0.2], 0.1, &[2, 0]);
        assert!((d2x - 6.0).abs() < 1e-9);
        let dxy = central_difference(&mut f, &[0.3, -0.2], 0.1, &[1, 1]);
        assert!((dxy - 2.0).abs() < 1e-9);
        let d2y = central_difference(&mut f, &[0.3, -0.2], 0.1, &[0, 2]);
        assert!((d2y + 2.0).abs() < 1e-9);
    }

    #[test]
    fn richardson_flags_rough_function() {
        // smooth function: tiny gap
        let mut smooth = |t: &[f64]| (t[0]).sin();
        let (_, _, gap) = richardson_pair(&mut smooth, &[0.4], 1e-3, &[2]);
        assert!(gap < 1e-4, "gap {gap}");
    }

    #[test]
    fn sine_second_derivative() {
        let mut f = |t: &[f64]| (2.0 * t[0]).sin();
        let v = central_difference(&mut f, &[0.1], 1e-4, &[2]);
        let truth = -4.0 * (0.2f64).sin();
        assert!((v - truth).abs() < 1e-5, "{v} vs {truth}");
    }

    #[test]
    fn multi_index_enumeration() {
        let all = multi_indices(2, 3);
        assert_eq!(all, vec![vec![3, 0], vec![2, 1], vec![1, 2], vec![0, 3]]);
        assert_eq!(multi_indices(1, 4), vec![vec![4]]);
        assert_eq!(multi_indices(3, 2).len(), 6);
    }
}
