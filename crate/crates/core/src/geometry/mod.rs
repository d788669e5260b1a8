//! Point clouds, affine planes, and bilateral flatness measurement.
//!
//! The flatness of a set E at location x and scale r is measured against a
//! d-plane P through x as
//!
//! ```text
//! d(x,r)(E,P) = (1/r) sup { dist(y,P) : y in E and B(x,r) }
//!             + (1/r) sup { dist(z,E) : z in P and B(x,r) }
//! ```
//!
//! and `gamma(x,r)` is the infimum over planes through x. The first sup is
//! exact on the samples; the second is evaluated on a grid over the plane
//! disk, so the returned values are upper bounds for the sampled set up to
//! the stated grid pitch. `gamma` optimizes the plane (principal component
//! initialization, then a derivative-free rotation search) and returns a
//! value that is exactly the measured distance at the returned plane, hence
//! an upper bound for the true infimum.

pub mod grid;
pub mod vecn;

use crate::config;
use crate::error::Error;
use crate::par;
use crate::Result;
use grid::PointGrid;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// point cloud
// ---------------------------------------------------------------------------

/// Finite sample of a d-dimensional set in R^n.
///
/// `sample_gap` is the guaranteed covering radius: every point of the
/// underlying set lies within `sample_gap` of some sample.
#[derive(Debug, Clone)]
pub struct PointCloud {
    coords: Vec<f64>,
    n: usize,
    d: usize,
    r0: f64,
    sample_gap: f64,
}

impl PointCloud {
    pub fn new(coords: Vec<f64>, n: usize, d: usize, r0: f64, sample_gap: f64) -> Result<Self> {
        if n < 2 || n > 8 {
            return Err(Error::InvalidInput(format!("ambient dimension {n} out of range 2..=8")));
        }
        if d == 0 || d >= n {
            return Err(Error::InvalidInput(format!("set dimension {d} must satisfy 0 < d < n={n}")));
        }
        if coords.is_empty() {
            return Err(Error::EmptySet);
        }
        if coords.len() % n != 0 {
            return Err(Error::InvalidInput(format!(
                "coordinate buffer length {} is not a multiple of n={n}",
                coords.len()
            )));
        }
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(Error::NonPositiveRadius(r0));
        }
        if !(sample_gap > 0.0 && sample_gap.is_finite()) {
            return Err(Error::InvalidInput(format!("sample_gap {sample_gap} must be positive")));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok(PointCloud { coords, n, d, r0, sample_gap })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len() / self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn r0(&self) -> f64 {
        self.r0
    }

    #[inline]
    pub fn sample_gap(&self) -> f64 {
        self.sample_gap
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.n..(i + 1) * self.n]
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.n];
        let mut hi = vec![f64::NEG_INFINITY; self.n];
        for p in self.coords.chunks_exact(self.n) {
            for i in 0..self.n {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }

    /// Spatial index over the samples. Cell size defaults to twice the
    /// sample gap, clamped so sparse clouds do not produce huge empty grids.
    pub fn index(&self) -> PointGrid {
        let cell = (2.0 * self.sample_gap).max(self.r0 * 1e-4);
        PointGrid::from_flat(self.n, cell, &self.coords)
    }

    /// Scaled copy: every coordinate, r0, and sample_gap multiplied by t.
    pub fn scaled(&self, t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidInput(format!("scale factor {t} must be positive")));
        }
        PointCloud::new(
            self.coords.iter().map(|x| x * t).collect(),
            self.n,
            self.d,
            self.r0 * t,
            self.sample_gap * t,
        )
    }
}

// ---------------------------------------------------------------------------
// affine planes
// ---------------------------------------------------------------------------

/// Affine d-plane in R^n: a base point and an orthonormal tangent frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffinePlane {
    pub base: Vec<f64>,
    pub frame: Vec<Vec<f64>>,
}

impl AffinePlane {
    /// Validates dimensions and orthonormality to relative tolerance 1e-12.
    pub fn new(base: Vec<f64>, frame: Vec<Vec<f64>>) -> Result<Self> {
        let n = base.len();
        if frame.is_empty() || frame.len() >= n {
            return Err(Error::InvalidInput(format!(
                "frame must hold 1..{} vectors, got {}",
                n - 1,
                frame.len()
            )));
        }
        for (i, f) in frame.iter().enumerate() {
            if f.len() != n {
                return Err(Error::InvalidInput("frame vector dimension mismatch".into()));
            }
            for (j, g) in frame.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = vecn::dot(f, g);
                if (got - want).abs() > config::FRAME_ORTHO_TOL {
                    return Err(Error::InvalidInput(format!(
                        "frame not orthonormal: <f{i},f{j}> = {got}"
                    )));
                }
            }
        }
        Ok(AffinePlane { base, frame })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.base.len()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.frame.len()
    }

    /// Tangential coordinates of p relative to the base point.
    pub fn tangential(&self, p: &[f64]) -> Vec<f64> {
        let mut rel = vec![0.0; self.n()];
        vecn::sub(p, &self.base, &mut rel);
        self.frame.iter().map(|f| vecn::dot(&rel, f)).collect()
    }

    /// Splits p into tangential coordinates and the normal residual vector,
    /// so that p = base + sum t_i f_i + w with w orthogonal to the frame.
    pub fn split(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let mut w = vec![0.0; n];
        vecn::sub(p, &self.base, &mut w);
        let mut t = Vec::with_capacity(self.d());
        for f in &self.frame {
            let ti = vecn::dot(&w, f);
            t.push(ti);
            vecn::axpy(-ti, f, &mut w);
        }
        (t, w)
    }

    /// Distance from p to the plane.
    #[inline]
    pub fn distance(&self, p: &[f64]) -> f64 {
        let (_, w) = self.split(p);
        vecn::norm(&w)
    }

    /// Point of the plane with the given tangential coordinates.
    pub fn embed(&self, t: &[f64]) -> Vec<f64> {
        let mut p = self.base.clone();
        for (ti, f) in t.iter().zip(&self.frame) {
            vecn::axpy(*ti, f, &mut p);
        }
        p
    }

    /// Orthogonal projection of p onto the plane.
    pub fn project_point(&self, p: &[f64]) -> Vec<f64> {
        self.embed(&self.tangential(p))
    }

    /// Orthonormal basis of the normal space, chosen deterministically from
    /// the coordinate axes (pivoted Gram-Schmidt against the frame).
    pub fn normal_frame(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(n - self.d());
        let mut cands: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            for f in &self.frame {
                let t = vecn::dot(&e, f);
                vecn::axpy(-t, f, &mut e);
            }
            cands.push(e);
        }
        while out.len() < n - self.d() {
            // pick the residual with largest norm, orthogonalize, repeat
            let mut best = 0usize;
            let mut best_norm = -1.0;
            for (i, c) in cands.iter().enumerate() {
                let mut r = c.clone();
                for u in &out {
                    let t = vecn::dot(&r, u);
                    vecn::axpy(-t, u, &mut r);
                }
                let nr = vecn::norm(&r);
                if nr > best_norm + 1e-15 {
                    best_norm = nr;
                    best = i;
                }
            }
            let mut v = cands[best].clone();
            for u in &out {
                let t = vecn::dot(&v, u);
                vecn::axpy(-t, u, &mut v);
            }
            let nv = vecn::norm(&v);
            vecn::scale(1.0 / nv, &mut v);
            out.push(v);
        }
        out
    }
}

/// Orthogonal projector onto the span of `frame`, as a dense n x n matrix.
fn span_projector(frame: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for f in frame {
        for i in 0..n {
            for j in 0..n {
                p[i * n + j] += f[i] * f[j];
            }
        }
    }
    p
}

/// Operator norm of the difference of the two tangent projectors.
pub fn projector_distance(a: &AffinePlane, b: &AffinePlane) -> f64 {
    let n = a.n();
    let mut m = span_projector(&a.frame, n);
    let mb = span_projector(&b.frame, n);
    for i in 0..n * n {
        m[i] -= mb[i];
    }
    vecn::symmetric_opnorm(&m, n)
}

// ---------------------------------------------------------------------------
// bilateral local Hausdorff distance
// ---------------------------------------------------------------------------

/// How the plane disk is discretized for the plane-to-set sup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PitchPolicy {
    /// min(sample_gap, r/200): measurement-grade accuracy.
    Strict,
    /// r/64: construction-grade; error <= 1.6% of r, documented in reports.
    Coarse,
    /// Fixed absolute pitch.
    Fixed(f64),
}

impl PitchPolicy {
    pub fn pitch(&self, sample_gap: f64, r: f64) -> f64 {
        match self {
            PitchPolicy::Strict => sample_gap.min(r / 200.0),
            PitchPolicy::Coarse => r / 64.0,
            PitchPolicy::Fixed(h) => *h,
        }
    }
}

/// Both sups of the bilateral distance, already normalized by r.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HausdorffBreakdown {
    /// Full bilateral value: sup_set_to_plane + sup_plane_to_set.
    pub value: f64,
    /// (1/r) sup over samples in B(x,r) of the distance to the plane.
    pub sup_set_to_plane: f64,
    /// (1/r) sup over plane grid points in B(x,r) of the distance to E.
    pub sup_plane_to_set: f64,
    /// Set side of the sup ranged over nothing (reported as 0).
    pub empty_set_side: bool,
    /// Plane side ranged over nothing (x further than r from the plane).
    pub empty_plane_side: bool,
    /// Grid pitch used on the plane side.
    pub grid_pitch: f64,
}

/// Bilateral distance between the samples in `set` and `plane`, localized to
/// B(x,r). The set side is exact on the samples; the plane side is a grid
/// sup at the policy pitch.
pub fn local_hausdorff_set_plane(
    set: &PointGrid,
    plane: &AffinePlane,
    x: &[f64],
    r: f64,
    sample_gap: f64,
    policy: PitchPolicy,
) -> Result<HausdorffBreakdown> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::NonPositiveRadius(r));
    }
    let pitch = policy.pitch(sample_gap, r);
    if !(pitch > 0.0) {
        return Err(Error::InvalidInput(format!("grid pitch {pitch} must be positive")));
    }

    // set -> plane: exact over samples in the ball
    let mut sup_sp = 0.0f64;
    let mut any_set = false;
    set.for_each_in_ball(x, r, |i, _| {
        any_set = true;
        let dist = plane.distance(set.point(i));
        if dist > sup_sp {
            sup_sp = dist;
        }
        true
    });

    // plane -> set: grid over the disk plane intersected with B(x,r)
    let d = plane.d();
    let h = plane.distance(x);
    let mut sup_ps = 0.0f64;
    let mut any_plane = false;
    if h < r {
        let rho = (r * r - h * h).sqrt();
        let x_t = plane.tangential(x);
        // the +1e-9 and the relative slack below keep the node set identical
        // under uniform rescaling of all inputs (floor and boundary
        // comparisons must not flip on last-bit differences)
        let steps = (rho / pitch + 1e-9).floor() as i64;
        let rho2_in = rho * rho * (1.0 + 1e-12);
        let mut idx = vec![-steps; d];
        let mut t = vec![0.0; d];
        'outer: loop {
            let mut inside = 0.0;
            for k in 0..d {
                t[k] = x_t[k] + idx[k] as f64 * pitch;
                let dt = idx[k] as f64 * pitch;
                inside += dt * dt;
            }
            if inside <= rho2_in {
                any_plane = true;
                let z = plane.embed(&t);
                let dist = set.distance_to(&z);
                if dist > sup_ps {
                    sup_ps = dist;
                }
            }
            for axis in 0..d {
                if idx[axis] < steps {
                    idx[axis] += 1;
                    continue 'outer;
                }
                idx[axis] = -steps;
            }
            break;
        }
    }

    let sup_sp_n = if any_set { sup_sp / r } else { 0.0 };
    let sup_ps_n = if any_plane { sup_ps / r } else { 0.0 };
    Ok(HausdorffBreakdown {
        value: sup_sp_n + sup_ps_n,
        sup_set_to_plane: sup_sp_n,
        sup_plane_to_set: sup_ps_n,
        empty_set_side: !any_set,
        empty_plane_side: !any_plane,
        grid_pitch: pitch,
    })
}

/// Exact bilateral distance between two affine planes, localized to B(x,r)
/// and normalized by r (both sups computed in closed form, no grids).
pub fn plane_plane_distance(a: &AffinePlane, b: &AffinePlane, x: &[f64], r: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::NonPositiveRadius(r));
    }
    Ok((sup_plane_to_plane(a, b, x, r) + sup_plane_to_plane(b, a, x, r)) / r)
}

/// sup over z in P and B(x,r) of dist(z, Q); 0 when the ball misses P.
fn sup_plane_to_plane(p: &AffinePlane, q: &AffinePlane, x: &[f64], r: f64) -> f64 {
    let h = p.distance(x);
    if h >= r {
        return 0.0;
    }
    let rho = (r * r - h * h).sqrt();
    let xp = p.project_point(x);
    // residual after removing q's tangential part
    let strip = |v: &[f64]| -> Vec<f64> {
        let mut w = v.to_vec();
        for f in &q.frame {
            let t = vecn::dot(&w, f);
            vecn::axpy(-t, f, &mut w);
        }
        w
    };
    let mut rel = vec![0.0; p.n()];
    vecn::sub(&xp, &q.base, &mut rel);
    let w0 = strip(&rel);
    let cols: Vec<Vec<f64>> = p.frame.iter().map(|f| strip(f)).collect();
    // maximize |w0 + rho * sum_k u_k cols[k]| over the unit ball |u| <= 1;
    // the objective is convex in u so the max sits on the sphere.
    max_affine_norm_on_sphere(&w0, &cols, rho)
}

/// max over |u| = 1 of |w0 + rho * M u| where M has the given columns.
///
/// d = 1: the sphere is two points, compared directly. d >= 2: the squared
/// objective is u^T Q u + 2 b.u + c with Q = rho^2 M^T M; its maximizer on
/// the sphere solves (lambda I - Q) u = b for the unique lambda above the
/// top eigenvalue with |u(lambda)| = 1 (trust-region stationarity), found by
/// bisection on the secular equation, with the standard hard-case fallback
/// when b has no component on the top eigenspace.
fn max_affine_norm_on_sphere(w0: &[f64], cols: &[Vec<f64>], rho: f64) -> f64 {
    let d = cols.len();
    if d == 1 {
        let mut plus = 0.0;
        let mut minus = 0.0;
        for i in 0..w0.len() {
            let a = w0[i] + rho * cols[0][i];
            let b = w0[i] - rho * cols[0][i];
            plus += a * a;
            minus += b * b;
        }
        return plus.max(minus).sqrt();
    }
    let mut q = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            q[i * d + j] = rho * rho * vecn::dot(&cols[i], &cols[j]);
        }
        b[i] = rho * vecn::dot(&cols[i], w0);
    }
    let c = vecn::dot(w0, w0);
    sphere_max_quadratic(&q, &b, c, d).max(0.0).sqrt()
}

/// max over |u| = 1 of u^T Q u + 2 b.u + c for symmetric Q (d x d, d >= 2).
fn sphere_max_quadratic(q: &[f64], b: &[f64], c: f64, d: usize) -> f64 {
    let (vals, vecs) = vecn::symmetric_eigen(q, d);
    let bt: Vec<f64> = vecs.iter().map(|v| vecn::dot(v, b)).collect();
    let qmax = vals[0];
    let bnorm = vecn::norm(&bt);
    let scale = qmax.abs().max(bnorm).max(1e-300);
    let value = |lam: f64, hard_top: f64| -> f64 {
        // assemble u in the eigenbasis and evaluate the quadratic
        let mut g = c;
        for i in 0..d {
            let denom = lam - vals[i];
            let ui = if denom.abs() > 0.0 { bt[i] / denom } else { 0.0 };
            let ui = if i == 0 && hard_top != 0.0 { hard_top } else { ui };
            g += vals[i] * ui * ui + 2.0 * bt[i] * ui;
        }
        g
    };
    let norm2_at = |lam: f64| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            let denom = lam - vals[i];
            s += (bt[i] / denom) * (bt[i] / denom);
        }
        s
    };
    let tiny = 1e-13 * scale;
    if norm2_at(qmax + tiny) >= 1.0 {
        let mut lo = qmax + tiny;
        let mut hi = qmax + bnorm + tiny;
        while norm2_at(hi) > 1.0 {
            hi = qmax + 2.0 * (hi - qmax);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm2_at(mid) >= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        value(0.5 * (lo + hi), 0.0)
    } else {
        // hard case: u sits at lambda = top eigenvalue; the top coordinate
        // absorbs the leftover norm (sign irrelevant, its b-component ~ 0)
        let mut s2 = 0.0;
        for i in 1..d {
            let denom = qmax + tiny - vals[i];
            s2 += (bt[i] / denom) * (bt[i] / denom);
        }
        let top = (1.0 - s2).max(0.0).sqrt();
        value(qmax + tiny, top)
    }
}

/// Golden-section maximum of f on [lo, hi]; returns (argmax, max) among all
/// evaluated points. Deterministic.
fn golden_max(f: &mut dyn FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc >= fd { (c, fc) } else { (d, fd) };
    for _ in 0..200 {
        if (b - a).abs() < tol {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
            if fc > best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
            if fd > best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

/// Golden-section minimum; mirror of `golden_max`.
pub(crate) fn golden_min(
    f: &mut dyn FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> (f64, f64) {
    let (t, v) = golden_max(&mut |x| -f(x), lo, hi, tol);
    (t, -v)
}

// ---------------------------------------------------------------------------
// plane fitting and gamma
// ---------------------------------------------------------------------------

/// Best-fit plane through x by principal components of the ball samples.
///
/// Deterministic and scale-equivariant: coordinates are normalized by r, the
/// projector onto the top-d eigenspace is formed (unique given a spectral
/// gap), and the returned frame is rebuilt from the projector by pivoted
/// Gram-Schmidt over the coordinate axes, so it does not depend on the
/// arbitrary rotation the eigensolver picks inside a degenerate eigenspace.
pub fn fit_plane_pca(set: &PointGrid, x: &[f64], r: f64, d: usize) -> Result<AffinePlane> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::NonPositiveRadius(r));
    }
    let n = x.len();
    let mut cov = vec![0.0; n * n];
    let mut count = 0usize;
    let mut ball: Vec<usize> = Vec::new();
    set.for_each_in_ball(x, r, |i, _| {
        ball.push(i);
        true
    });
    ball.sort_unstable();
    for &i in &ball {
        let p = set.point(i);
        for a in 0..n {
            let da = (p[a] - x[a]) / r;
            for b in a..n {
                let db = (p[b] - x[b]) / r;
                cov[a * n + b] += da * db;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBall { radius: r });
    }
    for a in 0..n {
        for b in 0..a {
            cov[a * n + b] = cov[b * n + a];
        }
    }
    let (_, vectors) = vecn::symmetric_eigen(&cov, n);
    let projector = span_projector(&vectors[..d], n);
    // pivoted Gram-Schmidt over the projected coordinate axes
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|rw| projector[rw * n + i]).collect())
        .collect();
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut best = 0usize;
        let mut best_norm = -1.0;
        for (i, c) in cols.iter().enumerate() {
            let nc = vecn::norm(c);
            if nc > best_norm + 1e-15 {
                best_norm = nc;
                best = i;
            }
        }
        let mut v = cols[best].clone();
        let nv = vecn::norm(&v);
        if nv < 1e-12 {
            return Err(Error::InvalidInput(
                "degenerate principal subspace: not enough spread in the ball".into(),
            ));
        }
        vecn::scale(1.0 / nv, &mut v);
        for c in cols.iter_mut() {
            let t = vecn::dot(c, &v);
            vecn::axpy(-t, &v, c);
        }
        frame.push(v);
    }
    AffinePlane::new(x.to_vec(), frame)
}

/// Result of a gamma query: the optimized plane and its measured distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaResult {
    pub value: f64,
    pub plane: AffinePlane,
    pub breakdown: HausdorffBreakdown,
    /// Number of bilateral-distance evaluations spent.
    pub evals: usize,
}

/// Bilateral flatness at (x, r), minimized over planes through x.
///
/// Upper-bound semantics: the returned value is exactly the bilateral
/// distance at the returned plane, so it can only overestimate the infimum.
/// In n=2 the rotation space is one angle: a 250-angle probe (along the
/// canonical grid i*pi/250) plus the principal-component angle brackets a
/// golden-section descent. In higher dimensions a Nelder-Mead search runs
/// over the d*(n-d) rotation parameters around the principal frame.
pub fn gamma(
    set: &PointGrid,
    x: &[f64],
    r: f64,
    d: usize,
    sample_gap: f64,
    policy: PitchPolicy,
) -> Result<GammaResult> {
    let n = x.len();
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::NonPositiveRadius(r));
    }
    if !set.has_point_within(x, r) {
        return Err(Error::EmptyBall { radius: r });
    }
    // normalized local copy: optimize on (y - x)/r so the search and its
    // tolerances are scale-free
    let mut local = PointGrid::new(n, 2.0 / 64.0);
    let mut norm_buf = vec![0.0; n];
    let mut ball: Vec<usize> = Vec::new();
    set.for_each_in_ball(x, 1.5 * r, |i, _| {
        ball.push(i);
        true
    });
    ball.sort_unstable();
    for &i in &ball {
        let p = set.point(i);
        for k in 0..n {
            norm_buf[k] = (p[k] - x[k]) / r;
        }
        local.push(&norm_buf);
    }
    let origin = vec![0.0; n];
    let gap_n = (sample_gap / r).max(1e-12);
    let policy_n = match policy {
        PitchPolicy::Fixed(h) => PitchPolicy::Fixed(h / r),
        other => other,
    };
    let mut evals = 0usize;

    let result = if n == 2 && d == 1 {
        let mut eval_angle = |theta: f64| -> f64 {
            evals += 1;
            let plane = AffinePlane {
                base: origin.clone(),
                frame: vec![vec![theta.cos(), theta.sin()]],
            };
            local_hausdorff_set_plane(&local, &plane, &origin, 1.0, gap_n, policy_n)
                .map(|b| b.value)
                .unwrap_or(f64::INFINITY)
        };
        let probes = 250usize;
        let mut best_t = 0.0;
        let mut best_v = f64::INFINITY;
        for k in 0..probes {
            let t = k as f64 * std::f64::consts::PI / probes as f64;
            let v = eval_angle(t);
            if v < best_v {
                best_v = v;
                best_t = t;
            }
        }
        let pca = fit_plane_pca(&local, &origin, 1.0, 1)?;
        let pca_t = pca.frame[0][1].atan2(pca.frame[0][0]).rem_euclid(std::f64::consts::PI);
        let pca_v = eval_angle(pca_t);
        if pca_v < best_v {
            best_v = pca_v;
            best_t = pca_t;
        }
        let span = std::f64::consts::PI / probes as f64;
        let (t, v) = golden_min(&mut |t: f64| eval_angle(t), best_t - span, best_t + span, 1e-13);
        let theta = if v < best_v { t } else { best_t };
        AffinePlane {
            base: origin.clone(),
            frame: vec![vec![theta.cos(), theta.sin()]],
        }
    } else {
        let pca = fit_plane_pca(&local, &origin, 1.0, d)?;
        let normals = pca.normal_frame();
        let k = d * (n - d);
        let make_plane = |params: &[f64]| -> AffinePlane {
            // rotate each frame vector toward each normal by its angle
            let mut fr: Vec<Vec<f64>> = pca.frame.clone();
            let mut nm: Vec<Vec<f64>> = normals.clone();
            let mut idx = 0;
            for i in 0..d {
                for j in 0..(n - d) {
                    let th = params[idx];
                    idx += 1;
                    let (c, s) = (th.cos(), th.sin());
                    for q in 0..n {
                        let fi = fr[i][q];
                        let nj = nm[j][q];
                        fr[i][q] = c * fi + s * nj;
                        nm[j][q] = -s * fi + c * nj;
                    }
                }
            }
            AffinePlane { base: origin.clone(), frame: fr }
        };
        let mut objective = |params: &[f64]| -> f64 {
            evals += 1;
            let plane = make_plane(params);
            local_hausdorff_set_plane(&local, &plane, &origin, 1.0, gap_n, policy_n)
                .map(|b| b.value)
                .unwrap_or(f64::INFINITY)
        };
        let best = nelder_mead(&mut objective, &vec![0.0; k], 0.05, 300, 1e-10);
        make_plane(&best)
    };

    // the reported value is the measurement at the returned plane in the
    // caller's coordinates, bit-identical to re-running the measurement
    let plane = AffinePlane {
        base: x.to_vec(),
        frame: result.frame.clone(),
    };
    let breakdown = local_hausdorff_set_plane(set, &plane, x, r, sample_gap, policy)?;
    evals += 1;
    Ok(GammaResult {
        value: breakdown.value,
        breakdown,
        plane,
        evals,
    })
}

/// Standard Nelder-Mead with fixed coefficients and a deterministic initial
/// simplex (origin plus h0 along each axis). Returns the best vertex.
fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    h0: f64,
    max_iters: usize,
    tol: f64,
) -> Vec<f64> {
    let k = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..k {
        let mut v = x0.to_vec();
        v[i] += h0;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let spread = simplex[k].1 - simplex[0].1;
        let mut diam = 0.0f64;
        for i in 1..=k {
            diam = diam.max(vecn::dist(&simplex[i].0, &simplex[0].0));
        }
        if spread < tol && diam < 1e-8 {
            break;
        }
        let mut centroid = vec![0.0; k];
        for item in simplex.iter().take(k) {
            vecn::axpy(1.0, &item.0, &mut centroid);
        }
        vecn::scale(1.0 / k as f64, &mut centroid);
        let worst = simplex[k].clone();
        let reflect: Vec<f64> = (0..k).map(|i| 2.0 * centroid[i] - worst.0[i]).collect();
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..k).map(|i| 3.0 * centroid[i] - 2.0 * worst.0[i]).collect();
            let fe = f(&expand);
            simplex[k] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[k - 1].1 {
            simplex[k] = (reflect, fr);
        } else {
            let contract: Vec<f64> =
                (0..k).map(|i| 0.5 * (centroid[i] + worst.0[i])).collect();
            let fc = f(&contract);
            if fc < worst.1 {
                simplex[k] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let shrunk: Vec<f64> =
                        (0..k).map(|i| 0.5 * (best[i] + item.0[i])).collect();
                    item.1 = f(&shrunk);
                    item.0 = shrunk;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    simplex[0].0.clone()
}

// ---------------------------------------------------------------------------
// flatness scan
// ---------------------------------------------------------------------------

/// One gamma measurement inside a scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessEntry {
    pub point_index: usize,
    pub x: Vec<f64>,
    pub radius: f64,
    pub gamma: f64,
    pub plane: AffinePlane,
    pub sup_set_to_plane: f64,
    pub sup_plane_to_set: f64,
}

/// Scan summary: worst flatness over all (point, radius) queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub entries: Vec<FlatnessEntry>,
    pub epsilon_max: f64,
    /// Query attaining epsilon_max (index into entries).
    pub worst_entry: usize,
    pub radii: Vec<f64>,
}

/// Gamma at every listed sample point and radius. `stride` subsamples the
/// query points (every stride-th sample); radii must be positive and
/// descending. Entries are ordered by (point, radius); evaluation is
/// data-parallel.
pub fn flatness_scan(
    cloud: &PointCloud,
    radii: &[f64],
    stride: usize,
    policy: PitchPolicy,
) -> Result<FlatnessReport> {
    if radii.is_empty() {
        return Err(Error::InvalidInput("no radii given".into()));
    }
    for w in radii.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::InvalidInput("radii must be strictly descending".into()));
        }
    }
    if let Some(&r) = radii.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::NonPositiveRadius(r));
    }
    let stride = stride.max(1);
    let set = cloud.index();
    let queries: Vec<(usize, f64)> = (0..cloud.len())
        .step_by(stride)
        .flat_map(|i| radii.iter().map(move |&r| (i, r)))
        .collect();
    let entries: Vec<Result<FlatnessEntry>> = par::map_indexed(queries.len(), |qi| {
        let (i, r) = queries[qi];
        let g = gamma(&set, cloud.point(i), r, cloud.d(), cloud.sample_gap(), policy)?;
        Ok(FlatnessEntry {
            point_index: i,
            x: cloud.point(i).to_vec(),
            radius: r,
            gamma: g.value,
            plane: g.plane,
            sup_set_to_plane: g.breakdown.sup_set_to_plane,
            sup_plane_to_set: g.breakdown.sup_plane_to_set,
        })
    });
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        out.push(e?);
    }
    let (worst, eps) = par::max_indexed(out.len(), |i| out[i].gamma);
    Ok(FlatnessReport {
        epsilon_max: if out.is_empty() { 0.0 } else { eps },
        worst_entry: if out.is_empty() { 0 } else { worst },
        entries: out,
        radii: radii.to_vec(),
    })
}
