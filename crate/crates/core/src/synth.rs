//! Synthetic point samples with known geometry: the test corpus.
//!
//! Each generator is deterministic, computes an honest covering radius for
//! its samples, and targets a specific regime: exactly flat sets (plane,
//! graph at zero amplitude), constant-curvature sets (circle, sphere), a
//! fractal family whose flatness is controlled by a bend angle (snowflake),
//! and a non-separating open curve (two_arcs) used to confirm failure
//! detection.

use crate::error::Error;
use crate::geometry::{grid::PointGrid, PointCloud};
use crate::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Shape family and its parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    /// m equally spaced points on a circle of the given radius.
    Circle { m: usize, radius: f64 },
    /// Fibonacci lattice on a sphere in R^3.
    Sphere { m: usize, radius: f64 },
    /// Koch-type closed curve with bend angle theta, refined `depth` times
    /// from a regular polygon whose corner angle matches theta; at least m
    /// samples along the final polyline.
    Snowflake { theta: f64, depth: u32, m: usize, radius: f64 },
    /// Uniform grid on the hyperplane spanned by the first n-1 axes,
    /// side^(n-1) points over [-extent, extent]^(n-1).
    Plane { n: usize, side: usize, extent: f64 },
    /// Graph of amplitude * prod_i sin(frequency * t_i) over the same grid.
    Graph { n: usize, side: usize, extent: f64, amplitude: f64, frequency: f64 },
    /// Two disjoint circular arcs (a circle with two gaps of angular width
    /// `gap`): connected complement, used as the negative control.
    TwoArcs { m: usize, radius: f64, gap: f64 },
}

/// Full generator request: shape, reference scale, optional noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub shape: ShapeKind,
    pub r0: f64,
    /// Absolute perturbation radius; each point moves by a uniform vector
    /// in the ball of this radius.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(Error::InvalidSpec(format!("r0 {} must be positive", self.r0)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise {} must be >= 0", self.noise)));
        }
        match &self.shape {
            ShapeKind::Circle { m, radius } | ShapeKind::Sphere { m, radius } => {
                check_m(*m)?;
                check_radius(*radius)?;
            }
            ShapeKind::Snowflake { theta, depth, m, radius } => {
                check_m(*m)?;
                check_radius(*radius)?;
                if !(*theta >= 0.0 && *theta < std::f64::consts::PI / 8.0) {
                    return Err(Error::InvalidSpec(format!(
                        "snowflake bend angle {theta} must lie in [0, pi/8)"
                    )));
                }
                if *depth > 8 {
                    return Err(Error::InvalidSpec(format!("snowflake depth {depth} > 8")));
                }
            }
            ShapeKind::Plane { n, side, extent } => {
                check_grid(*n, *side, *extent)?;
            }
            ShapeKind::Graph { n, side, extent, amplitude, frequency } => {
                check_grid(*n, *side, *extent)?;
                if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                    return Err(Error::InvalidSpec("amplitude must be >= 0".into()));
                }
                if !(*frequency > 0.0 && frequency.is_finite()) {
                    return Err(Error::InvalidSpec("frequency must be positive".into()));
                }
            }
            ShapeKind::TwoArcs { m, radius, gap } => {
                check_m(*m)?;
                check_radius(*radius)?;
                if !(*gap > 0.0 && *gap < std::f64::consts::FRAC_PI_2) {
                    return Err(Error::InvalidSpec(format!(
                        "arc gap {gap} must lie in (0, pi/2)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds the point cloud. Deterministic for a fixed spec.
    pub fn generate(&self) -> Result<PointCloud> {
        self.validate()?;
        let cloud = match &self.shape {
            ShapeKind::Circle { m, radius } => circle(*m, *radius, self.r0)?,
            ShapeKind::Sphere { m, radius } => sphere(*m, *radius, self.r0)?,
            ShapeKind::Snowflake { theta, depth, m, radius } => {
                snowflake(*theta, *depth, *m, *radius, self.r0)?
            }
            ShapeKind::Plane { n, side, extent } => {
                graph_grid(*n, *side, *extent, 0.0, 1.0, self.r0)?
            }
            ShapeKind::Graph { n, side, extent, amplitude, frequency } => {
                graph_grid(*n, *side, *extent, *amplitude, *frequency, self.r0)?
            }
            ShapeKind::TwoArcs { m, radius, gap } => two_arcs(*m, *radius, *gap, self.r0)?,
        };
        if self.noise > 0.0 {
            add_noise(&cloud, self.noise, self.seed)
        } else {
            Ok(cloud)
        }
    }
}

fn check_m(m: usize) -> Result<()> {
    if m < 16 {
        return Err(Error::InvalidSpec(format!("sample count {m} < 16")));
    }
    Ok(())
}

fn check_radius(r: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidSpec(format!("radius {r} must be positive")));
    }
    Ok(())
}

fn check_grid(n: usize, side: usize, extent: f64) -> Result<()> {
    if !(2..=8).contains(&n) {
        return Err(Error::InvalidSpec(format!("ambient dimension {n} out of range 2..=8")));
    }
    if side < 4 {
        return Err(Error::InvalidSpec(format!("grid side {side} < 4")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidSpec("extent must be positive".into()));
    }
    Ok(())
}

fn circle(m: usize, radius: f64, r0: f64) -> Result<PointCloud> {
    let mut coords = Vec::with_capacity(2 * m);
    for k in 0..m {
        let t = std::f64::consts::TAU * k as f64 / m as f64;
        coords.push(radius * t.cos());
        coords.push(radius * t.sin());
    }
    // farthest point of the circle from the samples is an arc midpoint
    let gap = 2.0 * radius * (std::f64::consts::PI / (2.0 * m as f64)).sin();
    PointCloud::new(coords, 2, 1, r0, gap * (1.0 + 1e-9))
}

fn fibonacci_sphere(m: usize, radius: f64) -> Vec<f64> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut coords = Vec::with_capacity(3 * m);
    for k in 0..m {
        let z = 1.0 - (2.0 * k as f64 + 1.0) / m as f64;
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden * k as f64;
        coords.push(radius * rho * phi.cos());
        coords.push(radius * rho * phi.sin());
        coords.push(radius * z);
    }
    coords
}

fn sphere(m: usize, radius: f64, r0: f64) -> Result<PointCloud> {
    let coords = fibonacci_sphere(m, radius);
    // covering radius estimated against a 4x denser probe lattice of the
    // same family, with a safety factor for probe gaps
    let cell = radius * (4.0 * std::f64::consts::PI / m as f64).sqrt();
    let grid = PointGrid::from_flat(3, cell, &coords);
    let probe = fibonacci_sphere(4 * m + 17, radius);
    let mut worst = 0.0f64;
    for p in probe.chunks_exact(3) {
        let d = grid.distance_to(p);
        if d > worst {
            worst = d;
        }
    }
    PointCloud::new(coords, 3, 2, r0, worst * 1.15)
}

fn rot(theta: f64, v: (f64, f64)) -> (f64, f64) {
    let (c, s) = (theta.cos(), theta.sin());
    (c * v.0 - s * v.1, s * v.0 + c * v.1)
}

fn snowflake(theta: f64, depth: u32, m: usize, radius: f64, r0: f64) -> Result<PointCloud> {
    // base polygon whose corner turn is at most the bend angle, so corners
    // never dominate the flatness the bends create
    let theta_eff = theta.max(std::f64::consts::TAU / 512.0);
    let sides = ((std::f64::consts::TAU / theta_eff).ceil() as usize).clamp(6, 512);
    let mut verts: Vec<(f64, f64)> = (0..sides)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / sides as f64;
            (radius * t.cos(), radius * t.sin())
        })
        .collect();
    for _ in 0..depth {
        let mut next = Vec::with_capacity(verts.len() * 4);
        for i in 0..verts.len() {
            let a = verts[i];
            let b = verts[(i + 1) % verts.len()];
            let u = (b.0 - a.0, b.1 - a.1);
            let len = (u.0 * u.0 + u.1 * u.1).sqrt();
            let s = 1.0 / (2.0 * (1.0 + theta.cos()));
            let su = (u.0 * s, u.1 * s);
            let p1 = (a.0 + su.0, a.1 + su.1);
            // outward bump: turn right then left for a counterclockwise loop
            let leg1 = rot(-theta, su);
            let p2 = (p1.0 + leg1.0, p1.1 + leg1.1);
            let leg2 = rot(theta, su);
            let p3 = (p2.0 + leg2.0, p2.1 + leg2.1);
            debug_assert!(
                ((p3.0 + su.0) - b.0).abs() < 1e-9 * len.max(1.0)
                    && ((p3.1 + su.1) - b.1).abs() < 1e-9 * len.max(1.0)
            );
            next.push(a);
            next.push(p1);
            next.push(p2);
            next.push(p3);
        }
        verts = next;
    }
    // subdivide edges evenly until at least m samples, then report the
    // realized half-spacing as the covering radius
    let edges = verts.len();
    let per_edge = m.div_ceil(edges).max(1);
    let mut coords = Vec::with_capacity(2 * edges * per_edge);
    let mut max_step2 = 0.0f64;
    for i in 0..edges {
        let a = verts[i];
        let b = verts[(i + 1) % edges];
        let step2 = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)) / (per_edge * per_edge) as f64;
        if step2 > max_step2 {
            max_step2 = step2;
        }
        for j in 0..per_edge {
            let t = j as f64 / per_edge as f64;
            coords.push(a.0 + t * (b.0 - a.0));
            coords.push(a.1 + t * (b.1 - a.1));
        }
    }
    PointCloud::new(coords, 2, 1, r0, 0.5 * max_step2.sqrt() * (1.0 + 1e-9))
}

fn graph_grid(
    n: usize,
    side: usize,
    extent: f64,
    amplitude: f64,
    frequency: f64,
    r0: f64,
) -> Result<PointCloud> {
    let d = n - 1;
    let pitch = 2.0 * extent / (side - 1) as f64;
    let height = |t: &[f64]| -> f64 {
        let mut v = amplitude;
        for &ti in t {
            v *= (frequency * ti).sin();
        }
        v
    };
    let mut coords = Vec::with_capacity(n * side.pow(d as u32));
    let mut idx = vec![0usize; d];
    let mut t = vec![0.0; d];
    'outer: loop {
        for k in 0..d {
            t[k] = -extent + idx[k] as f64 * pitch;
        }
        coords.extend_from_slice(&t);
        coords.push(height(&t));
        for k in 0..d {
            if idx[k] + 1 < side {
                idx[k] += 1;
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    // covering radius: half the grid cell diagonal stretched by the slope
    let lip = amplitude * frequency * (d as f64).sqrt();
    let gap = 0.5 * pitch * (d as f64).sqrt() * (1.0 + lip * lip).sqrt();
    PointCloud::new(coords, n, d, r0, gap * (1.0 + 1e-9))
}

fn two_arcs(m: usize, radius: f64, gap: f64, r0: f64) -> Result<PointCloud> {
    let per_arc = (m / 2).max(8);
    let span = std::f64::consts::PI - gap;
    let mut coords = Vec::with_capacity(4 * per_arc);
    for arc in 0..2 {
        let start = gap / 2.0 + arc as f64 * std::f64::consts::PI;
        for k in 0..per_arc {
            let t = start + span * k as f64 / (per_arc - 1) as f64;
            coords.push(radius * t.cos());
            coords.push(radius * t.sin());
        }
    }
    let step = 2.0 * radius * (span / (per_arc - 1) as f64 / 2.0).sin();
    PointCloud::new(coords, 2, 1, r0, 0.5 * step * (1.0 + 1e-9))
}

/// Displaces every point by an independent uniform vector in the ball of
/// radius `eta`. The nominal sampling resolution is kept: no sample is
/// removed, so the displaced cloud samples the displaced set at the same
/// density, and the roughness the displacement introduces is exactly what
/// the flatness measurement downstream is supposed to detect.
pub fn add_noise(cloud: &PointCloud, eta: f64, seed: u64) -> Result<PointCloud> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidSpec(format!("noise {eta} must be >= 0")));
    }
    if eta == 0.0 {
        return Ok(cloud.clone());
    }
    let n = cloud.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = cloud.coords().to_vec();
    let mut bump = vec![0.0; n];
    for p in coords.chunks_exact_mut(n) {
        // rejection-sample the unit ball
        loop {
            let mut norm2 = 0.0;
            for b in bump.iter_mut() {
                *b = rng.gen_range(-1.0..=1.0);
                norm2 += *b * *b;
            }
            if norm2 <= 1.0 {
                break;
            }
        }
        for (pi, b) in p.iter_mut().zip(&bump) {
            *pi += eta * b;
        }
    }
    PointCloud::new(coords, n, cloud.d(), cloud.r0(), cloud.sample_gap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: ShapeKind, r0: f64) -> GeneratorSpec {
        GeneratorSpec { shape, r0, noise: 0.0, seed: 0 }
    }

    #[test]
    fn circle_covering_radius_is_honest() {
        let cloud = spec(ShapeKind::Circle { m: 64, radius: 1.0 }, 0.5).generate().unwrap();
        assert_eq!(cloud.len(), 64);
        // check the midpoint of an arc against the claimed gap
        let grid = cloud.index();
        let mid = std::f64::consts::TAU * 0.5 / 64.0;
        let p = [mid.cos(), mid.sin()];
        assert!(grid.distance_to(&p) <= cloud.sample_gap());
    }

    #[test]
    fn sphere_covering_radius_is_honest() {
        let cloud = spec(ShapeKind::Sphere { m: 500, radius: 1.0 }, 0.5).generate().unwrap();
        let grid = cloud.index();
        // probe with a rotated lattice not aligned with either family
        let probe = fibonacci_sphere(1777, 1.0);
        for p in probe.chunks_exact(3) {
            let q = [p[1], p[2], p[0]];
            assert!(grid.distance_to(&q) <= cloud.sample_gap(), "gap too optimistic");
        }
    }

    #[test]
    fn snowflake_is_closed_and_respects_target_count() {
        let cloud =
            spec(ShapeKind::Snowflake { theta: 0.05, depth: 2, m: 4096, radius: 1.0 }, 0.1)
                .generate()
                .unwrap();
        assert!(cloud.len() >= 4096);
        // consecutive spacing never exceeds twice the covering radius,
        // including the wrap-around edge
        let m = cloud.len();
        for i in 0..m {
            let a = cloud.point(i);
            let b = cloud.point((i + 1) % m);
            let d = crate::geometry::vecn::dist(a, b);
            assert!(d <= 2.0 * cloud.sample_gap() + 1e-12, "gap at {i}: {d}");
        }
    }

    #[test]
    fn snowflake_zero_bend_is_a_polygon() {
        let cloud = spec(ShapeKind::Snowflake { theta: 0.0, depth: 3, m: 1024, radius: 1.0 }, 0.1)
            .generate()
            .unwrap();
        // all points on the circumscribed polygon: radius within [apothem, R]
        for i in 0..cloud.len() {
            let p = cloud.point(i);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(r <= 1.0 + 1e-9 && r >= (std::f64::consts::PI / 512.0).cos() - 1e-9);
        }
    }

    #[test]
    fn plane_grid_size() {
        let cloud = spec(ShapeKind::Plane { n: 3, side: 5, extent: 1.0 }, 0.5).generate().unwrap();
        assert_eq!(cloud.len(), 25);
        assert_eq!(cloud.d(), 2);
        for i in 0..cloud.len() {
            assert_eq!(cloud.point(i)[2], 0.0);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            spec(ShapeKind::Circle { m: 8, radius: 1.0 }, 0.5).generate(),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            spec(ShapeKind::Snowflake { theta: 0.5, depth: 2, m: 64, radius: 1.0 }, 0.1).generate(),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            spec(ShapeKind::Circle { m: 64, radius: 1.0 }, -1.0).generate(),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        let base = spec(ShapeKind::Circle { m: 64, radius: 1.0 }, 0.5).generate().unwrap();
        let a = add_noise(&base, 0.01, 7).unwrap();
        let b = add_noise(&base, 0.01, 7).unwrap();
        let c = add_noise(&base, 0.01, 8).unwrap();
        assert_eq!(a.coords(), b.coords());
        assert_ne!(a.coords(), c.coords());
        let mut moved_any = false;
        for i in 0..base.len() {
            let d = crate::geometry::vecn::dist(base.point(i), a.point(i));
            assert!(d <= 0.01 + 1e-12);
            moved_any |= d > 0.0;
        }
        assert!(moved_any);
    }
}
