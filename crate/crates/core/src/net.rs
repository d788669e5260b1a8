//! Maximal separated nets over a point sample and their coloring into
//! widely separated classes.
//!
//! The net provides the patch centers for the surface construction; the
//! coloring groups centers whose working balls cannot interact, so later
//! per-ball operations within one color class are order-independent.

use crate::error::Error;
use crate::geometry::{grid::PointGrid, PointCloud};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Net points (as indices into the source cloud) with a color per point.
/// Any two net points are at least `a` apart; any two same-colored points
/// are more than 16a apart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColoredNet {
    pub indices: Vec<usize>,
    pub colors: Vec<u32>,
    pub color_count: u32,
    pub a: f64,
}

impl ColoredNet {
    /// Net indices grouped by color, colors ascending, order within a color
    /// following the net order.
    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.color_count as usize];
        for (i, &c) in self.colors.iter().enumerate() {
            out[c as usize].push(self.indices[i]);
        }
        out
    }
}

/// Greedy maximal a-separated subset, scanning samples in index order.
///
/// A candidate within a (plus a 1e-12 relative guard) of an accepted point
/// is skipped; the guard keeps accept/skip decisions stable under uniform
/// rescaling of the coordinates, at the cost of the same relative slack in
/// the covering radius.
pub fn maximal_net(cloud: &PointCloud, a: f64) -> Result<Vec<usize>> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidInput(format!("net separation {a} must be positive")));
    }
    let mut kept_grid = PointGrid::new(cloud.n(), a);
    let mut kept = Vec::new();
    let guard = a * (1.0 + 1e-12);
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        if !kept_grid.has_point_within(p, guard) {
            kept_grid.push(p);
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Greedy coloring of an a-separated net into classes that are pairwise
/// more than 16a apart, in net order, each point taking the smallest color
/// unused within its 16a ball. The color count is capped by the packing
/// bound 34^n: exceeding it means the input was not a-separated.
pub fn color_net(cloud: &PointCloud, net: &[usize], a: f64) -> Result<ColoredNet> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidInput(format!("net separation {a} must be positive")));
    }
    let n = cloud.n();
    let budget: u64 = (crate::config::COLOR_BUDGET_BASE as u64).pow(n as u32);
    let sep = 16.0 * a * (1.0 + 1e-12);
    let mut grid = PointGrid::new(n, 4.0 * a);
    let mut colors: Vec<u32> = Vec::with_capacity(net.len());
    let mut used: Vec<bool> = Vec::new();
    for &idx in net {
        let p = cloud.point(idx);
        used.clear();
        used.resize(colors.len().min(1024) + 1, false);
        grid.for_each_in_ball(p, sep, |j, _| {
            let c = colors[j] as usize;
            if c < used.len() {
                used[c] = true;
            }
            true
        });
        let color = used.iter().position(|&u| !u).unwrap_or(used.len()) as u32;
        if u64::from(color) >= budget {
            return Err(Error::ColorBudgetExceeded {
                needed: color as usize + 1,
                budget: budget.min(usize::MAX as u64) as usize,
            });
        }
        grid.push(p);
        colors.push(color);
    }
    let color_count = colors.iter().map(|&c| c + 1).max().unwrap_or(0);
    Ok(ColoredNet { indices: net.to_vec(), colors, color_count, a })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_cloud(xs: &[f64]) -> PointCloud {
        let mut coords = Vec::new();
        for &x in xs {
            coords.push(x);
            coords.push(0.0);
        }
        PointCloud::new(coords, 2, 1, 1.0, 0.3).unwrap()
    }

    #[test]
    fn greedy_net_on_a_line() {
        let cloud = line_cloud(&[0.0, 0.5, 1.0, 1.5]);
        let net = maximal_net(&cloud, 0.6).unwrap();
        assert_eq!(net, vec![0, 2]);
    }

    #[test]
    fn single_point_net() {
        let cloud = line_cloud(&[0.7]);
        let net = maximal_net(&cloud, 0.6).unwrap();
        assert_eq!(net, vec![0]);
    }

    #[test]
    fn net_is_separated_and_covering() {
        let spec = crate::synth::GeneratorSpec {
            shape: crate::synth::ShapeKind::Circle { m: 1000, radius: 1.0 },
            r0: 1.0,
            noise: 0.0,
            seed: 0,
        };
        let cloud = spec.generate().unwrap();
        let a = 1.0 / 32.0;
        let net = maximal_net(&cloud, a).unwrap();
        for (i, &p) in net.iter().enumerate() {
            for &q in net.iter().skip(i + 1) {
                let d = crate::geometry::vecn::dist(cloud.point(p), cloud.point(q));
                assert!(d >= a, "net points {p},{q} at distance {d}");
            }
        }
        for i in 0..cloud.len() {
            let best = net
                .iter()
                .map(|&p| crate::geometry::vecn::dist(cloud.point(i), cloud.point(p)))
                .fold(f64::INFINITY, f64::min);
            assert!(best <= a * (1.0 + 1e-9), "sample {i} uncovered at {best}");
        }
    }

    #[test]
    fn far_points_share_a_color() {
        let cloud = line_cloud(&[0.0, 20.0]);
        let net = maximal_net(&cloud, 1.0).unwrap();
        let colored = color_net(&cloud, &net, 1.0).unwrap();
        assert_eq!(colored.colors, vec![0, 0]);
        assert_eq!(colored.color_count, 1);
    }

    #[test]
    fn collinear_points_get_distinct_colors() {
        // spacing 8a: each pair within 16a, so greedy escalates
        let cloud = line_cloud(&[0.0, 8.0, 16.0]);
        let net = maximal_net(&cloud, 1.0).unwrap();
        let colored = color_net(&cloud, &net, 1.0).unwrap();
        assert_eq!(net.len(), 3);
        // classes must each be >16a-separated regardless of exact labels
        let classes = colored.classes();
        for class in classes {
            for (i, &p) in class.iter().enumerate() {
                for &q in class.iter().skip(i + 1) {
                    let d = crate::geometry::vecn::dist(cloud.point(p), cloud.point(q));
                    assert!(d > 16.0, "same color at distance {d}");
                }
            }
        }
    }

    #[test]
    fn circle_coloring_obeys_packing_bound() {
        let spec = crate::synth::GeneratorSpec {
            shape: crate::synth::ShapeKind::Circle { m: 2000, radius: 1.0 },
            r0: 1.0,
            noise: 0.0,
            seed: 0,
        };
        let cloud = spec.generate().unwrap();
        let a = 1.0 / 32.0;
        let net = maximal_net(&cloud, a).unwrap();
        let colored = color_net(&cloud, &net, a).unwrap();
        assert!(colored.color_count as u64 <= 34u64.pow(2));
        let classes = colored.classes();
        assert_eq!(classes.iter().map(Vec::len).sum::<usize>(), net.len());
        for class in classes {
            for (i, &p) in class.iter().enumerate() {
                for &q in class.iter().skip(i + 1) {
                    let d = crate::geometry::vecn::dist(cloud.point(p), cloud.point(q));
                    assert!(d > 16.0 * a);
                }
            }
        }
    }

    #[test]
    fn deterministic_outputs() {
        let cloud = line_cloud(&[0.0, 0.4, 0.9, 1.3, 2.0, 2.2]);
        let n1 = maximal_net(&cloud, 0.5).unwrap();
        let n2 = maximal_net(&cloud, 0.5).unwrap();
        assert_eq!(n1, n2);
        let c1 = color_net(&cloud, &n1, 0.5).unwrap();
        let c2 = color_net(&cloud, &n1, 0.5).unwrap();
        assert_eq!(c1.colors, c2.colors);
    }
}
