//! Uniform hash grid over points in R^n: exact nearest-neighbor and
//! radius queries via expanding ring search.
//!
//! Buckets are keyed by integer cell coordinates, so memory scales with the
//! number of occupied cells, not with the bounding box volume. Queries are
//! exact: the ring search stops only once no unvisited cell can beat the
//! current best distance.

use std::collections::HashMap;

const MAX_DIM: usize = 8;

type CellKey = [i32; MAX_DIM];

/// Point container with a uniform-grid spatial index. Points are owned in a
/// flat buffer; indices returned by queries refer to insertion order.
#[derive(Debug, Clone)]
pub struct PointGrid {
    n: usize,
    cell: f64,
    coords: Vec<f64>,
    buckets: HashMap<CellKey, Vec<u32>>,
}

impl PointGrid {
    /// Empty grid with the given cell size.
    pub fn new(n: usize, cell: f64) -> Self {
        assert!(n <= MAX_DIM && n > 0, "dimension out of range");
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        PointGrid {
            n,
            cell,
            coords: Vec::new(),
            buckets: HashMap::new(),
        }
    }

    /// Bulk construction from a flat coordinate buffer.
    pub fn from_flat(n: usize, cell: f64, coords: &[f64]) -> Self {
        let mut g = PointGrid::new(n, cell);
        g.coords.reserve(coords.len());
        for p in coords.chunks_exact(n) {
            g.push(p);
        }
        g
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
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.n..(i + 1) * self.n]
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    #[inline]
    fn key_of(&self, p: &[f64]) -> CellKey {
        let mut k = [0i32; MAX_DIM];
        for i in 0..self.n {
            k[i] = (p[i] / self.cell).floor() as i32;
        }
        k
    }

    /// Append a point; returns its index.
    pub fn push(&mut self, p: &[f64]) -> usize {
        debug_assert_eq!(p.len(), self.n);
        let idx = self.len() as u32;
        let key = self.key_of(p);
        self.coords.extend_from_slice(p);
        self.buckets.entry(key).or_default().push(idx);
        idx as usize
    }

    /// True if some point lies strictly within `radius` of `p`.
    pub fn has_point_within(&self, p: &[f64], radius: f64) -> bool {
        let mut found = false;
        self.for_each_in_ball(p, radius, |_, _| {
            found = true;
            false
        });
        found
    }

    /// Visit every point within `radius` (inclusive) of `p`. The callback
    /// gets (index, squared distance) and returns false to stop early.
    /// Visit order is cell-by-cell and not distance-sorted.
    pub fn for_each_in_ball<F: FnMut(usize, f64) -> bool>(
        &self,
        p: &[f64],
        radius: f64,
        mut f: F,
    ) {
        let r2 = radius * radius;
        let mut lo = [0i32; MAX_DIM];
        let mut hi = [0i32; MAX_DIM];
        for i in 0..self.n {
            lo[i] = ((p[i] - radius) / self.cell).floor() as i32;
            hi[i] = ((p[i] + radius) / self.cell).floor() as i32;
        }
        let mut cur = lo;
        'outer: loop {
            if let Some(bucket) = self.buckets.get(&cur) {
                for &idx in bucket {
                    let q = self.point(idx as usize);
                    let d2 = crate::geometry::vecn::dist2(p, q);
                    if d2 <= r2 && !f(idx as usize, d2) {
                        return;
                    }
                }
            }
            // odometer increment over [lo, hi]
            for axis in 0..self.n {
                if cur[axis] < hi[axis] {
                    cur[axis] += 1;
                    continue 'outer;
                }
                cur[axis] = lo[axis];
            }
            break;
        }
    }

    /// Indices of all points within `radius` (inclusive) of `p`, ascending.
    pub fn query_ball(&self, p: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_in_ball(p, radius, |i, _| {
            out.push(i);
            true
        });
        out.sort_unstable();
        out
    }

    /// Exact nearest neighbor: (index, distance). Ties resolve to the lowest
    /// index. None when empty.
    pub fn nearest(&self, p: &[f64]) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut center = [0i32; MAX_DIM];
        for i in 0..self.n {
            center[i] = (p[i] / self.cell).floor() as i32;
        }
        let mut best = f64::INFINITY;
        let mut best_idx = usize::MAX;
        let mut ring = 0i32;
        loop {
            // no cell at ring k can contain a point closer than (k-1)*cell
            if ring > 0 && best.is_finite() {
                let bound = (ring - 1) as f64 * self.cell;
                if bound * bound > best {
                    break;
                }
            }
            self.visit_ring(&center, ring, |bucket| {
                for &idx in bucket {
                    let q = self.point(idx as usize);
                    let d2 = crate::geometry::vecn::dist2(p, q);
                    if d2 < best || (d2 == best && (idx as usize) < best_idx) {
                        best = d2;
                        best_idx = idx as usize;
                    }
                }
            });
            ring += 1;
            // safety stop: a full sweep past any occupied cell must have hit
            if ring > 2_000_000 {
                break;
            }
        }
        if best_idx == usize::MAX {
            None
        } else {
            Some((best_idx, best.sqrt()))
        }
    }

    /// Distance from `p` to its nearest point (infinity when empty).
    pub fn distance_to(&self, p: &[f64]) -> f64 {
        self.nearest(p).map(|(_, d)| d).unwrap_or(f64::INFINITY)
    }

    fn visit_ring<F: FnMut(&Vec<u32>)>(&self, center: &CellKey, ring: i32, mut f: F) {
        let n = self.n;
        if ring == 0 {
            if let Some(b) = self.buckets.get(center) {
                f(b);
            }
            return;
        }
        // enumerate cells with L-infinity index distance exactly `ring`
        let mut offset = [0i32; MAX_DIM];
        for i in 0..n {
            offset[i] = -ring;
        }
        'outer: loop {
            let on_shell = (0..n).any(|i| offset[i].abs() == ring);
            if on_shell {
                let mut key = *center;
                for i in 0..n {
                    key[i] += offset[i];
                }
                if let Some(b) = self.buckets.get(&key) {
                    f(b);
                }
            }
            for axis in 0..n {
                if offset[axis] < ring {
                    offset[axis] += 1;
                    // skip interior runs on axis 0: jump from -ring+1.. to +ring
                    if axis == 0 && offset[0].abs() != ring {
                        let interior = (1..n).all(|i| offset[i].abs() != ring);
                        if interior {
                            offset[0] = ring;
                        }
                    }
                    continue 'outer;
                }
                offset[axis] = -ring;
            }
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_nearest(coords: &[f64], n: usize, p: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, q) in coords.chunks_exact(n).enumerate() {
            let d = crate::geometry::vecn::dist(p, q);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn nearest_matches_brute_force() {
        // deterministic pseudo-random points in the unit square
        let mut coords = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            coords.push(next());
            coords.push(next());
        }
        let g = PointGrid::from_flat(2, 0.07, &coords);
        for _ in 0..200 {
            let p = [next() * 1.6 - 0.3, next() * 1.6 - 0.3];
            let (bi, bd) = brute_nearest(&coords, 2, &p);
            let (gi, gd) = g.nearest(&p).unwrap();
            assert_eq!(gi, bi);
            assert!((gd - bd).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_query_matches_brute_force() {
        let mut coords = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                coords.push(i as f64 * 0.05);
                coords.push(j as f64 * 0.05);
            }
        }
        let g = PointGrid::from_flat(2, 0.11, &coords);
        let p = [0.52, 0.48];
        let r = 0.13;
        let got = g.query_ball(&p, r);
        let want: Vec<usize> = coords
            .chunks_exact(2)
            .enumerate()
            .filter(|(_, q)| crate::geometry::vecn::dist(&p, q) <= r)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn query_far_outside_box() {
        let coords = vec![0.0, 0.0, 1.0, 0.0];
        let g = PointGrid::from_flat(2, 0.5, &coords);
        let (i, d) = g.nearest(&[10.0, 0.0]).unwrap();
        assert_eq!(i, 1);
        assert!((d - 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_grid() {
        let g = PointGrid::new(3, 1.0);
        assert!(g.nearest(&[0.0, 0.0, 0.0]).is_none());
        assert_eq!(g.distance_to(&[0.0, 0.0, 0.0]), f64::INFINITY);
    }
}
