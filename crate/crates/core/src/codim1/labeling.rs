//! Grid-based connected components of the complement of a sampled obstacle.
//!
//! The box is cut into cubical cells; cells near an obstacle sample are
//! marked as boundary, the rest are flood-filled into face-connected
//! components. The dilation radius is chosen so that a surface sampled at
//! the stated spacing cannot leak between two face-adjacent free cells: the
//! worst crossing point of a shared face sits at half a cell diagonal from
//! either center, and the nearest obstacle sample adds half a spacing.

use crate::error::Error;
use crate::Result;

/// Label value for cells inside the dilated obstacle.
pub const BOUNDARY: u8 = u8::MAX;

/// Free cells carry component labels 1..=MAX_COMPONENTS.
pub const MAX_COMPONENTS: usize = 254;

/// One labeled grid over a box.
#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    /// Lower corner of the box.
    pub origin: Vec<f64>,
    /// Cell edge length.
    pub pitch: f64,
    /// Cells per axis.
    pub dims: Vec<usize>,
    /// Per-cell label: BOUNDARY or a component id starting at 1.
    pub labels: Vec<u8>,
    /// Number of components found.
    pub component_count: usize,
    /// Cells per component (index = label - 1).
    pub cell_counts: Vec<usize>,
    /// One linear cell index per component.
    pub representatives: Vec<usize>,
    /// Cells marked as boundary.
    pub boundary_cells: usize,
    /// True when the requested safe pitch was relaxed by the cell cap.
    pub relaxed_pitch: bool,
}

impl ComponentLabeling {
    pub fn n(&self) -> usize {
        self.dims.len()
    }

    pub fn cell_count(&self) -> usize {
        self.labels.len()
    }

    /// Linear index of the cell containing p, if inside the box.
    pub fn cell_of(&self, p: &[f64]) -> Option<usize> {
        let mut idx = 0usize;
        for axis in 0..self.dims.len() {
            let f = (p[axis] - self.origin[axis]) / self.pitch;
            if f < 0.0 {
                return None;
            }
            let i = f as usize;
            if i >= self.dims[axis] {
                return None;
            }
            idx = idx * self.dims[axis] + i;
        }
        Some(idx)
    }

    /// Center coordinates of a linear cell index.
    pub fn center(&self, mut idx: usize, out: &mut [f64]) {
        for axis in (0..self.dims.len()).rev() {
            let i = idx % self.dims[axis];
            idx /= self.dims[axis];
            out[axis] = self.origin[axis] + (i as f64 + 0.5) * self.pitch;
        }
    }

    /// Label of the cell containing p.
    pub fn label_at(&self, p: &[f64]) -> Option<u8> {
        self.cell_of(p).map(|i| self.labels[i])
    }

    /// Component label with the most cells, excluding the given one.
    pub fn largest_component_except(&self, excluded: u8) -> Option<u8> {
        let mut best: Option<(usize, u8)> = None;
        for label in 1..=self.component_count as u8 {
            if label == excluded {
                continue;
            }
            let cells = self.cell_counts[label as usize - 1];
            if best.map(|(c, _)| cells > c).unwrap_or(true) {
                best = Some((cells, label));
            }
        }
        best.map(|(_, l)| l)
    }
}

/// Dilation radius that seals a surface sampled at `spacing` on a grid of
/// the given pitch: half a cell diagonal plus half a spacing, padded.
pub fn sealing_dilation(n: usize, pitch: f64, spacing: f64) -> f64 {
    0.5 * pitch * (n as f64).sqrt() + 0.55 * spacing + 1e-12 * pitch
}

/// Flood-fill labeling of the box minus the dilated obstacle samples.
///
/// `spacing` is the guaranteed sampling gauge of the obstacle (its covering
/// radius); the dilation derives from it. `relaxed` is recorded verbatim so
/// callers can tell a capped pitch from a safe one.
pub fn label_components(
    obstacle: &[f64],
    n: usize,
    box_lo: &[f64],
    box_hi: &[f64],
    pitch: f64,
    spacing: f64,
    relaxed: bool,
) -> Result<ComponentLabeling> {
    if obstacle.is_empty() {
        return Err(Error::EmptySet);
    }
    if !(pitch > 0.0 && pitch.is_finite()) {
        return Err(Error::InvalidInput(format!("pitch {pitch} must be positive")));
    }
    let mut dims = Vec::with_capacity(n);
    let mut cells = 1usize;
    for axis in 0..n {
        let span = box_hi[axis] - box_lo[axis];
        if !(span > 0.0) {
            return Err(Error::InvalidInput(format!(
                "box is empty along axis {axis}"
            )));
        }
        let k = (span / pitch).ceil() as usize;
        let k = k.max(1);
        cells = cells
            .checked_mul(k)
            .ok_or_else(|| Error::InvalidInput("grid cell count overflows".into()))?;
        dims.push(k);
    }
    let dilation = sealing_dilation(n, pitch, spacing);

    // Mark boundary cells: every cell whose center lies within the dilation
    // radius of an obstacle sample.
    let mut labels = vec![0u8; cells];
    let mut boundary_cells = 0usize;
    let reach = (dilation / pitch).ceil() as i64;
    let count = obstacle.len() / n;
    let mut lo_idx = vec![0i64; n];
    let mut hi_idx = vec![0i64; n];
    let mut cursor = vec![0i64; n];
    for p in 0..count {
        let pt = &obstacle[p * n..(p + 1) * n];
        for axis in 0..n {
            let c = ((pt[axis] - box_lo[axis]) / pitch).floor() as i64;
            lo_idx[axis] = (c - reach).max(0);
            hi_idx[axis] = (c + reach).min(dims[axis] as i64 - 1);
            if lo_idx[axis] > hi_idx[axis] {
                lo_idx[axis] = 1;
                hi_idx[axis] = 0;
            }
        }
        if lo_idx.iter().zip(&hi_idx).any(|(l, h)| l > h) {
            continue;
        }
        cursor.copy_from_slice(&lo_idx);
        'block: loop {
            let mut idx = 0usize;
            let mut dist2 = 0.0;
            for axis in 0..n {
                let i = cursor[axis];
                idx = idx * dims[axis] + i as usize;
                let center = box_lo[axis] + (i as f64 + 0.5) * pitch;
                let dt = center - pt[axis];
                dist2 += dt * dt;
            }
            if dist2 <= dilation * dilation && labels[idx] != BOUNDARY {
                labels[idx] = BOUNDARY;
                boundary_cells += 1;
            }
            for axis in 0..n {
                if cursor[axis] < hi_idx[axis] {
                    cursor[axis] += 1;
                    continue 'block;
                }
                cursor[axis] = lo_idx[axis];
            }
            break;
        }
    }

    // Flood fill the free cells, face adjacency.
    let mut strides = vec![1usize; n];
    for axis in (0..n.saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * dims[axis + 1];
    }
    let mut component_count = 0usize;
    let mut cell_counts = Vec::new();
    let mut representatives = Vec::new();
    let mut stack: Vec<u32> = Vec::new();
    let mut coord = vec![0usize; n];
    for seed in 0..cells {
        if labels[seed] != 0 {
            continue;
        }
        if component_count == MAX_COMPONENTS {
            return Err(Error::InvalidInput(format!(
                "more than {MAX_COMPONENTS} complement components; the obstacle is likely noise"
            )));
        }
        component_count += 1;
        let id = component_count as u8;
        labels[seed] = id;
        representatives.push(seed);
        let mut size = 1usize;
        stack.push(seed as u32);
        while let Some(cur) = stack.pop() {
            let cur = cur as usize;
            let mut rest = cur;
            for axis in (0..n).rev() {
                coord[axis] = rest % dims[axis];
                rest /= dims[axis];
            }
            for axis in 0..n {
                if coord[axis] > 0 {
                    let nb = cur - strides[axis];
                    if labels[nb] == 0 {
                        labels[nb] = id;
                        size += 1;
                        stack.push(nb as u32);
                    }
                }
                if coord[axis] + 1 < dims[axis] {
                    let nb = cur + strides[axis];
                    if labels[nb] == 0 {
                        labels[nb] = id;
                        size += 1;
                        stack.push(nb as u32);
                    }
                }
            }
        }
        cell_counts.push(size);
    }

    Ok(ComponentLabeling {
        origin: box_lo.to_vec(),
        pitch,
        dims,
        labels,
        component_count,
        cell_counts,
        representatives,
        boundary_cells,
        relaxed_pitch: relaxed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_points(m: usize, radius: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * m);
        for i in 0..m {
            let t = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            out.push(radius * t.cos());
            out.push(radius * t.sin());
        }
        out
    }

    #[test]
    fn circle_splits_the_box_in_two() {
        let obstacle = circle_points(2000, 1.0);
        let spacing = 2.0 * std::f64::consts::PI / 2000.0;
        let labeling = label_components(
            &obstacle,
            2,
            &[-2.0, -2.0],
            &[2.0, 2.0],
            0.02,
            spacing,
            false,
        )
        .unwrap();
        assert_eq!(labeling.component_count, 2);
        // Inside and outside are distinct, and the origin is inside.
        let inner = labeling.label_at(&[0.0, 0.0]).unwrap();
        let outer = labeling.label_at(&[-1.95, -1.95]).unwrap();
        assert_ne!(inner, outer);
        assert_ne!(inner, BOUNDARY);
        assert_ne!(outer, BOUNDARY);
        // The outside has more cells than the inside.
        assert!(
            labeling.cell_counts[outer as usize - 1] > labeling.cell_counts[inner as usize - 1]
        );
    }

    #[test]
    fn open_arc_does_not_separate() {
        // Three quarters of a circle: the complement stays connected.
        let m = 1500;
        let mut obstacle = Vec::with_capacity(2 * m);
        for i in 0..m {
            let t = 1.5 * std::f64::consts::PI * i as f64 / m as f64;
            obstacle.push(t.cos());
            obstacle.push(t.sin());
        }
        let labeling = label_components(
            &obstacle,
            2,
            &[-2.0, -2.0],
            &[2.0, 2.0],
            0.02,
            1.5 * std::f64::consts::PI / m as f64,
            false,
        )
        .unwrap();
        assert_eq!(labeling.component_count, 1);
    }

    #[test]
    fn halving_the_pitch_keeps_the_count() {
        let obstacle = circle_points(4000, 1.0);
        let spacing = 2.0 * std::f64::consts::PI / 4000.0;
        for pitch in [0.02, 0.01] {
            let labeling = label_components(
                &obstacle,
                2,
                &[-2.0, -2.0],
                &[2.0, 2.0],
                pitch,
                spacing,
                false,
            )
            .unwrap();
            assert_eq!(labeling.component_count, 2, "pitch {pitch}");
        }
    }

    #[test]
    fn cell_centers_round_trip() {
        let obstacle = circle_points(500, 1.0);
        let labeling = label_components(
            &obstacle,
            2,
            &[-2.0, -2.0],
            &[2.0, 2.0],
            0.05,
            0.013,
            false,
        )
        .unwrap();
        let mut center = [0.0; 2];
        for idx in [0usize, 37, 1003, labeling.cell_count() - 1] {
            labeling.center(idx, &mut center);
            assert_eq!(labeling.cell_of(&center), Some(idx));
        }
    }

    #[test]
    fn sphere_splits_space_in_three_dimensions() {
        // Coarse Fibonacci-style sphere sample.
        let m = 4000;
        let mut obstacle = Vec::with_capacity(3 * m);
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..m {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
            let rho = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            obstacle.push(rho * t.cos());
            obstacle.push(rho * t.sin());
            obstacle.push(z);
        }
        let spacing = (4.0 * std::f64::consts::PI / m as f64).sqrt() * 1.3;
        let labeling = label_components(
            &obstacle,
            3,
            &[-1.6, -1.6, -1.6],
            &[1.6, 1.6, 1.6],
            0.08,
            spacing,
            false,
        )
        .unwrap();
        assert_eq!(labeling.component_count, 2);
        let inner = labeling.label_at(&[0.0, 0.0, 0.0]).unwrap();
        let outer = labeling.label_at(&[-1.55, -1.55, -1.55]).unwrap();
        assert_ne!(inner, outer);
    }
}
