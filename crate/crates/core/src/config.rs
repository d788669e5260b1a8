//! Run configuration and the numeric constants the construction is built on.
//!
//! Scale-dependent quantities are always expressed as fractions of the top
//! scale `r0` or of the net gauge `a`, never as absolute lengths, so one
//! configuration works for inputs of any size (rescaling the input rescales
//! every derived length linearly).

use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// fixed construction constants
// ---------------------------------------------------------------------------

/// Net gauge as a fraction of the working scale: a = r0 * A_RATIO.
pub const A_RATIO: f64 = 1.0 / 32.0;

/// Same-color classes of the net are separated by 16a = r0/2.
pub const COLOR_SEPARATION_FACTOR: f64 = 16.0;

/// Color budget is 34^n; exceeding it means the net was not a-separated.
pub const COLOR_BUDGET_BASE: usize = 34;

/// Base Lipschitz-ratio budget multiplier: ratios at stage 0 are allowed up
/// to 128 * eps (4/a with a = 1/32 in scale-free units).
pub const BASE_RATIO_BUDGET: f64 = 128.0;

/// Additive headroom in the stage budget recursion: next budget is the
/// measured patch constant plus this, never below the base budget.
pub const STAGE_BUDGET_STEP: f64 = 100.0;

/// Patch domain radius in units of a. Graphs are extracted over B(w, 4a).
pub const PATCH_RADIUS_FACTOR: f64 = 4.0;

/// Each patch contributes its graph over B(w, 3a) to the surface.
pub const CONTRIBUTION_RADIUS_FACTOR: f64 = 3.0;

/// A proposed node needs a data site within this many node pitches, so the
/// reconstruction fills between data but never grows past its footprint.
pub const NODE_SUPPORT_PITCH_FACTOR: f64 = 1.5;

/// The support radius never drops below this many sample gaps; uniform
/// samples sit about two gaps apart, so between-sample nodes always pass.
pub const NODE_SUPPORT_GAP_FACTOR: f64 = 3.0;

/// Local graph identity is checked on B(x, 2a).
pub const IDENTITY_RADIUS_FACTOR: f64 = 2.0;

/// Blending keeps the mollified graph on B(x, 1.3a) ...
pub const BLEND_INNER_FACTOR: f64 = 1.3;

/// ... and the previous surface outside B(x, 1.5a).
pub const BLEND_OUTER_FACTOR: f64 = 1.5;

/// Plane compatibility is checked for net pairs within r/2.
pub const COMPAT_PAIR_FACTOR: f64 = 0.5;

/// Compatible planes must satisfy the normalized distance bound 8 * eps ...
pub const COMPAT_DIST_BUDGET: f64 = 8.0;

/// ... and nearby projector pairs the operator norm bound 100 * eps.
pub const PROJECTOR_BUDGET: f64 = 100.0;

/// Offsets sit at 5 * C0 * eps * r to each side of the surface.
pub const OFFSET_FACTOR: f64 = 5.0;

/// Measured distance from offsets back to the surface must be >= 4 C0 eps r.
pub const OFFSET_LOWER_FACTOR: f64 = 4.0;

/// Offset points sit within [3, 6] * C0 * eps * r of the input set.
pub const OFFSET_SET_LOWER_FACTOR: f64 = 3.0;
pub const OFFSET_SET_UPPER_FACTOR: f64 = 6.0;

/// Inner domain boundary band constant: C2 = 3 * C0.
pub const C2_FACTOR: f64 = 3.0;

/// Ladder scales shrink by 3 per rung; nesting is checked for 3s <= r.
pub const LADDER_BASE: f64 = 3.0;

/// Chain connectivity gauge as a fraction of r0.
pub const CHAIN_RHO_FACTOR: f64 = 1.0 / 20.0;

// ---------------------------------------------------------------------------
// tolerances
// ---------------------------------------------------------------------------

/// Relative orthonormality tolerance for plane frames.
pub const FRAME_ORTHO_TOL: f64 = 1e-12;

/// Tangential gaps below this fraction of the scale are treated as stacked
/// points (never divided by).
pub const DEGENERATE_GAP_TOL: f64 = 1e-12;

/// Graph inversion fixed-point tolerance as a fraction of the scale.
pub const CONTRACTION_TOL: f64 = 1e-10;

/// Graph inversion iteration cap.
pub const CONTRACTION_MAX_ITERS: usize = 50;

/// Patches steeper than this have no invertible offset graph.
pub const OFFSET_MAX_LIPSCHITZ: f64 = 0.1;

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

/// Knobs a caller may vary between runs. Everything has a conservative
/// default; overrides are echoed into the reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Flatness budget: the construction refuses inputs whose measured
    /// flatness at the working scale exceeds this.
    pub epsilon_budget: f64,
    /// Required resolution ratio r0 / sample_gap at construction entry.
    pub min_resolution_ratio: f64,
    /// Highest derivative order certified after smoothing.
    pub k_max: usize,
    /// Mollifier width as a fraction of a.
    pub kernel_width_factor: f64,
    /// Grid policy for component labeling.
    pub grid: GridPolicy,
    /// Extension Lipschitz headroom: patches are extended with
    /// L = lipschitz_headroom * (measured sample constant).
    pub lipschitz_headroom: f64,
    /// RNG seed recorded in reports (generators take their own seed).
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epsilon_budget: 1e-2,
            min_resolution_ratio: 100.0,
            k_max: 3,
            kernel_width_factor: 0.1,
            grid: GridPolicy::default(),
            lipschitz_headroom: 2.0,
            seed: 0,
        }
    }
}

/// How component-labeling grids pick their pitch.
///
/// The safe pitch near the obstacle is C0 * eps * r / 4 (four cells across
/// the narrowest guaranteed gap). `max_cells` caps the total cell count; when
/// the cap binds the labeling runs at the coarser feasible pitch and records
/// that the safe-pitch precondition was relaxed, and the side-selection
/// validity checks must then pass explicitly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridPolicy {
    /// Hard cap on grid cells per labeling.
    pub max_cells: usize,
    /// Optional fixed pitch override (absolute length).
    pub fixed_pitch: Option<f64>,
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy {
            max_cells: 600_000_000,
            fixed_pitch: None,
        }
    }
}

impl GridPolicy {
    /// Pitch for a labeling over a box with side lengths `extents`, wanting
    /// the safe pitch `h_safe`. Returns (pitch, relaxed?).
    pub fn pitch(&self, extents: &[f64], h_safe: f64) -> (f64, bool) {
        if let Some(h) = self.fixed_pitch {
            return (h, h > h_safe);
        }
        let volume: f64 = extents.iter().product();
        let n = extents.len() as f64;
        // cells(h) = volume / h^n; the cap gives the finest feasible pitch.
        let h_feasible = (volume / self.max_cells as f64).powf(1.0 / n);
        if h_feasible > h_safe {
            (h_feasible, true)
        } else {
            (h_safe, false)
        }
    }
}
