//! Error type shared by all modules.
//!
//! Variants that certify a failed inequality carry the witness data needed to
//! reproduce the failure (location, scale, measured value, allowed bound).

use thiserror::Error;

/// A point index paired with the measured offending value.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    /// Index into the offending point list (sample, net, or atlas order).
    pub index: usize,
    /// Location of the witness.
    pub point: Vec<f64>,
    /// Measured value that broke the bound.
    pub value: f64,
    /// Bound that was in force.
    pub bound: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),

    #[error("no sample points inside ball of radius {radius} at the query point")]
    EmptyBall { radius: f64 },

    #[error("point set is empty")]
    EmptySet,

    #[error("coloring needs {needed} classes, budget is {budget}")]
    ColorBudgetExceeded { needed: usize, budget: usize },

    #[error(
        "flatness {measured} at scale {scale} exceeds budget {budget} (worst point index {index})"
    )]
    FlatnessBudgetExceeded {
        measured: f64,
        budget: f64,
        scale: f64,
        index: usize,
    },

    #[error("degenerate pair: tangential gap {gap:.3e} below threshold with normal gap {normal_gap:.3e} at net point {net_index}")]
    DegeneratePair {
        net_index: usize,
        gap: f64,
        normal_gap: f64,
    },

    #[error("graph samples exceed Lipschitz budget {bound}: ratio {measured} between samples {i} and {j}")]
    SamplesNotLipschitz {
        measured: f64,
        bound: f64,
        i: usize,
        j: usize,
    },

    #[error("stage {stage} invariant violated ({kind}): measured {measured:.6e} > allowed {allowed:.6e} at net point {net_index}")]
    StageInvariantViolated {
        stage: usize,
        kind: StageViolation,
        measured: f64,
        allowed: f64,
        net_index: usize,
    },

    #[error("patch grid pitch {pitch:.3e} too coarse for kernel width {kernel_width:.3e}")]
    GridTooCoarse { pitch: f64, kernel_width: f64 },

    #[error("blend inputs disagree: {0}")]
    PatchMismatch(String),

    #[error("derivative bound exceeded at order {order}: measured {measured:.6e} > budget {budget:.6e} at net point {net_index}")]
    DerivativeBudgetExceeded {
        order: usize,
        measured: f64,
        budget: f64,
        net_index: usize,
    },

    #[error("orientation conflict: patches {a} and {b} received incompatible signs")]
    OrientationConflict { a: usize, b: usize },

    #[error("atlas overlap graph is disconnected: {components} components")]
    DisconnectedAtlas { components: usize },

    #[error("graph inversion did not contract at node {node_index}: residual {residual:.3e} after {iterations} iterations")]
    ContractionFailure {
        node_index: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("offset sandwich violated ({side}): distance {measured:.6e} outside [{lo:.6e}, {hi:.6e}] at offset point {index}")]
    SandwichViolated {
        side: &'static str,
        measured: f64,
        lo: f64,
        hi: f64,
        index: usize,
    },

    #[error("grid resolution {h:.3e} too coarse: {reason}")]
    ResolutionTooCoarse { h: f64, reason: String },

    #[error("side selection ambiguous: {0}")]
    SideSelectionAmbiguous(String),

    #[error("nesting violated between scales {r:.6e} and {s:.6e}: {reason}")]
    NestingViolated { r: f64, s: f64, reason: String },

    #[error("expected {expected} complement components at scale {scale:.6e}, found {found}")]
    ComponentCountMismatch {
        expected: usize,
        found: usize,
        scale: f64,
    },

    #[error("certificate {name} failed: measured {measured:.6e} > allowed {allowed:.6e} at index {index}")]
    CertificateViolated {
        name: &'static str,
        measured: f64,
        allowed: f64,
        index: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// What broke inside a construction stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageViolation {
    /// Pairwise normal/tangential ratio above the stage budget.
    RatioBudget,
    /// Two distinct points stacked over one tangential location.
    DegeneratePair,
    /// Cross-patch pair broke the absolute normal-gap bound.
    CrossPatchGap,
    /// Plane pair broke the compatibility bound.
    PlaneCompatibility,
}

impl std::fmt::Display for StageViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StageViolation::RatioBudget => "ratio budget",
            StageViolation::DegeneratePair => "degenerate pair",
            StageViolation::CrossPatchGap => "cross-patch gap",
            StageViolation::PlaneCompatibility => "plane compatibility",
        };
        f.write_str(s)
    }
}
