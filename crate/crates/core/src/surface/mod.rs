//! Surface construction: Lipschitz graph patches over a colored net,
//! assembled stage by stage with every step verified, ending in a certified
//! atlas.

pub mod mcshane;
pub mod stage;

pub use mcshane::{lipschitz_extend, lipschitz_ratio_check, ExcludedPair, LipschitzGraph, RatioCheck};
pub use stage::{
    build_stage, build_surface, plane_compatibility_check, AtlasState, CompatPair, CompatReport,
    GraphPatch, PointOrigin, StageRecord, SurfaceAtlas, SurfaceBuilder, SurfaceCertificates,
};
