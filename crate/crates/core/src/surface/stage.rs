//! Stagewise construction of the approximating surface.
//!
//! The working set S starts as the net itself: net separation is what makes
//! every pair verification below well-posed. Each stage then takes the
//! current S, and for every center w of the active color builds a Lipschitz
//! graph patch over w's fitted plane from S inside B(w, 4a), then enriches S
//! with graph nodes inside B(w, 3a). Same-colored centers are far apart, so
//! their balls never interact and a stage is order-independent.
//!
//! Every stage is verified before it is accepted: for each net point x, each
//! pair (new node y, point z) inside B(x, 4a) must stay a shallow graph over
//! x's plane. Pairs on one patch are checked against the patch's Lipschitz
//! constant plus the projector-compatibility allowance; pairs that straddle
//! patches are checked against an absolute normal-gap budget together with
//! the tangential separation that the net geometry forces. The measured
//! slope trajectory is recorded per stage, and the final atlas carries
//! distance certificates in both directions plus the local graph identity
//! at every net point.

use crate::config::{
    A_RATIO, BASE_RATIO_BUDGET, COMPAT_DIST_BUDGET, COMPAT_PAIR_FACTOR,
    CONTRIBUTION_RADIUS_FACTOR, DEGENERATE_GAP_TOL, IDENTITY_RADIUS_FACTOR,
    NODE_SUPPORT_GAP_FACTOR, NODE_SUPPORT_PITCH_FACTOR, PATCH_RADIUS_FACTOR, PROJECTOR_BUDGET,
    STAGE_BUDGET_STEP,
};
use crate::error::{Error, StageViolation};
use crate::geometry::{
    fit_plane_pca, gamma, grid::PointGrid, plane_plane_distance, projector_distance, vecn,
    AffinePlane, PitchPolicy, PointCloud,
};
use crate::net::{color_net, maximal_net, ColoredNet};
use crate::surface::mcshane::{lipschitz_extend, lipschitz_ratio_check, LipschitzGraph};
use crate::{par, Result, RunConfig};
use serde::Serialize;

/// Relative slack used when a geometric comparison must survive uniform
/// rescaling of the input; one part in 1e12 absorbs the rounding of scaled
/// coordinates without affecting any honest margin.
pub(crate) const REL_SLACK: f64 = 1e-12;

/// Floor for the working flatness value, so budgets that multiply by it
/// stay meaningful on exactly flat synthetic data.
pub(crate) const EPSILON_FLOOR: f64 = 1e-12;

/// One Lipschitz graph patch of the atlas.
#[derive(Debug, Clone)]
pub struct GraphPatch {
    /// Position of the center in the net (not the cloud index).
    pub net_pos: usize,
    /// Index of the center in the source cloud.
    pub cloud_index: usize,
    /// 1-based stage at which the patch was built.
    pub stage: usize,
    /// Center point (net point), also the base of the plane.
    pub center: Vec<f64>,
    /// Fitted plane through the center.
    pub plane: AffinePlane,
    /// Orthonormal basis of the normal space, fixed at build time.
    pub normals: Vec<Vec<f64>>,
    /// Radius of the ball the patch data was collected from (4a).
    pub radius: f64,
    /// The extension over the collected samples.
    pub graph: LipschitzGraph,
}

impl GraphPatch {
    /// Tangential and normal coordinates of an ambient point relative to the
    /// patch frame, so that p = center + frame*t + normals*h exactly.
    pub fn local_coords(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.center.len();
        let mut rel = vec![0.0; n];
        vecn::sub(p, &self.center, &mut rel);
        let t = self
            .plane
            .frame
            .iter()
            .map(|f| vecn::dot(&rel, f))
            .collect();
        let h = self.normals.iter().map(|u| vecn::dot(&rel, u)).collect();
        (t, h)
    }

    /// Ambient point with the given local coordinates.
    pub fn embed_local(&self, t: &[f64], h: &[f64]) -> Vec<f64> {
        let mut p = self.center.clone();
        for (ti, f) in t.iter().zip(&self.plane.frame) {
            vecn::axpy(*ti, f, &mut p);
        }
        for (hi, u) in h.iter().zip(&self.normals) {
            vecn::axpy(*hi, u, &mut p);
        }
        p
    }

    /// Ambient graph point over tangential coordinates `t`.
    pub fn eval_ambient(&self, t: &[f64]) -> Vec<f64> {
        let h = self.graph.eval_vec(t);
        self.embed_local(t, &h)
    }

    /// Distance from p to the graph point over p's own tangential footprint.
    /// This bounds the distance from p to the patch surface from above.
    pub fn residual(&self, p: &[f64]) -> f64 {
        let (t, h) = self.local_coords(p);
        let f = self.graph.eval_vec(&t);
        vecn::dist(&f, &h)
    }
}

/// One net-point pair from the plane compatibility scan.
#[derive(Debug, Clone, Serialize)]
pub struct CompatPair {
    pub i: usize,
    pub j: usize,
    pub center_gap: f64,
    pub plane_distance: f64,
    pub projector_distance: f64,
}

/// Outcome of comparing fitted planes at nearby net points.
#[derive(Debug, Clone, Serialize)]
pub struct CompatReport {
    pub pairs_checked: usize,
    pub max_plane_distance: f64,
    pub plane_budget: f64,
    pub max_projector_distance: f64,
    pub projector_budget: f64,
    pub worst_pair: Option<CompatPair>,
    /// Pairs over either budget, capped at 64.
    pub violations: Vec<CompatPair>,
}

/// Compares fitted planes at all net-point pairs within r/2: the normalized
/// plane-to-plane distance at radius r/4 must stay within 8 epsilon, and the
/// tangent projectors within 100 epsilon. Violations are reported, not
/// fatal; downstream stage checks consume the same budgets and fail loudly
/// where it actually breaks the construction.
pub fn plane_compatibility_check(
    centers: &[f64],
    planes: &[AffinePlane],
    n: usize,
    r: f64,
    epsilon: f64,
) -> Result<CompatReport> {
    let k = centers.len() / n;
    if planes.len() != k {
        return Err(Error::InvalidInput(format!(
            "{} planes for {} centers",
            planes.len(),
            k
        )));
    }
    let plane_budget = COMPAT_DIST_BUDGET * epsilon;
    let projector_budget = PROJECTOR_BUDGET * epsilon;
    let grid = PointGrid::from_flat(n, r * 0.25, centers);
    let pair_radius = r * COMPAT_PAIR_FACTOR * (1.0 + REL_SLACK);

    struct Local {
        pairs: usize,
        max_plane: f64,
        max_proj: f64,
        worst: Option<CompatPair>,
        violations: Vec<CompatPair>,
        error: Option<Error>,
    }
    let locals = par::map_indexed(k, |i| {
        let mut out = Local {
            pairs: 0,
            max_plane: 0.0,
            max_proj: 0.0,
            worst: None,
            violations: Vec::new(),
            error: None,
        };
        let xi = &centers[i * n..(i + 1) * n];
        for j in grid.query_ball(xi, pair_radius) {
            if j <= i {
                continue;
            }
            let gap = vecn::dist(xi, &centers[j * n..(j + 1) * n]);
            let pd = match plane_plane_distance(&planes[i], &planes[j], xi, r * 0.25) {
                Ok(v) => v,
                Err(e) => {
                    if out.error.is_none() {
                        out.error = Some(e);
                    }
                    continue;
                }
            };
            let qd = projector_distance(&planes[i], &planes[j]);
            out.pairs += 1;
            let pair = CompatPair {
                i,
                j,
                center_gap: gap,
                plane_distance: pd,
                projector_distance: qd,
            };
            if pd > out.max_plane || (pd == out.max_plane && out.worst.is_none()) {
                out.max_plane = pd;
                out.worst = Some(pair.clone());
            }
            out.max_proj = out.max_proj.max(qd);
            if (pd > plane_budget || qd > projector_budget) && out.violations.len() < 64 {
                out.violations.push(pair);
            }
        }
        out
    });

    let mut report = CompatReport {
        pairs_checked: 0,
        max_plane_distance: 0.0,
        plane_budget,
        max_projector_distance: 0.0,
        projector_budget,
        worst_pair: None,
        violations: Vec::new(),
    };
    for mut local in locals {
        if let Some(e) = local.error {
            return Err(e);
        }
        report.pairs_checked += local.pairs;
        if local.max_plane > report.max_plane_distance || report.worst_pair.is_none() {
            if local.worst.is_some() {
                report.worst_pair = local.worst;
            }
            report.max_plane_distance = report.max_plane_distance.max(local.max_plane);
        }
        report.max_projector_distance = report.max_projector_distance.max(local.max_proj);
        if report.violations.len() < 64 {
            let room = 64 - report.violations.len();
            local.violations.truncate(room);
            report.violations.append(&mut local.violations);
        }
    }
    Ok(report)
}

/// Measured outcome of one construction stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    /// Stage number; 0 is the verification of the bare net.
    pub stage: usize,
    /// Patches built this stage (0 for stage 0).
    pub patches: usize,
    /// Graph nodes added to the point set.
    pub inserted: usize,
    /// Point-set size after the stage.
    pub points_after: usize,
    /// Largest measured sample slope among this stage's patches.
    pub max_data_ratio: f64,
    /// Slope budget (in flatness units) the patch data was gated against.
    pub ratio_budget: f64,
    /// Largest normal/tangential gap ratio over pairs verified this stage,
    /// divided by the working flatness value.
    pub max_slope: f64,
    /// Same-patch pairs verified.
    pub case1_pairs: u64,
    /// Cross-patch pairs verified.
    pub case2_pairs: u64,
    /// Worst lhs/rhs over same-patch checks (at most 1 when passing).
    pub worst_case1_margin: f64,
    /// Worst lhs/rhs over cross-patch normal-gap checks.
    pub worst_case2_margin: f64,
    /// Near-coincident pairs excluded from slope measurement.
    pub excluded_pairs: usize,
}

/// Distance and graph-identity certificates of a finished atlas.
#[derive(Debug, Clone, Serialize)]
pub struct SurfaceCertificates {
    /// sup over cloud points of the distance to the surface.
    pub sup_sample_to_surface: f64,
    pub worst_sample: usize,
    /// sup over surface nodes of the distance to the cloud.
    pub sup_surface_to_sample: f64,
    pub worst_node: usize,
    /// The two sups divided by (flatness * r).
    pub c0_sample_to_surface: f64,
    pub c0_surface_to_sample: f64,
    /// Worst two-sided deviation between the point set and a patch graph
    /// inside B(x, 2a), over all net points x.
    pub graph_identity_sup: f64,
    pub graph_identity_tol: f64,
    pub worst_identity_net: usize,
}

/// Whether the atlas patches are the raw extensions or the mollified ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AtlasState {
    Built,
    Smoothed,
}

/// The constructed surface: one Lipschitz graph patch per net point, plus
/// the enriched point set they interpolate and the measured certificates.
#[derive(Debug)]
pub struct SurfaceAtlas {
    n: usize,
    d: usize,
    r: f64,
    a: f64,
    pub epsilon_used: f64,
    pub epsilon_budget: f64,
    pub net: ColoredNet,
    pub(crate) net_points: Vec<f64>,
    pub(crate) net_grid: PointGrid,
    pub patches: Vec<GraphPatch>,
    pub(crate) points: Vec<f64>,
    pub(crate) origins: Vec<PointOrigin>,
    pub(crate) points_grid: PointGrid,
    pub(crate) cloud_points: Vec<f64>,
    pub(crate) cloud_grid: PointGrid,
    pub sample_gap: f64,
    /// Pitch of the tangential node grid inserted per patch.
    pub insert_gap: f64,
    pub stages: Vec<StageRecord>,
    pub compat: CompatReport,
    pub certificates: SurfaceCertificates,
    pub state: AtlasState,
    /// Mollification record, filled in by `smooth_surface`.
    pub smoothing: Option<crate::smooth::SmoothingRecord>,
    /// Largest one-sided plane-fit residual over net points, in units of r.
    pub fit_sup: f64,
    /// Largest probed bilateral flatness over net points, in units of r.
    pub gamma_probe: f64,
}

/// Where a point of the working set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointOrigin {
    /// 0 for net points, otherwise the inserting stage.
    pub stage: u32,
    /// Net position of the inserting patch; u32::MAX for net points.
    pub patch: u32,
}

impl PointOrigin {
    pub const SAMPLE: PointOrigin = PointOrigin {
        stage: 0,
        patch: u32::MAX,
    };
}

impl SurfaceAtlas {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Construction scale.
    pub fn r(&self) -> f64 {
        self.r
    }

    /// Net separation (r/32).
    pub fn a(&self) -> f64 {
        self.a
    }

    /// Number of net points (= number of patches).
    pub fn net_len(&self) -> usize {
        self.net.indices.len()
    }

    pub fn net_point(&self, pos: usize) -> &[f64] {
        &self.net_points[pos * self.n..(pos + 1) * self.n]
    }

    /// The enriched point set the patches interpolate, flat n per point.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// The original sample the atlas was built from, flat n per point.
    pub fn samples(&self) -> &[f64] {
        &self.cloud_points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.n..(i + 1) * self.n]
    }

    pub fn origins(&self) -> &[PointOrigin] {
        &self.origins
    }

    /// Net position whose center is closest to p.
    pub fn nearest_patch(&self, p: &[f64]) -> usize {
        self.net_grid
            .nearest(p)
            .expect("atlas has at least one net point")
            .0
    }

    /// Distance from p to the surface, measured through the nearest patch.
    pub fn distance_to(&self, p: &[f64]) -> f64 {
        self.patches[self.nearest_patch(p)].residual(p)
    }

    /// Working flatness with the floor applied, the denominator of every
    /// normalized certificate.
    pub fn eps_eff(&self) -> f64 {
        self.epsilon_used.max(EPSILON_FLOOR)
    }

    /// Graph-identity tolerance (a few sample gaps).
    pub fn tol_graph(&self) -> f64 {
        3.0 * self.sample_gap
    }
}

/// All working state between stages; `build_stage` advances it one color.
pub struct SurfaceBuilder {
    n: usize,
    d: usize,
    r: f64,
    a: f64,
    insert_gap: f64,
    epsilon_used: f64,
    epsilon_budget: f64,
    config: RunConfig,
    sample_gap: f64,
    cloud_points: Vec<f64>,
    cloud_grid: PointGrid,
    net: ColoredNet,
    net_points: Vec<f64>,
    net_grid: PointGrid,
    planes: Vec<AffinePlane>,
    patches: Vec<Option<GraphPatch>>,
    points: Vec<f64>,
    origins: Vec<PointOrigin>,
    points_grid: PointGrid,
    stages: Vec<StageRecord>,
    compat: CompatReport,
    fit_sup: f64,
    gamma_probe: f64,
    next_color: u32,
    /// Running max of measured pair slopes divided by epsilon.
    slope_run: f64,
}

impl SurfaceBuilder {
    /// Validates the input, fits the planes, measures the working flatness
    /// value and gates it against the budget, and verifies the bare net.
    pub fn new(cloud: &PointCloud, config: &RunConfig) -> Result<Self> {
        let n = cloud.n();
        let d = cloud.d();
        let r = cloud.r0();
        let a = r * A_RATIO;
        let required = r / config.min_resolution_ratio;
        if cloud.sample_gap() > required * (1.0 + REL_SLACK) {
            return Err(Error::ResolutionTooCoarse {
                h: cloud.sample_gap(),
                reason: format!(
                    "sample gap must be at most r0/{} = {required:.6e} to resolve the patches",
                    config.min_resolution_ratio
                ),
            });
        }
        let insert_gap = if d == 1 { a / 8.0 } else { a };

        let net_idx = maximal_net(cloud, a)?;
        let net = color_net(cloud, &net_idx, a)?;
        let net_count = net.indices.len();
        let mut net_points = Vec::with_capacity(net_count * n);
        for &i in &net.indices {
            net_points.extend_from_slice(cloud.point(i));
        }
        let net_grid = PointGrid::from_flat(n, a, &net_points);

        // Plane fits at scale r, with the one-sided fit residual per center.
        let coarse_grid = PointGrid::from_flat(n, r * 0.25, cloud.coords());
        let fits: Vec<Result<(AffinePlane, f64)>> = par::map_indexed(net_count, |pos| {
            let x = &net_points[pos * n..(pos + 1) * n];
            let plane = fit_plane_pca(&coarse_grid, x, r, d)?;
            let mut sup = 0.0f64;
            coarse_grid.for_each_in_ball(x, r, |i, _| {
                sup = sup.max(plane.distance(coarse_grid.point(i)));
                true
            });
            Ok((plane, sup / r))
        });
        let mut planes = Vec::with_capacity(net_count);
        let mut fit_sup = 0.0f64;
        let mut fit_worst = 0usize;
        for (pos, item) in fits.into_iter().enumerate() {
            let (plane, res) = item?;
            if res > fit_sup {
                fit_sup = res;
                fit_worst = pos;
            }
            planes.push(plane);
        }

        // Bilateral flatness probe at a few spread-out net points; together
        // with the fit residuals this is the working flatness value.
        //
        // Probing needs B(x, r) filled with data on the set side. Where the
        // cloud is a window of a larger set, points near the window edge
        // would report the missing data as roughness, so the probe prefers
        // net points with a full margin along every axis the cloud spans;
        // closed sets leave no such points and fall back to the whole net.
        let (bb_lo, bb_hi) = cloud.bounding_box();
        let margin = r * (1.0 - 1e-9);
        let interior: Vec<usize> = (0..net_count)
            .filter(|&pos| {
                let x = &net_points[pos * n..(pos + 1) * n];
                (0..n).all(|i| {
                    bb_hi[i] - bb_lo[i] < 2.0 * r
                        || (x[i] >= bb_lo[i] + margin && x[i] <= bb_hi[i] - margin)
                })
            })
            .collect();
        let pool: Vec<usize> = if interior.is_empty() {
            (0..net_count).collect()
        } else {
            interior
        };
        let probes = pool.len().min(16).max(1);
        let stride = (pool.len() / probes).max(1);
        let probe_vals: Vec<Result<(f64, usize)>> = par::map_indexed(probes, |k| {
            let pos = pool[(k * stride).min(pool.len() - 1)];
            let x = &net_points[pos * n..(pos + 1) * n];
            let g = gamma(
                &coarse_grid,
                x,
                r,
                d,
                cloud.sample_gap(),
                PitchPolicy::Coarse,
            )?;
            Ok((g.value, pos))
        });
        let mut gamma_probe = 0.0f64;
        let mut gamma_worst = fit_worst;
        for item in probe_vals {
            let (v, pos) = item?;
            if v > gamma_probe {
                gamma_probe = v;
                gamma_worst = pos;
            }
        }

        let epsilon_used = fit_sup.max(gamma_probe);
        if epsilon_used > config.epsilon_budget {
            let index = if gamma_probe >= fit_sup {
                gamma_worst
            } else {
                fit_worst
            };
            return Err(Error::FlatnessBudgetExceeded {
                measured: epsilon_used,
                budget: config.epsilon_budget,
                scale: r,
                index: net.indices[index],
            });
        }

        let compat = plane_compatibility_check(&net_points, &planes, n, r, epsilon_used)?;

        // The working set starts as the net: its separation is what keeps
        // every pair of working points tangentially spread out.
        let points = net_points.clone();
        let origins = vec![PointOrigin::SAMPLE; net_count];
        let points_grid = PointGrid::from_flat(n, a, &points);

        let mut builder = SurfaceBuilder {
            n,
            d,
            r,
            a,
            insert_gap,
            epsilon_used,
            epsilon_budget: config.epsilon_budget,
            config: config.clone(),
            sample_gap: cloud.sample_gap(),
            cloud_points: cloud.coords().to_vec(),
            cloud_grid: PointGrid::from_flat(n, a, cloud.coords()),
            net,
            net_points,
            net_grid,
            planes,
            patches: (0..net_count).map(|_| None).collect(),
            points,
            origins,
            points_grid,
            stages: Vec::new(),
            compat,
            fit_sup,
            gamma_probe,
            next_color: 0,
            slope_run: 0.0,
        };
        builder.verify_net_stage()?;
        Ok(builder)
    }

    pub fn stages_remaining(&self) -> u32 {
        self.net.color_count - self.next_color
    }

    pub fn epsilon_used(&self) -> f64 {
        self.epsilon_used
    }

    fn eps_eff(&self) -> f64 {
        self.epsilon_used.max(EPSILON_FLOOR)
    }

    /// Stage 0: every pair of samples near a net point is already a shallow
    /// graph over the fitted plane, with slope at most 128 epsilon.
    fn verify_net_stage(&mut self) -> Result<()> {
        let n = self.n;
        let ball = self.a * PATCH_RADIUS_FACTOR * (1.0 + REL_SLACK);
        let eps = self.eps_eff();
        let net_count = self.net.indices.len();

        struct Local {
            max_slope: f64,
            pairs: u64,
            excluded: usize,
            violation: Option<Error>,
        }
        let locals = par::map_indexed(net_count, |pos| {
            let x = self.net_point_at(pos);
            let plane = &self.planes[pos];
            let idxs = self.points_grid.query_ball(x, ball);
            let mut out = Local {
                max_slope: 0.0,
                pairs: 0,
                excluded: 0,
                violation: None,
            };
            // Tangential coordinates once per point, pair loop on cached rows.
            let tang: Vec<f64> = idxs
                .iter()
                .flat_map(|&i| plane.tangential(self.point_at(i)))
                .collect();
            let dd = plane.d();
            for ai in 0..idxs.len() {
                if out.violation.is_some() {
                    break;
                }
                let pa = self.point_at(idxs[ai]);
                for bi in (ai + 1)..idxs.len() {
                    let pb = self.point_at(idxs[bi]);
                    let full2 = vecn::dist2(pa, pb);
                    let tang2 = vecn::dist2(&tang[ai * dd..(ai + 1) * dd], &tang[bi * dd..(bi + 1) * dd]);
                    let normal = (full2 - tang2).max(0.0).sqrt();
                    let tangd = tang2.sqrt();
                    if tangd <= DEGENERATE_GAP_TOL * self.r {
                        if normal > 1e-9 * self.r {
                            out.violation = Some(Error::StageInvariantViolated {
                                stage: 0,
                                kind: StageViolation::DegeneratePair,
                                measured: normal,
                                allowed: 1e-9 * self.r,
                                net_index: self.net.indices[pos],
                            });
                            break;
                        }
                        out.excluded += 1;
                        continue;
                    }
                    out.pairs += 1;
                    let slope = normal / (eps * tangd);
                    if slope > out.max_slope {
                        out.max_slope = slope;
                    }
                    if slope > BASE_RATIO_BUDGET * (1.0 + 1e-9) {
                        out.violation = Some(Error::StageInvariantViolated {
                            stage: 0,
                            kind: StageViolation::RatioBudget,
                            measured: slope,
                            allowed: BASE_RATIO_BUDGET,
                            net_index: self.net.indices[pos],
                        });
                        break;
                    }
                }
            }
            out
        });

        let mut record = StageRecord {
            stage: 0,
            patches: 0,
            inserted: 0,
            points_after: self.points.len() / n,
            max_data_ratio: 0.0,
            ratio_budget: BASE_RATIO_BUDGET,
            max_slope: 0.0,
            case1_pairs: 0,
            case2_pairs: 0,
            worst_case1_margin: 0.0,
            worst_case2_margin: 0.0,
            excluded_pairs: 0,
        };
        for local in locals {
            if let Some(e) = local.violation {
                return Err(e);
            }
            record.max_slope = record.max_slope.max(local.max_slope);
            record.case1_pairs += local.pairs;
            record.excluded_pairs += local.excluded;
        }
        self.slope_run = record.max_slope.max(BASE_RATIO_BUDGET);
        self.stages.push(record);
        Ok(())
    }

    fn point_at(&self, i: usize) -> &[f64] {
        &self.points[i * self.n..(i + 1) * self.n]
    }

    fn net_point_at(&self, pos: usize) -> &[f64] {
        &self.net_points[pos * self.n..(pos + 1) * self.n]
    }

    /// Finishes the build: runs any remaining stages, then certifies the
    /// atlas (both distance directions and the local graph identity).
    pub fn finish(mut self) -> Result<SurfaceAtlas> {
        while self.stages_remaining() > 0 {
            build_stage(&mut self)?;
        }
        let certificates = self.certify()?;
        let patches = self
            .patches
            .into_iter()
            .map(|p| p.expect("every color ran, so every net point has a patch"))
            .collect();
        Ok(SurfaceAtlas {
            n: self.n,
            d: self.d,
            r: self.r,
            a: self.a,
            epsilon_used: self.epsilon_used,
            epsilon_budget: self.epsilon_budget,
            net: self.net,
            net_points: self.net_points,
            net_grid: self.net_grid,
            patches,
            points: self.points,
            origins: self.origins,
            points_grid: self.points_grid,
            cloud_points: self.cloud_points,
            cloud_grid: self.cloud_grid,
            sample_gap: self.sample_gap,
            insert_gap: self.insert_gap,
            stages: self.stages,
            compat: self.compat,
            certificates,
            state: AtlasState::Built,
            smoothing: None,
            fit_sup: self.fit_sup,
            gamma_probe: self.gamma_probe,
        })
    }

    /// Graph-identity tolerance: the point set and the patch graphs must
    /// agree to a few sample gaps.
    fn tol_graph(&self) -> f64 {
        3.0 * self.sample_gap
    }

    fn certify(&self) -> Result<SurfaceCertificates> {
        let n = self.n;
        let net_count = self.net.indices.len();
        let tol = self.tol_graph();
        let identity_ball = self.a * IDENTITY_RADIUS_FACTOR * (1.0 + REL_SLACK);

        // Local graph identity at every net point, both directions: points
        // near x lie on x's patch graph, and x's patch graph near x (where
        // data supports it) is close to the point set.
        let support = node_support_radius(self.insert_gap, self.sample_gap);
        let idents: Vec<(f64, bool)> = par::map_indexed(net_count, |pos| {
            let x = self.net_point_at(pos);
            let patch = self.patches[pos].as_ref().expect("patch built");
            let mut worst = 0.0f64;
            for i in self.points_grid.query_ball(x, identity_ball) {
                worst = worst.max(patch.residual(self.point_at(i)));
            }
            let reach = self.a * IDENTITY_RADIUS_FACTOR;
            let steps = (reach / self.insert_gap + 1e-9).floor() as i64;
            let dd = self.d;
            let mut t = vec![0.0; dd];
            let mut idx = vec![-steps; dd];
            let within = reach * reach * (1.0 + REL_SLACK);
            'outer: loop {
                for (ti, ki) in t.iter_mut().zip(&idx) {
                    *ti = *ki as f64 * self.insert_gap;
                }
                if vecn::dot(&t, &t) <= within {
                    let p = patch.eval_ambient(&t);
                    if vecn::dist2(&p, x) <= within
                        && self.cloud_grid.has_point_within(&p, support)
                    {
                        worst = worst.max(self.points_grid.distance_to(&p));
                    }
                }
                for axis in 0..dd {
                    if idx[axis] < steps {
                        idx[axis] += 1;
                        continue 'outer;
                    }
                    idx[axis] = -steps;
                }
                break;
            }
            (worst, worst > tol)
        });
        let mut graph_identity_sup = 0.0f64;
        let mut worst_identity_net = 0usize;
        for (pos, (v, _)) in idents.iter().enumerate() {
            if *v > graph_identity_sup {
                graph_identity_sup = *v;
                worst_identity_net = pos;
            }
        }
        if graph_identity_sup > tol {
            return Err(Error::CertificateViolated {
                name: "graph-identity",
                measured: graph_identity_sup,
                allowed: tol,
                index: self.net.indices[worst_identity_net],
            });
        }

        // Every sample is close to the surface (via the nearest patch).
        let cloud_len = self.cloud_points.len() / n;
        let (worst_sample, sup_sample) = par::max_indexed(cloud_len, |i| {
            let y = &self.cloud_points[i * n..(i + 1) * n];
            let pos = self
                .net_grid
                .nearest(y)
                .expect("net is nonempty")
                .0;
            self.patches[pos].as_ref().expect("patch built").residual(y)
        });

        // Every surface node is close to the samples.
        let point_count = self.points.len() / n;
        let (worst_node, sup_node) = par::max_indexed(point_count, |i| {
            self.cloud_grid.distance_to(self.point_at(i))
        });

        let denom = self.eps_eff() * self.r;
        Ok(SurfaceCertificates {
            sup_sample_to_surface: sup_sample,
            worst_sample,
            sup_surface_to_sample: sup_node,
            worst_node,
            c0_sample_to_surface: sup_sample / denom,
            c0_surface_to_sample: sup_node / denom,
            graph_identity_sup,
            graph_identity_tol: tol,
            worst_identity_net,
        })
    }
}

/// Output of building one patch, before the point set is updated.
struct PatchBuild {
    net_pos: usize,
    patch: GraphPatch,
    accepted: Vec<f64>,
}

/// Reach from a proposed node to its nearest input sample. Nodes without a
/// sample this close are dropped: they would extend the surface past the
/// data footprint (an open sample's edge) instead of filling between it.
/// The gate is measured against the input cloud, not the working set: the
/// working set starts as the sparse net and only densifies stagewise.
pub(crate) fn node_support_radius(insert_gap: f64, sample_gap: f64) -> f64 {
    (NODE_SUPPORT_PITCH_FACTOR * insert_gap).max(NODE_SUPPORT_GAP_FACTOR * sample_gap)
}

/// Runs the next color's stage: builds its patches from the current point
/// set, inserts their graph nodes, and verifies every new pair near every
/// net point. Returns the stage record, or the first violation found.
pub fn build_stage(b: &mut SurfaceBuilder) -> Result<StageRecord> {
    if b.stages_remaining() == 0 {
        return Err(Error::InvalidInput(
            "all stages have already run".to_string(),
        ));
    }
    let color = b.next_color;
    let stage = (color + 1) as usize;
    let n = b.n;
    let d = b.d;
    let m = n - d;
    let eps = b.eps_eff();
    let data_budget = (b.slope_run + STAGE_BUDGET_STEP).max(BASE_RATIO_BUDGET);
    let patch_ball = b.a * PATCH_RADIUS_FACTOR;
    let insert_ball = b.a * CONTRIBUTION_RADIUS_FACTOR;

    let class: Vec<usize> = (0..b.net.indices.len())
        .filter(|&pos| b.net.colors[pos] == color)
        .collect();

    // Phase A: per-center patch build and node proposal, order-independent
    // because same-colored balls are disjoint by more than 8a.
    let builds: Vec<Result<PatchBuild>> = par::map_indexed(class.len(), |ci| {
        let pos = class[ci];
        let w = b.net_point_at(pos);
        let plane = &b.planes[pos];
        let normals = plane.normal_frame();
        let idxs = b.points_grid.query_ball(w, patch_ball * (1.0 + REL_SLACK));
        let mut sites = Vec::with_capacity(idxs.len() * d);
        let mut values = Vec::with_capacity(idxs.len() * m);
        for &i in &idxs {
            let p = b.point_at(i);
            let mut rel = vec![0.0; n];
            vecn::sub(p, w, &mut rel);
            for f in &plane.frame {
                sites.push(vecn::dot(&rel, f));
            }
            for u in &normals {
                values.push(vecn::dot(&rel, u));
            }
        }
        let check = lipschitz_ratio_check(&sites, &values, d, m, b.r)?;
        let data_slope = check.max_ratio / eps;
        if data_slope > data_budget * (1.0 + 1e-9) {
            return Err(Error::StageInvariantViolated {
                stage,
                kind: StageViolation::RatioBudget,
                measured: data_slope,
                allowed: data_budget,
                net_index: b.net.indices[pos],
            });
        }
        let lip = b.config.lipschitz_headroom * check.max_ratio;
        let graph = lipschitz_extend(sites, values, d, m, lip, b.r)?;
        let patch = GraphPatch {
            net_pos: pos,
            cloud_index: b.net.indices[pos],
            stage,
            center: w.to_vec(),
            plane: plane.clone(),
            normals,
            radius: patch_ball,
            graph,
        };

        // Node proposal: graph nodes on the tangential lattice inside 3a,
        // kept when an input sample supports them and no existing or
        // just-accepted point sits within half the lattice pitch.
        let mut accepted = Vec::new();
        let mut local = PointGrid::new(n, b.insert_gap);
        let dedup = 0.5 * b.insert_gap * (1.0 + REL_SLACK);
        let support = node_support_radius(b.insert_gap, b.sample_gap);
        let steps = (insert_ball / b.insert_gap + 1e-9).floor() as i64;
        let within = insert_ball * insert_ball * (1.0 + REL_SLACK);
        let mut t = vec![0.0; d];
        let mut idx = vec![-steps; d];
        'outer: loop {
            for (ti, ki) in t.iter_mut().zip(&idx) {
                *ti = *ki as f64 * b.insert_gap;
            }
            if vecn::dot(&t, &t) <= within {
                let h = patch.graph.eval_vec(&t);
                let p = patch.embed_local(&t, &h);
                if b.cloud_grid.has_point_within(&p, support)
                    && !b.points_grid.has_point_within(&p, dedup)
                    && !local.has_point_within(&p, dedup)
                {
                    local.push(&p);
                    accepted.extend_from_slice(&p);
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
        Ok(PatchBuild {
            net_pos: pos,
            patch,
            accepted,
        })
    });

    // Phase B: sequential state update in class order.
    let mut inserted = 0usize;
    let mut max_data_ratio = 0.0f64;
    let mut stage_lipschitz = 0.0f64;
    for item in builds {
        let built = item?;
        max_data_ratio = max_data_ratio.max(built.patch.graph.data_ratio() / eps);
        stage_lipschitz = stage_lipschitz.max(built.patch.graph.vector_lipschitz());
        for chunk in built.accepted.chunks_exact(n) {
            b.points_grid.push(chunk);
            b.points.extend_from_slice(chunk);
            b.origins.push(PointOrigin {
                stage: stage as u32,
                patch: built.net_pos as u32,
            });
            inserted += 1;
        }
        b.patches[built.net_pos] = Some(built.patch);
    }

    // Phase C: verify every pair (new node, any point) near every net point.
    let record = verify_stage(b, stage, &class, max_data_ratio, stage_lipschitz, inserted)?;
    b.slope_run = b.slope_run.max(record.max_slope);
    b.next_color += 1;
    b.stages.push(record.clone());
    Ok(record)
}

/// Per-net-point verification of the pairs created by this stage.
fn verify_stage(
    b: &SurfaceBuilder,
    stage: usize,
    class: &[usize],
    max_data_ratio: f64,
    stage_lipschitz: f64,
    inserted: usize,
) -> Result<StageRecord> {
    let n = b.n;
    let eps = b.eps_eff();
    let a = b.a;
    let ball = a * PATCH_RADIUS_FACTOR * (1.0 + REL_SLACK);
    let slope_before = b.slope_run;

    // Net points whose 4a-ball can contain a node inserted by this stage.
    let mut affected: Vec<usize> = Vec::new();
    for &pos in class {
        let w = b.net_point_at(pos);
        let reach = a * (PATCH_RADIUS_FACTOR + CONTRIBUTION_RADIUS_FACTOR) * (1.0 + REL_SLACK);
        affected.extend(b.net_grid.query_ball(w, reach));
    }
    affected.sort_unstable();
    affected.dedup();

    // Absolute normal-gap budget for pairs that straddle patches: the old
    // point is a shallow graph point over x's plane, the plane passes within
    // eps*r of the set, the projectors at x and at the patch center differ
    // by at most 100 eps, and the patch itself has the stage's Lipschitz
    // bound. Each term is measured or already checked; their sum bounds the
    // normal gap.
    let cross_budget = eps
        * b.r
        * (4.0 * A_RATIO * slope_before
            + 1.0
            + PROJECTOR_BUDGET * CONTRIBUTION_RADIUS_FACTOR * A_RATIO
            + stage_lipschitz / eps)
        + 1e-9 * b.r;

    struct Local {
        max_slope: f64,
        case1: u64,
        case2: u64,
        margin1: f64,
        margin2: f64,
        excluded: usize,
        violation: Option<Error>,
    }
    let locals: Vec<Local> = par::map_indexed(affected.len(), |vi| {
        let pos = affected[vi];
        let x = b.net_point_at(pos);
        let plane = &b.planes[pos];
        let mut out = Local {
            max_slope: 0.0,
            case1: 0,
            case2: 0,
            margin1: 0.0,
            margin2: 0.0,
            excluded: 0,
            violation: None,
        };
        let idxs = b.points_grid.query_ball(x, ball);
        let fresh: Vec<bool> = idxs
            .iter()
            .map(|&i| b.origins[i].stage == stage as u32)
            .collect();
        if !fresh.iter().any(|&f| f) {
            return out;
        }
        let dd = plane.d();
        let tang: Vec<f64> = idxs
            .iter()
            .flat_map(|&i| plane.tangential(b.point_at(i)))
            .collect();
        // Tangential coordinates in each active patch plane, computed once
        // per (ball, patch) pair that actually occurs.
        let mut patch_cache: Vec<(u32, Vec<f64>)> = Vec::new();
        for (ai, &ia) in idxs.iter().enumerate() {
            if !fresh[ai] {
                continue;
            }
            let wp = b.origins[ia].patch;
            if !patch_cache.iter().any(|(w, _)| *w == wp) {
                let patch = b.patches[wp as usize].as_ref().expect("built this stage");
                let rows: Vec<f64> = idxs
                    .iter()
                    .flat_map(|&i| patch.plane.tangential(b.point_at(i)))
                    .collect();
                patch_cache.push((wp, rows));
            }
        }

        for (ai, &ia) in idxs.iter().enumerate() {
            if out.violation.is_some() {
                break;
            }
            if !fresh[ai] {
                continue;
            }
            let pa = b.point_at(ia);
            let wp = b.origins[ia].patch;
            let wcenter = b.net_point_at(wp as usize);
            let patch = b.patches[wp as usize].as_ref().expect("built this stage");
            let wtang = &patch_cache
                .iter()
                .find(|(w, _)| *w == wp)
                .expect("cached above")
                .1;
            for (bi, &ib) in idxs.iter().enumerate() {
                if ib == ia {
                    continue;
                }
                // New-new pairs once; new-old pairs always from the new side.
                if fresh[bi] && ib < ia {
                    continue;
                }
                let pb = b.point_at(ib);
                let full2 = vecn::dist2(pa, pb);
                let tang2 =
                    vecn::dist2(&tang[ai * dd..(ai + 1) * dd], &tang[bi * dd..(bi + 1) * dd]);
                let normal = (full2 - tang2).max(0.0).sqrt();
                let tangd = tang2.sqrt();

                if tangd <= DEGENERATE_GAP_TOL * b.r {
                    if normal > 1e-9 * b.r {
                        out.violation = Some(Error::StageInvariantViolated {
                            stage,
                            kind: StageViolation::DegeneratePair,
                            measured: normal,
                            allowed: 1e-9 * b.r,
                            net_index: b.net.indices[pos],
                        });
                        break;
                    }
                    out.excluded += 1;
                    continue;
                }
                out.max_slope = out.max_slope.max(normal / (eps * tangd));

                let same_patch = if fresh[bi] {
                    let wb = b.origins[ib].patch;
                    if wb != wp {
                        // Same-stage nodes from different patches cannot share
                        // a 4a-ball: their centers would be within 14a, but
                        // same-colored centers are more than 16a apart.
                        out.violation = Some(Error::StageInvariantViolated {
                            stage,
                            kind: StageViolation::CrossPatchGap,
                            measured: vecn::dist(wcenter, b.net_point_at(wb as usize)),
                            allowed: 16.0 * a,
                            net_index: b.net.indices[pos],
                        });
                        break;
                    }
                    true
                } else {
                    vecn::dist(pb, wcenter) <= b.a * PATCH_RADIUS_FACTOR * (1.0 + 1e-9)
                };

                if same_patch {
                    // Both points lie on the patch graph: its Lipschitz bound
                    // in the patch plane plus the projector allowance between
                    // the two planes bounds the normal gap at x.
                    out.case1 += 1;
                    let wt = vecn::dist(
                        &wtang[ai * dd..(ai + 1) * dd],
                        &wtang[bi * dd..(bi + 1) * dd],
                    );
                    let rhs = patch.graph.vector_lipschitz() * wt
                        + PROJECTOR_BUDGET * eps * full2.sqrt()
                        + 1e-9 * b.r;
                    if normal > rhs {
                        out.violation = Some(Error::StageInvariantViolated {
                            stage,
                            kind: StageViolation::RatioBudget,
                            measured: normal,
                            allowed: rhs,
                            net_index: b.net.indices[pos],
                        });
                        break;
                    }
                    if rhs > 0.0 {
                        out.margin1 = out.margin1.max(normal / rhs);
                    }
                } else {
                    // Cross-patch pair: the old point is at least a away (it
                    // sits outside B(w, 4a) while the new node is inside
                    // B(w, 3a)), and the normal gap obeys the absolute
                    // budget; both together force a tangential gap of a/2.
                    out.case2 += 1;
                    let full = full2.sqrt();
                    if full < a * (1.0 - 1e-9) {
                        out.violation = Some(Error::StageInvariantViolated {
                            stage,
                            kind: StageViolation::CrossPatchGap,
                            measured: full,
                            allowed: a,
                            net_index: b.net.indices[pos],
                        });
                        break;
                    }
                    if normal > cross_budget {
                        out.violation = Some(Error::StageInvariantViolated {
                            stage,
                            kind: StageViolation::CrossPatchGap,
                            measured: normal,
                            allowed: cross_budget,
                            net_index: b.net.indices[pos],
                        });
                        break;
                    }
                    if cross_budget <= 0.5 * a && tangd < 0.5 * a * (1.0 - 1e-9) {
                        out.violation = Some(Error::StageInvariantViolated {
                            stage,
                            kind: StageViolation::CrossPatchGap,
                            measured: tangd,
                            allowed: 0.5 * a,
                            net_index: b.net.indices[pos],
                        });
                        break;
                    }
                    out.margin2 = out.margin2.max(normal / cross_budget);
                }
            }
        }
        out
    });

    let mut record = StageRecord {
        stage,
        patches: class.len(),
        inserted,
        points_after: b.points.len() / n,
        max_data_ratio,
        ratio_budget: (slope_before + STAGE_BUDGET_STEP).max(BASE_RATIO_BUDGET),
        max_slope: 0.0,
        case1_pairs: 0,
        case2_pairs: 0,
        worst_case1_margin: 0.0,
        worst_case2_margin: 0.0,
        excluded_pairs: 0,
    };
    for local in locals {
        if let Some(e) = local.violation {
            return Err(e);
        }
        record.max_slope = record.max_slope.max(local.max_slope);
        record.case1_pairs += local.case1;
        record.case2_pairs += local.case2;
        record.worst_case1_margin = record.worst_case1_margin.max(local.margin1);
        record.worst_case2_margin = record.worst_case2_margin.max(local.margin2);
        record.excluded_pairs += local.excluded;
    }
    Ok(record)
}

/// Builds the full atlas: gates the resolution and the measured flatness,
/// fits and cross-checks the planes, runs one stage per color, and certifies
/// the result.
pub fn build_surface(cloud: &PointCloud, config: &RunConfig) -> Result<SurfaceAtlas> {
    let mut builder = SurfaceBuilder::new(cloud, config)?;
    while builder.stages_remaining() > 0 {
        build_stage(&mut builder)?;
    }
    builder.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{GeneratorSpec, ShapeKind};

    fn circle_cloud(m: usize, r0: f64) -> PointCloud {
        GeneratorSpec {
            shape: ShapeKind::Circle { m, radius: 1.0 },
            r0,
            noise: 0.0,
            seed: 0,
        }
        .generate()
        .unwrap()
    }

    fn loose_config() -> RunConfig {
        RunConfig {
            epsilon_budget: 0.5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn circle_build_completes_and_certifies() {
        let cloud = circle_cloud(4096, 0.5);
        let atlas = build_surface(&cloud, &loose_config()).unwrap();
        assert_eq!(atlas.state, AtlasState::Built);
        assert_eq!(atlas.patches.len(), atlas.net_len());
        assert!(atlas.certificates.graph_identity_sup <= atlas.certificates.graph_identity_tol);
        // The surface must hug the circle to a fraction of the scale.
        assert!(atlas.certificates.sup_sample_to_surface < 0.05 * atlas.r());
        assert!(atlas.certificates.sup_surface_to_sample < 0.05 * atlas.r());
    }

    #[test]
    fn flat_data_yields_tiny_certificates() {
        let spec = GeneratorSpec {
            shape: ShapeKind::Plane {
                n: 2,
                side: 513,
                extent: 1.6,
            },
            r0: 1.0,
            noise: 0.0,
            seed: 0,
        };
        let cloud = spec.generate().unwrap();
        let atlas = build_surface(&cloud, &RunConfig::default()).unwrap();
        // The one-sided fit is exact; the bilateral probe keeps an honest
        // floor of about half the sample spacing (plane-to-sample direction).
        assert!(atlas.fit_sup < 1e-9, "flat data fit: {}", atlas.fit_sup);
        assert!(atlas.epsilon_used < cloud.sample_gap() / cloud.r0());
        assert!(atlas.certificates.sup_sample_to_surface < 1e-9);
    }

    #[test]
    fn coarse_sampling_is_rejected() {
        let cloud = circle_cloud(64, 0.5);
        let err = build_surface(&cloud, &loose_config()).unwrap_err();
        assert!(matches!(err, Error::ResolutionTooCoarse { .. }));
    }

    #[test]
    fn rough_data_exceeds_flatness_budget() {
        let spec = GeneratorSpec {
            shape: ShapeKind::Plane {
                n: 2,
                side: 513,
                extent: 1.6,
            },
            r0: 1.0,
            noise: 0.08,
            seed: 7,
        };
        let cloud = spec.generate().unwrap();
        let err = build_surface(&cloud, &RunConfig::default()).unwrap_err();
        assert!(matches!(err, Error::FlatnessBudgetExceeded { .. }), "{err:?}");
    }

    #[test]
    fn stage_records_cover_every_color() {
        let cloud = circle_cloud(2048, 0.5);
        let atlas = build_surface(&cloud, &loose_config()).unwrap();
        // Stage 0 plus one record per color.
        assert_eq!(atlas.stages.len() as u32, atlas.net.color_count + 1);
        let inserted: usize = atlas.stages.iter().map(|s| s.inserted).sum();
        assert_eq!(atlas.points().len() / atlas.n(), atlas.net_len() + inserted);
        for s in &atlas.stages[1..] {
            assert!(s.patches > 0);
            assert!(s.worst_case1_margin <= 1.0 + 1e-9);
            assert!(s.worst_case2_margin <= 1.0 + 1e-9);
        }
    }
}
