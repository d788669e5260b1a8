//! Mollification of a built atlas into a certified smooth surface.
//!
//! Each patch graph is averaged over a fixed site lattice: sites s = pitch*z
//! carry the graph value, and the smooth value at t is the bump-weighted mean
//! of the sites within one kernel width of t. Because the sites stay put and
//! the bump is differentiable through its support boundary, the average is a
//! genuinely C^{power-1} function of t; a stencil that travels with the
//! evaluation point would merely average shifted copies of a Lipschitz
//! function and keep every kink. Site values are computed lazily and memoized
//! per worker, so the cost scales with the sites actually visited.
//!
//! `smooth_surface` rewrites the working point set one color class at a time
//! (same-color patches are half a scale apart, so their rewrite zones cannot
//! touch), blending each mollified graph back into the previous surface
//! across the annulus between the blend radii. It then re-measures both
//! approximation bounds against explicit allowances, audits the local graph
//! identity on a sample of net points, and certifies derivative sups per
//! order with a two-step consistency gap at the worst point.

use std::collections::HashMap;

use serde::Serialize;

use crate::config::{BLEND_INNER_FACTOR, BLEND_OUTER_FACTOR, RunConfig};
use crate::error::Error;
use crate::geometry::grid::PointGrid;
use crate::geometry::vecn;
use crate::oracle::{multi_indices, richardson_pair};
use crate::par;
use crate::surface::stage::{
    node_support_radius, node_supported, AtlasState, GraphPatch, PointOrigin, SurfaceAtlas,
    REL_SLACK,
};
use crate::Result;

/// Site lattice pitch as a fraction of the kernel width. Four sites per
/// width keeps the weight sum far from zero everywhere.
const SITE_PITCH_DIVISOR: f64 = 4.0;

/// Fine derivative step as a fraction of the kernel width; the consistency
/// partner uses twice this step. Small enough that the second-order stencil
/// error (which scales with the square of the step over the width) stays
/// well inside the consistency budget, large enough that rounding noise in
/// the divided differences stays negligible.
const FD_STEP_FACTOR: f64 = 0.0625;

/// Slope-measurement step as a fraction of the net gauge. Normals and offset
/// footprints differentiate across this span instead of the fine certificate
/// step: the rewritten point set carries seam offsets between neighboring
/// patch graphs, and a macro-scale difference divides that noise down while
/// a fine step would report the seams themselves.
const GRAD_STEP_FACTOR: f64 = 0.5;

/// Budget for the relative gap between the two derivative steps at the
/// sup-attaining point.
const RICHARDSON_TOL: f64 = 0.10;

/// Derivative sups whose normalized size falls below this are treated as
/// zero for the consistency gate: comparing two step sizes on pure rounding
/// noise would produce a meaningless ratio.
const LAMBDA_FLOOR: f64 = 1e-3;

/// How many net points the post-rewrite identity audit visits (evenly
/// strided; small atlases are audited in full).
const IDENTITY_AUDIT_CAP: usize = 200;

/// Vertical band, in graph-identity tolerances, within which an old point
/// counts as lying on the patch and is replaced by the rewrite. Points
/// further out belong to a different sheet of the input and must survive.
const REMOVE_BAND_FACTOR: f64 = 3.0;

/// Highest supported certificate order; stencil spans and bump powers grow
/// past usefulness beyond this.
const K_MAX_LIMIT: usize = 6;

/// Key packing supports this many graph dimensions (21 bits per axis).
const KEY_DIM_LIMIT: usize = 6;

/// Origin stage tag for points written by the smoothing rewrite.
pub const SMOOTH_STAGE: u32 = u32::MAX;

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Resolved absolute lengths and exponents for one smoothing run.
#[derive(Debug, Clone, Copy)]
pub struct SmoothParams {
    /// Kernel width (absolute length).
    pub width: f64,
    /// Site lattice pitch (absolute length).
    pub pitch: f64,
    /// Bump exponent; the mollified graph is C^{power-1}.
    pub power: i32,
    /// Inside this tangential radius the surface is the mollified graph.
    pub blend_inner: f64,
    /// Outside this tangential radius the previous surface is kept.
    pub blend_outer: f64,
    /// Fine derivative step (absolute length).
    pub fd_step: f64,
    /// Macro slope step for normals and offset footprints (absolute length).
    pub grad_step: f64,
    /// Consistency budget for the two-step derivative gap.
    pub richardson_tol: f64,
}

impl SmoothParams {
    /// Derives the absolute lengths from the net gauge and the run
    /// configuration, rejecting combinations the evaluator cannot certify.
    pub fn from_config(a: f64, config: &RunConfig) -> Result<SmoothParams> {
        let f = config.kernel_width_factor;
        if !f.is_finite() || f <= 0.0 || f > 0.5 {
            return Err(Error::InvalidInput(format!(
                "kernel width factor must be in (0, 0.5], got {f}"
            )));
        }
        if config.k_max == 0 || config.k_max > K_MAX_LIMIT {
            return Err(Error::InvalidInput(format!(
                "certified derivative order must be in 1..={K_MAX_LIMIT}, got {}",
                config.k_max
            )));
        }
        let width = f * a;
        let pitch = width / SITE_PITCH_DIVISOR;
        if pitch > width / 2.0 {
            return Err(Error::GridTooCoarse {
                pitch,
                kernel_width: width,
            });
        }
        Ok(SmoothParams {
            width,
            pitch,
            power: (config.k_max + 2) as i32,
            blend_inner: BLEND_INNER_FACTOR * a,
            blend_outer: BLEND_OUTER_FACTOR * a,
            fd_step: FD_STEP_FACTOR * width,
            grad_step: GRAD_STEP_FACTOR * a,
            richardson_tol: RICHARDSON_TOL,
        })
    }
}

// ---------------------------------------------------------------------------
// lazy site table
// ---------------------------------------------------------------------------

/// Memoized graph values on the site lattice of one patch. Each worker owns
/// its own cache, so lookups never synchronize.
#[derive(Debug, Default)]
pub struct SiteCache {
    map: HashMap<u128, u32>,
    vals: Vec<f64>,
}

impl SiteCache {
    pub fn new() -> SiteCache {
        SiteCache::default()
    }

    /// Number of memoized sites.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Drops the memoized values (for reuse across patches).
    pub fn clear(&mut self) {
        self.map.clear();
        self.vals.clear();
    }
}

/// Packs a lattice index into a single key; 21 bits per axis.
fn pack_key(z: &[i64]) -> u128 {
    let mut key = 0u128;
    for &zi in z {
        debug_assert!(zi.unsigned_abs() < (1 << 20), "site index out of range");
        key = (key << 21) | (((zi + (1 << 20)) as u128) & 0x1F_FFFF);
    }
    key
}

// ---------------------------------------------------------------------------
// mollified evaluator
// ---------------------------------------------------------------------------

/// Smooth view of one patch: Shepard average of the patch graph over the
/// site lattice, plus the blend back into the unsmoothed graph.
pub struct SmoothPatch<'a> {
    patch: &'a GraphPatch,
    params: SmoothParams,
}

impl<'a> SmoothPatch<'a> {
    pub fn new(patch: &'a GraphPatch, params: SmoothParams) -> SmoothPatch<'a> {
        SmoothPatch { patch, params }
    }

    /// Graph value at a lattice site, memoized.
    fn site_value_index(&self, cache: &mut SiteCache, z: &[i64]) -> u32 {
        let key = pack_key(z);
        let m = self.patch.graph.codim();
        let SiteCache { map, vals } = cache;
        *map.entry(key).or_insert_with(|| {
            let s: Vec<f64> = z.iter().map(|&zi| zi as f64 * self.params.pitch).collect();
            let start = vals.len();
            vals.resize(start + m, 0.0);
            self.patch.graph.eval(&s, &mut vals[start..]);
            (start / m) as u32
        })
    }

    /// Mollified graph value at tangential coordinates t.
    pub fn eval(&self, t: &[f64], cache: &mut SiteCache, out: &mut [f64]) {
        let d = self.patch.graph.dim();
        let m = self.patch.graph.codim();
        debug_assert_eq!(t.len(), d);
        debug_assert_eq!(out.len(), m);
        let w = self.params.width;
        let pitch = self.params.pitch;
        let inv_w2 = 1.0 / (w * w);

        let mut lo = vec![0i64; d];
        let mut hi = vec![0i64; d];
        for i in 0..d {
            lo[i] = ((t[i] - w) / pitch).ceil() as i64;
            hi[i] = ((t[i] + w) / pitch).floor() as i64;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut wsum = 0.0;
        let mut z = lo.clone();
        'outer: loop {
            let mut rho2 = 0.0;
            for i in 0..d {
                let dt = z[i] as f64 * pitch - t[i];
                rho2 += dt * dt;
            }
            rho2 *= inv_w2;
            if rho2 < 1.0 {
                let weight = (1.0 - rho2).powi(self.params.power);
                let idx = self.site_value_index(cache, &z) as usize;
                let vals = &cache.vals[idx * m..idx * m + m];
                for (o, v) in out.iter_mut().zip(vals) {
                    *o += weight * v;
                }
                wsum += weight;
            }
            for i in 0..d {
                if z[i] < hi[i] {
                    z[i] += 1;
                    continue 'outer;
                }
                z[i] = lo[i];
            }
            break;
        }
        debug_assert!(wsum > 0.0, "site lattice must cover the kernel support");
        let inv = 1.0 / wsum;
        out.iter_mut().for_each(|o| *o *= inv);
    }

    /// Value of the rewritten surface over t: the mollified graph inside the
    /// inner blend radius, the original graph outside the outer one, and a
    /// smooth mix in between.
    pub fn blended(&self, t: &[f64], cache: &mut SiteCache, out: &mut [f64]) {
        let s2 = vecn::dot(t, t);
        let inner = self.params.blend_inner;
        let outer = self.params.blend_outer;
        if s2 <= inner * inner {
            self.eval(t, cache, out);
        } else if s2 >= outer * outer {
            self.patch.graph.eval(t, out);
        } else {
            self.eval(t, cache, out);
            let mut old = vec![0.0; out.len()];
            self.patch.graph.eval(t, &mut old);
            let u = (s2.sqrt() - inner) / (outer - inner);
            let chi = 1.0 - smoothstep(self.params.power as usize, u);
            for (o, g) in out.iter_mut().zip(&old) {
                *o = chi * *o + (1.0 - chi) * g;
            }
        }
    }
}

/// Polynomial step of the given order: 0 at 0, 1 at 1, with the first
/// `order` derivatives vanishing at both ends.
pub fn smoothstep(order: usize, x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    let n = order;
    let mut sum = 0.0;
    let mut xpow = 1.0;
    for k in 0..=n {
        sum += binom(n + k, k) * binom(2 * n + 1, n - k) * xpow;
        xpow *= -x;
    }
    x.powi(n as i32 + 1) * sum
}

fn binom(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

// ---------------------------------------------------------------------------
// certificates
// ---------------------------------------------------------------------------

/// Measured sup of one derivative order over the net, with its two-step
/// consistency gap at the attaining point.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeCertificate {
    /// Total derivative order.
    pub order: usize,
    /// Largest finite-difference magnitude (fine step) over all net points,
    /// multi-indices of this order, and value components.
    pub sup: f64,
    /// `sup` made dimensionless: sup * r^(order-1) / eps.
    pub lambda: f64,
    /// Fine step used.
    pub step: f64,
    /// Relative gap between the fine and doubled step at the attaining
    /// point; zero when the sup itself is negligible.
    pub consistency_gap: f64,
    /// Net position attaining the sup.
    pub worst_net: usize,
    /// Multi-index attaining the sup.
    pub alpha: Vec<usize>,
}

/// Everything `smooth_surface` measured and enforced.
#[derive(Debug, Clone, Serialize)]
pub struct SmoothingRecord {
    /// Kernel width (absolute length).
    pub width: f64,
    /// Site lattice pitch.
    pub site_pitch: f64,
    /// Bump exponent.
    pub power: usize,
    /// Blend radii (absolute lengths).
    pub blend_inner: f64,
    pub blend_outer: f64,
    /// Rewrite volume.
    pub nodes_inserted: usize,
    pub points_removed: usize,
    /// Sup distance from the samples to the rewritten surface, and the
    /// allowance it was gated against.
    pub sup_sample_to_surface: f64,
    pub allowed_sample_to_surface: f64,
    /// Sup distance from the rewritten point set to the samples, and its
    /// allowance.
    pub sup_surface_to_sample: f64,
    pub allowed_surface_to_sample: f64,
    /// The two sups normalized by eps * r.
    pub c0_sample_to_surface: f64,
    pub c0_surface_to_sample: f64,
    /// Post-rewrite graph identity audit: worst residual of a rewritten
    /// point against the blended graph of a nearby net point.
    pub identity_sup: f64,
    pub identity_allowed: f64,
    pub identity_audited: usize,
    /// Consistency budget in force for the derivative gates.
    pub richardson_tol: f64,
    /// One certificate per order 1..=k_max.
    pub derivatives: Vec<DerivativeCertificate>,
}

// ---------------------------------------------------------------------------
// the smoothing pass
// ---------------------------------------------------------------------------

/// Output of one patch rewrite, merged sequentially per color.
struct RewriteOut {
    remove: Vec<usize>,
    insert: Vec<f64>,
}

/// Replaces the surface near every patch center by its mollified graph,
/// re-certifies the approximation bounds, and certifies derivative sups.
/// The atlas keeps its built certificates; the returned record (also stored
/// on the atlas) holds the post-smoothing measurements.
pub fn smooth_surface(atlas: &mut SurfaceAtlas, config: &RunConfig) -> Result<SmoothingRecord> {
    if atlas.state == AtlasState::Smoothed {
        return Err(Error::InvalidInput(
            "surface is already smoothed".to_string(),
        ));
    }
    let d = atlas.d();
    if d > KEY_DIM_LIMIT {
        return Err(Error::InvalidInput(format!(
            "smoothing supports graph dimension up to {KEY_DIM_LIMIT}, got {d}"
        )));
    }
    let params = SmoothParams::from_config(atlas.a(), config)?;
    let n = atlas.n();
    let net_len = atlas.net_len();
    let vlip_max = atlas
        .patches
        .iter()
        .map(|p| p.graph.vector_lipschitz())
        .fold(0.0f64, f64::max);

    // ---- rewrite the point set, one color class at a time ----------------
    let band = REMOVE_BAND_FACTOR * atlas.tol_graph();
    let delta = atlas.insert_gap;
    let mut nodes_inserted = 0usize;
    let mut points_removed = 0usize;
    for color in 0..atlas.net.color_count {
        let members: Vec<usize> = (0..net_len)
            .filter(|&pos| atlas.net.colors[pos] == color)
            .collect();
        let outs: Vec<RewriteOut> = par::map_indexed(members.len(), |k| {
            rewrite_patch(atlas, members[k], params, band, delta)
        });
        let count = atlas.points.len() / n;
        let mut keep = vec![true; count];
        for out in &outs {
            for &i in &out.remove {
                keep[i] = false;
            }
        }
        let mut new_points = Vec::with_capacity(atlas.points.len());
        let mut new_origins = Vec::with_capacity(count);
        for i in 0..count {
            if keep[i] {
                new_points.extend_from_slice(&atlas.points[i * n..(i + 1) * n]);
                new_origins.push(atlas.origins[i]);
            } else {
                points_removed += 1;
            }
        }
        for (k, out) in outs.iter().enumerate() {
            let added = out.insert.len() / n;
            nodes_inserted += added;
            new_points.extend_from_slice(&out.insert);
            new_origins.extend(std::iter::repeat_n(
                PointOrigin {
                    stage: SMOOTH_STAGE,
                    patch: members[k] as u32,
                },
                added,
            ));
        }
        atlas.points = new_points;
        atlas.origins = new_origins;
        atlas.points_grid =
            PointGrid::from_flat(n, atlas.points_grid.cell_size(), &atlas.points);
    }

    // ---- re-measure both approximation bounds ----------------------------
    // Samples against the rewritten surface, each through its nearest patch.
    let cloud_len = atlas.samples().len() / n;
    let assign: Vec<usize> = par::map_indexed(cloud_len, |i| {
        atlas.nearest_patch(&atlas.samples()[i * n..(i + 1) * n])
    });
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); net_len];
    for (i, &pos) in assign.iter().enumerate() {
        buckets[pos].push(i as u32);
    }
    let per_patch: Vec<(f64, usize)> = par::map_indexed(net_len, |pos| {
        let sp = SmoothPatch::new(&atlas.patches[pos], params);
        let mut cache = SiteCache::new();
        let mut val = vec![0.0; n - d];
        let mut worst = (0.0f64, 0usize);
        for &i in &buckets[pos] {
            let y = &atlas.samples()[i as usize * n..(i as usize + 1) * n];
            let (t, h) = atlas.patches[pos].local_coords(y);
            sp.blended(&t, &mut cache, &mut val);
            let dist = vecn::dist(&val, &h);
            if dist >= worst.0 {
                worst = (dist, i as usize);
            }
        }
        worst
    });
    let mut sup_14 = 0.0f64;
    let mut worst_sample = 0usize;
    for (v, i) in &per_patch {
        if *v > sup_14 {
            sup_14 = *v;
            worst_sample = *i;
        }
    }
    // Allowance: twice the built bound plus the largest possible mollifier
    // shift (a weighted average over one kernel width moves a point by at
    // most the vector Lipschitz constant times the width).
    let built = &atlas.certificates;
    let allowed_14 =
        2.0 * built.sup_sample_to_surface + 2.0 * vlip_max * params.width + REL_SLACK * atlas.r();
    if sup_14 > allowed_14 {
        return Err(Error::CertificateViolated {
            name: "smooth-sample-to-surface",
            measured: sup_14,
            allowed: allowed_14,
            index: worst_sample,
        });
    }

    // The rewritten point set against the samples. Nodes the build-time
    // deduplication dropped are present now, so the allowance also carries
    // half a node spacing.
    let point_count = atlas.points.len() / n;
    let (worst_node, sup_15) = par::max_indexed(point_count, |i| {
        atlas.cloud_grid.distance_to(atlas.point(i))
    });
    let allowed_15 = 2.0 * built.sup_surface_to_sample
        + 2.0 * vlip_max * params.width
        + 0.5 * delta
        + REL_SLACK * atlas.r();
    if sup_15 > allowed_15 {
        return Err(Error::CertificateViolated {
            name: "smooth-surface-to-sample",
            measured: sup_15,
            allowed: allowed_15,
            index: worst_node,
        });
    }

    // ---- identity audit ---------------------------------------------------
    let stride = net_len.div_ceil(IDENTITY_AUDIT_CAP).max(1);
    let audited: Vec<usize> = (0..net_len).step_by(stride).collect();
    let ball = 2.0 * atlas.a() * (1.0 + REL_SLACK);
    let audit: Vec<f64> = par::map_indexed(audited.len(), |k| {
        let pos = audited[k];
        let patch = &atlas.patches[pos];
        let sp = SmoothPatch::new(patch, params);
        let mut cache = SiteCache::new();
        let mut val = vec![0.0; n - d];
        let mut worst = 0.0f64;
        for i in atlas.points_grid.query_ball(atlas.net_point(pos), ball) {
            let (t, h) = patch.local_coords(atlas.point(i));
            sp.blended(&t, &mut cache, &mut val);
            worst = worst.max(vecn::dist(&val, &h));
        }
        worst
    });
    let mut identity_sup = 0.0f64;
    let mut worst_audit = 0usize;
    for (k, v) in audit.iter().enumerate() {
        if *v > identity_sup {
            identity_sup = *v;
            worst_audit = audited[k];
        }
    }
    let identity_allowed = atlas.tol_graph() + 2.0 * vlip_max * params.width;
    if identity_sup > identity_allowed {
        return Err(Error::CertificateViolated {
            name: "smooth-graph-identity",
            measured: identity_sup,
            allowed: identity_allowed,
            index: atlas.net.indices[worst_audit],
        });
    }

    // ---- derivative certificates ------------------------------------------
    let derivatives = certify_derivatives(atlas, params, config.k_max)?;

    let denom = atlas.eps_eff() * atlas.r();
    let record = SmoothingRecord {
        width: params.width,
        site_pitch: params.pitch,
        power: params.power as usize,
        blend_inner: params.blend_inner,
        blend_outer: params.blend_outer,
        nodes_inserted,
        points_removed,
        sup_sample_to_surface: sup_14,
        allowed_sample_to_surface: allowed_14,
        sup_surface_to_sample: sup_15,
        allowed_surface_to_sample: allowed_15,
        c0_sample_to_surface: sup_14 / denom,
        c0_surface_to_sample: sup_15 / denom,
        identity_sup,
        identity_allowed,
        identity_audited: audited.len(),
        richardson_tol: params.richardson_tol,
        derivatives,
    };
    atlas.smoothing = Some(record.clone());
    atlas.state = AtlasState::Smoothed;
    Ok(record)
}

/// One patch rewrite: which old points its zone absorbs and which blended
/// nodes replace them. Reads the pre-color snapshot only.
fn rewrite_patch(
    atlas: &SurfaceAtlas,
    pos: usize,
    params: SmoothParams,
    band: f64,
    delta: f64,
) -> RewriteOut {
    let patch = &atlas.patches[pos];
    let n = atlas.n();
    let d = atlas.d();
    let outer = params.blend_outer;
    let outer2 = outer * outer * (1.0 + REL_SLACK);
    let vlip = patch.graph.vector_lipschitz();

    // Old points inside the cylinder and vertically on the graph. Their
    // footprints double as the support set for the insertion lattice.
    let support = node_support_radius(atlas.insert_gap, atlas.sample_gap);
    let query = outer * (1.0 + vlip * vlip).sqrt() + band + atlas.tol_graph() + support;
    let mut remove = Vec::new();
    let mut footprints = Vec::new();
    let mut f = vec![0.0; n - d];
    for i in atlas.points_grid.query_ball(&patch.center, query) {
        let (t, h) = patch.local_coords(atlas.point(i));
        footprints.extend_from_slice(&t);
        if vecn::dot(&t, &t) <= outer2 {
            patch.graph.eval(&t, &mut f);
            if vecn::dist(&f, &h) <= band {
                remove.push(i);
            }
        }
    }

    // Blended nodes on the insertion lattice, where current points back them.
    let sp = SmoothPatch::new(patch, params);
    let mut cache = SiteCache::new();
    let mut insert = Vec::new();
    let steps = (outer / delta + 1e-9).floor() as i64;
    let mut idx = vec![-steps; d];
    let mut t = vec![0.0; d];
    let mut val = vec![0.0; n - d];
    'outer: loop {
        for (ti, ki) in t.iter_mut().zip(&idx) {
            *ti = *ki as f64 * delta;
        }
        if vecn::dot(&t, &t) <= outer2 && node_supported(&footprints, &t, support) {
            sp.blended(&t, &mut cache, &mut val);
            insert.extend_from_slice(&patch.embed_local(&t, &val));
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
    RewriteOut { remove, insert }
}

/// Finite-difference sups per order over every net point, gated by the
/// two-step consistency gap at the attaining point. Taken at the patch
/// centers, where the rewritten surface is the pure mollified graph.
fn certify_derivatives(
    atlas: &SurfaceAtlas,
    params: SmoothParams,
    k_max: usize,
) -> Result<Vec<DerivativeCertificate>> {
    let d = atlas.d();
    let m = atlas.n() - d;
    let net_len = atlas.net_len();
    let alphas: Vec<Vec<Vec<usize>>> = (1..=k_max).map(|k| multi_indices(d, k)).collect();
    let t0 = vec![0.0; d];

    // Per net point, per order: (sup |fd|, gap at that sup, multi-index id).
    let locals: Vec<Vec<(f64, f64, usize)>> = par::map_indexed(net_len, |pos| {
        let sp = SmoothPatch::new(&atlas.patches[pos], params);
        let mut cache = SiteCache::new();
        let mut buf = vec![0.0; m];
        let mut per_order = Vec::with_capacity(k_max);
        for order_alphas in &alphas {
            let mut best = (0.0f64, 0.0f64, 0usize);
            for (aid, alpha) in order_alphas.iter().enumerate() {
                for c in 0..m {
                    let mut f = |t: &[f64]| {
                        sp.eval(t, &mut cache, &mut buf);
                        buf[c]
                    };
                    let (fine, coarse, gap) = richardson_pair(&mut f, &t0, params.fd_step, alpha);
                    let mag = fine.abs().max(coarse.abs());
                    if mag >= best.0 {
                        best = (mag, gap, aid);
                    }
                }
            }
            per_order.push(best);
        }
        per_order
    });

    let eps = atlas.eps_eff();
    let r = atlas.r();
    let mut certs = Vec::with_capacity(k_max);
    for (ki, order_alphas) in alphas.iter().enumerate() {
        let order = ki + 1;
        let mut sup = 0.0f64;
        let mut gap = 0.0f64;
        let mut worst_net = 0usize;
        let mut alpha_id = 0usize;
        for (pos, per_order) in locals.iter().enumerate() {
            let (v, g, aid) = per_order[ki];
            if v > sup {
                sup = v;
                gap = g;
                worst_net = pos;
                alpha_id = aid;
            }
        }
        if !sup.is_finite() {
            return Err(Error::DerivativeBudgetExceeded {
                order,
                measured: sup,
                budget: f64::MAX,
                net_index: atlas.net.indices[worst_net],
            });
        }
        let lambda = sup * r.powi(order as i32 - 1) / eps;
        if lambda >= LAMBDA_FLOOR && gap > params.richardson_tol {
            return Err(Error::DerivativeBudgetExceeded {
                order,
                measured: gap,
                budget: params.richardson_tol,
                net_index: atlas.net.indices[worst_net],
            });
        }
        certs.push(DerivativeCertificate {
            order,
            sup,
            lambda,
            step: params.fd_step,
            consistency_gap: gap,
            worst_net,
            alpha: order_alphas[alpha_id].clone(),
        });
    }
    Ok(certs)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{build_surface, lipschitz_extend};
    use crate::synth::{GeneratorSpec, ShapeKind};

    fn params_for_tests(a: f64) -> SmoothParams {
        SmoothParams::from_config(a, &RunConfig::default()).unwrap()
    }

    /// Splitmix-style generator for reproducible scatter.
    fn next_unit(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn patch_from_values(
        sites: Vec<f64>,
        values: Vec<f64>,
        d: usize,
        m: usize,
        lipschitz: f64,
    ) -> GraphPatch {
        let n = d + m;
        let graph = lipschitz_extend(sites, values, d, m, lipschitz, 1.0).unwrap();
        let mut frame = Vec::new();
        for i in 0..d {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            frame.push(e);
        }
        let mut normals = Vec::new();
        for i in d..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            normals.push(e);
        }
        GraphPatch {
            net_pos: 0,
            cloud_index: 0,
            stage: 1,
            center: vec![0.0; n],
            plane: crate::geometry::AffinePlane {
                base: vec![0.0; n],
                frame,
            },
            normals,
            radius: 1.0,
            graph,
        }
    }

    #[test]
    fn smoothstep_is_monotone_symmetric_and_flat_at_ends() {
        let n = 5;
        assert_eq!(smoothstep(n, 0.0), 0.0);
        assert!((smoothstep(n, 1.0) - 1.0).abs() < 1e-12);
        let mut prev = 0.0;
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let v = smoothstep(n, x);
            assert!(v + 1e-12 >= prev, "monotone at {x}");
            let mirror = smoothstep(n, 1.0 - x);
            assert!((v + mirror - 1.0).abs() < 1e-12, "symmetry at {x}");
            prev = v;
        }
        // Flat ends: the value scales like x^(order+1) near zero.
        let h = 1e-2;
        assert!(smoothstep(n, h) / h < 1e-7);
    }

    #[test]
    fn shepard_reproduces_constants_everywhere() {
        let d = 2;
        let mut state = 42u64;
        let mut sites = Vec::new();
        for _ in 0..60 {
            sites.push(next_unit(&mut state) * 2.0 - 1.0);
            sites.push(next_unit(&mut state) * 2.0 - 1.0);
        }
        let values = vec![0.375; sites.len() / d];
        let patch = patch_from_values(sites, values, d, 1, 1.0);
        let params = params_for_tests(0.25);
        let sp = SmoothPatch::new(&patch, params);
        let mut cache = SiteCache::new();
        let mut out = [0.0];
        for _ in 0..25 {
            let t = [
                next_unit(&mut state) * 0.8 - 0.4,
                next_unit(&mut state) * 0.8 - 0.4,
            ];
            sp.eval(&t, &mut cache, &mut out);
            assert!((out[0] - 0.375).abs() < 1e-13, "constant at {t:?}: {}", out[0]);
        }
    }

    #[test]
    fn mollified_shift_is_bounded_by_width_times_slope() {
        let d = 2;
        let mut state = 7u64;
        let mut sites = Vec::new();
        let mut values = Vec::new();
        for _ in 0..120 {
            let x = next_unit(&mut state) * 2.0 - 1.0;
            let y = next_unit(&mut state) * 2.0 - 1.0;
            sites.push(x);
            sites.push(y);
            // Lipschitz-1-ish wavy data.
            values.push(0.3 * (2.0 * x).sin() + 0.2 * (3.0 * y).cos());
        }
        let patch = patch_from_values(sites, values, d, 1, 2.0);
        let params = params_for_tests(0.25);
        let vlip = patch.graph.vector_lipschitz();
        let sp = SmoothPatch::new(&patch, params);
        let mut cache = SiteCache::new();
        let mut out = [0.0];
        let mut direct = [0.0];
        for _ in 0..40 {
            let t = [
                next_unit(&mut state) * 0.8 - 0.4,
                next_unit(&mut state) * 0.8 - 0.4,
            ];
            sp.eval(&t, &mut cache, &mut out);
            patch.graph.eval(&t, &mut direct);
            let shift = (out[0] - direct[0]).abs();
            assert!(
                shift <= vlip * params.width * (1.0 + 1e-9),
                "shift {shift} exceeds {} at {t:?}",
                vlip * params.width
            );
        }
    }

    #[test]
    fn circle_smooth_end_to_end() {
        let cloud = GeneratorSpec {
            shape: ShapeKind::Circle { m: 2048, radius: 1.0 },
            r0: 0.5,
            noise: 0.0,
            seed: 0,
        }
        .generate()
        .unwrap();
        let config = RunConfig {
            epsilon_budget: 0.5,
            ..RunConfig::default()
        };
        let mut atlas = build_surface(&cloud, &config).unwrap();
        let record = smooth_surface(&mut atlas, &config).unwrap();
        assert_eq!(atlas.state, AtlasState::Smoothed);
        assert!(record.nodes_inserted > 0);
        assert!(record.points_removed > 0);
        assert!(record.sup_sample_to_surface <= record.allowed_sample_to_surface);
        assert!(record.sup_surface_to_sample <= record.allowed_surface_to_sample);
        assert!(record.identity_sup <= record.identity_allowed);
        assert_eq!(record.derivatives.len(), config.k_max);
        for cert in &record.derivatives {
            assert!(cert.sup.is_finite());
            assert!(cert.lambda >= 0.0);
            assert!(
                cert.lambda < LAMBDA_FLOOR || cert.consistency_gap <= record.richardson_tol,
                "order {} gap {}",
                cert.order,
                cert.consistency_gap
            );
        }
    }

    #[test]
    fn smoothing_twice_is_rejected() {
        let cloud = GeneratorSpec {
            shape: ShapeKind::Circle { m: 2048, radius: 1.0 },
            r0: 0.5,
            noise: 0.0,
            seed: 0,
        }
        .generate()
        .unwrap();
        let config = RunConfig {
            epsilon_budget: 0.5,
            ..RunConfig::default()
        };
        let mut atlas = build_surface(&cloud, &config).unwrap();
        smooth_surface(&mut atlas, &config).unwrap();
        let err = smooth_surface(&mut atlas, &config).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn flat_plane_smooths_to_machine_precision() {
        let cloud = GeneratorSpec {
            shape: ShapeKind::Plane {
                n: 2,
                side: 513,
                extent: 1.6,
            },
            r0: 1.0,
            noise: 0.0,
            seed: 0,
        }
        .generate()
        .unwrap();
        let config = RunConfig::default();
        let mut atlas = build_surface(&cloud, &config).unwrap();
        let record = smooth_surface(&mut atlas, &config).unwrap();
        assert!(
            record.sup_sample_to_surface < 1e-12 * atlas.r(),
            "flat rewrite moved the surface: {}",
            record.sup_sample_to_surface
        );
        for cert in &record.derivatives {
            assert!(
                cert.lambda < LAMBDA_FLOOR,
                "flat data produced order-{} lambda {}",
                cert.order,
                cert.lambda
            );
        }
    }
}
