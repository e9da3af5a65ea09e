//! Invariant-manifold tracing in the full four-dimensional flow:
//! one-dimensional branches by eigen-shooting, section traces of the
//! two-dimensional manifolds from seed loops, transverse-connection and
//! tangency detection, and Gauss linking numbers of closed loops.
//!
//! Stable objects are traced by integrating the time-reversed field forward.
//! Two-dimensional manifolds are represented by seed loops rather than grown
//! meshes; every question asked of them here reduces to section traces.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geom::{
    cross3, dist4, dot3, norm3, norm4, normalize4, scale4, sub3, sub4, wrap_angle, Vec3,
};
use crate::integrator::{
    integrate_system, Direction, EventSpec, IntegrateError, IntegratorOptions, ModelField,
    SectionEvent,
};
use crate::model::{Equilibrium, ModelParams, NodeLabel, StateR4};
use crate::sections::{SectionGeometry, WallPoint};

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("trajectory escaped the sphere neighbourhood (drift {0:.3e})")]
    EscapedSphere(f64),
    #[error("branch did not reach the target equilibrium within the time budget")]
    NoConvergence,
    #[error("no fold point found on the traced curve (resolution {0} seeds)")]
    FoldNotFound(usize),
    #[error("curves too close for the Gauss sum: min distance {min_dist:.3e} vs segment scale {seg:.3e}")]
    CurvesTooClose { min_dist: f64, seg: f64 },
    #[error("Gauss sum residual {0:.3} exceeds 0.1; curves under-resolved or touching")]
    NonIntegerLinking(f64),
    #[error("empty or degenerate input curve")]
    DegenerateCurve,
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

/// Canonical cross-sections: the walls and top discs of the two cylindrical
/// blocks. "Upper"/"lower" distinguishes the two top discs (x3 = +/- height),
/// matching the two connection branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SectionTarget {
    /// Wall of the cylinder around v, flow entering.
    VWallIn,
    /// Upper top disc of V, flow exiting.
    VTopOutUpper,
    /// Lower top disc of V, flow exiting.
    VTopOutLower,
    /// Upper top disc of W, flow entering.
    WTopInUpper,
    /// Lower top disc of W, flow entering.
    WTopInLower,
    /// Wall of the cylinder around w, flow exiting.
    WWallOut,
}

/// A section target bound to a concrete chart geometry.
#[derive(Debug, Clone, Copy)]
pub struct SectionDef {
    pub target: SectionTarget,
    pub geom: SectionGeometry,
}

impl SectionDef {
    pub fn new(target: SectionTarget, geom: SectionGeometry) -> Self {
        SectionDef { target, geom }
    }

    pub fn node(&self) -> NodeLabel {
        match self.target {
            SectionTarget::VWallIn | SectionTarget::VTopOutUpper | SectionTarget::VTopOutLower => {
                NodeLabel::V
            }
            _ => NodeLabel::W,
        }
    }

    pub fn surface_value(&self, x: &StateR4) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let rad = self.geom.chart_radius;
        let h = self.geom.chart_height;
        match self.target {
            SectionTarget::VWallIn | SectionTarget::WWallOut => r2 - rad * rad,
            SectionTarget::VTopOutUpper | SectionTarget::WTopInUpper => x[2] - h,
            SectionTarget::VTopOutLower | SectionTarget::WTopInLower => x[2] + h,
        }
    }

    pub fn gate(&self, x: &StateR4) -> bool {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let rad = self.geom.chart_radius;
        let h = self.geom.chart_height;
        let near = match self.node() {
            NodeLabel::V => x[3] > 0.5,
            NodeLabel::W => x[3] < -0.5,
        };
        match self.target {
            SectionTarget::VWallIn | SectionTarget::WWallOut => near && x[2].abs() <= h * 1.0001,
            _ => near && r2 <= rad * rad * 1.0001,
        }
    }

    /// Crossing direction of the forward flow; flips under time reversal.
    pub fn direction(&self, reversed: bool) -> Direction {
        let fwd = match self.target {
            SectionTarget::VWallIn => Direction::Decreasing,
            SectionTarget::WWallOut => Direction::Increasing,
            SectionTarget::VTopOutUpper => Direction::Increasing,
            SectionTarget::VTopOutLower => Direction::Decreasing,
            SectionTarget::WTopInUpper => Direction::Decreasing,
            SectionTarget::WTopInLower => Direction::Increasing,
        };
        if reversed {
            match fwd {
                Direction::Increasing => Direction::Decreasing,
                Direction::Decreasing => Direction::Increasing,
                Direction::Both => Direction::Both,
            }
        } else {
            fwd
        }
    }
}

/// One located crossing of a seed trajectory with a section.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CrossPoint {
    /// Angular position of the seed on its loop (radians), or 0 for shots.
    pub seed_angle: f64,
    /// Time of flight from the seed.
    pub t: f64,
    pub state: StateR4,
}

/// Tracing knobs shared by the manifold operations.
#[derive(Debug, Clone, Copy)]
pub struct ManifoldOptions {
    pub n_seeds: usize,
    /// Offset of the seeds from the equilibrium along the eigen-space.
    pub seed_offset: f64,
    pub integrator: IntegratorOptions,
    pub geometry: SectionGeometry,
    /// Time budget per seed trajectory.
    pub t_cap: f64,
}

impl Default for ManifoldOptions {
    fn default() -> Self {
        ManifoldOptions {
            n_seeds: 256,
            seed_offset: 1e-6,
            integrator: IntegratorOptions {
                rel_tol: 1e-9,
                abs_tol: 1e-11,
                max_step: 0.5,
                renormalize: true,
                max_time: 1e6,
            },
            geometry: SectionGeometry::default(),
            t_cap: 400.0,
        }
    }
}

/// Flow from `x0`, skipping `skip` crossings of the section and returning the
/// next one, or None if the time budget runs out first.
pub fn cross_section(
    p: &ModelParams,
    x0: &StateR4,
    def: &SectionDef,
    reversed: bool,
    skip: usize,
    opts: &ManifoldOptions,
) -> Result<Option<CrossPoint>, ManifoldError> {
    let surf = |x: &StateR4| def.surface_value(x);
    let gate = |x: &StateR4| def.gate(x);
    let ev = EventSpec::new(&surf, def.direction(reversed)).with_gate(&gate);
    let mut hit: Option<SectionEvent<4>> = None;
    let mut count = 0usize;
    let mut stop = |e: &SectionEvent<4>| {
        count += 1;
        if count > skip {
            hit = Some(*e);
            true
        } else {
            false
        }
    };
    let field = ModelField {
        params: *p,
        reversed,
    };
    let proj = |x: &mut StateR4| *x = normalize4(x);
    let post: Option<&(dyn Fn(&mut StateR4) + Sync)> = if opts.integrator.renormalize {
        Some(&proj)
    } else {
        None
    };
    integrate_system(
        &field,
        *x0,
        (0.0, opts.t_cap),
        &opts.integrator,
        std::slice::from_ref(&ev),
        post,
        Some(&mut stop),
    )?;
    Ok(hit.map(|e| CrossPoint {
        seed_angle: 0.0,
        t: e.t,
        state: e.state,
    }))
}

/// Seed loop of `n` points at offset `delta` in the (x1, x2) eigen-plane of
/// the given equilibrium, projected to the sphere.
pub fn seed_loop(eq: &Equilibrium, delta: f64, n: usize) -> Vec<(f64, StateR4)> {
    (0..n)
        .map(|i| {
            let psi = std::f64::consts::TAU * (i as f64) / (n as f64);
            let (s, c) = psi.sin_cos();
            let mut x = eq.location;
            x[0] += delta * c;
            x[1] += delta * s;
            (psi, normalize4(&x))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ManifoldDirection {
    Stable,
    Unstable,
}

/// One branch of a one-dimensional invariant manifold.
#[derive(Debug, Clone)]
pub struct Branch1D {
    /// Sign of the x3 eigen-direction the branch was shot along.
    pub sign: f64,
    pub samples: Vec<(f64, StateR4)>,
    /// Max deviation from the invariant circle x1 = x2 = 0.
    pub max_circle_deviation: f64,
    /// Min distance to the target equilibrium over the trace.
    pub min_target_distance: f64,
    /// Reached within 1e-3 of the target equilibrium.
    pub connected: bool,
}

/// One-dimensional manifold trace (both eigenvector signs).
#[derive(Debug, Clone)]
pub struct ManifoldTrace {
    pub source: NodeLabel,
    pub direction: ManifoldDirection,
    pub dimension: u8,
    pub branches: [Branch1D; 2],
}

/// Threshold at which a branch counts as connecting to the target node.
pub const CONNECTION_THRESHOLD: f64 = 1e-3;

/// Shoot both signs of the real eigenvector of the one-dimensional manifold
/// (unstable for v, stable for w; the eigen-direction is the x3 axis at both)
/// and record whether each branch connects to the other equilibrium.
pub fn trace_1d(
    eq: &Equilibrium,
    direction: ManifoldDirection,
    p: &ModelParams,
    opts: &ManifoldOptions,
) -> Result<ManifoldTrace, ManifoldError> {
    let reversed = match (eq.label, direction) {
        (NodeLabel::V, ManifoldDirection::Unstable) => false,
        (NodeLabel::W, ManifoldDirection::Stable) => true,
        // The 1D objects of this flow are v-unstable and w-stable; the other
        // combinations are 2D and are traced on sections instead.
        _ => return Err(ManifoldError::NoConvergence),
    };
    let target = match eq.label {
        NodeLabel::V => [0.0, 0.0, 0.0, -1.0],
        NodeLabel::W => [0.0, 0.0, 0.0, 1.0],
    };
    let field = ModelField {
        params: *p,
        reversed,
    };
    let proj = |x: &mut StateR4| *x = normalize4(x);

    let mut branches = Vec::with_capacity(2);
    for sign in [1.0, -1.0] {
        let mut x0 = eq.location;
        x0[2] += sign * opts.seed_offset;
        let x0 = normalize4(&x0);
        let horizon = (opts.seed_offset.ln().abs() * 2.5 / eq.expanding.min(1.0)).max(80.0);
        let (raw, _) = integrate_system(
            &field,
            x0,
            (0.0, horizon.min(opts.t_cap)),
            &opts.integrator,
            &[],
            Some(&proj),
            None,
        )?;
        let max_dev = raw
            .samples
            .iter()
            .map(|(_, x)| (x[0] * x[0] + x[1] * x[1]).sqrt())
            .fold(0.0, f64::max);
        let min_dist = raw
            .samples
            .iter()
            .map(|(_, x)| dist4(x, &target))
            .fold(f64::INFINITY, f64::min);
        branches.push(Branch1D {
            sign,
            samples: raw.samples,
            max_circle_deviation: max_dev,
            min_target_distance: min_dist,
            connected: min_dist < CONNECTION_THRESHOLD,
        });
    }
    let b1 = branches.pop().unwrap();
    let b0 = branches.pop().unwrap();
    Ok(ManifoldTrace {
        source: eq.label,
        direction,
        dimension: 1,
        branches: [b0, b1],
    })
}

/// Ordered section trace of a two-dimensional manifold from its seed loop.
#[derive(Debug, Clone)]
pub struct SectionCurve {
    pub source: NodeLabel,
    pub direction: ManifoldDirection,
    pub section: SectionTarget,
    /// One entry per seed, in loop order; None where the seed never crossed.
    pub points: Vec<Option<CrossPoint>>,
    pub missing: usize,
    /// First and last located points within 1e-3 of each other.
    pub closed: bool,
}

impl SectionCurve {
    /// Located points in seed order.
    pub fn located(&self) -> Vec<&CrossPoint> {
        self.points.iter().flatten().collect()
    }

    /// Wall coordinates of the located points.
    pub fn wall_points(&self, geom: &SectionGeometry) -> Vec<(f64, WallPoint)> {
        self.points
            .iter()
            .flatten()
            .map(|c| (c.seed_angle, geom.ambient_to_wall(&c.state)))
            .collect()
    }
}

/// Integrate a 2D-manifold seed loop to a section and return the ordered
/// crossing curve. Stable manifolds are traced in reversed time. Seeds that
/// never cross are reported, not fatal.
pub fn trace_2d_on_section(
    eq: &Equilibrium,
    direction: ManifoldDirection,
    p: &ModelParams,
    section: &SectionDef,
    skip: usize,
    opts: &ManifoldOptions,
) -> Result<SectionCurve, ManifoldError> {
    let reversed = matches!(direction, ManifoldDirection::Stable);
    let seeds = seed_loop(eq, opts.seed_offset, opts.n_seeds);
    let results: Vec<Option<CrossPoint>> = seeds
        .par_iter()
        .map(|(psi, x0)| {
            cross_section(p, x0, section, reversed, skip, opts)
                .ok()
                .flatten()
                .map(|c| CrossPoint {
                    seed_angle: *psi,
                    ..c
                })
        })
        .collect();
    let missing = results.iter().filter(|r| r.is_none()).count();
    let located: Vec<&CrossPoint> = results.iter().flatten().collect();
    let closed = match (located.first(), located.last()) {
        (Some(a), Some(b)) if located.len() > 2 => dist4(&a.state, &b.state) < 1e-3,
        _ => false,
    };
    Ok(SectionCurve {
        source: eq.label,
        direction,
        section: section.target,
        points: results,
        missing,
        closed,
    })
}

/// A certified transverse crossing of the invariant-manifold section curves.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransverseCrossing {
    pub wall: WallPoint,
    pub state: StateR4,
    /// Angle between the curve tangent and the local stable-manifold line,
    /// folded into [0, pi/2].
    pub angle: f64,
    /// Seed angle at the refined crossing.
    pub seed_angle: f64,
}

/// Minimum tangent angle for a crossing to count as transverse.
pub const TRANSVERSALITY_ANGLE_TOL: f64 = 1e-3;

/// Intersect the traced curve of W^u(w) on the wall of V with the local line
/// of W^s(v) (the wall circle at height 0). Crossings are refined by
/// bisection on the seed angle and certified transverse when the tangent
/// angle clears [`TRANSVERSALITY_ANGLE_TOL`].
pub fn detect_transverse_connections(
    p: &ModelParams,
    opts: &ManifoldOptions,
    eq_w: &Equilibrium,
) -> Result<Vec<TransverseCrossing>, ManifoldError> {
    let section = SectionDef::new(SectionTarget::VWallIn, opts.geometry);
    let curve = trace_2d_on_section(eq_w, ManifoldDirection::Unstable, p, &section, 0, opts)?;
    let pts = curve.wall_points(&opts.geometry);
    if pts.len() < 8 {
        return Ok(Vec::new());
    }

    let mut out = Vec::new();
    for i in 0..pts.len() {
        let (psi_a, wa) = pts[i];
        let (psi_b, wb) = pts[(i + 1) % pts.len()];
        if wa.y == 0.0 || wa.y * wb.y >= 0.0 {
            continue;
        }
        // Skip polyline closure edges that span missing seeds.
        let dpsi = wrap_angle(psi_b - psi_a).abs();
        if dpsi > 4.0 * std::f64::consts::TAU / (opts.n_seeds as f64) {
            continue;
        }
        // Refine the crossing by bisection on the seed angle.
        let eq_loc = eq_w.location;
        let mut lo = (psi_a, wa);
        let mut hi = (psi_b, wb);
        for _ in 0..30 {
            let mid = lo.0 + 0.5 * wrap_angle(hi.0 - lo.0);
            let (s, c) = mid.sin_cos();
            let mut x0 = eq_loc;
            x0[0] += opts.seed_offset * c;
            x0[1] += opts.seed_offset * s;
            let x0 = normalize4(&x0);
            let hit = cross_section(p, &x0, &section, false, 0, opts)?;
            let wm = match hit {
                Some(cp) => opts.geometry.ambient_to_wall(&cp.state),
                None => break,
            };
            if wm.y.abs() < 1e-9 {
                lo = (mid, wm);
                break;
            }
            if wm.y * lo.1.y > 0.0 {
                lo = (mid, wm);
            } else {
                hi = (mid, wm);
            }
        }
        let refined = if lo.1.y.abs() <= hi.1.y.abs() { lo } else { hi };
        // Tangent angle from the bracketing curve points.
        let dx = wrap_angle(wb.x - wa.x) * opts.geometry.chart_radius;
        let dy = (wb.y - wa.y) * opts.geometry.chart_height;
        let angle = dy.atan2(dx.abs()).abs();
        let wall = WallPoint {
            x: refined.1.x,
            y: refined.1.y,
        };
        out.push(TransverseCrossing {
            wall,
            state: opts.geometry.wall_to_ambient(NodeLabel::V, &wall),
            angle: angle.min(std::f64::consts::FRAC_PI_2),
            seed_angle: refined.0,
        });
    }
    out.retain(|c| c.angle >= TRANSVERSALITY_ANGLE_TOL);
    out.sort_by(|a, b| a.wall.x.partial_cmp(&b.wall.x).unwrap());
    Ok(out)
}

/// Signed-distance samples along a parameter axis with sign-change brackets.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceProfile {
    pub axis: &'static str,
    pub samples: Vec<(f64, f64)>,
    pub brackets: Vec<(f64, f64)>,
}

impl DistanceProfile {
    pub fn from_samples(axis: &'static str, samples: Vec<(f64, f64)>) -> Self {
        let mut brackets = Vec::new();
        for w in samples.windows(2) {
            let ((a, da), (b, db)) = (w[0], w[1]);
            if da.is_finite() && db.is_finite() && da * db < 0.0 {
                brackets.push((a, b));
            }
        }
        DistanceProfile {
            axis,
            samples,
            brackets,
        }
    }
}

/// Fold of the helix image on the wall of W together with the signed height
/// distance to the W^s(v) wall curve at the same angle.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FoldSample {
    pub lambda1: f64,
    pub fold_wall: WallPoint,
    pub ws_height_at_fold: f64,
    /// Fold height minus the W^s(v) curve height; a sign change along
    /// lambda1 brackets a heteroclinic tangency.
    pub distance: f64,
}

/// Locate the fold of the helix image of W^u(w) on the wall of W and its
/// signed distance to the W^s(v) wall curve, at one parameter value.
///
/// The upper part of the W^u(w) curve on the wall of V is carried by the flow
/// through both saddle passages onto the wall of W, where its two components
/// join at a fold; the fold is the height maximum over the seed-loop
/// parameter, refined by golden-section shooting.
pub fn fold_distance(
    p: &ModelParams,
    eq_v: &Equilibrium,
    eq_w: &Equilibrium,
    opts: &ManifoldOptions,
) -> Result<FoldSample, ManifoldError> {
    let v_wall = SectionDef::new(SectionTarget::VWallIn, opts.geometry);
    let first = trace_2d_on_section(eq_w, ManifoldDirection::Unstable, p, &v_wall, 0, opts)?;

    let w_wall = SectionDef::new(SectionTarget::WWallOut, opts.geometry);
    let helix = continue_to_helix(p, &first, &w_wall, opts)?;
    if helix.len() < 8 {
        return Err(ManifoldError::FoldNotFound(helix.len()));
    }

    let (k_max, _) = helix
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.y.partial_cmp(&b.1 .1.y).unwrap())
        .unwrap();
    if k_max == 0 || k_max + 1 == helix.len() {
        return Err(ManifoldError::FoldNotFound(helix.len()));
    }
    let fold = refine_fold(p, &helix, k_max, &v_wall, &w_wall, opts, eq_w)?;

    let ws_curve = trace_2d_on_section(eq_v, ManifoldDirection::Stable, p, &w_wall, 0, opts)?;
    let ws_height = wall_height_at_angle(&ws_curve.wall_points(&opts.geometry), fold.x)
        .ok_or(ManifoldError::FoldNotFound(ws_curve.points.len()))?;

    Ok(FoldSample {
        lambda1: p.lambda1,
        fold_wall: fold,
        ws_height_at_fold: ws_height,
        distance: fold.y - ws_height,
    })
}

fn continue_to_helix(
    p: &ModelParams,
    first: &SectionCurve,
    w_wall: &SectionDef,
    opts: &ManifoldOptions,
) -> Result<Vec<(f64, WallPoint)>, ManifoldError> {
    let upper: Vec<&CrossPoint> = first
        .points
        .iter()
        .flatten()
        .filter(|c| c.state[2] > 0.0)
        .collect();
    let out: Vec<Option<(f64, WallPoint)>> = upper
        .par_iter()
        .map(|c| {
            cross_section(p, &c.state, w_wall, false, 0, opts)
                .ok()
                .flatten()
                .map(|h| (c.seed_angle, opts.geometry.ambient_to_wall(&h.state)))
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

fn refine_fold(
    p: &ModelParams,
    helix: &[(f64, WallPoint)],
    k_max: usize,
    v_wall: &SectionDef,
    w_wall: &SectionDef,
    opts: &ManifoldOptions,
    eq_w: &Equilibrium,
) -> Result<WallPoint, ManifoldError> {
    let eval = |psi: f64| -> Result<Option<WallPoint>, ManifoldError> {
        let (s, c) = psi.sin_cos();
        let mut x0 = eq_w.location;
        x0[0] += opts.seed_offset * c;
        x0[1] += opts.seed_offset * s;
        let x0 = normalize4(&x0);
        let Some(first) = cross_section(p, &x0, v_wall, false, 0, opts)? else {
            return Ok(None);
        };
        if first.state[2] <= 0.0 {
            return Ok(None);
        }
        let Some(hit) = cross_section(p, &first.state, w_wall, false, 0, opts)? else {
            return Ok(None);
        };
        Ok(Some(opts.geometry.ambient_to_wall(&hit.state)))
    };

    let mut lo = helix[k_max - 1].0;
    let mut hi = helix[k_max + 1].0;
    let mut best = helix[k_max].1;
    for _ in 0..18 {
        let m1 = lo + (hi - lo) * 0.382;
        let m2 = lo + (hi - lo) * 0.618;
        let w1 = eval(m1)?;
        let w2 = eval(m2)?;
        match (w1, w2) {
            (Some(a), Some(b)) => {
                if a.y > best.y {
                    best = a;
                }
                if b.y > best.y {
                    best = b;
                }
                if a.y >= b.y {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            _ => break,
        }
    }
    Ok(best)
}

/// Height of a wall curve at a given angle by linear interpolation in the
/// wrapped angular coordinate, falling back to the nearest point.
pub fn wall_height_at_angle(pts: &[(f64, WallPoint)], angle: f64) -> Option<f64> {
    if pts.len() < 3 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for i in 0..pts.len() {
        let a = &pts[i].1;
        let b = &pts[(i + 1) % pts.len()].1;
        let da = wrap_angle(angle - a.x);
        let dab = wrap_angle(b.x - a.x);
        if dab.abs() < 1e-12 || dab.abs() > 1.0 {
            continue;
        }
        let s = da / dab;
        if (0.0..=1.0).contains(&s) {
            let h = a.y + s * (b.y - a.y);
            let dist = da.abs().min((da - dab).abs());
            match best {
                Some((d0, _)) if d0 <= dist => {}
                _ => best = Some((dist, h)),
            }
        }
    }
    best.map(|(_, h)| h).or_else(|| {
        pts.iter()
            .map(|(_, w)| (wrap_angle(angle - w.x).abs(), w.y))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .map(|(_, h)| h)
    })
}

/// Scan a grid of lambda1 values for tangencies of W^u(w) and W^s(v): the
/// fold of the helix image crosses the W^s(v) wall curve, so sign changes of
/// the fold distance bracket tangency parameters.
pub fn detect_tangency(
    p_template: &ModelParams,
    lambda1_grid: &[f64],
    opts: &ManifoldOptions,
    eq_v: &Equilibrium,
    eq_w: &Equilibrium,
) -> Result<(Vec<FoldSample>, DistanceProfile), ManifoldError> {
    let mut folds = Vec::with_capacity(lambda1_grid.len());
    for &l1 in lambda1_grid {
        let p = ModelParams {
            lambda1: l1,
            ..*p_template
        };
        match fold_distance(&p, eq_v, eq_w, opts) {
            Ok(f) => folds.push(f),
            Err(ManifoldError::FoldNotFound(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let profile = DistanceProfile::from_samples(
        "lambda1",
        folds.iter().map(|f| (f.lambda1, f.distance)).collect(),
    );
    Ok((folds, profile))
}

/// Bisect one tangency bracket until the fold distance drops below `tol`.
pub fn refine_tangency(
    p_template: &ModelParams,
    bracket: (f64, f64),
    tol: f64,
    opts: &ManifoldOptions,
    eq_v: &Equilibrium,
    eq_w: &Equilibrium,
) -> Result<FoldSample, ManifoldError> {
    let eval = |l1: f64| {
        let p = ModelParams {
            lambda1: l1,
            ..*p_template
        };
        fold_distance(&p, eq_v, eq_w, opts)
    };
    let (mut lo, mut hi) = bracket;
    let mut f_lo = eval(lo)?;
    let f_hi = eval(hi)?;
    if f_lo.distance * f_hi.distance > 0.0 {
        return Err(ManifoldError::FoldNotFound(opts.n_seeds));
    }
    let mut best = if f_lo.distance.abs() < f_hi.distance.abs() {
        f_lo
    } else {
        f_hi
    };
    for _ in 0..40 {
        if best.distance.abs() < tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let f_mid = eval(mid)?;
        if f_mid.distance.abs() < best.distance.abs() {
            best = f_mid;
        }
        if f_mid.distance * f_lo.distance <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            f_lo = f_mid;
        }
    }
    Ok(best)
}

/// Stereographic projection of the sphere minus a pole onto R^3, used to
/// compute linking numbers of loops living on the sphere.
pub fn stereographic_project(x: &StateR4, pole: &StateR4) -> Vec3 {
    let basis = orthonormal_complement(pole);
    let denom = 1.0 - crate::geom::dot4(x, pole);
    let scale = 1.0 / denom.max(1e-12);
    [
        crate::geom::dot4(x, &basis[0]) * scale,
        crate::geom::dot4(x, &basis[1]) * scale,
        crate::geom::dot4(x, &basis[2]) * scale,
    ]
}

fn orthonormal_complement(pole: &StateR4) -> [StateR4; 3] {
    let mut basis: Vec<StateR4> = Vec::new();
    let candidates = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    for c in candidates {
        let mut v = c;
        let mut proj = scale4(pole, crate::geom::dot4(&v, pole));
        v = sub4(&v, &proj);
        for b in &basis {
            proj = scale4(b, crate::geom::dot4(&v, b));
            v = sub4(&v, &proj);
        }
        if norm4(&v) > 1e-6 {
            basis.push(normalize4(&v));
            if basis.len() == 3 {
                break;
            }
        }
    }
    [basis[0], basis[1], basis[2]]
}

/// Pick a projection pole on the sphere far from both loops.
pub fn pick_projection_pole(a: &[StateR4], b: &[StateR4]) -> StateR4 {
    let mut best = [0.0, 0.0, 0.0, 1.0];
    let mut best_d = -1.0;
    let mut candidates = vec![
        [1.0, 0.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
        [0.5f64.sqrt(), 0.5f64.sqrt(), 0.0, 0.0],
        [0.5f64.sqrt(), -0.5f64.sqrt(), 0.0, 0.0],
        [0.5, 0.5, 0.5, 0.5],
        [0.5, -0.5, 0.5, -0.5],
    ];
    for k in 0..16 {
        let t = k as f64 * 0.39269908;
        candidates.push(normalize4(&[t.cos(), t.sin(), (2.0 * t).cos() * 0.3, 0.1]));
    }
    for c in candidates {
        let c = normalize4(&c);
        let d = a
            .iter()
            .chain(b.iter())
            .map(|x| dist4(x, &c))
            .fold(f64::INFINITY, f64::min);
        if d > best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Gauss linking number of two disjoint closed polylines in R^3 by the exact
/// per-segment-pair solid-angle sum, rounded to the nearest integer with the
/// residual required below 0.1.
pub fn linking_number(curve_a: &[Vec3], curve_b: &[Vec3]) -> Result<i64, ManifoldError> {
    if curve_a.len() < 3 || curve_b.len() < 3 {
        return Err(ManifoldError::DegenerateCurve);
    }
    let seg_scale = max_segment_length(curve_a).max(max_segment_length(curve_b));
    let min_dist = min_intercurve_distance(curve_a, curve_b);
    if min_dist <= 10.0 * seg_scale {
        return Err(ManifoldError::CurvesTooClose {
            min_dist,
            seg: seg_scale,
        });
    }

    let mut total = 0.0;
    for i in 0..curve_a.len() {
        let p1 = curve_a[i];
        let p2 = curve_a[(i + 1) % curve_a.len()];
        for j in 0..curve_b.len() {
            let p3 = curve_b[j];
            let p4 = curve_b[(j + 1) % curve_b.len()];
            total += segment_pair_solid_angle(&p1, &p2, &p3, &p4);
        }
    }
    let lk = total / (4.0 * std::f64::consts::PI);
    let rounded = lk.round();
    if (lk - rounded).abs() >= 0.1 {
        return Err(ManifoldError::NonIntegerLinking((lk - rounded).abs()));
    }
    Ok(rounded as i64)
}

fn max_segment_length(c: &[Vec3]) -> f64 {
    (0..c.len())
        .map(|i| norm3(&sub3(&c[(i + 1) % c.len()], &c[i])))
        .fold(0.0, f64::max)
}

fn min_intercurve_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            let d = norm3(&sub3(p, q));
            if d < best {
                best = d;
            }
        }
    }
    best
}

/// Signed solid angle of the Gauss map over one segment pair
/// (Klenin-Langowski closed form).
fn segment_pair_solid_angle(p1: &Vec3, p2: &Vec3, p3: &Vec3, p4: &Vec3) -> f64 {
    let r12 = sub3(p2, p1);
    let r34 = sub3(p4, p3);
    let r13 = sub3(p3, p1);
    let r14 = sub3(p4, p1);
    let r23 = sub3(p3, p2);
    let r24 = sub3(p4, p2);

    let n1 = unit3(&cross3(&r13, &r14));
    let n2 = unit3(&cross3(&r14, &r24));
    let n3 = unit3(&cross3(&r24, &r23));
    let n4 = unit3(&cross3(&r23, &r13));

    let s = dot3(&n1, &n2).clamp(-1.0, 1.0).asin()
        + dot3(&n2, &n3).clamp(-1.0, 1.0).asin()
        + dot3(&n3, &n4).clamp(-1.0, 1.0).asin()
        + dot3(&n4, &n1).clamp(-1.0, 1.0).asin();
    let orientation = dot3(&cross3(&r34, &r12), &r13);
    if orientation > 0.0 {
        s
    } else {
        -s
    }
}

fn unit3(v: &Vec3) -> Vec3 {
    let n = norm3(v);
    if n < 1e-300 {
        [0.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Raw Gauss double sum over all segment pairs of two closed polylines,
/// in units of 4 pi (so the result approximates the linking number). Pairs
/// closer than ten times their segment lengths are rejected through the
/// returned flag rather than silently mis-summed.
pub fn gauss_linking_sum(curve_a: &[Vec3], curve_b: &[Vec3]) -> (f64, bool) {
    let mut total = 0.0;
    let mut too_close = false;
    for i in 0..curve_a.len() {
        let p1 = curve_a[i];
        let p2 = curve_a[(i + 1) % curve_a.len()];
        let len_a = norm3(&sub3(&p2, &p1));
        for j in 0..curve_b.len() {
            let p3 = curve_b[j];
            let p4 = curve_b[(j + 1) % curve_b.len()];
            let d = norm3(&sub3(&p3, &p1));
            if d < 10.0 * len_a.max(norm3(&sub3(&p4, &p3))) {
                too_close = true;
            }
            total += segment_pair_solid_angle(&p1, &p2, &p3, &p4);
        }
    }
    (total / (4.0 * std::f64::consts::PI), too_close)
}

/// Resample a closed polyline so each segment is no longer than a tenth of
/// its distance to the other curve (with the given ceiling and floor). This
/// keeps the Gauss sum accurate where the curves approach each other without
/// a quadratic blowup in the number of far segments.
pub fn resample_adaptive(curve: &[Vec3], other: &[Vec3], h_max: f64, h_min: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(curve.len() * 2);
    let dist_to_other = |p: &Vec3| -> f64 {
        other
            .iter()
            .map(|q| norm3(&sub3(p, q)))
            .fold(f64::INFINITY, f64::min)
    };
    for i in 0..curve.len() {
        let a = curve[i];
        let b = curve[(i + 1) % curve.len()];
        let seg = sub3(&b, &a);
        let len = norm3(&seg);
        if len == 0.0 {
            continue;
        }
        let d_local = dist_to_other(&a).min(dist_to_other(&b));
        let h = (d_local / 10.0).clamp(h_min, h_max);
        let n = (len / h).ceil().max(1.0) as usize;
        for k in 0..n {
            let t = k as f64 / n as f64;
            out.push([a[0] + seg[0] * t, a[1] + seg[1] * t, a[2] + seg[2] * t]);
        }
    }
    out
}

/// Resample a closed polyline to roughly uniform arclength h.
pub fn resample_closed(curve: &[Vec3], h: f64) -> Vec<Vec3> {
    if curve.len() < 3 {
        return curve.to_vec();
    }
    let mut out = Vec::new();
    let mut carry = 0.0;
    for i in 0..curve.len() {
        let a = curve[i];
        let b = curve[(i + 1) % curve.len()];
        let seg = sub3(&b, &a);
        let len = norm3(&seg);
        if len == 0.0 {
            continue;
        }
        let mut s = carry;
        while s < len {
            let t = s / len;
            out.push([a[0] + seg[0] * t, a[1] + seg[1] * t, a[2] + seg[2] * t]);
            s += h;
        }
        carry = s - len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::equilibria;
    use std::f64::consts::{PI, TAU};

    fn ref_eqs(l1: f64, l2: f64) -> (ModelParams, Equilibrium, Equilibrium) {
        let p = ModelParams::reference(l1, l2);
        let [v, w] = equilibria(&p).unwrap();
        (p, v, w)
    }

    #[test]
    fn one_d_connections_at_organizing_centre() {
        let (p, v, w) = ref_eqs(0.0, 0.0);
        let opts = ManifoldOptions::default();
        let tr = trace_1d(&v, ManifoldDirection::Unstable, &p, &opts).unwrap();
        for b in &tr.branches {
            assert!(b.connected, "min dist {}", b.min_target_distance);
            assert!(b.max_circle_deviation < 1e-8);
        }
        let tw = trace_1d(&w, ManifoldDirection::Stable, &p, &opts).unwrap();
        for b in &tw.branches {
            assert!(b.connected);
        }
    }

    #[test]
    fn one_d_connections_persist_under_lambda1() {
        let (p, v, _) = ref_eqs(0.05, 0.0);
        let opts = ManifoldOptions::default();
        let tr = trace_1d(&v, ManifoldDirection::Unstable, &p, &opts).unwrap();
        for b in &tr.branches {
            assert!(b.connected);
            assert!(b.max_circle_deviation < 1e-8);
        }
    }

    #[test]
    fn one_d_connection_breaks_under_lambda2() {
        let (p, v, _) = ref_eqs(0.05, 0.05);
        let opts = ManifoldOptions::default();
        let tr = trace_1d(&v, ManifoldDirection::Unstable, &p, &opts).unwrap();
        for b in &tr.branches {
            assert!(
                b.max_circle_deviation > 1e-4,
                "deviation {}",
                b.max_circle_deviation
            );
        }
    }

    #[test]
    fn linking_unlinked_circles() {
        let a: Vec<Vec3> = (0..200)
            .map(|i| {
                let t = TAU * i as f64 / 200.0;
                [t.cos(), t.sin(), 0.0]
            })
            .collect();
        let b: Vec<Vec3> = (0..200)
            .map(|i| {
                let t = TAU * i as f64 / 200.0;
                [t.cos() + 4.0, t.sin(), 1.0]
            })
            .collect();
        assert_eq!(linking_number(&a, &b).unwrap(), 0);
    }

    #[test]
    fn linking_hopf_pair() {
        let a: Vec<Vec3> = (0..400)
            .map(|i| {
                let t = TAU * i as f64 / 400.0;
                [t.cos(), t.sin(), 0.0]
            })
            .collect();
        let b: Vec<Vec3> = (0..400)
            .map(|i| {
                let t = TAU * i as f64 / 400.0;
                [1.0 + t.cos(), 0.0, t.sin()]
            })
            .collect();
        assert_eq!(linking_number(&a, &b).unwrap().abs(), 1);
    }

    #[test]
    fn linking_rejects_touching_curves() {
        let a: Vec<Vec3> = (0..100)
            .map(|i| {
                let t = TAU * i as f64 / 100.0;
                [t.cos(), t.sin(), 0.0]
            })
            .collect();
        let b: Vec<Vec3> = a.iter().map(|p| [p[0], p[1], p[2] + 1e-4]).collect();
        assert!(matches!(
            linking_number(&a, &b),
            Err(ManifoldError::CurvesTooClose { .. })
        ));
    }

    #[test]
    fn linking_invariant_under_resampling() {
        let a: Vec<Vec3> = (0..300)
            .map(|i| {
                let t = TAU * i as f64 / 300.0;
                [t.cos(), t.sin(), 0.1 * (3.0 * t).sin()]
            })
            .collect();
        let b: Vec<Vec3> = (0..300)
            .map(|i| {
                let t = TAU * i as f64 / 300.0;
                [1.0 + 0.8 * t.cos(), 0.0, 0.8 * t.sin()]
            })
            .collect();
        let l1 = linking_number(&a, &b).unwrap();
        let ar = resample_closed(&a, 0.03);
        let br = resample_closed(&b, 0.05);
        let l2 = linking_number(&ar, &br).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn stereographic_pole_avoids_loops() {
        let pole = pick_projection_pole(
            &[[0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, -1.0]],
            &[[0.0, 0.0, 1.0, 0.0]],
        );
        assert!((norm4(&pole) - 1.0).abs() < 1e-12);
        for x in [
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, -1.0f64],
            [0.0, 0.0, 1.0, 0.0],
        ] {
            assert!(dist4(&pole, &x) > 0.3);
        }
        let q = stereographic_project(&[0.0, 0.0, 0.0, 1.0], &pole);
        assert!(q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn transverse_connections_exist_and_pair() {
        let (p, _, w) = ref_eqs(0.05, 0.0);
        let opts = ManifoldOptions {
            n_seeds: 192,
            ..Default::default()
        };
        let crossings = detect_transverse_connections(&p, &opts, &w).unwrap();
        assert!(crossings.len() >= 2, "found {}", crossings.len());
        assert_eq!(crossings.len() % 2, 0);
        for c in &crossings {
            let partner = crossings.iter().any(|d| {
                wrap_angle(d.wall.x - c.wall.x - PI).abs() < 0.05
                    && (d.wall.y - c.wall.y).abs() < 1e-3
            });
            assert!(partner, "no gamma1 partner for angle {}", c.wall.x);
        }
        for c in &crossings {
            assert!(c.angle >= TRANSVERSALITY_ANGLE_TOL);
            assert!(c.wall.y.abs() < 1e-6);
        }
    }

    #[test]
    fn coincident_manifolds_at_organizing_centre() {
        // lambda1 = 0: W^u(w) and W^s(v) coincide inside the invariant
        // two-sphere x3 = 0, so the traced wall curve hugs height zero and
        // no transverse crossing is certified.
        let (p, _, w) = ref_eqs(0.0, 0.0);
        let opts = ManifoldOptions {
            n_seeds: 96,
            ..Default::default()
        };
        let section = SectionDef::new(SectionTarget::VWallIn, opts.geometry);
        let curve =
            trace_2d_on_section(&w, ManifoldDirection::Unstable, &p, &section, 0, &opts).unwrap();
        assert!(curve.missing < 8);
        for (_, wp) in curve.wall_points(&opts.geometry) {
            assert!(wp.y.abs() < 1e-3 / opts.geometry.chart_height);
        }
        let crossings = detect_transverse_connections(&p, &opts, &w).unwrap();
        assert!(crossings.is_empty());
    }
}
