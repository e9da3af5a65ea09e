//! Cartography of the (lambda1, lambda2) parameter plane: per-cell
//! classification (homoclinic distances, horseshoe strip count, periodic
//! attractor), continuation of the homoclinic boundary curves, their
//! codimension-two intersections with linking numbers, and a deterministic
//! resumable sweep over a rectangular grid.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{dist4, normalize4, wrap_angle};
use crate::integrator::{
    find_periodic_orbit_budgeted, integrate_system, Direction, EventSpec, IntegratorOptions,
    ModelField, SectionEvent,
};
use crate::manifolds::{
    pick_projection_pole, resample_closed, stereographic_project, trace_2d_on_section,
    wall_height_at_angle, ManifoldDirection, ManifoldError, ManifoldOptions, SectionDef,
    SectionTarget,
};
use crate::model::{equilibria, Equilibrium, ModelError, ModelParams, NodeLabel, StateR4};
use crate::sections::WallPoint;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("cell budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("continuation lost the boundary curve at ({0:.4}, {1:.4})")]
    LostCurve(f64, f64),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad sweep record: {0}")]
    BadRecord(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// Knobs of the per-cell classification.
#[derive(Debug, Clone, Copy)]
pub struct ScanOptions {
    pub manifold: ManifoldOptions,
    /// |signed distance| below which a cell is flagged near-homoclinic.
    pub hom_threshold: f64,
    /// |fold distance| below which a cell is flagged as a tangency bracket.
    pub tangency_threshold: f64,
    /// Newton iterations allowed for the periodic-orbit search.
    pub newton_budget: usize,
    /// Settling time before the periodic-orbit search.
    pub settle_time: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        let mut manifold = ManifoldOptions {
            n_seeds: 128,
            ..Default::default()
        };
        manifold.integrator.rel_tol = 1e-9;
        manifold.integrator.abs_tol = 1e-11;
        ScanOptions {
            manifold,
            hom_threshold: 1e-3,
            tangency_threshold: 1e-3,
            newton_budget: 8,
            settle_time: 250.0,
        }
    }
}

/// Classification of one parameter-plane cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub i: usize,
    pub j: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub periodic_attractor: bool,
    pub horseshoe: bool,
    pub near_homoclinic_v: bool,
    pub near_homoclinic_w: bool,
    pub tangency_bracket: bool,
    pub strip_count: usize,
    pub period: Option<f64>,
    /// Signed distance of the W^u(v) exit point on the wall of W to the
    /// W^s(v) wall curve (zero at a homoclinic loop to v).
    pub d_hom_v: f64,
    /// Signed distance, along the ray from the spiral centre through the disc
    /// centre, of the nearest W^u(w) spiral arm to the disc centre (zero at a
    /// homoclinic loop to w).
    pub d_hom_w: f64,
    pub degenerate: bool,
    pub unresolved: bool,
}

/// Pieces shared between the distance evaluations at one parameter value.
struct CellTrace {
    /// W^u(v) arrival point on the upper top disc of W, in disc coordinates.
    center_offset: Option<[f64; 2]>,
    /// W^u(v) exit point through the wall of W.
    wu_v_exit: Option<WallPoint>,
    /// W^u(v) came within the capture distance of w (unbroken connection).
    captured_by_w: bool,
}

const W_CAPTURE: f64 = 1e-4;

/// Shoot the upper branch of W^u(v) and record its arrival on the top disc of
/// W and its exit through the wall of W.
fn shoot_wu_v(p: &ModelParams, opts: &ManifoldOptions) -> Result<CellTrace, ScanError> {
    let [v, _w] = equilibria(p)?;
    let mut x0 = v.location;
    x0[2] += opts.seed_offset;
    let x0 = normalize4(&x0);

    let top = SectionDef::new(SectionTarget::WTopInUpper, opts.geometry);
    let wall = SectionDef::new(SectionTarget::WWallOut, opts.geometry);
    let surf_top = |x: &StateR4| top.surface_value(x);
    let gate_top = |x: &StateR4| top.gate(x);
    let surf_wall = |x: &StateR4| wall.surface_value(x);
    let gate_wall = |x: &StateR4| wall.gate(x);
    let events = [
        EventSpec::new(&surf_top, top.direction(false)).with_gate(&gate_top),
        EventSpec::new(&surf_wall, wall.direction(false)).with_gate(&gate_wall),
    ];
    let mut stop = |e: &SectionEvent<4>| e.section == 1;
    let field = ModelField {
        params: *p,
        reversed: false,
    };
    let proj = |x: &mut StateR4| *x = normalize4(x);
    let (raw, found) = integrate_system(
        &field,
        x0,
        (0.0, opts.t_cap),
        &opts.integrator,
        &events,
        Some(&proj),
        Some(&mut stop),
    )
    .map_err(|e| ScanError::BudgetExceeded(e.to_string()))?;

    let w_loc = [0.0, 0.0, 0.0, -1.0];
    let captured = raw.samples.iter().any(|(_, x)| dist4(x, &w_loc) < W_CAPTURE);
    let rad = opts.geometry.chart_radius;
    let center_offset = found
        .iter()
        .find(|e| e.section == 0)
        .map(|e| [e.state[0] / rad, e.state[1] / rad]);
    let wu_v_exit = found
        .iter()
        .find(|e| e.section == 1)
        .map(|e| opts.geometry.ambient_to_wall(&e.state));
    Ok(CellTrace {
        center_offset,
        wu_v_exit,
        captured_by_w: captured,
    })
}

/// Per-seed record of the W^u(w) loop: the entry on the wall of V, the
/// arrival on the upper top disc of W (double-spiral point) and the next exit
/// through the wall of W (helix point).
struct LoopTrace {
    spiral: Vec<(f64, [f64; 2])>,
    helix: Vec<(f64, WallPoint)>,
}

/// One seed record: wall-of-V entry height, spiral point, helix point.
type SeedRecord = (f64, Option<f64>, Option<[f64; 2]>, Option<WallPoint>);

fn wu_w_seed_record(
    p: &ModelParams,
    w: &Equilibrium,
    psi: f64,
    opts: &ManifoldOptions,
) -> SeedRecord {
    let geometry = opts.geometry;
    let vwall = SectionDef::new(SectionTarget::VWallIn, geometry);
    let top = SectionDef::new(SectionTarget::WTopInUpper, geometry);
    let wall = SectionDef::new(SectionTarget::WWallOut, geometry);
    let (sn, cs) = psi.sin_cos();
    let mut x0 = w.location;
    x0[0] += opts.seed_offset * cs;
    x0[1] += opts.seed_offset * sn;
    let x0 = normalize4(&x0);

    let surf_v = |x: &StateR4| vwall.surface_value(x);
    let gate_v = |x: &StateR4| vwall.gate(x);
    let surf_top = |x: &StateR4| top.surface_value(x);
    let gate_top = |x: &StateR4| top.gate(x);
    let surf_wall = |x: &StateR4| wall.surface_value(x);
    let gate_wall = |x: &StateR4| wall.gate(x);
    let events = [
        EventSpec::new(&surf_v, vwall.direction(false)).with_gate(&gate_v),
        EventSpec::new(&surf_top, top.direction(false)).with_gate(&gate_top),
        EventSpec::new(&surf_wall, wall.direction(false)).with_gate(&gate_wall),
    ];
    // The seed leaves through the wall of W immediately; the helix point is
    // the second wall exit.
    let mut wall_count = 0usize;
    let mut stop = |e: &SectionEvent<4>| {
        if e.section == 2 {
            wall_count += 1;
            wall_count >= 2
        } else {
            false
        }
    };
    let field = ModelField {
        params: *p,
        reversed: false,
    };
    let proj = |x: &mut StateR4| *x = normalize4(x);
    let found = integrate_system(
        &field,
        x0,
        (0.0, opts.t_cap),
        &opts.integrator,
        &events,
        Some(&proj),
        Some(&mut stop),
    )
    .map(|(_, ev)| ev)
    .unwrap_or_default();
    let rad = geometry.chart_radius;
    let v_entry_h = found
        .iter()
        .find(|e| e.section == 0)
        .map(|e| e.state[2] / geometry.chart_height);
    let spiral_pt = found
        .iter()
        .find(|e| e.section == 1)
        .map(|e| [e.state[0] / rad, e.state[1] / rad]);
    let helix_pt = found
        .iter()
        .filter(|e| e.section == 2)
        .nth(1)
        .map(|e| geometry.ambient_to_wall(&e.state));
    (psi, v_entry_h, spiral_pt, helix_pt)
}

/// Log-spaced refinement depth around each singular seed (a seed on
/// W^s(v), where the downstream winding diverges).
const SINGULAR_REFINE_PER_SIDE: usize = 18;
const SINGULAR_REFINE_RATIO: f64 = 1e-6;

/// Trace the W^u(w) seed loop through the network: a uniform first pass,
/// then deterministic log-spaced refinement toward the seeds that land on
/// W^s(v), which resolves the deep windings of the double spiral and of the
/// helix image.
fn trace_wu_w_loop(p: &ModelParams, opts: &ManifoldOptions) -> Result<LoopTrace, ScanError> {
    let [_, w] = equilibria(p)?;
    let n = opts.n_seeds;
    let pass1: Vec<SeedRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let psi = std::f64::consts::TAU * i as f64 / n as f64;
            wu_w_seed_record(p, &w, psi, opts)
        })
        .collect();

    // Singular angles: sign change of the wall-of-V entry height between
    // consecutive seeds.
    let mut refine = Vec::new();
    for i in 0..n {
        let (psi_a, ya, _, _) = pass1[i];
        let (_, yb, _, _) = pass1[(i + 1) % n];
        let (Some(ya), Some(yb)) = (ya, yb) else {
            continue;
        };
        if ya * yb < 0.0 {
            let span = std::f64::consts::TAU / n as f64;
            let psi_star = psi_a + span * ya.abs() / (ya.abs() + yb.abs());
            let m = SINGULAR_REFINE_PER_SIDE;
            let ratio = SINGULAR_REFINE_RATIO.powf(1.0 / (m as f64 - 1.0));
            for k in 0..m {
                let delta = 0.5 * span * ratio.powi(k as i32);
                refine.push(psi_star + delta);
                refine.push(psi_star - delta);
            }
        }
    }
    let pass2: Vec<SeedRecord> = refine
        .par_iter()
        .map(|&psi| wu_w_seed_record(p, &w, psi, opts))
        .collect();

    let mut all: Vec<SeedRecord> = pass1.into_iter().chain(pass2).collect();
    all.sort_by(|a, b| {
        a.0.rem_euclid(std::f64::consts::TAU)
            .partial_cmp(&b.0.rem_euclid(std::f64::consts::TAU))
            .unwrap()
    });

    let mut spiral = Vec::new();
    let mut helix = Vec::new();
    for (psi, _, s1, h1) in all {
        let psi = psi.rem_euclid(std::f64::consts::TAU);
        if let Some(s1) = s1 {
            spiral.push((psi, s1));
        }
        if let Some(h1) = h1 {
            helix.push((psi, h1));
        }
    }
    Ok(LoopTrace { spiral, helix })
}

/// Signed distance of the nearest spiral arm to the disc centre along the ray
/// from the accumulation point through the centre, together with the seed
/// angles bracketing that arm crossing. Positive when the nearest resolved
/// arm lies beyond the centre.
fn spiral_center_crossing(
    spiral: &[(f64, [f64; 2])],
    c: &[f64; 2],
    n_seeds: usize,
) -> Option<(f64, f64, f64)> {
    let s_z = (c[0] * c[0] + c[1] * c[1]).sqrt();
    if s_z < 1e-12 {
        return Some((0.0, 0.0, 0.0));
    }
    let u = [-c[0] / s_z, -c[1] / s_z];
    let max_gap = 4.0 * std::f64::consts::TAU / (n_seeds as f64);
    let mut best: Option<(f64, f64, f64)> = None;
    for w in spiral.windows(2) {
        let ((psi_a, a), (psi_b, b)) = (w[0], w[1]);
        if wrap_angle(psi_b - psi_a).abs() > max_gap {
            continue;
        }
        // Skip under-resolved arcs and jumps between spiral branches: the
        // polar angle around the accumulation point must advance by less
        // than a quarter turn per segment.
        let ang_a = (a[1] - c[1]).atan2(a[0] - c[0]);
        let ang_b = (b[1] - c[1]).atan2(b[0] - c[0]);
        if wrap_angle(ang_b - ang_a).abs() > std::f64::consts::FRAC_PI_2 {
            continue;
        }
        // Solve c + s u = a + tau (b - a).
        let d = [b[0] - a[0], b[1] - a[1]];
        let det = u[0] * (-d[1]) - u[1] * (-d[0]);
        if det.abs() < 1e-14 {
            continue;
        }
        let rhs = [a[0] - c[0], a[1] - c[1]];
        let s = (rhs[0] * (-d[1]) - rhs[1] * (-d[0])) / det;
        let tau = (u[0] * rhs[1] - u[1] * rhs[0]) / det;
        if s >= 0.0 && (0.0..=1.0).contains(&tau) {
            let signed = s - s_z;
            match best {
                Some((b0, _, _)) if b0.abs() <= signed.abs() => {}
                _ => best = Some((signed, psi_a, psi_b)),
            }
        }
    }
    best
}

fn spiral_center_distance(spiral: &[(f64, [f64; 2])], c: &[f64; 2], n_seeds: usize) -> Option<f64> {
    spiral_center_crossing(spiral, c, n_seeds).map(|(d, _, _)| d)
}

/// Near a homoclinic loop at w the spiral arm passes close to the disc
/// centre, where the ray-crossing distance both suffers chord error and
/// switches arms discontinuously. Resample the bracketing arc iteratively
/// and return the signed distance of the arc itself to the centre (sign by
/// which side of the oriented arc the centre lies), which passes through
/// zero continuously at contact, together with the seed angles bracketing
/// the nearest arc point.
fn refine_center_crossing(
    p: &ModelParams,
    w_eq: &Equilibrium,
    c: &[f64; 2],
    bracket: (f64, f64),
    opts: &ManifoldOptions,
) -> Option<(f64, f64, f64)> {
    let top = SectionDef::new(SectionTarget::WTopInUpper, opts.geometry);
    let rad = opts.geometry.chart_radius;
    let z = [0.0f64, 0.0f64];
    let _ = c;
    let mut lo = bracket.0;
    let mut hi = bracket.1;
    let mut best: Option<(f64, f64, f64)> = None;
    for round in 0..5 {
        let n = 24;
        let arc: Vec<(f64, [f64; 2])> = (0..=n)
            .into_par_iter()
            .filter_map(|k| {
                let psi = lo + (hi - lo) * k as f64 / n as f64;
                let (sn, cs) = psi.sin_cos();
                let mut x0 = w_eq.location;
                x0[0] += opts.seed_offset * cs;
                x0[1] += opts.seed_offset * sn;
                let x0 = normalize4(&x0);
                crate::manifolds::cross_section(p, &x0, &top, false, 0, opts)
                    .ok()
                    .flatten()
                    .map(|cp| (psi, [cp.state[0] / rad, cp.state[1] / rad]))
            })
            .collect();
        if arc.len() < 5 {
            break;
        }
        // Signed distance of the arc to the centre: nearest segment, sign by
        // the cross product of the segment direction with the offset to z.
        let mut nearest: Option<(f64, f64, f64)> = None; // (signed_d, psi_a, psi_b)
        for w in arc.windows(2) {
            let ((psi_a, a), (psi_b, b)) = (w[0], w[1]);
            let seg = [b[0] - a[0], b[1] - a[1]];
            let len2 = seg[0] * seg[0] + seg[1] * seg[1];
            if len2 == 0.0 {
                continue;
            }
            let rel = [z[0] - a[0], z[1] - a[1]];
            let t = ((rel[0] * seg[0] + rel[1] * seg[1]) / len2).clamp(0.0, 1.0);
            let foot = [a[0] + t * seg[0], a[1] + t * seg[1]];
            let dist = ((z[0] - foot[0]).powi(2) + (z[1] - foot[1]).powi(2)).sqrt();
            let side = seg[0] * (z[1] - a[1]) - seg[1] * (z[0] - a[0]);
            let signed = if side >= 0.0 { dist } else { -dist };
            match nearest {
                Some((d0, _, _)) if d0.abs() <= dist => {}
                _ => nearest = Some((signed, psi_a, psi_b)),
            }
        }
        let (d, a, b) = nearest?;
        best = Some((d, a, b));
        if round + 1 < 5 {
            // Zoom on the nearest segment with margin.
            let width = b - a;
            lo = a - width;
            hi = b + width;
        }
    }
    best
}

/// Number of horseshoe strips at one parameter value: the image on the wall
/// of W of a vertical segment across W^s(v) in the wall of V, counted against
/// the W^s(v) wall curve by transverse crossings.
///
/// The segment is sampled log-uniformly in height, which resolves the full
/// winding of its image: the image winds around the cylinder for as long as
/// the segment's deep end shadows W^u(v) into the cylinder around w, so the
/// count grows as the broken connection approaches W^s(w) and shrinks as
/// lambda2 moves it away.
const SEGMENT_SAMPLES: usize = 140;
const SEGMENT_MIN_HEIGHT: f64 = 1e-11;


fn segment_image_strip_count(p: &ModelParams, opts: &ManifoldOptions) -> usize {
    let image = segment_image_polyline(p, opts);
    strip_turns_from_image(&image)
}

fn segment_image_polyline(p: &ModelParams, opts: &ManifoldOptions) -> Vec<(f64, WallPoint)> {
    let geometry = opts.geometry;
    let wall = SectionDef::new(SectionTarget::WWallOut, geometry);
    let shoot = |ln_y: f64| -> Option<(f64, WallPoint)> {
        let wp = WallPoint {
            x: 0.0,
            y: ln_y.exp(),
        };
        let x0 = geometry.wall_to_ambient(NodeLabel::V, &wp);
        crate::manifolds::cross_section(p, &x0, &wall, false, 0, opts)
            .ok()
            .flatten()
            .map(|cp| (ln_y, geometry.ambient_to_wall(&cp.state)))
    };

    let y_top: f64 = 0.5;
    let ln_lo = SEGMENT_MIN_HEIGHT.ln();
    let ln_hi = y_top.ln();
    let lns: Vec<f64> = (0..SEGMENT_SAMPLES)
        .map(|k| ln_hi + (ln_lo - ln_hi) * k as f64 / (SEGMENT_SAMPLES - 1) as f64)
        .collect();
    let mut image: Vec<(f64, WallPoint)> = lns
        .par_iter()
        .filter_map(|&ln_y| shoot(ln_y))
        .collect();
    if image.len() < 3 {
        return image;
    }

    // The winding of the image concentrates logarithmically around the
    // segment depth whose trajectory shadows W^u(v) deepest into the
    // cylinder of w (the minimum of the image height). Refine with samples
    // accumulating geometrically toward that depth from both sides.
    let k_min = image
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.y.partial_cmp(&b.1 .1.y).unwrap())
        .map(|(k, _)| k)
        .unwrap();
    let ln_star = image[k_min].0;
    let h = (ln_hi - ln_lo) / (SEGMENT_SAMPLES - 1) as f64;
    let refine: Vec<f64> = (1..=55)
        .flat_map(|j| {
            let d = h * (-0.35 * j as f64).exp();
            [ln_star + d, ln_star - d]
        })
        .collect();
    let extra: Vec<(f64, WallPoint)> = refine
        .par_iter()
        .filter_map(|&ln_y| shoot(ln_y))
        .collect();
    image.extend(extra);
    image.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    image
}

/// Unwrapped monotone sweep over the resolved polyline in full turns;
/// unresolved steps are skipped (under-counting by at most a fraction of a
/// turn per break).
fn strip_turns_from_image(image: &[(f64, WallPoint)]) -> usize {
    if image.len() < 3 {
        return 0;
    }
    let mut sweep = 0.0f64;
    let mut best = 0.0f64;
    for w in image.windows(2) {
        let ((_la, a), (_lb, b)) = (w[0], w[1]);
        let dx = wrap_angle(b.x - a.x);
        if dx.abs() > 1.8 {
            continue;
        }
        sweep += dx;
    }
    best = best.max(sweep.abs());
    (best / std::f64::consts::TAU) as usize
}


/// Classify one (lambda1, lambda2) cell. Unresolvable pieces surface as
/// [`ScanError::BudgetExceeded`]; the sweep records such cells as unresolved
/// instead of guessing.
pub fn classify_cell(p: &ModelParams, opts: &ScanOptions) -> Result<SweepCell, ScanError> {
    let [v, _w] = equilibria(p)?;
    let mopts = opts.manifold;

    let shot = shoot_wu_v(p, &mopts)?;
    let degenerate = shot.captured_by_w || (p.lambda1 == 0.0 && p.lambda2 == 0.0);

    // W^s(v) curve on the wall of W (reversed stable loop).
    let w_wall = SectionDef::new(SectionTarget::WWallOut, mopts.geometry);
    let ws_curve = trace_2d_on_section(&v, ManifoldDirection::Stable, p, &w_wall, 0, &mopts)?;
    let ws_pts = ws_curve.wall_points(&mopts.geometry);

    // d_hom_v: height of the W^u(v) exit point over the W^s(v) curve.
    let d_hom_v = if degenerate {
        0.0
    } else {
        match &shot.wu_v_exit {
            Some(q) => q.y - wall_height_at_angle(&ws_pts, q.x).unwrap_or(f64::NAN),
            None => f64::NAN,
        }
    };

    // W^u(w) loop: double spiral on the top disc of W and helix on its wall.
    let loop_trace = trace_wu_w_loop(p, &mopts)?;
    let d_hom_w = if degenerate {
        0.0
    } else {
        match &shot.center_offset {
            Some(c) => {
                match spiral_center_crossing(&loop_trace.spiral, c, mopts.n_seeds) {
                    Some((d, a, b)) if d.abs() < 2e-3 => {
                        let [_, w_eq] = equilibria(p)?;
                        refine_center_crossing(p, &w_eq, c, (a, b), &mopts)
                            .map(|(dr, _, _)| dr)
                            .unwrap_or(d)
                    }
                    Some((d, _, _)) => d,
                    None => f64::NAN,
                }
            }
            None => f64::NAN,
        }
    };

    let strip_count = segment_image_strip_count(p, &mopts);

    // Tangency proximity: fold of the helix against the W^s(v) curve.
    let tangency_bracket = loop_trace
        .helix
        .iter()
        .max_by(|a, b| a.1.y.partial_cmp(&b.1.y).unwrap())
        .and_then(|(_, fold)| wall_height_at_angle(&ws_pts, fold.x).map(|h| fold.y - h))
        .map(|d| d.abs() < opts.tangency_threshold)
        .unwrap_or(false);

    // Periodic attractor search from the settled reference orbit.
    let (periodic_attractor, period) = periodic_probe(p, opts);

    if d_hom_v.is_nan() && d_hom_w.is_nan() && !degenerate {
        return Err(ScanError::BudgetExceeded(
            "neither homoclinic distance resolved".into(),
        ));
    }

    Ok(SweepCell {
        i: 0,
        j: 0,
        lambda1: p.lambda1,
        lambda2: p.lambda2,
        periodic_attractor,
        horseshoe: strip_count >= 1,
        near_homoclinic_v: d_hom_v.is_finite() && d_hom_v.abs() < opts.hom_threshold,
        near_homoclinic_w: d_hom_w.is_finite() && d_hom_w.abs() < opts.hom_threshold,
        tangency_bracket,
        strip_count,
        period,
        d_hom_v,
        d_hom_w,
        degenerate,
        unresolved: false,
    })
}

fn periodic_probe(p: &ModelParams, opts: &ScanOptions) -> (bool, Option<f64>) {
    let iopts = IntegratorOptions {
        rel_tol: 1e-9,
        abs_tol: 1e-11,
        max_step: 0.5,
        renormalize: true,
        max_time: 1e5,
    };
    let x0 = normalize4(&[-0.5, -0.139, -0.8807, 0.3013]);
    let Ok((settled, _)) =
        crate::integrator::integrate(p, x0, (0.0, opts.settle_time), &iopts, &[])
    else {
        return (false, None);
    };
    let surface = |x: &StateR4| x[3];
    let section = EventSpec::new(&surface, Direction::Decreasing);
    match find_periodic_orbit_budgeted(p, &section, settled.last_state(), &iopts, opts.newton_budget)
    {
        Ok(orbit) if orbit.is_attracting() => (true, Some(orbit.period)),
        Ok(_) => (false, None),
        Err(_) => (false, None),
    }
}

/// Rectangular sweep grid over (0, l1_max] x (0, l2_max].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambda1_max: f64,
    pub lambda2_max: f64,
    pub n1: usize,
    pub n2: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lambda1_max: 0.1,
            lambda2_max: 0.1,
            n1: 50,
            n2: 50,
        }
    }
}

impl SweepGrid {
    pub fn lambda1(&self, i: usize) -> f64 {
        self.lambda1_max * (i + 1) as f64 / self.n1 as f64
    }

    pub fn lambda2(&self, j: usize) -> f64 {
        self.lambda2_max * (j + 1) as f64 / self.n2 as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub cells_total: usize,
    pub cells_computed: usize,
    pub cells_resumed: usize,
    pub periodic_attractor: usize,
    pub horseshoe: usize,
    pub near_homoclinic_v: usize,
    pub near_homoclinic_w: usize,
    pub tangency_bracket: usize,
    pub unresolved: usize,
}

/// Classify every cell of the grid and write one JSON record per line,
/// sorted by (i, j). Cells already present in the output file are not
/// recomputed; the rewritten file is byte-identical regardless of worker
/// count because cells are independent, deterministic, and sorted before
/// writing.
pub fn run_sweep(
    base: &ModelParams,
    grid: &SweepGrid,
    workers: usize,
    out_path: &Path,
    opts: &ScanOptions,
) -> Result<SweepSummary, ScanError> {
    let mut existing: BTreeMap<(usize, usize), SweepCell> = BTreeMap::new();
    if out_path.exists() {
        let file = std::fs::File::open(out_path)?;
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cell: SweepCell =
                serde_json::from_str(&line).map_err(|e| ScanError::BadRecord(e.to_string()))?;
            existing.insert((cell.i, cell.j), cell);
        }
    }

    let todo: Vec<(usize, usize)> = (0..grid.n1)
        .flat_map(|i| (0..grid.n2).map(move |j| (i, j)))
        .filter(|key| !existing.contains_key(key))
        .collect();
    let resumed = existing.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("worker pool");
    let computed: Vec<SweepCell> = pool.install(|| {
        todo.par_iter()
            .map(|&(i, j)| {
                let p = ModelParams {
                    lambda1: grid.lambda1(i),
                    lambda2: grid.lambda2(j),
                    ..*base
                };
                let mut cell = classify_cell(&p, opts).unwrap_or_else(|_| SweepCell {
                    i,
                    j,
                    lambda1: p.lambda1,
                    lambda2: p.lambda2,
                    periodic_attractor: false,
                    horseshoe: false,
                    near_homoclinic_v: false,
                    near_homoclinic_w: false,
                    tangency_bracket: false,
                    strip_count: 0,
                    period: None,
                    d_hom_v: f64::NAN,
                    d_hom_w: f64::NAN,
                    degenerate: false,
                    unresolved: true,
                });
                cell.i = i;
                cell.j = j;
                cell
            })
            .collect()
    });
    let computed_count = computed.len();
    for cell in computed {
        existing.insert((cell.i, cell.j), cell);
    }

    let tmp = out_path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for cell in existing.values() {
            let line =
                serde_json::to_string(cell).map_err(|e| ScanError::BadRecord(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
    }
    std::fs::rename(&tmp, out_path)?;

    let count = |f: &dyn Fn(&SweepCell) -> bool| existing.values().filter(|c| f(c)).count();
    Ok(SweepSummary {
        cells_total: existing.len(),
        cells_computed: computed_count,
        cells_resumed: resumed,
        periodic_attractor: count(&|c| c.periodic_attractor),
        horseshoe: count(&|c| c.horseshoe),
        near_homoclinic_v: count(&|c| c.near_homoclinic_v),
        near_homoclinic_w: count(&|c| c.near_homoclinic_w),
        tangency_bracket: count(&|c| c.tangency_bracket),
        unresolved: count(&|c| c.unresolved),
    })
}

/// Kind of homoclinic boundary curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HomKind {
    V,
    W,
    Codim2,
}

/// A point on (or intersection of) traced homoclinic boundary curves.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TonguePoint {
    pub kind: HomKind,
    pub lambda1: f64,
    pub lambda2: f64,
    /// The relevant signed distance(s) after correction.
    pub residual: f64,
}

/// Residual of one homoclinic condition at a parameter point.
pub fn hom_residual(
    base: &ModelParams,
    kind: HomKind,
    lambda1: f64,
    lambda2: f64,
    opts: &ScanOptions,
) -> Result<f64, ScanError> {
    let p = ModelParams {
        lambda1,
        lambda2,
        ..*base
    };
    let mopts = opts.manifold;
    let shot = shoot_wu_v(&p, &mopts)?;
    match kind {
        HomKind::V => {
            let [v, _] = equilibria(&p)?;
            let w_wall = SectionDef::new(SectionTarget::WWallOut, mopts.geometry);
            let ws_curve =
                trace_2d_on_section(&v, ManifoldDirection::Stable, &p, &w_wall, 0, &mopts)?;
            let ws_pts = ws_curve.wall_points(&mopts.geometry);
            let q = shot
                .wu_v_exit
                .ok_or_else(|| ScanError::BudgetExceeded("no W^u(v) wall exit".into()))?;
            let h = wall_height_at_angle(&ws_pts, q.x)
                .ok_or_else(|| ScanError::BudgetExceeded("W^s(v) curve unresolved".into()))?;
            Ok(q.y - h)
        }
        HomKind::W => {
            let c = shot
                .center_offset
                .ok_or_else(|| ScanError::BudgetExceeded("no W^u(v) top-disc arrival".into()))?;
            let lt = trace_wu_w_loop(&p, &mopts)?;
            let (d, a, b) = spiral_center_crossing(&lt.spiral, &c, mopts.n_seeds)
                .ok_or_else(|| ScanError::BudgetExceeded("spiral unresolved".into()))?;
            if d.abs() < 2e-3 {
                let [_, w_eq] = equilibria(&p)?;
                Ok(refine_center_crossing(&p, &w_eq, &c, (a, b), &mopts)
                    .map(|(dr, _, _)| dr)
                    .unwrap_or(d))
            } else {
                Ok(d)
            }
        }
        HomKind::Codim2 => Err(ScanError::BudgetExceeded(
            "codim-2 has two residuals; query V and W separately".into(),
        )),
    }
}

/// Continue a homoclinic boundary curve by secant prediction and bisection
/// correction transverse to the predicted direction.
pub fn trace_tongue_boundary(
    base: &ModelParams,
    kind: HomKind,
    start: TonguePoint,
    steps: usize,
    step_len: f64,
    opts: &ScanOptions,
) -> Result<Vec<TonguePoint>, ScanError> {
    const RESIDUAL_TOL: f64 = 1e-6;
    let eval = |l1: f64, l2: f64| hom_residual(base, kind, l1, l2, opts);

    let mut points: Vec<TonguePoint> = vec![start];
    // Initial direction: homoclinic-w tongues run along the lambda1 axis,
    // homoclinic-v tongues along the lambda2 axis; walk toward the origin.
    let mut dir = match kind {
        HomKind::W => [-1.0, 0.0],
        HomKind::V => [0.0, -1.0],
        HomKind::Codim2 => return Err(ScanError::LostCurve(start.lambda1, start.lambda2)),
    };

    for _ in 0..steps {
        let last = *points.last().unwrap();
        if points.len() >= 2 {
            let prev = points[points.len() - 2];
            let d = [last.lambda1 - prev.lambda1, last.lambda2 - prev.lambda2];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if n > 0.0 {
                dir = [d[0] / n, d[1] / n];
            }
        }
        let pred = [
            last.lambda1 + step_len * dir[0],
            last.lambda2 + step_len * dir[1],
        ];
        if pred[0] <= 1e-4 || pred[1] <= 1e-4 {
            break;
        }
        let normal = [-dir[1], dir[0]];
        // Scan finely along the normal through the prediction and bisect the
        // sign change nearest to it; nearby family members and sign jumps of
        // the distance convention share this normal line, so the nearest
        // bracket keeps the continuation on the same curve.
        let at = |s: f64| (pred[0] + s * normal[0], pred[1] + s * normal[1]);
        let scan: Vec<f64> = (-12..=12).map(|k| 1.5 * step_len * k as f64 / 12.0).collect();
        let mut values: Vec<(f64, f64)> = Vec::new();
        for &s0 in &scan {
            let (l1, l2) = at(s0);
            if l1 <= 0.0 || l2 <= 0.0 {
                continue;
            }
            if let Ok(f) = eval(l1, l2) {
                if f.is_finite() {
                    values.push((s0, f));
                }
            }
        }
        let mut bracket: Option<(f64, f64, f64)> = None; // (lo, hi, f_lo)
        for w in values.windows(2) {
            let ((sa, fa), (sb, fb)) = (w[0], w[1]);
            if fa * fb < 0.0 {
                let mid = 0.5 * (sa + sb);
                let better = match bracket {
                    Some((lo, hi, _)) => mid.abs() < (0.5 * (lo + hi)).abs(),
                    None => true,
                };
                if better {
                    bracket = Some((sa, sb, fa));
                }
            }
        }
        let Some((mut lo, mut hi, mut f_lo)) = bracket else {
            break;
        };
        let mut corrected = None;
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let (l1m, l2m) = at(mid);
            let Ok(fm) = eval(l1m, l2m) else {
                break;
            };
            if fm.abs() < RESIDUAL_TOL {
                corrected = Some(TonguePoint {
                    kind,
                    lambda1: l1m,
                    lambda2: l2m,
                    residual: fm,
                });
                break;
            }
            if fm * f_lo <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
                f_lo = fm;
            }
        }
        match corrected {
            Some(pt) => points.push(pt),
            None => break,
        }
    }
    if points.len() < 2 {
        return Err(ScanError::LostCurve(start.lambda1, start.lambda2));
    }
    Ok(points)
}

/// Search for a starting point of a homoclinic boundary along a parameter
/// segment by bracketing a sign change of the residual.
pub fn find_boundary_start(
    base: &ModelParams,
    kind: HomKind,
    from: (f64, f64),
    to: (f64, f64),
    samples: usize,
    opts: &ScanOptions,
) -> Result<Option<TonguePoint>, ScanError> {
    const RESIDUAL_TOL: f64 = 1e-6;
    let at = |t: f64| {
        (
            from.0 + (to.0 - from.0) * t,
            from.1 + (to.1 - from.1) * t,
        )
    };
    let mut prev: Option<(f64, f64)> = None; // (t, residual)
    for k in 0..=samples {
        let t = k as f64 / samples as f64;
        let (l1, l2) = at(t);
        let Ok(r) = hom_residual(base, kind, l1, l2, opts) else {
            prev = None;
            continue;
        };
        if !r.is_finite() {
            prev = None;
            continue;
        }
        if let Some((t_prev, r_prev)) = prev {
            if r_prev * r < 0.0 {
                // Bisect the bracket.
                let (mut lo, mut hi, mut f_lo) = (t_prev, t, r_prev);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    let (l1m, l2m) = at(mid);
                    let fm = hom_residual(base, kind, l1m, l2m, opts)?;
                    if fm.abs() < RESIDUAL_TOL {
                        return Ok(Some(TonguePoint {
                            kind,
                            lambda1: l1m,
                            lambda2: l2m,
                            residual: fm,
                        }));
                    }
                    if fm * f_lo <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        f_lo = fm;
                    }
                }
                let (l1m, l2m) = at(0.5 * (lo + hi));
                let fm = hom_residual(base, kind, l1m, l2m, opts)?;
                if fm.abs() < RESIDUAL_TOL {
                    return Ok(Some(TonguePoint {
                        kind,
                        lambda1: l1m,
                        lambda2: l2m,
                        residual: fm,
                    }));
                }
            }
        }
        prev = Some((t, r));
    }
    Ok(None)
}

/// Intersect traced hom-v and hom-w boundary polylines and polish each
/// candidate with a 2D Newton iteration on both residuals.
pub fn find_codim2_points(
    base: &ModelParams,
    hom_v_curves: &[Vec<TonguePoint>],
    hom_w_curves: &[Vec<TonguePoint>],
    opts: &ScanOptions,
) -> Result<Vec<TonguePoint>, ScanError> {
    const RESIDUAL_TOL: f64 = 1e-6;
    let mut candidates = Vec::new();
    for cv in hom_v_curves {
        for cw in hom_w_curves {
            let mut nearest: Option<(f64, [f64; 2])> = None;
            for sv in cv.windows(2) {
                for sw in cw.windows(2) {
                    if let Some(pt) = segment_intersection_2d(
                        [sv[0].lambda1, sv[0].lambda2],
                        [sv[1].lambda1, sv[1].lambda2],
                        [sw[0].lambda1, sw[0].lambda2],
                        [sw[1].lambda1, sw[1].lambda2],
                    ) {
                        candidates.push(pt);
                    }
                    // Track the closest approach of the two polylines; it
                    // seeds the Newton polish when the traced arcs pass near
                    // each other without an exact segment intersection.
                    let mv = [
                        0.5 * (sv[0].lambda1 + sv[1].lambda1),
                        0.5 * (sv[0].lambda2 + sv[1].lambda2),
                    ];
                    let mw = [
                        0.5 * (sw[0].lambda1 + sw[1].lambda1),
                        0.5 * (sw[0].lambda2 + sw[1].lambda2),
                    ];
                    let d = ((mv[0] - mw[0]).powi(2) + (mv[1] - mw[1]).powi(2)).sqrt();
                    let mid = [0.5 * (mv[0] + mw[0]), 0.5 * (mv[1] + mw[1])];
                    match nearest {
                        Some((d0, _)) if d0 <= d => {}
                        _ => nearest = Some((d, mid)),
                    }
                }
            }
            if let Some((_, mid)) = nearest {
                candidates.push(mid);
            }
        }
    }

    let mut out: Vec<TonguePoint> = Vec::new();
    'cand: for c in candidates {
        let mut l = c;
        let mut fv = hom_residual(base, HomKind::V, l[0], l[1], opts)?;
        let mut fw = hom_residual(base, HomKind::W, l[0], l[1], opts)?;
        for _ in 0..20 {
            if fv.abs() < RESIDUAL_TOL && fw.abs() < RESIDUAL_TOL {
                // Deduplicate.
                if out
                    .iter()
                    .all(|p| (p.lambda1 - l[0]).abs() + (p.lambda2 - l[1]).abs() > 1e-4)
                {
                    out.push(TonguePoint {
                        kind: HomKind::Codim2,
                        lambda1: l[0],
                        lambda2: l[1],
                        residual: fv.abs().max(fw.abs()),
                    });
                }
                continue 'cand;
            }
            // Finite-difference Newton step on (fv, fw) with backtracking:
            // the finite-difference slopes underestimate near the sampled
            // spiral structure, so a full step can two-cycle.
            let h = 1e-5;
            let fv1 = hom_residual(base, HomKind::V, l[0] + h, l[1], opts)?;
            let fv2 = hom_residual(base, HomKind::V, l[0], l[1] + h, opts)?;
            let fw1 = hom_residual(base, HomKind::W, l[0] + h, l[1], opts)?;
            let fw2 = hom_residual(base, HomKind::W, l[0], l[1] + h, opts)?;
            let j11 = (fv1 - fv) / h;
            let j12 = (fv2 - fv) / h;
            let j21 = (fw1 - fw) / h;
            let j22 = (fw2 - fw) / h;
            let det = j11 * j22 - j12 * j21;
            if det.abs() < 1e-14 || !det.is_finite() {
                continue 'cand;
            }
            let dl1 = (fv * j22 - fw * j12) / det;
            let dl2 = (fw * j11 - fv * j21) / det;
            let norm0 = fv.abs().max(fw.abs());
            let mut accepted = false;
            let mut scale: f64 = 1.0;
            for _ in 0..6 {
                let trial = [(l[0] - scale * dl1).max(1e-4), (l[1] - scale * dl2).max(1e-4)];
                let tv = hom_residual(base, HomKind::V, trial[0], trial[1], opts)?;
                let tw = hom_residual(base, HomKind::W, trial[0], trial[1], opts)?;
                if tv.abs().max(tw.abs()) < norm0 {
                    l = trial;
                    fv = tv;
                    fw = tw;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                continue 'cand;
            }
        }
    }
    Ok(out)
}

fn segment_intersection_2d(
    p1: [f64; 2],
    p2: [f64; 2],
    q1: [f64; 2],
    q2: [f64; 2],
) -> Option<[f64; 2]> {
    let d1 = [p2[0] - p1[0], p2[1] - p1[1]];
    let d2 = [q2[0] - q1[0], q2[1] - q1[1]];
    let det = d1[0] * d2[1] - d1[1] * d2[0];
    if det.abs() < 1e-18 {
        return None;
    }
    let r = [q1[0] - p1[0], q1[1] - p1[1]];
    let t = (r[0] * d2[1] - r[1] * d2[0]) / det;
    let s = (r[0] * d1[1] - r[1] * d1[0]) / det;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&s) {
        Some([p1[0] + t * d1[0], p1[1] + t * d1[1]])
    } else {
        None
    }
}

/// Closed polylines of the two homoclinic loops at (or near) a codimension-2
/// point, in ambient coordinates.
pub struct HomoclinicLoops {
    pub loop_v: Vec<StateR4>,
    pub loop_w: Vec<StateR4>,
}

/// Extract both homoclinic loops at a codimension-2 parameter point: the
/// W^u(v) orbit closed through v, and the W^u(w) orbit (the seed whose
/// top-disc arrival is nearest the disc centre) closed through w.
pub fn extract_homoclinic_loops(
    p: &ModelParams,
    opts: &ScanOptions,
) -> Result<HomoclinicLoops, ScanError> {
    let [v, w] = equilibria(p)?;
    let mopts = opts.manifold;
    let iopts = mopts.integrator;
    // The loops close through the equilibria; the capture ball must stay
    // well clear of the other loop's passage (verified below).
    let capture = 1.3e-3;

    // Loop at v: follow W^u(v) until it returns to v, closing through v.
    let mut x0 = v.location;
    x0[2] += mopts.seed_offset;
    let x0 = normalize4(&x0);
    let loop_iopts_v = IntegratorOptions {
        max_step: 0.03,
        ..iopts
    };
    let mut loop_v = follow_until_capture(p, x0, &v.location, capture, &loop_iopts_v, mopts.t_cap)
        .ok_or_else(|| ScanError::BudgetExceeded("W^u(v) did not return to v".into()))?;
    loop_v.push(v.location);

    // Loop at w: pick the W^u(w) seed whose top-disc arrival is nearest the
    // centre. The deep-arm seed windows sit next to the seeds landing on
    // W^s(v), which the adaptive loop trace resolves; golden search then
    // refines within the local inter-sample window. The search must run with
    // the same integrator options as the final loop integration: the window
    // is narrower than the tolerance, so the optimum is tied to the exact
    // step sequence.
    let loop_iopts = IntegratorOptions {
        max_step: 0.03,
        ..iopts
    };
    let mopts_loop = ManifoldOptions {
        integrator: loop_iopts,
        ..mopts
    };
    let top = SectionDef::new(SectionTarget::WTopInUpper, mopts.geometry);
    let radius_at = |psi: f64| -> Option<f64> {
        let (s, c) = psi.sin_cos();
        let mut x = w.location;
        x[0] += mopts.seed_offset * c;
        x[1] += mopts.seed_offset * s;
        let x = normalize4(&x);
        crate::manifolds::cross_section(p, &x, &top, false, 0, &mopts_loop)
            .ok()
            .flatten()
            .map(|cp| (cp.state[0] * cp.state[0] + cp.state[1] * cp.state[1]).sqrt())
    };
    let lt = trace_wu_w_loop(p, &mopts)?;
    if lt.spiral.len() < 8 {
        return Err(ScanError::BudgetExceeded("W^u(w) spiral unresolved".into()));
    }
    // The homoclinic arm touches the disc centre within a seed window far
    // narrower than any uniform scan. Candidate windows come from the local
    // minima of the sampled spiral's distance to the centre (the adaptive
    // trace resolves the deep arms next to the seeds landing on W^s(v));
    // each window is refined and golden-searched, keeping the deepest.
    let max_gap = 4.0 * std::f64::consts::TAU / (mopts.n_seeds as f64);
    let mut minima: Vec<(f64, (f64, f64))> = Vec::new();
    for win in lt.spiral.windows(2) {
        let ((psi_a, a), (psi_b, b)) = (win[0], win[1]);
        if wrap_angle(psi_b - psi_a).abs() > max_gap {
            continue;
        }
        let seg = [b[0] - a[0], b[1] - a[1]];
        let len2 = seg[0] * seg[0] + seg[1] * seg[1];
        if len2 == 0.0 {
            continue;
        }
        let t = ((-a[0] * seg[0] - a[1] * seg[1]) / len2).clamp(0.0, 1.0);
        let foot = [a[0] + t * seg[0], a[1] + t * seg[1]];
        let dist = foot[0].hypot(foot[1]);
        minima.push((dist, (psi_a, psi_b)));
    }
    minima.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    minima.truncate(4);
    if minima.is_empty() {
        return Err(ScanError::BudgetExceeded("spiral unresolved".into()));
    }
    let mut best_seed: Option<(f64, f64)> = None; // (radius, psi)
    for &(_, bracket) in &minima {
        let (_, psi_a, psi_b) = refine_center_crossing(p, &w, &[0.0, 0.0], bracket, &mopts)
            .unwrap_or((0.0, bracket.0, bracket.1));
        let (mut lo, mut hi) = (psi_a, psi_b);
        for _ in 0..70 {
            let m1 = lo + (hi - lo) * 0.382;
            let m2 = lo + (hi - lo) * 0.618;
            match (radius_at(m1), radius_at(m2)) {
                (Some(r1), Some(r2)) => {
                    if r1 <= r2 {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                _ => break,
            }
        }
        let psi_mid = 0.5 * (lo + hi);
        if let Some(r) = radius_at(psi_mid) {
            if std::env::var("BYKOV_DEBUG").is_ok() {
                eprintln!("bracket ({:.8},{:.8}) -> golden r={:.3e} at psi={:.9}", bracket.0, bracket.1, r, psi_mid);
            }
            match best_seed {
                Some((r0, _)) if r0 <= r => {}
                _ => best_seed = Some((r, psi_mid)),
            }
        }
    }
    let psi_star = best_seed
        .ok_or_else(|| ScanError::BudgetExceeded("deep arm not resolved".into()))?
        .1;
    let (s, c) = psi_star.sin_cos();
    let mut xw = w.location;
    xw[0] += mopts.seed_offset * c;
    xw[1] += mopts.seed_offset * s;
    let xw = normalize4(&xw);
    if std::env::var("BYKOV_DEBUG").is_ok() {
        eprintln!("chosen psi_star={:.9}", psi_star);
    }
    let mut loop_w = follow_until_capture(p, xw, &w.location, capture, &loop_iopts, mopts.t_cap)
        .ok_or_else(|| ScanError::BudgetExceeded("W^u(w) did not return to w".into()))?;
    loop_w.push(w.location);

    // The closure chords live inside the capture balls around the
    // equilibria; the integer linking is only well defined if the other
    // loop stays clear of those balls.
    let clearance_w_at_v = loop_w
        .iter()
        .map(|x| dist4(x, &v.location))
        .fold(f64::INFINITY, f64::min);
    let clearance_v_at_w = loop_v
        .iter()
        .map(|x| dist4(x, &w.location))
        .fold(f64::INFINITY, f64::min);
    if clearance_w_at_v < 3.0 * capture || clearance_v_at_w < 3.0 * capture {
        return Err(ScanError::BudgetExceeded(format!(
            "loop closure ambiguous: clearances {:.2e}, {:.2e} vs capture {:.2e}",
            clearance_w_at_v, clearance_v_at_w, capture
        )));
    }

    Ok(HomoclinicLoops { loop_v, loop_w })
}

fn follow_until_capture(
    p: &ModelParams,
    x0: StateR4,
    target: &StateR4,
    capture: f64,
    iopts: &IntegratorOptions,
    t_cap: f64,
) -> Option<Vec<StateR4>> {
    let debug = std::env::var("BYKOV_DEBUG").is_ok();
    let field = ModelField {
        params: *p,
        reversed: false,
    };
    let proj = |x: &mut StateR4| *x = normalize4(x);
    let (raw, _) =
        integrate_system(&field, x0, (0.0, t_cap), iopts, &[], Some(&proj), None).ok()?;
    let mut out: Vec<StateR4> = Vec::new();
    let mut left = false;
    let mut min_after = f64::INFINITY;
    for (t, x) in &raw.samples {
        let d = dist4(x, target);
        if *t > 1.0 && d > 0.3 {
            left = true;
        }
        out.push(*x);
        if left && d < min_after {
            min_after = d;
        }
        if left && d < capture && *t > 5.0 {
            return Some(out);
        }
    }
    if debug {
        eprintln!("follow: no capture; min dist after leaving = {min_after:.3e}");
    }
    None
}

/// Gauss linking number of the two homoclinic loops after stereographic
/// projection to R^3, with segment lengths adapted to the local separation
/// of the curves (the loops pass within ~1e-3 of each other near the
/// equilibria). The sum must round to an integer with residual below 0.1.
pub fn loops_linking_number(loops: &HomoclinicLoops) -> Result<i64, ScanError> {
    let pole = pick_projection_pole(&loops.loop_v, &loops.loop_w);
    let a3: Vec<[f64; 3]> = loops
        .loop_v
        .iter()
        .map(|x| stereographic_project(x, &pole))
        .collect();
    let b3: Vec<[f64; 3]> = loops
        .loop_w
        .iter()
        .map(|x| stereographic_project(x, &pole))
        .collect();
    let base_a = resample_closed(&a3, 2e-3);
    let base_b = resample_closed(&b3, 2e-3);
    let fine_a = crate::manifolds::resample_adaptive(&base_a, &base_b, 2e-3, 5e-5);
    let fine_b = crate::manifolds::resample_adaptive(&base_b, &base_a, 2e-3, 5e-5);
    let (lk, too_close) = crate::manifolds::gauss_linking_sum(&fine_a, &fine_b);
    if too_close {
        return Err(ScanError::Manifold(ManifoldError::CurvesTooClose {
            min_dist: 0.0,
            seg: 5e-5,
        }));
    }
    let rounded = lk.round();
    if (lk - rounded).abs() >= 0.1 {
        return Err(ScanError::Manifold(ManifoldError::NonIntegerLinking(
            (lk - rounded).abs(),
        )));
    }
    Ok(rounded as i64)
}



/// Which equilibrium a wall point belongs to, for reporting.
pub fn node_of_section(target: SectionTarget) -> NodeLabel {
    SectionDef::new(target, Default::default()).node()
}

pub fn reference_equilibria(p: &ModelParams) -> Result<[Equilibrium; 2], ScanError> {
    Ok(equilibria(p)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_center_distance_synthetic() {
        // Archimedean spiral around c = (0.05, 0): arm radii s = a + b t.
        let c = [0.05, 0.0];
        let spiral: Vec<(f64, [f64; 2])> = (0..2000)
            .map(|i| {
                let t = 0.02 * i as f64;
                let r = 0.002 + 0.004 * t;
                (
                    0.003 * i as f64,
                    [c[0] + r * t.cos(), c[1] + r * t.sin()],
                )
            })
            .collect();
        let d = spiral_center_distance(&spiral, &c, 4000).unwrap();
        // s_z = 0.05; arms cross the ray toward the origin at radii spaced by
        // 0.004 * 2 pi ~ 0.0251 starting near 0.002 + 0.0126 k; the nearest
        // to 0.05 is within half a spacing.
        assert!(d.abs() < 0.0126, "d = {}", d);
    }


    #[test]
    fn segment_intersection_basic() {
        let p = segment_intersection_2d([0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!(segment_intersection_2d([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]).is_none());
    }

    #[test]
    fn classify_cell_periodic_regime() {
        // lambda1 = 0, lambda2 = 0.05: attracting periodic orbit, no
        // transverse horseshoe structure.
        let p = ModelParams::reference(0.0, 0.05);
        let opts = ScanOptions {
            manifold: ManifoldOptions {
                n_seeds: 96,
                ..Default::default()
            },
            ..Default::default()
        };
        let cell = classify_cell(&p, &opts).unwrap();
        assert!(cell.periodic_attractor, "cell {:?}", cell);
        assert!(!cell.horseshoe, "strip_count {}", cell.strip_count);
        assert!(cell.period.unwrap() > 1.0);
    }

    #[test]
    fn classify_cell_degenerate_origin() {
        let p = ModelParams::reference(0.0, 0.0);
        let opts = ScanOptions::default();
        let cell = classify_cell(&p, &opts).unwrap();
        assert!(cell.degenerate);
        assert_eq!(cell.d_hom_v, 0.0);
        assert_eq!(cell.d_hom_w, 0.0);
    }
}
