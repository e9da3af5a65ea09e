//! Cylindrical isolating blocks around the two saddle-foci, the closed-form
//! local maps between their walls and tops, the first-return map, horseshoe
//! strips with the Conley-Moser crossing report, curve-geometry
//! classification (segment / spiral / helix) and the turning-orientation
//! check.
//!
//! Wall points carry an angular coordinate x (radians, stored wrapped to
//! (-pi, pi]) and a height y in [-1, 1]; top-disc points carry a radius
//! r in [0, 1] and an angle varphi. All maps are the linearized model maps;
//! comparisons against the nonlinear flow live in the integration tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{unwrap_angles, wrap_angle};
use crate::integrator::Trajectory;
use crate::model::{Equilibrium, ModelParams, NodeLabel, StateR4};

#[derive(Debug, Error)]
pub enum SectionError {
    #[error("point lies on the local stable manifold (coordinate = 0)")]
    OnStableManifold,
    #[error("intermediate point left its chart: {0}")]
    LeftDomain(String),
    #[error("strip index {n} below the least admissible index n0 = {n0}")]
    BelowN0 { n: i64, n0: i64 },
    #[error("need at least {min} ordered samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("trajectory never passes through the {0:?} neighbourhood")]
    NoPassage(NodeLabel),
}

/// Geometry of the two cylindrical blocks and the transition between them.
///
/// The cylinders have radius 1 and height 2 in linearized units; `chart_radius`
/// and `chart_height` scale those units into ambient coordinates around each
/// equilibrium. `eps` is the angular half-width of the rectangles used for the
/// horseshoe, `tau` their height, and `rotation_wv` the angle of the
/// transition map from the wall of W back to the wall of V (the transition
/// from the top of V to the top of W is the identity).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SectionGeometry {
    pub eps: f64,
    pub tau: f64,
    pub rotation_wv: f64,
    pub chart_radius: f64,
    pub chart_height: f64,
}

impl Default for SectionGeometry {
    fn default() -> Self {
        SectionGeometry {
            eps: 0.1,
            tau: 0.5,
            rotation_wv: 0.0,
            chart_radius: 0.2,
            chart_height: 0.2,
        }
    }
}

impl SectionGeometry {
    /// Ambient point of a wall point of the cylinder around `node`.
    /// `y` in [-1, 1] spans the full wall; the fourth coordinate completes the
    /// point onto the unit sphere.
    pub fn wall_to_ambient(&self, node: NodeLabel, pt: &WallPoint) -> StateR4 {
        let (s, c) = pt.x.sin_cos();
        let x3 = self.chart_height * pt.y;
        let rad2 = self.chart_radius * self.chart_radius + x3 * x3;
        let x4 = (1.0 - rad2).max(0.0).sqrt();
        let x4 = match node {
            NodeLabel::V => x4,
            NodeLabel::W => -x4,
        };
        [self.chart_radius * c, self.chart_radius * s, x3, x4]
    }

    /// Ambient point of a top-disc point (z = +1, the side the upper
    /// connection passes through).
    pub fn top_to_ambient(&self, node: NodeLabel, pt: &TopPoint) -> StateR4 {
        let (s, c) = pt.varphi.sin_cos();
        let rho = self.chart_radius * pt.r;
        let x3 = self.chart_height;
        let x4 = (1.0 - rho * rho - x3 * x3).max(0.0).sqrt();
        let x4 = match node {
            NodeLabel::V => x4,
            NodeLabel::W => -x4,
        };
        [rho * c, rho * s, x3, x4]
    }

    /// Wall coordinates of an ambient point near the cylinder wall.
    pub fn ambient_to_wall(&self, x: &StateR4) -> WallPoint {
        WallPoint {
            x: x[1].atan2(x[0]),
            y: x[2] / self.chart_height,
        }
    }

    /// Top-disc coordinates of an ambient point near a cylinder top.
    pub fn ambient_to_top(&self, x: &StateR4) -> TopPoint {
        TopPoint {
            r: (x[0] * x[0] + x[1] * x[1]).sqrt() / self.chart_radius,
            varphi: x[1].atan2(x[0]),
        }
    }
}

/// Point on a cylinder wall: angle x (mod 2pi) and height y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallPoint {
    pub x: f64,
    pub y: f64,
}

/// Point on a top disc in its polar covering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopPoint {
    pub r: f64,
    pub varphi: f64,
}

/// Local map through the cylinder around v: wall (x, y) with y in (0, 1] to
/// the top disc, (r, phi) = (y^delta_v, x - ln(y)/E_v).
pub fn phi_v(input: &WallPoint, eq: &Equilibrium) -> Result<TopPoint, SectionError> {
    if input.y == 0.0 {
        return Err(SectionError::OnStableManifold);
    }
    if !(input.y > 0.0 && input.y <= 1.0) {
        return Err(SectionError::LeftDomain(format!(
            "wall height {} outside (0, 1]",
            input.y
        )));
    }
    Ok(TopPoint {
        r: input.y.powf(eq.delta),
        varphi: wrap_angle(input.x - input.y.ln() / eq.expanding),
    })
}

/// Local map through the cylinder around w: top disc (r, varphi) with
/// r in (0, 1] to the wall, (x, y) = (varphi - ln(r)/E_w, r^delta_w).
pub fn phi_w(input: &TopPoint, eq: &Equilibrium) -> Result<WallPoint, SectionError> {
    if input.r == 0.0 {
        return Err(SectionError::OnStableManifold);
    }
    if !(input.r > 0.0 && input.r <= 1.0) {
        return Err(SectionError::LeftDomain(format!(
            "top radius {} outside (0, 1]",
            input.r
        )));
    }
    Ok(WallPoint {
        x: wrap_angle(input.varphi - input.r.ln() / eq.expanding),
        y: input.r.powf(eq.delta),
    })
}

/// eta = Phi_w o Psi_{v->w} o Phi_v with the transition Psi_{v->w} = identity.
pub fn eta(input: &WallPoint, eq_v: &Equilibrium, eq_w: &Equilibrium) -> Result<WallPoint, SectionError> {
    let top = phi_v(input, eq_v)?;
    phi_w(&top, eq_w)
}

/// First return to the wall of V: Psi = Psi_{w->v} o eta, with Psi_{w->v} a
/// rigid rotation by `geom.rotation_wv`.
pub fn first_return(
    input: &WallPoint,
    geom: &SectionGeometry,
    eq_v: &Equilibrium,
    eq_w: &Equilibrium,
) -> Result<WallPoint, SectionError> {
    let out = eta(input, eq_v, eq_w)?;
    Ok(WallPoint {
        x: wrap_angle(out.x + geom.rotation_wv),
        y: out.y,
    })
}

/// The lower wall (y < 0) is handled through the mirror image rather than
/// duplicated formulas.
pub fn reflect_wall(pt: &WallPoint) -> WallPoint {
    WallPoint { x: pt.x, y: -pt.y }
}

/// Log-height interval of one horseshoe strip.
///
/// `a_n` and `b_n` are the log-heights K^{-1}(-eps - 2n pi + x0) and
/// K^{-1}(eps - 2n pi + x0) with K = (C_v + E_w)/(E_v E_w); the strip itself
/// is the set of wall points with y in [e^{a_n}, e^{b_n}].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StripBounds {
    pub n: i64,
    pub a_n: f64,
    pub b_n: f64,
    pub n0: i64,
    pub k: f64,
}

pub fn strip_constant(eq_v: &Equilibrium, eq_w: &Equilibrium) -> f64 {
    (eq_v.contracting + eq_w.expanding) / (eq_v.expanding * eq_w.expanding)
}

/// Least strip index whose interval fits under height tau.
pub fn least_strip_index(x0: f64, geom: &SectionGeometry, k: f64) -> i64 {
    // b_n <= ln(tau)  <=>  n >= (eps + x0 - K ln tau) / (2 pi)
    let bound = (geom.eps + x0 - k * geom.tau.ln()) / std::f64::consts::TAU;
    bound.ceil() as i64
}

pub fn strip_bounds(
    n: i64,
    x0: f64,
    geom: &SectionGeometry,
    eq_v: &Equilibrium,
    eq_w: &Equilibrium,
) -> Result<StripBounds, SectionError> {
    let k = strip_constant(eq_v, eq_w);
    let n0 = least_strip_index(x0, geom, k);
    if n < n0 {
        return Err(SectionError::BelowN0 { n, n0 });
    }
    let two_n_pi = 2.0 * n as f64 * std::f64::consts::PI;
    Ok(StripBounds {
        n,
        a_n: (-geom.eps - two_n_pi + x0) / k,
        b_n: (geom.eps - two_n_pi + x0) / k,
        n0,
        k,
    })
}

/// Per-strip crossing diagnostics from the boundary-image computation.
#[derive(Debug, Clone, Serialize)]
pub struct StripCrossing {
    pub n: i64,
    /// Images of the two height boundaries land exactly on the angular
    /// boundaries of the target window (max deviation, radians).
    pub boundary_angle_error: f64,
    /// The side-boundary images sweep the full angular window monotonically.
    pub sweep_monotone: bool,
    /// Unwrapped angular extent of the side-boundary image (radians).
    pub sweep_extent: f64,
    /// All image heights stay inside (0, tau].
    pub heights_inside: bool,
    pub full_crossing: bool,
}

/// Report of the Conley-Moser style crossing verification.
///
/// A strip whose image fully crosses the angular window regenerates the
/// entire strip family on the next pass (the image is again a segment-like
/// curve across the local stable manifold), so the transition matrix pairs
/// every fully-crossing source strip with every valid target strip. The
/// expected result for valid geometry is the all-ones matrix.
#[derive(Debug, Clone, Serialize)]
pub struct HorseshoeReport {
    pub strips: Vec<StripCrossing>,
    pub transition: Vec<Vec<u8>>,
    /// eps < pi so strips of consecutive index are pairwise disjoint.
    pub strips_disjoint: bool,
    pub all_full: bool,
    /// With k fully-crossing strips there are at least 2^k distinct fixed
    /// words of length k in the invariant set (existence lower bound).
    pub fixed_words_lower_bound: Option<u128>,
}

const BOUNDARY_SAMPLES: usize = 64;
const BOUNDARY_ANGLE_TOL: f64 = 1e-9;

/// Compute the images under the first-return map of the four boundary curves
/// of each strip and report whether each image fully crosses the angular
/// window of the target rectangle.
pub fn verify_horseshoe(
    geom: &SectionGeometry,
    eq_v: &Equilibrium,
    eq_w: &Equilibrium,
    x0: f64,
    n_range: std::ops::Range<i64>,
) -> HorseshoeReport {
    let strips_disjoint = geom.eps < std::f64::consts::PI;
    let mut strips = Vec::new();

    for n in n_range.clone() {
        let sb = match strip_bounds(n, x0, geom, eq_v, eq_w) {
            Ok(sb) => sb,
            Err(_) => {
                strips.push(StripCrossing {
                    n,
                    boundary_angle_error: f64::NAN,
                    sweep_monotone: false,
                    sweep_extent: 0.0,
                    heights_inside: false,
                    full_crossing: false,
                });
                continue;
            }
        };

        // Height boundaries y = e^{a_n(x)}, y = e^{b_n(x)} over x in
        // [x0-eps, x0+eps]: the tilted strip uses the interval anchored at
        // each slice's own angle, so both images must sit at constant angle
        // rotation_wv +/- eps (mod 2pi).
        let mut boundary_err = 0.0f64;
        let mut heights_inside = true;
        for i in 0..=BOUNDARY_SAMPLES {
            let x = x0 - geom.eps + 2.0 * geom.eps * (i as f64) / (BOUNDARY_SAMPLES as f64);
            let shift = (x - x0) / sb.k;
            for (log_y, target) in [(sb.a_n + shift, geom.eps), (sb.b_n + shift, -geom.eps)] {
                let pt = WallPoint { x, y: log_y.exp() };
                let img = first_return(&pt, geom, eq_v, eq_w).expect("strip point inside domain");
                let err = wrap_angle(img.x - (geom.rotation_wv + target)).abs();
                boundary_err = boundary_err.max(err);
                if !(img.y > 0.0 && img.y <= geom.tau) {
                    heights_inside = false;
                }
            }
        }

        // Side boundary x = x0 + eps: the image must sweep the full window
        // monotonically in angle.
        let mut angles = Vec::with_capacity(BOUNDARY_SAMPLES + 1);
        let x_side = x0 + geom.eps;
        let shift = geom.eps / sb.k;
        for i in 0..=BOUNDARY_SAMPLES {
            let log_y =
                sb.a_n + shift + (sb.b_n - sb.a_n) * (i as f64) / (BOUNDARY_SAMPLES as f64);
            let pt = WallPoint {
                x: x_side,
                y: log_y.exp(),
            };
            let img = first_return(&pt, geom, eq_v, eq_w).expect("strip point inside domain");
            angles.push(img.x);
            if !(img.y > 0.0 && img.y <= geom.tau) {
                heights_inside = false;
            }
        }
        unwrap_angles(&mut angles);
        let sweep_monotone = angles.windows(2).all(|w| w[1] < w[0] + 1e-12);
        let sweep_extent = (angles.last().unwrap() - angles.first().unwrap()).abs();

        let full_crossing = strips_disjoint
            && heights_inside
            && sweep_monotone
            && boundary_err <= BOUNDARY_ANGLE_TOL
            && (sweep_extent - 2.0 * geom.eps).abs() <= BOUNDARY_ANGLE_TOL;

        strips.push(StripCrossing {
            n,
            boundary_angle_error: boundary_err,
            sweep_monotone,
            sweep_extent,
            heights_inside,
            full_crossing,
        });
    }

    let k = strips.len();
    let mut transition = vec![vec![0u8; k]; k];
    for (i, si) in strips.iter().enumerate() {
        for (j, sj) in strips.iter().enumerate() {
            // A full crossing regenerates the whole family of strips, so any
            // valid target is admissible from a fully-crossing source.
            transition[i][j] = u8::from(si.full_crossing && sj.heights_inside);
        }
    }
    let all_full = !strips.is_empty() && strips.iter().all(|s| s.full_crossing);
    let fixed_words_lower_bound = if all_full && k <= 120 {
        Some(1u128 << k)
    } else if all_full {
        Some(u128::MAX)
    } else {
        None
    };

    HorseshoeReport {
        strips,
        transition,
        strips_disjoint,
        all_full,
        fixed_words_lower_bound,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurveKind {
    Segment,
    Spiral,
    Helix,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveDomain {
    /// Samples are (r, angle) on a top disc.
    Disc,
    /// Samples are (angle, height) on a cylinder wall.
    Cylinder,
}

/// Classification result with the diagnostics that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct CurveClass {
    pub kind: CurveKind,
    /// Accumulated winding over the sampled range, in full turns.
    pub winding: f64,
    pub angle_monotone: bool,
    pub radial_monotone: bool,
}

/// Full turns of winding required before a monotone curve counts as a spiral
/// or helix.
pub const WINDING_TURNS_THRESHOLD: f64 = 3.0;
const MIN_SAMPLES: usize = 50;
const MONOTONE_TOL: f64 = 1e-6;

/// Classify an ordered curve on a disc or cylinder wall by the monotonicity
/// of its coordinates and its winding accumulation.
pub fn classify_curve(samples: &[(f64, f64)], domain: CurveDomain) -> Result<CurveClass, SectionError> {
    if samples.len() < MIN_SAMPLES {
        return Err(SectionError::TooFewSamples {
            min: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let (mut angles, radial): (Vec<f64>, Vec<f64>) = match domain {
        CurveDomain::Disc => samples.iter().map(|&(r, th)| (th, r)).unzip(),
        CurveDomain::Cylinder => samples.iter().map(|&(x, y)| (x, y)).unzip(),
    };
    unwrap_angles(&mut angles);
    let angle_monotone = monotone(&angles);
    let radial_monotone = monotone(&radial);
    let winding = (angles.last().unwrap() - angles.first().unwrap()).abs() / std::f64::consts::TAU;

    let winds = winding >= WINDING_TURNS_THRESHOLD;
    let kind = match domain {
        CurveDomain::Disc => {
            if radial_monotone && angle_monotone && winds {
                CurveKind::Spiral
            } else {
                CurveKind::Other
            }
        }
        CurveDomain::Cylinder => {
            if radial_monotone && angle_monotone && winds {
                CurveKind::Helix
            } else if radial_monotone && angle_monotone {
                CurveKind::Segment
            } else {
                CurveKind::Other
            }
        }
    };
    Ok(CurveClass {
        kind,
        winding,
        angle_monotone,
        radial_monotone,
    })
}

fn monotone(v: &[f64]) -> bool {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = MONOTONE_TOL * scale;
    let up = v.windows(2).all(|w| w[1] >= w[0] - tol);
    let down = v.windows(2).all(|w| w[1] <= w[0] + tol);
    up || down
}

/// Radius of the balls around v and w used by the turning-orientation check.
pub const TURNING_NEIGHBOURHOOD_RADIUS: f64 = 0.35;

/// Check that the (x1, x2) angular coordinate advances in the same direction
/// inside the neighbourhoods of v and of w along the given trajectory.
///
/// The angular velocity is measured from consecutive trajectory samples after
/// unwrapping, so the check also applies to trajectories of modified fields.
pub fn check_turning_orientation(_p: &ModelParams, traj: &Trajectory) -> Result<bool, SectionError> {
    let sign_v = turning_sign(traj, &[0.0, 0.0, 0.0, 1.0], NodeLabel::V)?;
    let sign_w = turning_sign(traj, &[0.0, 0.0, 0.0, -1.0], NodeLabel::W)?;
    Ok(sign_v == sign_w && sign_v != 0)
}

fn turning_sign(traj: &Trajectory, center: &StateR4, label: NodeLabel) -> Result<i32, SectionError> {
    let mut total = 0.0;
    let mut used = 0usize;
    for w in traj.samples.windows(2) {
        let (_, a) = w[0];
        let (_, b) = w[1];
        let inside = |x: &StateR4| {
            crate::geom::dist4(x, center) < TURNING_NEIGHBOURHOOD_RADIUS
                && x[0] * x[0] + x[1] * x[1] > 1e-12
        };
        if inside(&a) && inside(&b) {
            let da = wrap_angle(b[1].atan2(b[0]) - a[1].atan2(a[0]));
            total += da;
            used += 1;
        }
    }
    if used < 2 {
        return Err(SectionError::NoPassage(label));
    }
    Ok(if total > 0.0 {
        1
    } else if total < 0.0 {
        -1
    } else {
        0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{equilibria, ModelParams};
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn ref_eqs() -> (Equilibrium, Equilibrium) {
        let p = ModelParams::reference(0.0, 0.0);
        let [v, w] = equilibria(&p).unwrap();
        (v, w)
    }

    #[test]
    fn phi_v_top_of_wall() {
        let (v, _) = ref_eqs();
        for x in [-2.0, 0.0, 1.5] {
            let out = phi_v(&WallPoint { x, y: 1.0 }, &v).unwrap();
            assert!((out.r - 1.0).abs() < 1e-15);
            assert!(wrap_angle(out.varphi - x).abs() < 1e-15);
        }
    }

    #[test]
    fn phi_v_closed_form_point() {
        // delta_v = 11/9, E_v = 0.9: (0, e^{-0.9}) -> (e^{-1.1}, 1).
        let (v, _) = ref_eqs();
        let y = (-0.9f64).exp();
        let out = phi_v(&WallPoint { x: 0.0, y }, &v).unwrap();
        assert!((out.r - (-1.1f64).exp()).abs() < 1e-15);
        assert!(wrap_angle(out.varphi - 1.0).abs() < 1e-14);
    }

    #[test]
    fn phi_w_center_of_top() {
        let (_, w) = ref_eqs();
        for phi in [0.0, 2.5, -1.0] {
            let out = phi_w(&TopPoint { r: 1.0, varphi: phi }, &w).unwrap();
            assert!((out.y - 1.0).abs() < 1e-15);
            assert!(wrap_angle(out.x - phi).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_manifold_rejected() {
        let (v, w) = ref_eqs();
        assert!(matches!(
            phi_v(&WallPoint { x: 0.0, y: 0.0 }, &v),
            Err(SectionError::OnStableManifold)
        ));
        assert!(matches!(
            phi_w(&TopPoint { r: 0.0, varphi: 0.0 }, &w),
            Err(SectionError::OnStableManifold)
        ));
        assert!(matches!(
            phi_v(&WallPoint { x: 0.0, y: 1.5 }, &v),
            Err(SectionError::LeftDomain(_))
        ));
    }

    #[test]
    fn linearized_flow_oracle_phi_v() {
        // Integrate the linear cylinder system (rho' = -C rho, theta' = 1,
        // z' = E z) from the wall to the top and compare the exit with the
        // closed form.
        let (v, _) = ref_eqs();
        let (c, e) = (v.contracting, v.expanding);
        let sys = move |_t: f64, s: &[f64; 3], ds: &mut [f64; 3]| {
            ds[0] = -c * s[0];
            ds[1] = 1.0;
            ds[2] = e * s[2];
        };
        let opts = crate::integrator::IntegratorOptions::with_tol(1e-12);
        for (x, y) in [(0.3, 0.7), (-1.0, 0.05), (2.0, 0.3), (0.0, 0.9)] {
            let top_surface = |s: &[f64; 3]| s[2] - 1.0;
            let ev =
                crate::integrator::EventSpec::new(&top_surface, crate::integrator::Direction::Increasing);
            let (_, events) = crate::integrator::integrate_system(
                &sys,
                [1.0, x, y],
                (0.0, 100.0),
                &opts,
                &[ev],
                None,
                None,
            )
            .unwrap();
            let exit = events.first().expect("reaches the top");
            let expect = phi_v(&WallPoint { x, y }, &v).unwrap();
            assert!((exit.state[0] - expect.r).abs() < 1e-10);
            assert!(wrap_angle(exit.state[1] - expect.varphi).abs() < 1e-10);
        }
    }

    #[test]
    fn linearized_flow_oracle_phi_w() {
        let (_, w) = ref_eqs();
        let (c, e) = (w.contracting, w.expanding);
        let sys = move |_t: f64, s: &[f64; 3], ds: &mut [f64; 3]| {
            ds[0] = e * s[0];
            ds[1] = 1.0;
            ds[2] = -c * s[2];
        };
        let opts = crate::integrator::IntegratorOptions::with_tol(1e-12);
        for (r, phi) in [(0.4, 0.0), (0.05, 1.2), (0.9, -2.0)] {
            let wall_surface = |s: &[f64; 3]| s[0] - 1.0;
            let ev =
                crate::integrator::EventSpec::new(&wall_surface, crate::integrator::Direction::Increasing);
            let (_, events) = crate::integrator::integrate_system(
                &sys,
                [r, phi, 1.0],
                (0.0, 100.0),
                &opts,
                &[ev],
                None,
                None,
            )
            .unwrap();
            let exit = events.first().expect("reaches the wall");
            let expect = phi_w(&TopPoint { r, varphi: phi }, &w).unwrap();
            assert!(wrap_angle(exit.state[1] - expect.x).abs() < 1e-10);
            assert!((exit.state[2] - expect.y).abs() < 1e-10);
        }
    }

    #[test]
    fn first_return_composition() {
        // With rotation 0 the return map is (x - K ln y, y^rho).
        let (v, w) = ref_eqs();
        let geom = SectionGeometry::default();
        let k = strip_constant(&v, &w);
        let rho = v.delta * w.delta;
        for (x, y) in [(0.0, 1e-2), (0.05, 1e-4), (-0.08, 3e-3)] {
            let out = first_return(&WallPoint { x, y }, &geom, &v, &w).unwrap();
            assert!(wrap_angle(out.x - (x - k * y.ln())).abs() < 1e-10);
            assert!((out.y - y.powf(rho)).abs() < 1e-12 * y.powf(rho).max(1e-300));
        }
    }

    #[test]
    fn strip_arithmetic_exact() {
        let (v, w) = ref_eqs();
        let geom = SectionGeometry::default();
        let k = strip_constant(&v, &w);
        assert!((k - 200.0 / 81.0).abs() < 1e-14);
        let s1 = strip_bounds(3, 0.02, &geom, &v, &w).unwrap();
        let s2 = strip_bounds(4, 0.02, &geom, &v, &w).unwrap();
        assert!((s1.b_n - s1.a_n - 2.0 * geom.eps / k).abs() < 1e-12);
        assert!((s2.a_n - s1.a_n + TAU / k).abs() < 1e-12);
        assert!(s1.n0 <= 5, "n0 = {}", s1.n0);
    }

    #[test]
    fn strip_below_n0_rejected() {
        let (v, w) = ref_eqs();
        let geom = SectionGeometry::default();
        assert!(matches!(
            strip_bounds(0, 0.0, &geom, &v, &w),
            Err(SectionError::BelowN0 { .. })
        ));
    }

    #[test]
    fn strip_endpoints_land_on_window_boundary() {
        // eta maps the strip endpoints onto the angular boundary +/- eps of
        // the target rectangle.
        let (v, w) = ref_eqs();
        let geom = SectionGeometry::default();
        let x0 = 0.03;
        for n in 1..6 {
            let sb = strip_bounds(n, x0, &geom, &v, &w).unwrap();
            let lower = eta(&WallPoint { x: x0, y: sb.a_n.exp() }, &v, &w).unwrap();
            let upper = eta(&WallPoint { x: x0, y: sb.b_n.exp() }, &v, &w).unwrap();
            assert!(wrap_angle(lower.x - geom.eps).abs() < 1e-10);
            assert!(wrap_angle(upper.x + geom.eps).abs() < 1e-10);
        }
    }

    #[test]
    fn horseshoe_all_ones_for_consecutive_strips() {
        let (v, w) = ref_eqs();
        for rot in [0.0, PI / 3.0, PI] {
            let geom = SectionGeometry {
                rotation_wv: rot,
                ..Default::default()
            };
            let n0 = least_strip_index(0.0, &geom, strip_constant(&v, &w));
            let report = verify_horseshoe(&geom, &v, &w, 0.0, n0..n0 + 4);
            assert!(report.all_full, "rotation {rot}: {:?}", report.strips);
            for row in &report.transition {
                assert!(row.iter().all(|&e| e == 1));
            }
            assert_eq!(report.fixed_words_lower_bound, Some(16));
        }
    }

    #[test]
    fn horseshoe_degenerate_eps_invalid() {
        let (v, w) = ref_eqs();
        let geom = SectionGeometry {
            eps: PI,
            ..Default::default()
        };
        let n0 = least_strip_index(0.0, &geom, strip_constant(&v, &w));
        let report = verify_horseshoe(&geom, &v, &w, 0.0, n0..n0 + 3);
        assert!(!report.strips_disjoint);
        assert!(!report.all_full);
    }

    #[test]
    fn classify_segment_spiral_helix() {
        let (v, w) = ref_eqs();
        // A straight vertical wall segment.
        let seg: Vec<(f64, f64)> = (0..200)
            .map(|i| (0.05, 1.0 - (i as f64) / 200.0))
            .collect();
        assert_eq!(
            classify_curve(&seg, CurveDomain::Cylinder).unwrap().kind,
            CurveKind::Segment
        );
        // Its image under phi_v is a spiral; sample deep enough in y for the
        // winding to clear the threshold (the angle grows like -ln(y)/E_v).
        let y_min = (-(WINDING_TURNS_THRESHOLD + 0.5) * TAU * v.expanding).exp();
        let spiral: Vec<(f64, f64)> = log_heights(y_min, 1.0, 4000)
            .into_iter()
            .map(|y| {
                let t = phi_v(&WallPoint { x: 0.05, y }, &v).unwrap();
                (t.r, t.varphi)
            })
            .collect();
        let c = classify_curve(&spiral, CurveDomain::Disc).unwrap();
        assert_eq!(c.kind, CurveKind::Spiral);
        assert!(c.winding > 3.0);
        // The image under eta is a helix accumulating on height 0.
        let helix: Vec<(f64, f64)> = log_heights(y_min, 1.0, 4000)
            .into_iter()
            .map(|y| {
                let out = eta(&WallPoint { x: 0.05, y }, &v, &w).unwrap();
                (out.x, out.y)
            })
            .collect();
        let c = classify_curve(&helix, CurveDomain::Cylinder).unwrap();
        assert_eq!(c.kind, CurveKind::Helix);
        // Accumulates on the height-0 circle toward the deep end.
        assert!(helix.first().unwrap().1 < 1e-8);
    }

    #[test]
    fn classify_rejects_short_input() {
        let few = vec![(0.0, 0.0); 10];
        assert!(matches!(
            classify_curve(&few, CurveDomain::Disc),
            Err(SectionError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn spiral_angle_affine_in_log_height() {
        // Regression of the phi_v image angle against -ln y: slope 1/E_v.
        let (v, _) = ref_eqs();
        let heights = log_heights(1e-8, 1e-1, 400);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for y in heights {
            let t = phi_v(&WallPoint { x: 0.3, y }, &v).unwrap();
            xs.push(-y.ln());
            ys.push(t.varphi);
        }
        unwrap_angles(&mut ys);
        let (slope, _intercept, residual) = linear_fit(&xs, &ys);
        assert!((slope - 1.0 / v.expanding).abs() < 1e-10);
        assert!(residual < 1e-8);
    }

    fn log_heights(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * (i as f64) / (n as f64)).exp())
            .collect()
    }

    fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        let residual = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - slope * a - intercept).abs())
            .fold(0.0f64, f64::max);
        (slope, intercept, residual)
    }

    proptest! {
        #[test]
        fn strip_width_and_spacing_prop(
            x0 in -3.0f64..3.0,
            n in 1i64..40,
            eps in 0.01f64..0.6,
        ) {
            let (v, w) = ref_eqs();
            let geom = SectionGeometry { eps, ..Default::default() };
            let k = strip_constant(&v, &w);
            let n0 = least_strip_index(x0, &geom, k);
            let n = n.max(n0);
            let s = strip_bounds(n, x0, &geom, &v, &w).unwrap();
            let s_next = strip_bounds(n + 1, x0, &geom, &v, &w).unwrap();
            prop_assert!((s.b_n - s.a_n - 2.0 * eps / k).abs() < 1e-12);
            prop_assert!((s.a_n - s_next.a_n - TAU / k).abs() < 1e-12);
            // Strips accumulate at y = 0 and stay below tau.
            prop_assert!(s_next.b_n < s.a_n);
            prop_assert!(s.b_n.exp() <= geom.tau + 1e-12);
        }

        #[test]
        fn wall_chart_on_sphere(x in -3.2f64..3.2, y in -1.0f64..1.0) {
            let geom = SectionGeometry::default();
            let pt = WallPoint { x, y };
            for node in [NodeLabel::V, NodeLabel::W] {
                let amb = geom.wall_to_ambient(node, &pt);
                prop_assert!((crate::geom::norm4(&amb) - 1.0).abs() < 1e-12);
                let back = geom.ambient_to_wall(&amb);
                prop_assert!(wrap_angle(back.x - x).abs() < 1e-9);
                prop_assert!((back.y - y).abs() < 1e-9);
            }
        }
    }
}
