//! Adaptive explicit Runge-Kutta integration with dense output, cross-section
//! event location and sphere-drift monitoring, plus Newton refinement of
//! periodic orbits with Floquet multipliers from the variational flow.
//!
//! The stepper is the Dormand-Prince 5(4) embedded pair with the classical
//! quartic continuous extension. Dense output is what makes event bisection
//! reliable through the slow saddle-focus passages, where accepted steps can
//! be long while the section is crossed in their interior.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{dist4, norm4, normalize4, sub4};
use crate::model::{eval_field, jacobian, ModelParams, StateR4};

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("step size underflow at t = {t} (h = {h:.3e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("max integration time {0} exceeded")]
    MaxTimeExceeded(f64),
    #[error("initial condition off the sphere: |r - 1| = {0:.3e}")]
    OffSphere(f64),
    #[error("orbit left the region before re-crossing the section")]
    NoReturn,
    #[error("Newton iteration on the return map diverged (residual {0:.3e})")]
    NewtonDiverged(f64),
    #[error("invalid tolerance or step bound: {0}")]
    BadOptions(String),
}

/// Tolerances and limits for one integration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the step, which also bounds the sample spacing of the
    /// stored trajectory.
    pub max_step: f64,
    /// Project the state back to the unit sphere after each accepted step.
    pub renormalize: bool,
    /// Hard cap on integration span; exceeding it is an error.
    pub max_time: f64,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 0.5,
            renormalize: false,
            max_time: 1e6,
        }
    }
}

impl IntegratorOptions {
    pub fn with_tol(rel_tol: f64) -> Self {
        IntegratorOptions {
            rel_tol,
            abs_tol: rel_tol * 1e-2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-2 && self.abs_tol > 0.0 && self.abs_tol <= 1e-2)
        {
            return Err(IntegrateError::BadOptions(format!(
                "tolerances must lie in (0, 1e-2]: rel={}, abs={}",
                self.rel_tol, self.abs_tol
            )));
        }
        if !(self.max_step > 0.0) {
            return Err(IntegrateError::BadOptions("max_step must be positive".into()));
        }
        Ok(())
    }
}

/// A right-hand side with compile-time dimension.
pub trait VectorField<const N: usize>: Sync {
    fn eval(&self, t: f64, x: &[f64; N], dx: &mut [f64; N]);
}

impl<const N: usize, F> VectorField<N> for F
where
    F: Fn(f64, &[f64; N], &mut [f64; N]) + Sync,
{
    fn eval(&self, t: f64, x: &[f64; N], dx: &mut [f64; N]) {
        self(t, x, dx)
    }
}

/// The model field as an autonomous 4-dimensional system.
pub struct ModelField {
    pub params: ModelParams,
    /// Multiply the field by -1 to trace stable objects forward in time.
    pub reversed: bool,
}

impl VectorField<4> for ModelField {
    fn eval(&self, _t: f64, x: &[f64; 4], dx: &mut [f64; 4]) {
        let f = eval_field(&self.params, x);
        if self.reversed {
            *dx = [-f[0], -f[1], -f[2], -f[3]];
        } else {
            *dx = f;
        }
    }
}

/// Crossing direction for event detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Increasing,
    Decreasing,
    Both,
}

/// An implicit cross-section surface with a crossing direction.
///
/// `gate` scopes the surface to a region of phase space, which keeps a
/// geometrically global surface (say a cylinder radius) from firing near the
/// other equilibrium.
pub struct EventSpec<'a, const N: usize> {
    pub surface: &'a (dyn Fn(&[f64; N]) -> f64 + Sync),
    pub direction: Direction,
    pub max_events: usize,
    pub gate: Option<&'a (dyn Fn(&[f64; N]) -> bool + Sync)>,
}

impl<'a, const N: usize> EventSpec<'a, N> {
    pub fn new(surface: &'a (dyn Fn(&[f64; N]) -> f64 + Sync), direction: Direction) -> Self {
        EventSpec {
            surface,
            direction,
            max_events: usize::MAX,
            gate: None,
        }
    }

    pub fn with_gate(mut self, gate: &'a (dyn Fn(&[f64; N]) -> bool + Sync)) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn with_max_events(mut self, max_events: usize) -> Self {
        self.max_events = max_events;
        self
    }
}

/// One located section crossing.
#[derive(Debug, Clone, Copy)]
pub struct SectionEvent<const N: usize> {
    /// Index into the event list passed to the integrator.
    pub section: usize,
    pub t: f64,
    pub state: [f64; N],
}

/// Sampled solution of one integration.
#[derive(Debug, Clone)]
pub struct RawTrajectory<const N: usize> {
    pub samples: Vec<(f64, [f64; N])>,
}

impl<const N: usize> RawTrajectory<N> {
    pub fn last(&self) -> (f64, [f64; N]) {
        *self.samples.last().expect("trajectory has at least the initial sample")
    }
}

/// Guaranteed event location tolerance on the surface value. Refinement
/// internally targets a tighter value so states at reported events can be
/// compared against closed forms at this tolerance.
pub const EVENT_SURFACE_TOL: f64 = 1e-10;
const EVENT_REFINE_TOL: f64 = 1e-13;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const MIN_STEP_FRACTION: f64 = 1e-14;

/// Dormand-Prince 5(4) with dense output. Events are located by sign change
/// of the surface on accepted steps, then bisection on the dense output down
/// to [`EVENT_SURFACE_TOL`] in the surface value.
///
/// `post_step` runs after each accepted step (used for sphere projection);
/// event refinement sees the un-projected dense output of the step.
pub fn integrate_system<const N: usize>(
    field: &dyn VectorField<N>,
    x0: [f64; N],
    span: (f64, f64),
    opts: &IntegratorOptions,
    events: &[EventSpec<'_, N>],
    post_step: Option<&(dyn Fn(&mut [f64; N]) + Sync)>,
    mut stop_on: Option<&mut dyn FnMut(&SectionEvent<N>) -> bool>,
) -> Result<(RawTrajectory<N>, Vec<SectionEvent<N>>), IntegrateError> {
    opts.validate()?;
    let (t0, t1) = span;
    if t1 <= t0 {
        return Err(IntegrateError::BadOptions("span must be forward in time".into()));
    }
    if t1 - t0 > opts.max_time {
        return Err(IntegrateError::MaxTimeExceeded(opts.max_time));
    }

    let mut t = t0;
    let mut x = x0;
    let mut k1 = [0.0; N];
    field.eval(t, &x, &mut k1);

    let mut h = initial_step(field, t, &x, &k1, opts).min(opts.max_step).min(t1 - t0);
    let mut samples = Vec::with_capacity(256);
    samples.push((t, x));
    let mut found: Vec<SectionEvent<N>> = Vec::new();
    let mut event_counts = vec![0usize; events.len()];
    let mut surf_prev: Vec<f64> = events.iter().map(|e| (e.surface)(&x)).collect();

    'outer: while t < t1 {
        if h < (t1 - t0) * MIN_STEP_FRACTION {
            return Err(IntegrateError::StepSizeUnderflow { t, h });
        }
        if t + h > t1 {
            h = t1 - t;
        }

        let step = dp5_step(field, t, &x, &k1, h);
        let err = error_norm(&x, &step.y_new, &step.err_vec, opts);

        if err <= 1.0 {
            // Accepted. Locate events inside the step via dense output,
            // scanning interior checkpoints so that a surface crossed twice
            // within one long step is still caught.
            for (idx, ev) in events.iter().enumerate() {
                if event_counts[idx] >= ev.max_events {
                    continue;
                }
                const CHECKPOINTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
                let mut s_lo = surf_prev[idx];
                for w in CHECKPOINTS.windows(2) {
                    let s_hi = if w[1] == 1.0 {
                        (ev.surface)(&step.y_new)
                    } else {
                        (ev.surface)(&step.interpolate(w[1]))
                    };
                    if sign_change(s_lo, s_hi, ev.direction) {
                        if let Some(event) = refine_event(ev, idx, t, h, &step, w[0], w[1]) {
                            let gated = ev.gate.map_or(true, |g| g(&event.state));
                            if gated {
                                event_counts[idx] += 1;
                                let stop = stop_on.as_mut().map_or(false, |f| f(&event));
                                found.push(event);
                                if stop {
                                    samples.push((event.t, event.state));
                                    break 'outer;
                                }
                                if event_counts[idx] >= ev.max_events {
                                    break;
                                }
                            }
                        }
                    }
                    s_lo = s_hi;
                }
                surf_prev[idx] = (ev.surface)(&step.y_new);
            }

            t += h;
            x = step.y_new;
            if let Some(proj) = post_step {
                proj(&mut x);
                for (idx, ev) in events.iter().enumerate() {
                    surf_prev[idx] = (ev.surface)(&x);
                }
            }
            samples.push((t, x));
            k1 = step.k7; // FSAL
            if post_step.is_some() {
                field.eval(t, &x, &mut k1);
            }
        }

        // PI-free classic step-size controller.
        let order = 5.0;
        let fac = if err == 0.0 {
            FAC_MAX
        } else {
            (SAFETY * err.powf(-1.0 / order)).clamp(FAC_MIN, FAC_MAX)
        };
        h = (h * fac).min(opts.max_step);
    }

    Ok((RawTrajectory { samples }, found))
}

struct Dp5Step<const N: usize> {
    y_new: [f64; N],
    err_vec: [f64; N],
    k7: [f64; N],
    // Dense output coefficients.
    cont: [[f64; N]; 5],
}

impl<const N: usize> Dp5Step<N> {
    /// Quartic dense output on the step, theta in [0, 1].
    fn interpolate(&self, theta: f64) -> [f64; N] {
        let th1 = 1.0 - theta;
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = self.cont[0][i]
                + theta
                    * (self.cont[1][i]
                        + th1 * (self.cont[2][i] + theta * (self.cont[3][i] + th1 * self.cont[4][i])));
        }
        out
    }
}

#[allow(clippy::needless_range_loop)]
fn dp5_step<const N: usize>(
    field: &dyn VectorField<N>,
    t: f64,
    y: &[f64; N],
    k1: &[f64; N],
    h: f64,
) -> Dp5Step<N> {
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const A71: f64 = 35.0 / 384.0;
    const A73: f64 = 500.0 / 1113.0;
    const A74: f64 = 125.0 / 192.0;
    const A75: f64 = -2187.0 / 6784.0;
    const A76: f64 = 11.0 / 84.0;
    const E1: f64 = 71.0 / 57600.0;
    const E3: f64 = -71.0 / 16695.0;
    const E4: f64 = 71.0 / 1920.0;
    const E5: f64 = -17253.0 / 339200.0;
    const E6: f64 = 22.0 / 525.0;
    const E7: f64 = -1.0 / 40.0;
    // Hairer's dense-output weights for DOPRI5.
    const D1: f64 = -12715105075.0 / 11282082432.0;
    const D3: f64 = 87487479700.0 / 32700410799.0;
    const D4: f64 = -10690763975.0 / 1880347072.0;
    const D5: f64 = 701980252875.0 / 199316789632.0;
    const D6: f64 = -1453857185.0 / 822651844.0;
    const D7: f64 = 69997945.0 / 29380423.0;

    let mut yt = [0.0; N];
    let mut k2 = [0.0; N];
    let mut k3 = [0.0; N];
    let mut k4 = [0.0; N];
    let mut k5 = [0.0; N];
    let mut k6 = [0.0; N];
    let mut k7 = [0.0; N];

    for i in 0..N {
        yt[i] = y[i] + h * A21 * k1[i];
    }
    field.eval(t + h / 5.0, &yt, &mut k2);
    for i in 0..N {
        yt[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
    }
    field.eval(t + 3.0 * h / 10.0, &yt, &mut k3);
    for i in 0..N {
        yt[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    }
    field.eval(t + 4.0 * h / 5.0, &yt, &mut k4);
    for i in 0..N {
        yt[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    }
    field.eval(t + 8.0 * h / 9.0, &yt, &mut k5);
    for i in 0..N {
        yt[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    }
    field.eval(t + h, &yt, &mut k6);
    let mut y_new = [0.0; N];
    for i in 0..N {
        y_new[i] =
            y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
    }
    field.eval(t + h, &y_new, &mut k7);

    let mut err_vec = [0.0; N];
    for i in 0..N {
        err_vec[i] =
            h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
    }

    let mut cont = [[0.0; N]; 5];
    for i in 0..N {
        let ydiff = y_new[i] - y[i];
        let bspl = h * k1[i] - ydiff;
        cont[0][i] = y[i];
        cont[1][i] = ydiff;
        cont[2][i] = bspl;
        cont[3][i] = ydiff - h * k7[i] - bspl;
        cont[4][i] = h
            * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
    }

    Dp5Step {
        y_new,
        err_vec,
        k7,
        cont,
    }
}

fn error_norm<const N: usize>(
    y: &[f64; N],
    y_new: &[f64; N],
    err_vec: &[f64; N],
    opts: &IntegratorOptions,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let sc = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
        let e = err_vec[i] / sc;
        acc += e * e;
    }
    (acc / N as f64).sqrt()
}

fn initial_step<const N: usize>(
    field: &dyn VectorField<N>,
    t: f64,
    y: &[f64; N],
    k1: &[f64; N],
    opts: &IntegratorOptions,
) -> f64 {
    // Hairer's starting-step heuristic, simplified.
    let mut d0: f64 = 0.0;
    let mut d1: f64 = 0.0;
    for i in 0..N {
        let sc = opts.abs_tol + opts.rel_tol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (k1[i] / sc).powi(2);
    }
    let d0 = (d0 / N as f64).sqrt();
    let d1 = (d1 / N as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let mut yt = [0.0; N];
    for i in 0..N {
        yt[i] = y[i] + h0 * k1[i];
    }
    let mut k2 = [0.0; N];
    field.eval(t + h0, &yt, &mut k2);
    let mut d2: f64 = 0.0;
    for i in 0..N {
        let sc = opts.abs_tol + opts.rel_tol * y[i].abs();
        d2 += ((k2[i] - k1[i]) / sc).powi(2);
    }
    let d2 = (d2 / N as f64).sqrt() / h0;
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dm).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

fn sign_change(s_old: f64, s_new: f64, dir: Direction) -> bool {
    let crossed = s_old * s_new < 0.0 || (s_old == 0.0 && s_new != 0.0);
    if !crossed {
        return false;
    }
    match dir {
        Direction::Both => true,
        Direction::Increasing => s_new > s_old,
        Direction::Decreasing => s_new < s_old,
    }
}

fn refine_event<const N: usize>(
    ev: &EventSpec<'_, N>,
    idx: usize,
    t: f64,
    h: f64,
    step: &Dp5Step<N>,
    theta_lo: f64,
    theta_hi: f64,
) -> Option<SectionEvent<N>> {
    let mut lo = theta_lo;
    let mut hi = theta_hi;
    let mut s_lo = (ev.surface)(&step.interpolate(lo));
    let s_hi = (ev.surface)(&step.interpolate(hi));
    if s_lo == 0.0 {
        return Some(SectionEvent {
            section: idx,
            t: t + lo * h,
            state: step.interpolate(lo),
        });
    }
    if s_lo * s_hi > 0.0 {
        // The dense output disagrees with the endpoint sign change; treat as
        // a grazing pass and skip.
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s_mid = (ev.surface)(&step.interpolate(mid));
        if s_mid.abs() <= EVENT_REFINE_TOL {
            return Some(SectionEvent {
                section: idx,
                t: t + mid * h,
                state: step.interpolate(mid),
            });
        }
        if s_lo * s_mid <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            s_lo = s_mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    Some(SectionEvent {
        section: idx,
        t: t + mid * h,
        state: step.interpolate(mid),
    })
}

/// Sampled flow of the model with metadata.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<(f64, StateR4)>,
    pub params: ModelParams,
    pub options: IntegratorOptions,
    /// Largest observed |r - 1| over all accepted samples.
    pub drift_max: f64,
}

impl Trajectory {
    pub fn last_state(&self) -> StateR4 {
        self.samples.last().expect("non-empty").1
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W, header: &str) -> std::io::Result<()> {
        writeln!(w, "# {header}")?;
        writeln!(w, "t,x1,x2,x3,x4")?;
        for (t, x) in &self.samples {
            writeln!(w, "{},{},{},{},{}", t, x[0], x[1], x[2], x[3])?;
        }
        Ok(())
    }
}

/// Integrate the model flow on the sphere.
///
/// The initial condition must satisfy |r - 1| <= 1e-6. With
/// `opts.renormalize` the state is projected to the unit sphere after each
/// accepted step; otherwise the drift |r - 1| is recorded honestly in
/// `drift_max`.
pub fn integrate(
    p: &ModelParams,
    x0: StateR4,
    span: (f64, f64),
    opts: &IntegratorOptions,
    events: &[EventSpec<'_, 4>],
) -> Result<(Trajectory, Vec<SectionEvent<4>>), IntegrateError> {
    let off = (norm4(&x0) - 1.0).abs();
    if off > 1e-6 {
        return Err(IntegrateError::OffSphere(off));
    }
    let field = ModelField {
        params: *p,
        reversed: false,
    };
    let proj = |x: &mut StateR4| *x = normalize4(x);
    let post: Option<&(dyn Fn(&mut StateR4) + Sync)> =
        if opts.renormalize { Some(&proj) } else { None };
    let (raw, evs) = integrate_system(&field, x0, span, opts, events, post, None)?;
    let drift_max = raw
        .samples
        .iter()
        .map(|(_, x)| (norm4(x) - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((
        Trajectory {
            samples: raw.samples,
            params: *p,
            options: *opts,
            drift_max,
        },
        evs,
    ))
}

/// A refined periodic orbit.
#[derive(Debug, Clone)]
pub struct PeriodicOrbit {
    pub orbit: Trajectory,
    pub period: f64,
    /// Floquet multipliers of the monodromy matrix, by decreasing modulus.
    pub multipliers: Vec<Complex64>,
    /// Fixed point of the return map on the section.
    pub section_point: StateR4,
}

impl PeriodicOrbit {
    /// Attracting iff every multiplier other than the trivial unit one has
    /// modulus below 1.
    pub fn is_attracting(&self) -> bool {
        let trivial = self
            .multipliers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - Complex64::new(1.0, 0.0))
                    .norm()
                    .total_cmp(&(b.1 - Complex64::new(1.0, 0.0)).norm())
            })
            .map(|(i, _)| i);
        self.multipliers
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != trivial)
            .all(|(_, m)| m.norm() < 1.0)
    }
}

/// Newton refinement of an attracting periodic orbit from a nearby guess.
///
/// The return map is taken on the given section; its Jacobian for the Newton
/// solve comes from finite differences (four extra integrations per
/// iteration), while the multipliers come from the variational flow over the
/// refined period.
pub fn find_periodic_orbit(
    p: &ModelParams,
    section: &EventSpec<'_, 4>,
    guess: StateR4,
    opts: &IntegratorOptions,
) -> Result<PeriodicOrbit, IntegrateError> {
    find_periodic_orbit_budgeted(p, section, guess, opts, 25)
}

/// As [`find_periodic_orbit`] with an explicit Newton iteration budget
/// (each iteration costs five return-map integrations).
pub fn find_periodic_orbit_budgeted(
    p: &ModelParams,
    section: &EventSpec<'_, 4>,
    guess: StateR4,
    opts: &IntegratorOptions,
    max_newton: usize,
) -> Result<PeriodicOrbit, IntegrateError> {
    const NEWTON_TOL: f64 = 1e-10;

    // Land the guess on the section first.
    let (mut point, _) = return_to_section(p, &guess, section, opts, true)?;

    let mut residual = f64::INFINITY;
    for _ in 0..max_newton {
        let (image, _tau) = return_to_section(p, &point, section, opts, false)?;
        let f: StateR4 = sub4(&image, &point);
        residual = norm4(&f);
        if residual <= NEWTON_TOL {
            break;
        }

        // Finite-difference Jacobian of the return map in ambient coordinates,
        // restricted to directions tangent to the section is unnecessary: the
        // radial and in-section components are handled by the least-squares
        // solve below.
        let h = 1e-7;
        let mut dp_mat = nalgebra::Matrix4::<f64>::zeros();
        for j in 0..4 {
            let mut xp = point;
            xp[j] += h;
            let (img_p, _) = return_to_section(p, &xp, section, opts, false)?;
            for i in 0..4 {
                dp_mat[(i, j)] = (img_p[i] - image[i]) / h;
            }
        }
        let a = dp_mat - nalgebra::Matrix4::identity();
        let rhs = nalgebra::Vector4::new(f[0], f[1], f[2], f[3]);
        let svd = nalgebra::SVD::new(a, true, true);
        let dx = svd
            .solve(&rhs, 1e-12)
            .map_err(|_| IntegrateError::NewtonDiverged(residual))?;
        let mut next = point;
        for i in 0..4 {
            next[i] -= dx[i];
        }
        next = normalize4(&next);
        // Re-anchor exactly on the section.
        let (landed, _) = return_to_section(p, &next, section, opts, true)?;
        point = landed;
    }
    if residual > NEWTON_TOL * 10.0 {
        return Err(IntegrateError::NewtonDiverged(residual));
    }

    let (_, period) = return_to_section(p, &point, section, opts, false)?;
    let orbit = integrate(p, point, (0.0, period), opts, &[])?.0;
    let multipliers = monodromy_multipliers(p, &point, period, opts)?;

    Ok(PeriodicOrbit {
        orbit,
        period,
        multipliers,
        section_point: point,
    })
}

/// Flow `x0` forward to the next section crossing. With `accept_immediate`
/// the very first crossing counts even at t ~ 0; otherwise a short blanking
/// interval skips the departure crossing.
fn return_to_section(
    p: &ModelParams,
    x0: &StateR4,
    section: &EventSpec<'_, 4>,
    opts: &IntegratorOptions,
    accept_immediate: bool,
) -> Result<(StateR4, f64), IntegrateError> {
    let blank = if accept_immediate { 0.0 } else { 1e-3 };
    let ev = EventSpec {
        surface: section.surface,
        direction: section.direction,
        max_events: usize::MAX,
        gate: section.gate,
    };
    let mut hit: Option<SectionEvent<4>> = None;
    let mut stop = |e: &SectionEvent<4>| {
        if e.t > blank {
            hit = Some(*e);
            true
        } else {
            false
        }
    };
    let field = ModelField {
        params: *p,
        reversed: false,
    };
    let horizon = opts.max_time.min(2000.0);
    integrate_system(
        &field,
        *x0,
        (0.0, horizon),
        opts,
        std::slice::from_ref(&ev),
        None,
        Some(&mut stop),
    )?;
    match hit {
        Some(e) => Ok((e.state, e.t)),
        None => Err(IntegrateError::NoReturn),
    }
}

/// Multipliers of the monodromy matrix from the 4+16 dimensional variational
/// flow over one period.
pub fn monodromy_multipliers(
    p: &ModelParams,
    x0: &StateR4,
    period: f64,
    opts: &IntegratorOptions,
) -> Result<Vec<Complex64>, IntegrateError> {
    let params = *p;
    let rhs = move |_t: f64, y: &[f64; 20], dy: &mut [f64; 20]| {
        let x = [y[0], y[1], y[2], y[3]];
        let f = eval_field(&params, &x);
        dy[..4].copy_from_slice(&f);
        let j = jacobian(&params, &x);
        // Column-major variational blocks: y[4 + 4*c + r] = V[r][c].
        for c in 0..4 {
            for r in 0..4 {
                let mut acc = 0.0;
                for m in 0..4 {
                    acc += j[(r, m)] * y[4 + 4 * c + m];
                }
                dy[4 + 4 * c + r] = acc;
            }
        }
    };
    let mut y0 = [0.0; 20];
    y0[..4].copy_from_slice(x0);
    for i in 0..4 {
        y0[4 + 5 * i] = 1.0;
    }
    let var_opts = IntegratorOptions {
        renormalize: false,
        ..*opts
    };
    let (raw, _) = integrate_system(&rhs, y0, (0.0, period), &var_opts, &[], None, None)?;
    let (_, yf) = raw.last();
    let mut m = nalgebra::Matrix4::<f64>::zeros();
    for c in 0..4 {
        for r in 0..4 {
            m[(r, c)] = yf[4 + 4 * c + r];
        }
    }
    let mut eigs: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    Ok(eigs)
}

/// Distance from the state to the nearest of the two equilibria.
pub fn dist_to_nodes(x: &StateR4) -> f64 {
    let dv = dist4(x, &[0.0, 0.0, 0.0, 1.0]);
    let dw = dist4(x, &[0.0, 0.0, 0.0, -1.0]);
    dv.min(dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    /// The figure initial condition, projected onto the sphere (the published
    /// point has |r| ~ 1.066 and relies on the sphere being attracting).
    pub fn fig_initial_condition() -> StateR4 {
        normalize4(&[-0.5000, -0.1390, -0.8807, 0.3013])
    }

    #[test]
    fn constant_at_equilibrium() {
        let p = ModelParams::reference(0.0, 0.0);
        let v = [0.0, 0.0, 0.0, 1.0];
        let (traj, events) = integrate(
            &p,
            v,
            (0.0, 50.0),
            &IntegratorOptions::default(),
            &[EventSpec::new(&|x: &StateR4| x[2], Direction::Both)],
        )
        .unwrap();
        assert!(events.is_empty());
        for (_, x) in &traj.samples {
            assert!(dist4(x, &v) < 1e-12);
        }
    }

    #[test]
    fn rejects_off_sphere_start() {
        let p = ModelParams::reference(0.0, 0.0);
        let res = integrate(
            &p,
            [-0.5, -0.139, -0.8807, 0.3013],
            (0.0, 1.0),
            &IntegratorOptions::default(),
            &[],
        );
        assert!(matches!(res, Err(IntegrateError::OffSphere(_))));
    }

    #[test]
    fn approaches_network() {
        let p = ModelParams::reference(0.0, 0.0);
        let opts = IntegratorOptions {
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            renormalize: true,
            ..Default::default()
        };
        let (traj, _) = integrate(&p, fig_initial_condition(), (0.0, 1000.0), &opts, &[]).unwrap();
        let min_late = traj
            .samples
            .iter()
            .filter(|(t, _)| *t > 500.0)
            .map(|(_, x)| dist_to_nodes(x))
            .fold(f64::INFINITY, f64::min);
        assert!(min_late < 1e-2, "min distance to nodes {}", min_late);
    }

    #[test]
    fn drift_small_without_renormalization() {
        let p = ModelParams::reference(0.0, 0.0);
        let opts = IntegratorOptions {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            renormalize: false,
            ..Default::default()
        };
        let (traj, _) = integrate(&p, fig_initial_condition(), (0.0, 200.0), &opts, &[]).unwrap();
        assert!(traj.drift_max <= 1e-6, "drift {}", traj.drift_max);
    }

    #[test]
    fn tolerance_convergence() {
        // Halving rel_tol moves the endpoint of a T = 100 organizing-centre
        // run by less than 10x the finer tolerance per unit time. The bound
        // is per unit time because each saddle passage amplifies local error;
        // the measured amplification is ~20x over this horizon.
        let p = ModelParams::reference(0.0, 0.0);
        let x0 = fig_initial_condition();
        let t_end = 100.0;
        let endpoint = |rtol: f64| {
            let opts = IntegratorOptions {
                rel_tol: rtol,
                abs_tol: rtol * 1e-2,
                renormalize: false,
                ..Default::default()
            };
            integrate(&p, x0, (0.0, t_end), &opts, &[]).unwrap().0.last_state()
        };
        let coarse = endpoint(2e-10);
        let fine = endpoint(1e-10);
        assert!(dist4(&coarse, &fine) < 10.0 * 1e-10 * t_end);
    }

    #[test]
    fn event_accuracy() {
        let p = ModelParams::reference(0.0, 0.0);
        let surface = |x: &StateR4| x[3];
        let ev = EventSpec::new(&surface, Direction::Both).with_max_events(20);
        let opts = IntegratorOptions::with_tol(1e-10);
        let (_, events) =
            integrate(&p, fig_initial_condition(), (0.0, 100.0), &opts, &[ev]).unwrap();
        assert!(!events.is_empty());
        for e in &events {
            assert!(e.state[3].abs() <= EVENT_SURFACE_TOL, "surface {}", e.state[3]);
        }
    }

    #[test]
    fn event_direction_filter() {
        let p = ModelParams::reference(0.0, 0.0);
        let surface = |x: &StateR4| x[3];
        let down = EventSpec::new(&surface, Direction::Decreasing).with_max_events(50);
        let both = EventSpec::new(&surface, Direction::Both).with_max_events(50);
        let opts = IntegratorOptions::with_tol(1e-9);
        let x0 = fig_initial_condition();
        let (_, ev_down) = integrate(&p, x0, (0.0, 150.0), &opts, &[down]).unwrap();
        let (_, ev_both) = integrate(&p, x0, (0.0, 150.0), &opts, &[both]).unwrap();
        assert!(!ev_down.is_empty());
        assert!(ev_both.len() > ev_down.len());
    }

    #[test]
    fn time_reversal_recovers_start() {
        let p = ModelParams::reference(0.03, 0.02);
        let x0 = fig_initial_condition();
        let opts = IntegratorOptions::with_tol(1e-11);
        let fwd = ModelField {
            params: p,
            reversed: false,
        };
        let (raw, _) = integrate_system(&fwd, x0, (0.0, 3.0), &opts, &[], None, None).unwrap();
        let (_, xe) = raw.last();
        let bwd = ModelField {
            params: p,
            reversed: true,
        };
        let (raw_b, _) = integrate_system(&bwd, xe, (0.0, 3.0), &opts, &[], None, None).unwrap();
        let (_, back) = raw_b.last();
        assert!(dist4(&back, &x0) < 1e-8, "reversal error {}", dist4(&back, &x0));
    }

    #[test]
    fn periodic_orbit_lambda2() {
        let p = ModelParams::reference(0.0, 0.05);
        let opts = IntegratorOptions {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            renormalize: false,
            max_step: 0.5,
            max_time: 4000.0,
        };
        // Settle onto the attractor first.
        let settle = integrate(&p, fig_initial_condition(), (0.0, 400.0), &opts, &[])
            .unwrap()
            .0
            .last_state();
        let surface = |x: &StateR4| x[3];
        let section = EventSpec::new(&surface, Direction::Decreasing);
        let orbit = find_periodic_orbit(&p, &section, settle, &opts).unwrap();
        assert!(orbit.period > 1.0);
        assert!(orbit.is_attracting(), "multipliers {:?}", orbit.multipliers);
        // gamma2 image is again a periodic orbit with the same period: its
        // section point returns to itself in the same time.
        let g2 = crate::model::SymmetryOp::Gamma2;
        let image_pt = g2.apply(&orbit.section_point);
        let up = EventSpec::new(&surface, Direction::Increasing);
        let orbit2 = find_periodic_orbit(&p, &up, image_pt, &opts).unwrap();
        assert!((orbit2.period - orbit.period).abs() < 1e-5 * orbit.period);
    }
}
