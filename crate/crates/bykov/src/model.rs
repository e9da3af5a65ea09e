//! The vector field itself: exact evaluation, analytic Jacobian, equilibria
//! with their eigenvalue data, symmetry operators, the reduced system in
//! spherical coordinates, and the catalog of cubic perturbations tangent to
//! the sphere together with a numerical symmetry classifier.

use nalgebra::Matrix4;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{dot4, normalize4, Vec4};

/// Ambient state in R^4. Points of interest satisfy |r^2 - 1| <= 1e-9.
pub type StateR4 = Vec4;

/// Tolerance below which a state counts as lying on the unit sphere.
pub const ON_SPHERE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter regime violated: need alpha2 < 0 < alpha1 and alpha1 + alpha2 > 0, got alpha1={alpha1}, alpha2={alpha2}")]
    RegimeViolation { alpha1: f64, alpha2: f64 },
    #[error("non-finite parameter or state component")]
    NonFinite,
    #[error("reduced spherical system is only defined for lambda2 = 0, got lambda2={0}")]
    ReducedSystemUndefined(f64),
    #[error("term is not tangent to the sphere: max |<x, P(x)>| = {0:.3e}")]
    NotTangent(f64),
    #[error("term is not homogeneous cubic")]
    NotCubic,
    #[error("catalog i/o: {0}")]
    CatalogIo(String),
}

/// The four parameters of the family plus the regime switch.
///
/// With `enforce_regime` set, construction and the operations that rely on
/// hyperbolicity require `alpha2 < 0 < alpha1` and `alpha1 + alpha2 > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default = "default_enforce")]
    pub enforce_regime: bool,
}

fn default_enforce() -> bool {
    true
}

impl ModelParams {
    pub fn new(alpha1: f64, alpha2: f64, lambda1: f64, lambda2: f64) -> Result<Self, ModelError> {
        let p = ModelParams {
            alpha1,
            alpha2,
            lambda1,
            lambda2,
            enforce_regime: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// The reference parameters used throughout: alpha1 = 1, alpha2 = -0.1.
    pub fn reference(lambda1: f64, lambda2: f64) -> Self {
        ModelParams::new(1.0, -0.1, lambda1, lambda2).expect("reference regime is valid")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if ![self.alpha1, self.alpha2, self.lambda1, self.lambda2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(ModelError::NonFinite);
        }
        if self.enforce_regime && !(self.alpha2 < 0.0 && 0.0 < self.alpha1 && self.alpha1 + self.alpha2 > 0.0)
        {
            return Err(ModelError::RegimeViolation {
                alpha1: self.alpha1,
                alpha2: self.alpha2,
            });
        }
        Ok(())
    }
}

/// Right-hand side of the quartic system in R^4. Total function.
#[inline]
pub fn eval_field(p: &ModelParams, x: &StateR4) -> StateR4 {
    let [x1, x2, x3, x4] = *x;
    let r2 = x1 * x1 + x2 * x2 + x3 * x3 + x4 * x4;
    let s = 1.0 - r2;
    [
        x1 * s - x2 - p.alpha1 * x1 * x4 + p.alpha2 * x1 * x4 * x4 + p.lambda2 * x3 * x3 * x4,
        x2 * s + x1 - p.alpha1 * x2 * x4 + p.alpha2 * x2 * x4 * x4,
        x3 * s
            + p.alpha1 * x3 * x4
            + p.alpha2 * x3 * x4 * x4
            + p.lambda1 * x1 * x2 * x4
            - p.lambda2 * x1 * x3 * x4,
        x4 * s
            - p.alpha1 * (x3 * x3 - x1 * x1 - x2 * x2)
            - p.alpha2 * x4 * (x1 * x1 + x2 * x2 + x3 * x3)
            - p.lambda1 * x1 * x2 * x3,
    ]
}

/// Analytic Jacobian of [`eval_field`], differentiated by hand so that
/// eigenvalue and variational computations are exact. Finite differences are
/// kept as a test oracle only.
pub fn jacobian(p: &ModelParams, x: &StateR4) -> Matrix4<f64> {
    let [x1, x2, x3, x4] = *x;
    let (a1, a2, l1, l2) = (p.alpha1, p.alpha2, p.lambda1, p.lambda2);
    let r2 = x1 * x1 + x2 * x2 + x3 * x3 + x4 * x4;
    let s = 1.0 - r2;
    Matrix4::new(
        s - 2.0 * x1 * x1 - a1 * x4 + a2 * x4 * x4,
        -2.0 * x1 * x2 - 1.0,
        -2.0 * x1 * x3 + 2.0 * l2 * x3 * x4,
        -2.0 * x1 * x4 - a1 * x1 + 2.0 * a2 * x1 * x4 + l2 * x3 * x3,
        //
        -2.0 * x1 * x2 + 1.0,
        s - 2.0 * x2 * x2 - a1 * x4 + a2 * x4 * x4,
        -2.0 * x2 * x3,
        -2.0 * x2 * x4 - a1 * x2 + 2.0 * a2 * x2 * x4,
        //
        -2.0 * x1 * x3 + l1 * x2 * x4 - l2 * x3 * x4,
        -2.0 * x2 * x3 + l1 * x1 * x4,
        s - 2.0 * x3 * x3 + a1 * x4 + a2 * x4 * x4 - l2 * x1 * x4,
        -2.0 * x3 * x4 + a1 * x3 + 2.0 * a2 * x3 * x4 + l1 * x1 * x2 - l2 * x1 * x3,
        //
        -2.0 * x1 * x4 + 2.0 * a1 * x1 - 2.0 * a2 * x1 * x4 - l1 * x2 * x3,
        -2.0 * x2 * x4 + 2.0 * a1 * x2 - 2.0 * a2 * x2 * x4 - l1 * x1 * x3,
        -2.0 * x3 * x4 - 2.0 * a1 * x3 - 2.0 * a2 * x3 * x4 - l1 * x1 * x2,
        s - 2.0 * x4 * x4 - a2 * (x1 * x1 + x2 * x2 + x3 * x3),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeLabel {
    V,
    W,
}

impl NodeLabel {
    pub fn other(self) -> NodeLabel {
        match self {
            NodeLabel::V => NodeLabel::W,
            NodeLabel::W => NodeLabel::V,
        }
    }
}

/// One saddle-focus with its tangential eigenvalue data.
///
/// `contracting` and `expanding` are the positive real parts C and E of the
/// contracting/expanding tangential eigenvalues; the ambient radial
/// eigenvalue (-2 at both equilibria) is reported separately in `radial`
/// because the dynamics of interest lives on the sphere.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Equilibrium {
    pub label: NodeLabel,
    pub location: StateR4,
    /// C: magnitude of the real part of the contracting eigenvalue(s).
    pub contracting: f64,
    /// E: magnitude of the real part of the expanding eigenvalue(s).
    pub expanding: f64,
    /// Spiral frequency of the complex pair (= 1 for this family).
    pub omega: f64,
    /// delta = C / E.
    pub delta: f64,
    pub morse_index: usize,
    /// Ambient eigenvalue transverse to the sphere.
    pub radial: f64,
}

impl Equilibrium {
    /// Tangential eigenvalues in closed form: alpha2 - eps*alpha1 +/- i and
    /// alpha2 + eps*alpha1, with eps = +1 at v and -1 at w.
    pub fn tangential_eigenvalues(&self, p: &ModelParams) -> [Complex64; 3] {
        let eps = match self.label {
            NodeLabel::V => 1.0,
            NodeLabel::W => -1.0,
        };
        let re_pair = p.alpha2 - eps * p.alpha1;
        [
            Complex64::new(re_pair, 1.0),
            Complex64::new(re_pair, -1.0),
            Complex64::new(p.alpha2 + eps * p.alpha1, 0.0),
        ]
    }
}

/// The two equilibria v = (0,0,0,1) and w = (0,0,0,-1) with eigenvalue data
/// filled from the closed form. The origin is excluded (not on the sphere).
pub fn equilibria(p: &ModelParams) -> Result<[Equilibrium; 2], ModelError> {
    p.validate()?;
    let (c, e) = (p.alpha1 - p.alpha2, p.alpha1 + p.alpha2);
    if !(c > 0.0 && e > 0.0) {
        return Err(ModelError::RegimeViolation {
            alpha1: p.alpha1,
            alpha2: p.alpha2,
        });
    }
    let delta = c / e;
    Ok([
        Equilibrium {
            label: NodeLabel::V,
            location: [0.0, 0.0, 0.0, 1.0],
            contracting: c,
            expanding: e,
            omega: 1.0,
            delta,
            morse_index: 1,
            radial: -2.0,
        },
        Equilibrium {
            label: NodeLabel::W,
            location: [0.0, 0.0, 0.0, -1.0],
            contracting: c,
            expanding: e,
            omega: 1.0,
            delta,
            morse_index: 2,
            radial: -2.0,
        },
    ])
}

/// Saddle ratio rho = (Cv/Ev)(Cw/Ew) = ((alpha2-alpha1)/(alpha2+alpha1))^2.
/// Exceeds 1 in the valid regime, which makes the unbroken network attracting.
pub fn saddle_ratio(p: &ModelParams) -> f64 {
    let q = (p.alpha2 - p.alpha1) / (p.alpha2 + p.alpha1);
    q * q
}

/// Point on the sphere in the spherical chart:
/// x1 = sin(phi) sin(theta) cos(varphi), x2 = sin(phi) sin(theta) sin(varphi),
/// x3 = cos(phi) sin(theta), x4 = cos(theta).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SphericalPoint {
    pub theta: f64,
    pub phi: f64,
    pub varphi: f64,
}

impl SphericalPoint {
    pub fn to_ambient(&self) -> StateR4 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        let (sv, cv) = self.varphi.sin_cos();
        [sp * st * cv, sp * st * sv, cp * st, ct]
    }
}

/// Right-hand side of the reduced system on the sphere for lambda2 = 0,
/// with the rotation angle varphi playing the role of time:
/// returns (dtheta/dt, dphi/dt) = (f1 + lambda1 g1, f2 + lambda1 g2).
pub fn eval_reduced(p: &ModelParams, theta: f64, phi: f64, t: f64) -> Result<(f64, f64), ModelError> {
    if p.lambda2 != 0.0 {
        return Err(ModelError::ReducedSystemUndefined(p.lambda2));
    }
    let (f1, f2) = reduced_unperturbed(p, theta, phi);
    let (g1, g2) = reduced_forcing(theta, phi, t);
    Ok((f1 + p.lambda1 * g1, f2 + p.lambda1 * g2))
}

/// Autonomous part (f1, f2) of the reduced system.
pub fn reduced_unperturbed(p: &ModelParams, theta: f64, phi: f64) -> (f64, f64) {
    (
        p.alpha1 * theta.sin() * (2.0 * phi).cos() + 0.5 * p.alpha2 * (2.0 * theta).sin(),
        -p.alpha1 * theta.cos() * (2.0 * phi).sin(),
    )
}

/// Time-periodic forcing (g1, g2) of the reduced system (period pi in t).
pub fn reduced_forcing(theta: f64, phi: f64, t: f64) -> (f64, f64) {
    let sp = phi.sin();
    let st = theta.sin();
    let s2t = (2.0 * t).sin();
    (
        0.5 * sp * sp * st * st * phi.cos() * s2t,
        -0.25 * sp * sp * sp * (2.0 * theta).sin() * s2t,
    )
}

/// Orthogonal symmetry operators of the family.
///
/// `PsiTheta` rotates the (x1, x2) plane; `Gamma1` is the half-turn
/// psi_pi, and `Gamma2` reflects x3. The unperturbed field commutes with all
/// of them; the lambda1 term keeps only Gamma1 and the lambda2 term only
/// Gamma2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymmetryOp {
    PsiTheta(f64),
    Gamma1,
    Gamma2,
}

impl SymmetryOp {
    pub fn apply(&self, x: &StateR4) -> StateR4 {
        match self {
            SymmetryOp::PsiTheta(th) => {
                let (s, c) = th.sin_cos();
                [c * x[0] - s * x[1], s * x[0] + c * x[1], x[2], x[3]]
            }
            SymmetryOp::Gamma1 => [-x[0], -x[1], x[2], x[3]],
            SymmetryOp::Gamma2 => [x[0], x[1], -x[2], x[3]],
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        match self {
            SymmetryOp::PsiTheta(th) => {
                let (s, c) = th.sin_cos();
                Matrix4::new(
                    c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
                )
            }
            SymmetryOp::Gamma1 => Matrix4::from_diagonal(&[-1.0, -1.0, 1.0, 1.0].into()),
            SymmetryOp::Gamma2 => Matrix4::from_diagonal(&[1.0, 1.0, -1.0, 1.0].into()),
        }
    }
}

/// Symmetry classes of the perturbation catalog, ordered from most to least
/// symmetric. Gamma1 = psi_pi is contained in SO(2), so SO(2)-equivariant
/// terms are never reported as merely Gamma1-equivariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryClass {
    So2Gamma2,
    So2,
    Gamma1Gamma2,
    Gamma1,
    Gamma2,
    None,
}

impl std::fmt::Display for SymmetryClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SymmetryClass::So2Gamma2 => "SO(2) x Z2(gamma2)",
            SymmetryClass::So2 => "SO(2)",
            SymmetryClass::Gamma1Gamma2 => "Z2(gamma1) x Z2(gamma2)",
            SymmetryClass::Gamma1 => "Z2(gamma1)",
            SymmetryClass::Gamma2 => "Z2(gamma2)",
            SymmetryClass::None => "none",
        };
        f.write_str(s)
    }
}

/// One cubic monomial `coeff * x1^e1 x2^e2 x3^e3 x4^e4` contributing to the
/// `target` component of a perturbation term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    pub exps: [u8; 4],
    pub target: usize,
}

/// A homogeneous cubic vector field tangent to the sphere, stored as a sparse
/// monomial list with exact +/-1 coefficients so symmetry checks are
/// bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationTerm {
    pub monomials: Vec<Monomial>,
    pub claimed_symmetry: SymmetryClass,
}

impl PerturbationTerm {
    pub fn eval(&self, x: &StateR4) -> StateR4 {
        let mut out = [0.0; 4];
        for m in &self.monomials {
            let mut v = m.coeff;
            for (xi, &e) in x.iter().zip(m.exps.iter()) {
                for _ in 0..e {
                    v *= xi;
                }
            }
            out[m.target] += v;
        }
        out
    }

    pub fn is_cubic(&self) -> bool {
        self.monomials
            .iter()
            .all(|m| m.target < 4 && m.exps.iter().map(|&e| e as u32).sum::<u32>() == 3)
    }
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    terms: Vec<PerturbationTerm>,
}

const CATALOG_JSON: &str = include_str!("../data/perturbation_catalog.json");

/// The built-in catalog of cubic perturbations tangent to the sphere.
pub fn builtin_catalog() -> Vec<PerturbationTerm> {
    parse_catalog(CATALOG_JSON).expect("embedded catalog parses")
}

pub fn parse_catalog(json: &str) -> Result<Vec<PerturbationTerm>, ModelError> {
    let file: CatalogFile =
        serde_json::from_str(json).map_err(|e| ModelError::CatalogIo(e.to_string()))?;
    Ok(file.terms)
}

pub fn load_catalog(path: &std::path::Path) -> Result<Vec<PerturbationTerm>, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::CatalogIo(e.to_string()))?;
    parse_catalog(&text)
}

/// Tolerances for the numerical symmetry classifier.
pub const TANGENCY_TOL: f64 = 1e-14;
pub const EQUIVARIANCE_TOL: f64 = 1e-12;

/// Classify a perturbation term by testing equivariance numerically: psi_theta
/// on a grid of 32 angles, gamma1 and gamma2 directly, each at 100 random
/// points on the sphere. Polynomial identities either hold to round-off or
/// fail grossly, so the finite sampling decides the class reliably. Also
/// verifies tangency <x, P(x)> = 0.
pub fn classify_symmetry(term: &PerturbationTerm) -> Result<SymmetryClass, ModelError> {
    if !term.is_cubic() {
        return Err(ModelError::NotCubic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
    let points: Vec<StateR4> = (0..100).map(|_| random_unit(&mut rng)).collect();

    let mut max_tangency = 0.0f64;
    for x in &points {
        let p = term.eval(x);
        max_tangency = max_tangency.max(dot4(x, &p).abs());
    }
    if max_tangency > TANGENCY_TOL {
        return Err(ModelError::NotTangent(max_tangency));
    }

    let so2 = (0..32).all(|k| {
        let op = SymmetryOp::PsiTheta(k as f64 * std::f64::consts::TAU / 32.0 + 0.123);
        equivariant_on(term, &op, &points)
    });
    let g1 = equivariant_on(term, &SymmetryOp::Gamma1, &points);
    let g2 = equivariant_on(term, &SymmetryOp::Gamma2, &points);

    Ok(match (so2, g1, g2) {
        (true, _, true) => SymmetryClass::So2Gamma2,
        (true, _, false) => SymmetryClass::So2,
        (false, true, true) => SymmetryClass::Gamma1Gamma2,
        (false, true, false) => SymmetryClass::Gamma1,
        (false, false, true) => SymmetryClass::Gamma2,
        (false, false, false) => SymmetryClass::None,
    })
}

fn equivariant_on(term: &PerturbationTerm, op: &SymmetryOp, points: &[StateR4]) -> bool {
    points.iter().all(|x| {
        let lhs = term.eval(&op.apply(x));
        let rhs = op.apply(&term.eval(x));
        lhs.iter()
            .zip(rhs.iter())
            .all(|(a, b)| (a - b).abs() <= EQUIVARIANCE_TOL)
    })
}

pub(crate) fn random_unit(rng: &mut impl Rng) -> StateR4 {
    loop {
        let x = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = dot4(&x, &x);
        if n > 1e-3 {
            return normalize4(&x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{norm4, sub4};
    use proptest::prelude::*;

    fn fd_jacobian(p: &ModelParams, x: &StateR4) -> Matrix4<f64> {
        let h = 1e-6;
        let mut j = Matrix4::zeros();
        for col in 0..4 {
            let mut xp = *x;
            let mut xm = *x;
            xp[col] += h;
            xm[col] -= h;
            let fp = eval_field(p, &xp);
            let fm = eval_field(p, &xm);
            for row in 0..4 {
                j[(row, col)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn field_vanishes_at_equilibria() {
        let p = ModelParams::reference(0.03, 0.07);
        for eq in equilibria(&p).unwrap() {
            let f = eval_field(&p, &eq.location);
            assert!(norm4(&f) == 0.0, "field at {:?} = {:?}", eq.label, f);
        }
    }

    #[test]
    fn radial_identity_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = ModelParams {
                alpha1: rng.gen_range(0.2..2.0),
                alpha2: rng.gen_range(-1.0..-0.01),
                lambda1: rng.gen_range(-0.2..0.2),
                lambda2: rng.gen_range(-0.2..0.2),
                enforce_regime: false,
            };
            let x = [
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ];
            let r2 = dot4(&x, &x);
            let lhs = dot4(&x, &eval_field(&p, &x));
            assert!(
                (lhs - (1.0 - r2) * r2).abs() <= 1e-12 * (1.0 + r2 * r2),
                "radial identity failed: {} vs {}",
                lhs,
                (1.0 - r2) * r2
            );
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::reference(0.05, 0.02);
        for _ in 0..50 {
            let x = random_unit(&mut rng);
            let ja = jacobian(&p, &x);
            let jf = fd_jacobian(&p, &x);
            let scale = ja.amax().max(1.0);
            assert!((ja - jf).amax() <= 1e-6 * scale);
        }
    }

    #[test]
    fn jacobian_spectrum_at_equilibria() {
        // alpha1=1, alpha2=-0.1: tangential {-1.1 +/- i, 0.9} at v, {0.9 +/- i, -1.1} at w,
        // radial -2 at both. Checked against the numeric spectrum of the
        // analytic Jacobian (itself validated against finite differences).
        let p = ModelParams::reference(0.0, 0.0);
        let [v, w] = equilibria(&p).unwrap();

        for eq in [v, w] {
            let j = jacobian(&p, &eq.location);
            let mut eigs: Vec<Complex64> = j.complex_eigenvalues().iter().copied().collect();
            // Pull out the radial eigenvalue (-2).
            let radial_idx = eigs
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - Complex64::new(-2.0, 0.0))
                        .norm()
                        .total_cmp(&(b.1 - Complex64::new(-2.0, 0.0)).norm())
                })
                .unwrap()
                .0;
            let radial = eigs.remove(radial_idx);
            assert!((radial - Complex64::new(eq.radial, 0.0)).norm() < 1e-9);

            let mut expected = eq.tangential_eigenvalues(&p).to_vec();
            expected.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
            eigs.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
            for (got, want) in eigs.iter().zip(expected.iter()) {
                assert!(
                    (got - want).norm() < 1e-9,
                    "{:?}: got {} want {}",
                    eq.label,
                    got,
                    want
                );
            }
        }
        assert_eq!(v.morse_index, 1);
        assert_eq!(w.morse_index, 2);
        assert!((v.contracting - 1.1).abs() < 1e-15);
        assert!((v.expanding - 0.9).abs() < 1e-15);
        assert!((v.delta - 11.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_gamma1_equivariance() {
        // lambda2 = 0: J(gamma1 x) = gamma1 J(x) gamma1.
        let p = ModelParams::reference(0.08, 0.0);
        let g1 = SymmetryOp::Gamma1.matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_unit(&mut rng);
            let lhs = jacobian(&p, &SymmetryOp::Gamma1.apply(&x));
            let rhs = g1 * jacobian(&p, &x) * g1;
            assert!((lhs - rhs).amax() < 1e-14);
        }
    }

    #[test]
    fn equilibria_regime_boundary() {
        let p = ModelParams {
            alpha1: 1.0,
            alpha2: -1.0,
            lambda1: 0.0,
            lambda2: 0.0,
            enforce_regime: true,
        };
        assert!(matches!(
            equilibria(&p),
            Err(ModelError::RegimeViolation { .. })
        ));
    }

    #[test]
    fn saddle_ratio_reference_value() {
        let p = ModelParams::reference(0.0, 0.0);
        let expected = (1.1f64 / 0.9).powi(2);
        assert!((saddle_ratio(&p) - expected).abs() < 1e-15);
        // rho equals the product of the equilibrium deltas.
        let [v, w] = equilibria(&p).unwrap();
        assert!((saddle_ratio(&p) - v.delta * w.delta).abs() < 1e-12);
    }

    #[test]
    fn saddle_ratio_exceeds_one_in_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let a1: f64 = rng.gen_range(0.1..2.0);
            let a2 = rng.gen_range((-a1 + 1e-3)..-1e-3);
            let p = ModelParams::new(a1, a2, 0.0, 0.0).unwrap();
            assert!(saddle_ratio(&p) > 1.0);
            let [v, w] = equilibria(&p).unwrap();
            assert!((saddle_ratio(&p) - v.delta * w.delta).abs() < 1e-10);
        }
    }

    #[test]
    fn saddle_ratio_limit_alpha2_to_zero() {
        let p = ModelParams::new(1.0, -1e-9, 0.0, 0.0).unwrap();
        assert!((saddle_ratio(&p) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn reduced_rejects_lambda2() {
        let p = ModelParams::reference(0.0, 0.01);
        assert!(matches!(
            eval_reduced(&p, 1.0, 1.0, 0.0),
            Err(ModelError::ReducedSystemUndefined(_))
        ));
    }

    #[test]
    fn reduced_connection_plane_invariant() {
        // At phi = pi/2 the phi-equation vanishes for lambda1 = 0.
        let p = ModelParams::reference(0.0, 0.0);
        for theta in [0.3, 1.0, 2.0, 3.0] {
            let (dth, dph) = eval_reduced(&p, theta, std::f64::consts::FRAC_PI_2, 0.7).unwrap();
            assert!(dph.abs() < 1e-15);
            let expected = -p.alpha1 * theta.sin() + 0.5 * p.alpha2 * (2.0 * theta).sin();
            assert!((dth - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn reduced_pushforward_matches_full_field() {
        // Chain-rule oracle through the spherical chart, with the chart
        // Jacobian written out analytically.
        let p = ModelParams::reference(0.04, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let sp = SphericalPoint {
                theta: rng.gen_range(0.1..std::f64::consts::PI - 0.1),
                phi: rng.gen_range(0.0..std::f64::consts::TAU),
                varphi: rng.gen_range(0.0..std::f64::consts::TAU),
            };
            let t = sp.varphi;
            let (dth, dph) = eval_reduced(&p, sp.theta, sp.phi, t).unwrap();
            let (st, ct) = sp.theta.sin_cos();
            let (s_p, c_p) = sp.phi.sin_cos();
            let (sv, cv) = sp.varphi.sin_cos();
            let pushed = [
                s_p * ct * cv * dth + c_p * st * cv * dph - s_p * st * sv,
                s_p * ct * sv * dth + c_p * st * sv * dph + s_p * st * cv,
                c_p * ct * dth - s_p * st * dph,
                -st * dth,
            ];
            let full = eval_field(&p, &sp.to_ambient());
            assert!(
                norm4(&sub4(&pushed, &full)) < 1e-10,
                "pushforward mismatch at {:?}",
                sp
            );
        }
    }

    #[test]
    fn field_equivariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<StateR4> = (0..100).map(|_| random_unit(&mut rng)).collect();
        let check = |p: &ModelParams, op: &SymmetryOp| {
            pts.iter().all(|x| {
                let lhs = eval_field(p, &op.apply(x));
                let rhs = op.apply(&eval_field(p, x));
                norm4(&sub4(&lhs, &rhs)) <= 1e-12
            })
        };
        let p00 = ModelParams::reference(0.0, 0.0);
        for k in 0..13 {
            assert!(check(&p00, &SymmetryOp::PsiTheta(0.5 * k as f64)));
        }
        assert!(check(&p00, &SymmetryOp::Gamma2));
        let p10 = ModelParams::reference(0.07, 0.0);
        assert!(check(&p10, &SymmetryOp::Gamma1));
        assert!(!check(&p10, &SymmetryOp::Gamma2));
        let p01 = ModelParams::reference(0.0, 0.07);
        assert!(check(&p01, &SymmetryOp::Gamma2));
        assert!(!check(&p01, &SymmetryOp::PsiTheta(0.5)));
    }

    #[test]
    fn symmetry_ops_are_involutions_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for op in [SymmetryOp::Gamma1, SymmetryOp::Gamma2] {
            for _ in 0..10 {
                let x = random_unit(&mut rng);
                let y = op.apply(&op.apply(&x));
                assert!(norm4(&sub4(&x, &y)) < 1e-15);
            }
        }
        for k in 0..8 {
            let op = SymmetryOp::PsiTheta(0.7 * k as f64);
            let x = random_unit(&mut rng);
            assert!((norm4(&op.apply(&x)) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn catalog_terms_classified_as_claimed() {
        let catalog = builtin_catalog();
        assert_eq!(catalog.len(), 60);
        for (i, term) in catalog.iter().enumerate() {
            assert!(term.is_cubic(), "term {} not cubic", i);
            let got = classify_symmetry(term).unwrap_or_else(|e| panic!("term {}: {}", i, e));
            assert_eq!(got, term.claimed_symmetry, "term {} misclassified", i);
        }
    }

    #[test]
    fn catalog_spot_checks() {
        // (x2 x4^2, -x1 x4^2, 0, 0) is SO(2) x Z2(gamma2).
        let catalog = builtin_catalog();
        assert_eq!(
            classify_symmetry(&catalog[0]).unwrap(),
            SymmetryClass::So2Gamma2
        );
        // (0, 0, x4^3, -x3 x4^2) is SO(2) but not gamma2.
        assert_eq!(classify_symmetry(&catalog[3]).unwrap(), SymmetryClass::So2);
        // The lambda1 term (0, 0, x1 x2 x4, -x1 x2 x3) keeps only gamma1.
        let l1_term = PerturbationTerm {
            monomials: vec![
                Monomial {
                    coeff: 1.0,
                    exps: [1, 1, 0, 1],
                    target: 2,
                },
                Monomial {
                    coeff: -1.0,
                    exps: [1, 1, 1, 0],
                    target: 3,
                },
            ],
            claimed_symmetry: SymmetryClass::Gamma1,
        };
        assert_eq!(
            classify_symmetry(&l1_term).unwrap(),
            SymmetryClass::Gamma1
        );
        // The lambda2 terms (x3^2 x4, 0, -x1 x3 x4, 0) keep only gamma2.
        let l2_term = PerturbationTerm {
            monomials: vec![
                Monomial {
                    coeff: 1.0,
                    exps: [0, 0, 2, 1],
                    target: 0,
                },
                Monomial {
                    coeff: -1.0,
                    exps: [1, 0, 1, 1],
                    target: 2,
                },
            ],
            claimed_symmetry: SymmetryClass::Gamma2,
        };
        assert_eq!(classify_symmetry(&l2_term).unwrap(), SymmetryClass::Gamma2);
    }

    #[test]
    fn non_tangent_term_rejected() {
        let term = PerturbationTerm {
            monomials: vec![Monomial {
                coeff: 1.0,
                exps: [3, 0, 0, 0],
                target: 0,
            }],
            claimed_symmetry: SymmetryClass::None,
        };
        assert!(matches!(
            classify_symmetry(&term),
            Err(ModelError::NotTangent(_))
        ));
    }

    proptest! {
        #[test]
        fn radial_identity_prop(
            x1 in -1.5f64..1.5, x2 in -1.5f64..1.5,
            x3 in -1.5f64..1.5, x4 in -1.5f64..1.5,
            l1 in -0.2f64..0.2, l2 in -0.2f64..0.2,
        ) {
            let p = ModelParams { alpha1: 1.0, alpha2: -0.1, lambda1: l1, lambda2: l2, enforce_regime: true };
            let x = [x1, x2, x3, x4];
            let r2 = dot4(&x, &x);
            let lhs = dot4(&x, &eval_field(&p, &x));
            prop_assert!((lhs - (1.0 - r2) * r2).abs() <= 1e-12 * (1.0 + r2 * r2));
        }

        #[test]
        fn spherical_chart_lands_on_sphere(
            theta in 0.01f64..3.13, phi in 0.0f64..6.28, varphi in 0.0f64..6.28
        ) {
            let sp = SphericalPoint { theta, phi, varphi };
            prop_assert!((norm4(&sp.to_ambient()) - 1.0).abs() < ON_SPHERE_TOL);
        }
    }
}
