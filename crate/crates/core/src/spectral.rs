//! Spectral representation of fields on `[0, 1]`.
//!
//! Fields are stored by their coefficients in the L²-orthonormal sine basis
//! `f_k(x) = √2 sin(kπx)`. The H¹₀-normalized basis
//! `e_k = f_k / √(1 + (kπ)²)` is available through [`BasisKind::H`]
//! conversions, which is the convention used for H-norms and for the
//! H-dual pairing `<δ_x, e_k> = (1 + (kπ)²) e_k(x)`.
//!
//! The basis diagonalizes the generator of the deterministic flow: mode `k`
//! decays like `exp(-λ_k t)`. The default family is `λ_k = ν (kπ)²` with
//! diffusion coefficient `ν`, but any strictly increasing positive sequence
//! can be supplied together with a bounded eigenfunction evaluator.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature;

/// Absolute tolerance of the adaptive mollifier quadrature.
pub const MOLLIFIER_TOL: f64 = 1e-12;

/// Which of the two normalizations a coefficient vector refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// `e_k`, orthonormal in H = H¹₀(0, 1).
    H,
    /// `f_k`, orthonormal in L²(0, 1).
    L2,
}

type EigenFn = dyn Fn(usize, f64) -> f64 + Send + Sync;

#[derive(Clone)]
enum Eigenfunctions {
    DirichletSine,
    Custom { eval: Arc<EigenFn>, sup: f64 },
}

/// Truncated eigenbasis of a diagonal, negative-definite operator on `[0, 1]`.
#[derive(Clone)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
    h_weights: Vec<f64>,
    functions: Eigenfunctions,
}

impl fmt::Debug for SpectralBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.functions {
            Eigenfunctions::DirichletSine => "dirichlet-sine",
            Eigenfunctions::Custom { .. } => "custom",
        };
        f.debug_struct("SpectralBasis")
            .field("modes", &self.eigenvalues.len())
            .field("kind", &kind)
            .field("lambda_1", &self.eigenvalues.first())
            .finish()
    }
}

impl SpectralBasis {
    /// Dirichlet Laplacian on `[0, 1]`: `λ_k = (kπ)²`.
    pub fn dirichlet(modes: usize) -> Result<Self> {
        Self::dirichlet_with_diffusion(modes, 1.0)
    }

    /// Dirichlet operator `ν Δ` on `[0, 1]`: `λ_k = ν (kπ)²`.
    pub fn dirichlet_with_diffusion(modes: usize, nu: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::domain("mode count must be positive"));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::domain(format!("diffusion coefficient {nu} must be positive")));
        }
        let wave: Vec<f64> = (1..=modes).map(|k| (k as f64 * PI).powi(2)).collect();
        Ok(Self {
            eigenvalues: wave.iter().map(|w| nu * w).collect(),
            h_weights: wave.iter().map(|w| 1.0 + w).collect(),
            functions: Eigenfunctions::DirichletSine,
        })
    }

    /// Generic diagonal operator with eigenvalues `λ_k` and L²-normalized
    /// eigenfunctions `eval(k, x)` (k is 1-based) bounded by `sup`.
    ///
    /// H-weights default to `1 + λ_k`.
    pub fn custom<F>(eigenvalues: Vec<f64>, sup: f64, eval: F) -> Result<Self>
    where
        F: Fn(usize, f64) -> f64 + Send + Sync + 'static,
    {
        if eigenvalues.is_empty() {
            return Err(Error::domain("mode count must be positive"));
        }
        if eigenvalues[0] <= 0.0 {
            return Err(Error::domain("eigenvalues must be positive"));
        }
        if eigenvalues.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("eigenvalues must be strictly increasing"));
        }
        if !(sup > 0.0 && sup.is_finite()) {
            return Err(Error::domain("eigenfunction bound must be finite and positive"));
        }
        Ok(Self {
            h_weights: eigenvalues.iter().map(|l| 1.0 + l).collect(),
            eigenvalues,
            functions: Eigenfunctions::Custom {
                eval: Arc::new(eval),
                sup,
            },
        })
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Factors `1 + (kπ)²` relating the two normalizations.
    pub fn h_weights(&self) -> &[f64] {
        &self.h_weights
    }

    /// Uniform bound on `|f_k(x)|`.
    pub fn sup_bound(&self) -> f64 {
        match &self.functions {
            Eigenfunctions::DirichletSine => SQRT_2,
            Eigenfunctions::Custom { sup, .. } => *sup,
        }
    }

    /// Partial sum `Σ_{k≤K} 1/λ_k`.
    pub fn inverse_eigenvalue_sum(&self) -> f64 {
        self.eigenvalues.iter().map(|l| 1.0 / l).sum()
    }

    /// Remainder `Σ_{k>K} 1/λ_k` of the full series, when it is known in
    /// closed form (sine basis: `Σ_k 1/(ν k²π²) = 1/(6ν)`).
    pub fn inverse_eigenvalue_tail(&self) -> Option<f64> {
        match &self.functions {
            Eigenfunctions::DirichletSine => {
                let nu = self.eigenvalues[0] / (PI * PI);
                Some((1.0 / (6.0 * nu) - self.inverse_eigenvalue_sum()).max(0.0))
            }
            Eigenfunctions::Custom { .. } => None,
        }
    }

    /// Value of the L²-normalized eigenfunction `f_k(x)`, `k` 1-based.
    pub fn basis_function(&self, k: usize, x: f64) -> f64 {
        match &self.functions {
            Eigenfunctions::DirichletSine => SQRT_2 * (k as f64 * PI * x).sin(),
            Eigenfunctions::Custom { eval, .. } => eval(k, x),
        }
    }

    /// Value of `k`-th function of the requested normalization at `x`.
    pub fn eval_kind(&self, kind: BasisKind, k: usize, x: f64) -> f64 {
        let f = self.basis_function(k, x);
        match kind {
            BasisKind::L2 => f,
            BasisKind::H => f / self.h_weights[k - 1].sqrt(),
        }
    }

    /// `(f_1(x), …, f_K(x))`.
    pub fn point_values(&self, x: f64) -> Vec<f64> {
        (1..=self.modes()).map(|k| self.basis_function(k, x)).collect()
    }

    /// Converts coefficients between normalizations.
    pub fn convert(&self, coeffs: &[f64], from: BasisKind, to: BasisKind) -> Vec<f64> {
        match (from, to) {
            // u = Σ a_k f_k = Σ a_k √(1+(kπ)²) e_k
            (BasisKind::L2, BasisKind::H) => coeffs
                .iter()
                .zip(&self.h_weights)
                .map(|(c, w)| c * w.sqrt())
                .collect(),
            (BasisKind::H, BasisKind::L2) => coeffs
                .iter()
                .zip(&self.h_weights)
                .map(|(c, w)| c / w.sqrt())
                .collect(),
            _ => coeffs.to_vec(),
        }
    }
}

/// A field `u = Σ c_k f_k` on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SpectralField {
    coeffs: Vec<f64>,
    basis: Arc<SpectralBasis>,
}

impl PartialEq for SpectralField {
    fn eq(&self, other: &Self) -> bool {
        self.coeffs == other.coeffs && Arc::ptr_eq(&self.basis, &other.basis)
    }
}

impl SpectralField {
    pub fn zeros(basis: Arc<SpectralBasis>) -> Self {
        Self {
            coeffs: vec![0.0; basis.modes()],
            basis,
        }
    }

    /// Builds a field from coefficients given in the `kind` normalization.
    pub fn from_coeffs(basis: Arc<SpectralBasis>, coeffs: Vec<f64>, kind: BasisKind) -> Result<Self> {
        if coeffs.len() != basis.modes() {
            return Err(Error::domain(format!(
                "expected {} coefficients, got {}",
                basis.modes(),
                coeffs.len()
            )));
        }
        let coeffs = basis.convert(&coeffs, kind, BasisKind::L2);
        Ok(Self { coeffs, basis })
    }

    /// L² projection of `g` onto the truncated basis.
    pub fn project<G: Fn(f64) -> f64>(basis: Arc<SpectralBasis>, g: G) -> Self {
        let k = basis.modes();
        let coeffs = quadrature::integrate_vec(0.0, 1.0, k, 1e-12, |x, out| {
            let gx = g(x);
            for (j, o) in out.iter_mut().enumerate() {
                *o = gx * basis.basis_function(j + 1, x);
            }
        });
        Self { coeffs, basis }
    }

    /// L²-basis coefficients.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn coeffs_in(&self, kind: BasisKind) -> Vec<f64> {
        self.basis.convert(&self.coeffs, BasisKind::L2, kind)
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.coeffs)
    }

    pub fn h_norm(&self) -> f64 {
        h_norm(&self.coeffs, self.basis.h_weights())
    }

    /// Pointwise value `u(x)`; errors outside `[0, 1]`.
    pub fn eval(&self, x: f64) -> Result<f64> {
        eval_field(self, x)
    }

    /// `e^{tA} u`, see [`semigroup_apply`].
    pub fn semigroup(&self, t: f64) -> Result<Self> {
        semigroup_apply(self, t)
    }
}

pub(crate) fn l2_norm(coeffs: &[f64]) -> f64 {
    coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub(crate) fn h_norm(coeffs: &[f64], weights: &[f64]) -> f64 {
    coeffs
        .iter()
        .zip(weights)
        .map(|(c, w)| w * c * c)
        .sum::<f64>()
        .sqrt()
}

/// Evaluates `u(x) = Σ c_k f_k(x)`.
///
/// The Dirichlet sine series is summed with the Clenshaw recurrence for
/// `sin(kθ)`; custom bases evaluate each eigenfunction.
pub fn eval_field(u: &SpectralField, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::domain(format!("evaluation point {x} outside [0, 1]")));
    }
    match u.basis.functions {
        Eigenfunctions::DirichletSine => {
            if x == 0.0 || x == 1.0 {
                return Ok(0.0);
            }
            let theta = PI * x;
            let two_cos = 2.0 * theta.cos();
            let (mut b1, mut b2) = (0.0, 0.0);
            for c in u.coeffs.iter().rev() {
                let b0 = c + two_cos * b1 - b2;
                b2 = b1;
                b1 = b0;
            }
            Ok(SQRT_2 * b1 * theta.sin())
        }
        Eigenfunctions::Custom { .. } => Ok(u
            .coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| c * u.basis.basis_function(j + 1, x))
            .sum()),
    }
}

/// Result of pairing a Dirac mass with a basis function, tagged with the
/// normalization it refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiracPairing {
    pub value: f64,
    pub convention: BasisKind,
}

/// `<δ_x, e_k> = (1 + (kπ)²) e_k(x)` for [`BasisKind::H`], or
/// `<δ_x, f_k> = f_k(x)` for [`BasisKind::L2`].
pub fn dirac_pairing(basis: &SpectralBasis, x: f64, k: usize, convention: BasisKind) -> Result<DiracPairing> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::domain(format!("Dirac location {x} must lie in (0, 1)")));
    }
    if k == 0 || k > basis.modes() {
        return Err(Error::domain(format!("mode index {k} outside 1..={}", basis.modes())));
    }
    let value = match convention {
        BasisKind::L2 => basis.basis_function(k, x),
        BasisKind::H => basis.h_weights[k - 1] * basis.eval_kind(BasisKind::H, k, x),
    };
    Ok(DiracPairing { value, convention })
}

/// Heat semigroup: coefficient `k` is multiplied by `exp(-λ_k t)`.
pub fn semigroup_apply(u: &SpectralField, t: f64) -> Result<SpectralField> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("semigroup time {t} must be nonnegative")));
    }
    let coeffs = u
        .coeffs
        .iter()
        .zip(u.basis.eigenvalues())
        .map(|(c, l)| c * (-l * t).exp())
        .collect();
    Ok(SpectralField {
        coeffs,
        basis: Arc::clone(&u.basis),
    })
}

/// Unnormalized bump `exp(-1/(1 - x²))` on `(-1, 1)`.
pub fn raw_bump(x: f64) -> f64 {
    if x.abs() < 1.0 {
        (-1.0 / (1.0 - x * x)).exp()
    } else {
        0.0
    }
}

/// `∫_{-1}^{1} exp(-1/(1 - x²)) dx`.
pub fn raw_bump_mass() -> f64 {
    use std::sync::OnceLock;
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| quadrature::integrate(-1.0, 1.0, 1e-15, raw_bump))
}

/// Unit-mass bump `M(x) = exp(-1/(1 - x²)) / Z` supported on `[-1, 1]`.
pub fn bump(x: f64) -> f64 {
    raw_bump(x) / raw_bump_mass()
}

/// Smooth approximation `φ_z(x) = M((x - z)/κ)/κ` of the Dirac mass at `z`,
/// with its precomputed L² pairings against the basis.
#[derive(Debug, Clone)]
pub struct Mollifier {
    center: f64,
    width: f64,
    pairings: Vec<f64>,
}

impl Mollifier {
    pub fn new(center: f64, width: f64, basis: &SpectralBasis) -> Result<Self> {
        let pairings = mollifier_pairings(center, width, basis)?;
        Ok(Self {
            center,
            width,
            pairings,
        })
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// `((φ_z, f_k))_{k ≤ K}`.
    pub fn pairings(&self) -> &[f64] {
        &self.pairings
    }

    pub fn eval(&self, x: f64) -> f64 {
        bump((x - self.center) / self.width) / self.width
    }

    /// `(u, φ_z)_{L²}` for a field in the same basis.
    pub fn average(&self, u: &SpectralField) -> f64 {
        u.coeffs.iter().zip(&self.pairings).map(|(c, p)| c * p).sum()
    }

    /// `∫ φ_z dx`, equal to one up to quadrature tolerance.
    pub fn mass(&self) -> f64 {
        quadrature::integrate(-1.0, 1.0, MOLLIFIER_TOL, bump)
    }
}

fn check_support(z: f64, kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Mollifier(format!("width {kappa} must be positive")));
    }
    if !(z - kappa > 0.0 && z + kappa < 1.0) {
        return Err(Error::Mollifier(format!(
            "support [{}, {}] not contained in (0, 1)",
            z - kappa,
            z + kappa
        )));
    }
    Ok(())
}

/// `((φ_z, f_k)_{L²})_{k ≤ K}` by adaptive composite Gauss–Legendre
/// quadrature on the support, absolute tolerance [`MOLLIFIER_TOL`].
pub fn mollifier_pairings(z: f64, kappa: f64, basis: &SpectralBasis) -> Result<Vec<f64>> {
    check_support(z, kappa)?;
    let k = basis.modes();
    // Substituting x = z + κy turns the pairing into ∫ M(y) f_k(z + κy) dy.
    Ok(quadrature::integrate_vec(-1.0, 1.0, k, MOLLIFIER_TOL, |y, out| {
        let m = bump(y);
        let x = z + kappa * y;
        for (j, o) in out.iter_mut().enumerate() {
            *o = m * basis.basis_function(j + 1, x);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis(k: usize) -> Arc<SpectralBasis> {
        Arc::new(SpectralBasis::dirichlet(k).unwrap())
    }

    #[test]
    fn first_mode_at_midpoint() {
        let b = basis(4);
        let u = SpectralField::from_coeffs(b, vec![1.0, 0.0, 0.0, 0.0], BasisKind::L2).unwrap();
        assert!((u.eval(0.5).unwrap() - 1.414_213_56).abs() < 1e-8);
        assert_eq!(u.eval(0.0).unwrap(), 0.0);
    }

    #[test]
    fn eval_rejects_points_outside_interval() {
        let u = SpectralField::zeros(basis(3));
        assert!(matches!(u.eval(-0.1), Err(Error::Domain(_))));
        assert!(matches!(u.eval(1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn dirac_pairings() {
        let b = basis(8);
        let p = dirac_pairing(&b, 0.5, 1, BasisKind::H).unwrap();
        assert_eq!(p.convention, BasisKind::H);
        assert!((p.value - SQRT_2 * (1.0 + PI * PI).sqrt()).abs() < 1e-12);
        assert!((p.value - 4.662_532_445).abs() < 1e-9);
        let p2 = dirac_pairing(&b, 0.5, 2, BasisKind::L2).unwrap();
        assert!(p2.value.abs() < 1e-15);
        assert!(dirac_pairing(&b, 0.0, 1, BasisKind::L2).is_err());
        assert!(dirac_pairing(&b, 0.5, 9, BasisKind::L2).is_err());
    }

    #[test]
    fn semigroup_closed_form_and_errors() {
        let b = basis(3);
        let u = SpectralField::from_coeffs(b, vec![1.0, 0.0, 0.0], BasisKind::L2).unwrap();
        assert_eq!(semigroup_apply(&u, 0.0).unwrap(), u);
        let v = semigroup_apply(&u, 0.1).unwrap();
        assert!((v.coeffs()[0] - 0.372_708).abs() < 1e-6);
        assert!(semigroup_apply(&u, -1.0).is_err());
    }

    #[test]
    fn mode_decay_is_exact() {
        let b = basis(6);
        let c: Vec<f64> = (1..=6).map(|k| 1.0 / k as f64).collect();
        let u = SpectralField::from_coeffs(b, c.clone(), BasisKind::L2).unwrap();
        let v = u.semigroup(0.013).unwrap();
        for (k, (a, ck)) in v.coeffs().iter().zip(&c).enumerate() {
            let lam = ((k + 1) as f64 * PI).powi(2);
            assert_eq!(*a, ck * (-lam * 0.013).exp());
        }
    }

    #[test]
    fn basis_conversion_preserves_h_norm() {
        let b = basis(5);
        let u = SpectralField::from_coeffs(b.clone(), vec![0.3, -1.0, 0.2, 0.0, 0.7], BasisKind::L2).unwrap();
        let e = u.coeffs_in(BasisKind::H);
        let via_e: f64 = e.iter().map(|c| c * c).sum();
        assert!((via_e - u.h_norm().powi(2)).abs() < 1e-12);
        let back = SpectralField::from_coeffs(b, e, BasisKind::H).unwrap();
        for (x, y) in back.coeffs().iter().zip(u.coeffs()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn default_family_inverse_sum_below_one_sixth() {
        let b = basis(200);
        let s = b.inverse_eigenvalue_sum();
        assert!(s < 1.0 / 6.0);
        assert!(1.0 / 6.0 - s < 1e-3);
    }

    #[test]
    fn custom_basis_validation() {
        assert!(SpectralBasis::custom(vec![1.0, 1.0], 1.0, |_, _| 0.0).is_err());
        assert!(SpectralBasis::custom(vec![0.0, 1.0], 1.0, |_, _| 0.0).is_err());
        let b = SpectralBasis::custom(vec![2.0, 5.0], 2.0, |k, x| SQRT_2 * (k as f64 * PI * x).sin()).unwrap();
        assert_eq!(b.sup_bound(), 2.0);
        let u = SpectralField::from_coeffs(Arc::new(b), vec![1.0, 0.5], BasisKind::L2).unwrap();
        let direct = SQRT_2 * (0.3 * PI).sin() + 0.5 * SQRT_2 * (0.6 * PI).sin();
        assert!((u.eval(0.3).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn mollifier_support_is_checked() {
        let b = basis(4);
        assert!(matches!(Mollifier::new(0.05, 0.1, &b), Err(Error::Mollifier(_))));
        assert!(matches!(Mollifier::new(0.5, 0.0, &b), Err(Error::Mollifier(_))));
        assert!(Mollifier::new(0.5, 0.2, &b).is_ok());
    }

    #[test]
    fn mollifier_odd_symmetry_at_center() {
        let b = basis(8);
        let p = mollifier_pairings(0.5, 0.1, &b).unwrap();
        assert!(p[1].abs() < 1e-14);
        assert!(p[3].abs() < 1e-14);
    }

    #[test]
    fn mollifier_mass_is_one() {
        let b = basis(2);
        for (z, k) in [(0.5, 0.3), (0.2, 0.01)] {
            let m = Mollifier::new(z, k, &b).unwrap();
            assert!((m.mass() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn heat_semigroup_contracts(c in proptest::collection::vec(-5.0f64..5.0, 10), t in 0.0f64..1.0) {
            let u = SpectralField::from_coeffs(basis(10), c, BasisKind::L2).unwrap();
            let v = u.semigroup(t).unwrap();
            prop_assert!(v.l2_norm() <= u.l2_norm() + 1e-15);
        }

        #[test]
        fn semigroup_law(c in proptest::collection::vec(-5.0f64..5.0, 6), s in 0.0f64..0.05, t in 0.0f64..0.05) {
            let u = SpectralField::from_coeffs(basis(6), c, BasisKind::L2).unwrap();
            let a = u.semigroup(s).unwrap().semigroup(t).unwrap();
            let b = u.semigroup(s + t).unwrap();
            for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
                prop_assert!((x - y).abs() <= 1e-14);
            }
        }
    }
}
