//! Fluctuation theory around the averaged dynamics: the per-channel Poisson
//! equation `Bφ = −d, μ·φ = 0`, the Green–Kubo variances, the diffusion
//! operator and its factor, and the trace of the covariance operator `Q_t`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kinetics::{self, ChannelModel, GeneratorMatrix, QuasiStationary};
use crate::linalg;
use crate::spectral::{SpectralBasis, SpectralField};
use crate::system::{ChannelConfiguration, HybridSystem, Level};

/// Residual tolerance for `Bφ + d` and `μ·φ`, relative to `max(1, max|B|)`.
pub const POISSON_TOL: f64 = 1e-12;
/// Smallest admissible spectral gap for the integral representation.
pub const MIN_SPECTRAL_GAP: f64 = 1e-10;
/// Negative eigenvalues of `a` down to this value are clipped to zero.
pub const PSD_TOL: f64 = 1e-12;

/// `d(ξ) = c_ξ(v_ξ − y) − Σ_ζ μ(ζ) c_ζ(v_ζ − y)` over the members of `class`.
pub fn centered_data(model: &ChannelModel, class: usize, y: f64, mu: &QuasiStationary) -> Vec<f64> {
    let g: Vec<f64> = model
        .class_members(class)
        .iter()
        .map(|&s| model.conductance(s) * (model.reversal(s) - y))
        .collect();
    let mean = mu.dot(&g);
    g.iter().map(|v| v - mean).collect()
}

fn recenter(d: &[f64], mu: &[f64]) -> Vec<f64> {
    let m: f64 = d.iter().zip(mu).map(|(a, b)| a * b).sum();
    d.iter().map(|v| v - m).collect()
}

/// Solves `[μ; B] φ = [0; −d]` in the least-squares sense through a
/// Householder QR factorization of the stacked `(n+1) × n` matrix.
pub fn solve_phi_linear(gen: &GeneratorMatrix, d: &[f64], mu: &QuasiStationary) -> Result<Vec<f64>> {
    let n = gen.dim();
    if d.len() != n || mu.probs().len() != n {
        return Err(Error::domain("generator, data and law sizes differ"));
    }
    let d = recenter(d, mu.probs());
    let mut stacked = DMatrix::zeros(n + 1, n);
    let mut rhs = DVector::zeros(n + 1);
    for b in 0..n {
        stacked[(0, b)] = mu.probs()[b];
    }
    for a in 0..n {
        for b in 0..n {
            stacked[(a + 1, b)] = gen.get(a, b);
        }
        rhs[a + 1] = -d[a];
    }
    let scale = gen.max_abs().max(1.0);
    let qr = stacked.qr();
    let r = qr.r();
    let min_diag = (0..n).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_diag > 1e-13 * scale) {
        return Err(Error::Irreducible(format!(
            "augmented Poisson matrix is singular (min |R_ii| = {min_diag:e})"
        )));
    }
    let qtb = qr.q().transpose() * rhs;
    let top = qtb.rows(0, n).into_owned();
    let phi = r
        .solve_upper_triangular(&top)
        .ok_or_else(|| Error::Irreducible("triangular solve failed".into()))?;
    Ok(phi.iter().copied().collect())
}

/// Controls for [`solve_phi_integral`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralPolicy {
    /// Stop once the tail bound `‖e^{Bτ}d‖/gap` falls below `tol · ‖I(τ)‖`.
    pub tol: f64,
    pub max_doublings: usize,
}

impl Default for IntegralPolicy {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_doublings: 200,
        }
    }
}

/// Smallest `−Re λ` over the eigenvalues of `gen` other than the one at
/// zero.
pub fn spectral_gap(gen: &GeneratorMatrix) -> f64 {
    let n = gen.dim();
    if n < 2 {
        return f64::INFINITY;
    }
    let m = DMatrix::from_row_slice(n, n, gen.as_slice());
    let mut re: Vec<f64> = m.complex_eigenvalues().iter().map(|z| -z.re).collect();
    re.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    re[1..].iter().copied().fold(f64::INFINITY, f64::min)
}

/// `φ = ∫₀^∞ e^{Bs} d ds` by scaling and doubling:
/// `E(2τ) = E(τ)²`, `J(2τ) = J(τ) + E(τ)J(τ)`, starting from a Taylor
/// series at `τ₀` with `‖B‖τ₀ ≤ 1/2`.
pub fn solve_phi_integral(gen: &GeneratorMatrix, d: &[f64], policy: IntegralPolicy) -> Result<Vec<f64>> {
    let n = gen.dim();
    if d.len() != n {
        return Err(Error::domain("generator and data sizes differ"));
    }
    let dnorm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if dnorm == 0.0 || n == 1 {
        return Ok(vec![0.0; n]);
    }
    let gap = spectral_gap(gen);
    if !(gap >= MIN_SPECTRAL_GAP) {
        return Err(Error::Conditioning { gap });
    }
    let b = DMatrix::from_row_slice(n, n, gen.as_slice());
    let norm = b.iter().fold(0.0f64, |m, v| m.max(v.abs())) * n as f64;
    let tau0 = if norm > 0.0 { 0.5 / norm } else { 1.0 };
    let bt = &b * tau0;
    let mut e = DMatrix::identity(n, n);
    let mut j = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &bt / k as f64;
        e += &term;
        j += &term / (k + 1) as f64;
    }
    j *= tau0;
    let dv = DVector::from_column_slice(d);
    let mut tau = tau0;
    for _ in 0..policy.max_doublings {
        let phi = &j * &dv;
        let rest = &e * &dv;
        let tail = rest.amax() / gap;
        // Past τ·gap = 60 the remainder is at rounding level.
        if tail <= policy.tol * phi.amax().max(dnorm / gap) || tau * gap >= 60.0 {
            return Ok(phi.iter().copied().collect());
        }
        j = &j + &e * &j;
        e = &e * &e;
        tau *= 2.0;
    }
    Err(Error::Conditioning { gap })
}

/// Green–Kubo variance `s = Σ_ξ μ(ξ) d(ξ) φ(ξ)`.
pub fn channel_variance(mu: &QuasiStationary, d: &[f64], phi: &[f64]) -> Result<f64> {
    let s: f64 = mu.probs().iter().zip(d).zip(phi).map(|((m, a), b)| m * a * b).sum();
    if s < -PSD_TOL {
        return Err(Error::Invariant(format!("negative channel variance {s:e}")));
    }
    Ok(s.max(0.0))
}

/// Poisson data of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPoisson {
    pub voltage: f64,
    pub mu: Vec<f64>,
    pub d: Vec<f64>,
    pub phi: Vec<f64>,
    pub variance: f64,
}

/// Per-channel solutions for a whole class configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    pub channels: Vec<ChannelPoisson>,
}

/// Solves the Poisson equation of every channel at the voltages seen under
/// `u`, checking both residuals.
pub fn poisson_solution(sys: &HybridSystem, u: &SpectralField, rbar: &ChannelConfiguration) -> Result<PoissonSolution> {
    check_classes(sys, u, rbar)?;
    let mut channels = Vec::with_capacity(sys.n_channels());
    for i in 0..sys.n_channels() {
        let model = sys.model_of(i);
        let class = rbar.values()[i];
        let y = sys.local_voltage(i, u.coeffs());
        let gen = kinetics::generator_matrix(model, y, class)?;
        let mu = kinetics::quasi_stationary(&gen)?;
        let d = centered_data(model, class, y, &mu);
        let phi = solve_phi_linear(&gen, &d, &mu)?;
        let tol = POISSON_TOL * gen.max_abs().max(1.0) * d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let resid = gen
            .apply(&phi)
            .iter()
            .zip(&d)
            .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        let orth = mu.dot(&phi).abs();
        if resid > tol || orth > tol {
            return Err(Error::Invariant(format!(
                "Poisson residuals at channel {i}: |Bφ+d| = {resid:e}, |μ·φ| = {orth:e}"
            )));
        }
        let variance = channel_variance(&mu, &d, &phi)?;
        channels.push(ChannelPoisson {
            voltage: y,
            mu: mu.probs().to_vec(),
            d,
            phi,
            variance,
        });
    }
    Ok(PoissonSolution { channels })
}

fn check_classes(sys: &HybridSystem, u: &SpectralField, rbar: &ChannelConfiguration) -> Result<()> {
    if rbar.level() != Level::Classes {
        return Err(Error::domain("diffusion operator needs a class configuration"));
    }
    if rbar.len() != sys.n_channels() || u.coeffs().len() != sys.modes() {
        return Err(Error::domain("configuration or field size does not match the system"));
    }
    Ok(())
}

/// Diffusion operator `a = M Mᵀ = (2/N²) Σ_i s_i w_i w_iᵀ` in the f-basis,
/// with `C = a/2` in the convention without the factor ½ in the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionOperator {
    a: DMatrix<f64>,
    factor: DMatrix<f64>,
    variances: Vec<f64>,
}

impl DiffusionOperator {
    /// Assembles the operator from per-channel variances.
    pub fn from_variances(sys: &HybridSystem, variances: Vec<f64>) -> Self {
        let k = sys.modes();
        let n = sys.n_channels();
        let mut factor = DMatrix::zeros(k, n);
        for (i, s) in variances.iter().enumerate() {
            let sigma = sys.sites()[i].weight * (2.0 * s).sqrt();
            for (row, w) in sys.pairing(i).iter().enumerate() {
                factor[(row, i)] = sigma * w;
            }
        }
        let a = &factor * factor.transpose();
        Self { a, factor, variances }
    }

    /// Symmetrized covariance `a` (generator `½ Tr d²ψ a`).
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `C = a/2`.
    pub fn c_paper(&self) -> DMatrix<f64> {
        &self.a * 0.5
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn trace(&self) -> f64 {
        self.a.trace()
    }

    /// Eigenvalues of `a = F Fᵀ` in ascending order. With fewer channels
    /// than modes they come from the smaller Gram matrix `Fᵀ F` padded with
    /// the exact zeros of the null space; a dense solve of `a` would smear
    /// those zeros by `ε_mach ‖a‖`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let (k, n) = self.factor.shape();
        let mut eig: Vec<f64> = if n < k {
            let gram = self.factor.transpose() * &self.factor;
            let mut v = vec![0.0; k - n];
            v.extend(gram.symmetric_eigenvalues().iter());
            v
        } else {
            self.a.clone().symmetric_eigenvalues().iter().copied().collect()
        };
        eig.sort_by(f64::total_cmp);
        eig
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Spectrally clipped copy of `a`; fails if an eigenvalue is below
    /// `−PSD_TOL`.
    pub fn psd_repaired(&self) -> Result<DMatrix<f64>> {
        let min = self.min_eigenvalue();
        if min < -PSD_TOL {
            return Err(Error::Invariant(format!("diffusion matrix eigenvalue {min:e}")));
        }
        let sym = (&self.a + self.a.transpose()) * 0.5;
        let mut eig = sym.symmetric_eigen();
        for l in eig.eigenvalues.iter_mut() {
            *l = l.max(0.0);
        }
        Ok(eig.recompose())
    }
}

/// Diffusion operator of a class configuration at field `u`.
pub fn diffusion_matrix(sys: &HybridSystem, u: &SpectralField, rbar: &ChannelConfiguration) -> Result<DiffusionOperator> {
    check_classes(sys, u, rbar)?;
    let mut work = LocalWork::new(sys.max_states());
    let mut variances = Vec::with_capacity(sys.n_channels());
    for i in 0..sys.n_channels() {
        let y = sys.local_voltage(i, u.coeffs());
        variances.push(work.channel_variance(sys.model_of(i), rbar.values()[i], y)?);
    }
    Ok(DiffusionOperator::from_variances(sys, variances))
}

/// `K × N` factor `M` with `M Mᵀ = a`.
pub fn noise_factor(op: &DiffusionOperator) -> DMatrix<f64> {
    op.factor.clone()
}

/// Allocation-free per-channel kernels for the simulation hot path.
#[derive(Debug, Clone)]
pub(crate) struct LocalWork {
    n: usize,
    gen: Vec<f64>,
    mu: Vec<f64>,
    d: Vec<f64>,
    phi: Vec<f64>,
    scratch: Vec<f64>,
}

impl LocalWork {
    pub(crate) fn new(max_states: usize) -> Self {
        let m = max_states.max(1);
        Self {
            n: 0,
            gen: vec![0.0; m * m],
            mu: vec![0.0; m],
            d: vec![0.0; m],
            phi: vec![0.0; m],
            scratch: vec![0.0; m * m],
        }
    }

    pub(crate) fn mu(&self) -> &[f64] {
        &self.mu[..self.n]
    }

    /// Fills the class generator at `y` and its stationary law.
    pub(crate) fn class_law(&mut self, model: &ChannelModel, class: usize, y: f64) -> Result<()> {
        let members = model.class_members(class);
        let n = members.len();
        self.n = n;
        for (a, &xi) in members.iter().enumerate() {
            let mut row = 0.0;
            for (b, &zeta) in members.iter().enumerate() {
                let r = if a == b { 0.0 } else { model.rate(xi, zeta, y) };
                self.gen[a * n + b] = r;
                row += r;
            }
            self.gen[a * n + a] = -row;
        }
        kinetics::stationary_into(&self.gen[..n * n], n, &mut self.mu[..n], &mut self.scratch)
    }

    /// Green–Kubo variance of the channel current in class `class` at `y`.
    /// The balance equation with the largest stationary weight is replaced
    /// by `μ·φ = 0`, which keeps the square system nonsingular.
    pub(crate) fn channel_variance(&mut self, model: &ChannelModel, class: usize, y: f64) -> Result<f64> {
        self.class_law(model, class, y)?;
        let n = self.n;
        if n == 1 {
            return Ok(0.0);
        }
        let members = model.class_members(class);
        let mut mean = 0.0;
        for (a, &s) in members.iter().enumerate() {
            self.d[a] = model.conductance(s) * (model.reversal(s) - y);
            mean += self.mu[a] * self.d[a];
        }
        let mut top = 0;
        for a in 0..n {
            self.d[a] -= mean;
            if self.mu[a] > self.mu[top] {
                top = a;
            }
        }
        let a = &mut self.scratch[..n * n];
        a.copy_from_slice(&self.gen[..n * n]);
        for a_ in 0..n {
            self.phi[a_] = -self.d[a_];
        }
        a[top * n..(top + 1) * n].copy_from_slice(&self.mu[..n]);
        self.phi[top] = 0.0;
        let scale = self.gen[..n * n].iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if !linalg::solve_in_place(a, &mut self.phi[..n], n, 1e-13 * scale) {
            return Err(Error::Irreducible(format!("singular Poisson system at y = {y}")));
        }
        let s: f64 = (0..n).map(|a| self.mu[a] * self.d[a] * self.phi[a]).sum();
        if s < -PSD_TOL {
            return Err(Error::Invariant(format!("negative channel variance {s:e}")));
        }
        Ok(s.max(0.0))
    }
}

/// Truncated trace of `Q_t` together with the remainder bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceQ {
    pub value: f64,
    pub tail_bound: f64,
}

/// `(∫₀^h e^{−aτ} dτ, ∫₀^h e^{−aτ} τ/h dτ)`.
fn exp_weights(a: f64, h: f64) -> (f64, f64) {
    let x = a * h;
    if x < 1e-3 {
        // Series in x to fifth order.
        let phi1 = h * (1.0 - x / 2.0 + x * x / 6.0 - x.powi(3) / 24.0 + x.powi(4) / 120.0);
        let g = 0.5 - x / 3.0 + x * x / 8.0 - x.powi(3) / 30.0 + x.powi(4) / 144.0;
        (phi1, h * g)
    } else {
        let em = (-x).exp();
        let phi1 = -(-x).exp_m1() / a;
        let g = (-(-x).exp_m1() - x * em) / (x * x);
        (phi1, h * g)
    }
}

/// `Tr Q_t = Σ_k ∫₀^t e^{−2λ_k(t−s)} C_kk(s) ds` with `C_kk` sampled on
/// `times` and interpolated linearly between samples (integrated exactly
/// against the exponential). `diag[m][k]` is `C_kk` at `times[m]`; the
/// result is evaluated at `times[upto]`.
pub fn trace_q(basis: &SpectralBasis, times: &[f64], diag: &[Vec<f64>], upto: usize) -> Result<TraceQ> {
    if times.len() != diag.len() || upto >= times.len() {
        return Err(Error::domain("trace grid and diagonal series differ in length"));
    }
    let lam = basis.eigenvalues();
    let t = times[upto];
    let mut value = 0.0;
    let mut sup_c = 0.0f64;
    for row in &diag[..=upto] {
        if row.len() != lam.len() {
            return Err(Error::domain("diagonal row length differs from mode count"));
        }
        sup_c = row.iter().fold(sup_c, |m, v| m.max(v.abs()));
    }
    for (k, &l) in lam.iter().enumerate() {
        let a = 2.0 * l;
        let mut acc = 0.0;
        for m in 0..upto {
            let h = times[m + 1] - times[m];
            if !(h > 0.0) {
                return Err(Error::domain("trace grid must be strictly increasing"));
            }
            let (phi1, hg) = exp_weights(a, h);
            let decay = (-a * (t - times[m + 1])).exp();
            acc += decay * (diag[m][k] * hg + diag[m + 1][k] * (phi1 - hg));
        }
        value += acc;
    }
    let tail_bound = match basis.inverse_eigenvalue_tail() {
        Some(tail) => sup_c * tail / 2.0,
        None => f64::NAN,
    };
    Ok(TraceQ { value, tail_bound })
}
