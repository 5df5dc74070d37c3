//! Exact moments of `⟨f, X_t⟩` up to order four and the limiting
//! variance constants.
//!
//! Moments are computed along two independent routes that must agree:
//! the convolution formulas evaluated by adaptive Gauss–Legendre
//! quadrature, and the coupled linear ODE system obtained by
//! differentiating them (`dm_k/dt = L m_k + source terms`), integrated
//! by an adaptive Runge–Kutta scheme.
//!
//! The infinite integrals defining `σ²_sm` and `σ²_la` are evaluated in
//! closed form through the eigen-expansion: every integrand is a finite
//! sum of `s^a e^{bs}` terms with `ℜb < 0`, and
//! `∫_0^∞ s^a e^{bs} ds = a!/(−b)^{a+1}`. A truncated-quadrature
//! fallback cross-checks the closed form.

use crate::decompose::{coefficient_polynomials, Decomposition, Projection};
use crate::linalg::{gauss_legendre_adaptive, rk45_integrate, QuadError};
use crate::model::{branching_moments, mean_generator, BranchingModel, BranchingMoments};
use crate::spectral::{semigroup_apply, EigenBasis, SpectralClass, Spectrum};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

/// Relative tolerance of the second-moment convolution quadrature.
pub const SECOND_MOMENT_RTOL: f64 = 1e-10;
/// Relative tolerance of the nested third/fourth-moment quadratures
/// (slightly looser than the inner integrals they consume).
pub const HIGHER_MOMENT_RTOL: f64 = 1e-9;
/// Default moment-ODE tolerances.
pub const ODE_ATOL: f64 = 1e-10;
pub const ODE_RTOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MomentError {
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("non-convergent variance integral (rate ℜ(b) = {rate:.6} ≥ 0); component misclassified?")]
    NonConvergent { rate: f64 },
}

/// Exact moments `m_k(t, x) = E_{δx}⟨f, X_t⟩^k` along a time grid.
#[derive(Debug, Clone)]
pub struct MomentTable {
    pub t: Vec<f64>,
    pub order: usize,
    /// `m[k-1][i]` is the length-d vector of `m_k` at `t[i]`.
    pub m: Vec<Vec<DVector<f64>>>,
}

/// Limiting variance constants of the three components.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceConstants {
    pub sigma_sm_sq: f64,
    pub sigma_cr_sq: f64,
    pub sigma_la_sq: f64,
    /// τ(f_cr); 0 when the critical component vanishes.
    pub tau_cr: usize,
}

/// Bundles the model with its spectral data for moment evaluation.
pub struct MomentEngine<'a> {
    model: &'a BranchingModel,
    spectrum: &'a Spectrum,
    basis: &'a EigenBasis,
    a: BranchingMoments,
    l: DMatrix<f64>,
}

impl<'a> MomentEngine<'a> {
    pub fn new(model: &'a BranchingModel, spectrum: &'a Spectrum, basis: &'a EigenBasis) -> Self {
        Self {
            model,
            spectrum,
            basis,
            a: branching_moments(model),
            l: mean_generator(model),
        }
    }

    pub fn branching(&self) -> &BranchingMoments {
        &self.a
    }

    fn flow(&self, f: &DVector<f64>, t: f64) -> DVector<f64> {
        semigroup_apply(self.spectrum, self.basis, f, t)
    }

    /// First moment `m1(t) = T_t f`.
    pub fn first_moment(&self, f: &DVector<f64>, t: f64) -> DVector<f64> {
        self.flow(f, t)
    }

    /// Second moment by the convolution formula
    /// `m2(t) = ∫_0^t T_{t−u}[A² (T_u f)²] du + T_t(f²)`.
    pub fn second_moment(&self, f: &DVector<f64>, t: f64) -> Result<DVector<f64>, MomentError> {
        let integral = gauss_legendre_adaptive(
            |u| {
                let tu = self.flow(f, u);
                let w = tu.component_mul(&tu).component_mul(&self.a.a2);
                self.flow(&w, t - u)
            },
            0.0,
            t,
            SECOND_MOMENT_RTOL,
        )?;
        Ok(integral + self.flow(&f.component_mul(f), t))
    }

    /// Third moment:
    /// `m3(t) = ∫ T_{t−s}[A³(T_s f)³ + 3A² m2(s) T_s f] ds + T_t(f³)`.
    pub fn third_moment(&self, f: &DVector<f64>, t: f64) -> Result<DVector<f64>, MomentError> {
        let mut inner_err: Option<MomentError> = None;
        let integral = gauss_legendre_adaptive(
            |s| {
                let tf = self.flow(f, s);
                let m2 = match self.second_moment(f, s) {
                    Ok(v) => v,
                    Err(e) => {
                        inner_err.get_or_insert(e);
                        return DVector::zeros(f.len());
                    }
                };
                let cubic = tf.component_mul(&tf).component_mul(&tf).component_mul(&self.a.a3);
                let cross = m2.component_mul(&tf).component_mul(&self.a.a2) * 3.0;
                self.flow(&(cubic + cross), t - s)
            },
            0.0,
            t,
            HIGHER_MOMENT_RTOL,
        )?;
        if let Some(e) = inner_err {
            return Err(e);
        }
        let f3 = f.component_mul(f).component_mul(f);
        Ok(integral + self.flow(&f3, t))
    }

    /// Fourth moment:
    /// `m4(t) = ∫ T_{t−s}[A⁴(T_sf)⁴ + 6A³(T_sf)²m2(s) + 4A² m3(s)T_sf
    ///                    + 3A² m2(s)²] ds + T_t(f⁴)`.
    pub fn fourth_moment(&self, f: &DVector<f64>, t: f64) -> Result<DVector<f64>, MomentError> {
        let mut inner_err: Option<MomentError> = None;
        let integral = gauss_legendre_adaptive(
            |s| {
                let tf = self.flow(f, s);
                let (m2, m3) = match (self.second_moment(f, s), self.third_moment(f, s)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => {
                        inner_err.get_or_insert(e);
                        return DVector::zeros(f.len());
                    }
                };
                let tf2 = tf.component_mul(&tf);
                let quartic = tf2.component_mul(&tf2).component_mul(&self.a.a4);
                let t6 = tf2.component_mul(&m2).component_mul(&self.a.a3) * 6.0;
                let t4 = m3.component_mul(&tf).component_mul(&self.a.a2) * 4.0;
                let t3 = m2.component_mul(&m2).component_mul(&self.a.a2) * 3.0;
                self.flow(&(quartic + t6 + t4 + t3), t - s)
            },
            0.0,
            t,
            HIGHER_MOMENT_RTOL,
        )?;
        if let Some(e) = inner_err {
            return Err(e);
        }
        let f2 = f.component_mul(f);
        let f4 = f2.component_mul(&f2);
        Ok(integral + self.flow(&f4, t))
    }

    /// Independent oracle: the coupled moment ODE system
    /// `dm1 = L m1`, `dm2 = L m2 + A² m1²`,
    /// `dm3 = L m3 + A³ m1³ + 3 A² m1 m2`,
    /// `dm4 = L m4 + A⁴ m1⁴ + 6 A³ m1² m2 + 4 A² m1 m3 + 3 A² m2²`,
    /// integrated adaptively along the grid.
    pub fn moment_ode(&self, f: &DVector<f64>, grid: &[f64], order: usize) -> MomentTable {
        self.moment_ode_with_tol(f, grid, order, ODE_ATOL, ODE_RTOL)
    }

    pub fn moment_ode_with_tol(
        &self,
        f: &DVector<f64>,
        grid: &[f64],
        order: usize,
        atol: f64,
        rtol: f64,
    ) -> MomentTable {
        assert!((1..=4).contains(&order), "order must be 1..=4");
        assert!(
            grid.windows(2).all(|w| w[1] > w[0]) && grid.first().map_or(false, |&t| t >= 0.0),
            "grid must be increasing and nonnegative"
        );
        let d = f.len();
        let a = &self.a;
        let l = &self.l;
        let rhs = move |_t: f64, y: &DVector<f64>| -> DVector<f64> {
            let mut dy = DVector::<f64>::zeros(order * d);
            let seg = |y: &DVector<f64>, k: usize| y.rows(k * d, d).into_owned();
            let m1 = seg(y, 0);
            for k in 0..order {
                let mk = seg(y, k);
                let flow = l * &mk;
                for x in 0..d {
                    dy[k * d + x] = flow[x];
                }
            }
            if order >= 2 {
                let m1sq = m1.component_mul(&m1);
                for x in 0..d {
                    dy[d + x] += a.a2[x] * m1sq[x];
                }
                if order >= 3 {
                    let m2 = seg(y, 1);
                    for x in 0..d {
                        dy[2 * d + x] +=
                            a.a3[x] * m1sq[x] * m1[x] + 3.0 * a.a2[x] * m2[x] * m1[x];
                    }
                    if order >= 4 {
                        let m3 = seg(y, 2);
                        for x in 0..d {
                            dy[3 * d + x] += a.a4[x] * m1sq[x] * m1sq[x]
                                + 6.0 * a.a3[x] * m1sq[x] * m2[x]
                                + 4.0 * a.a2[x] * m3[x] * m1[x]
                                + 3.0 * a.a2[x] * m2[x] * m2[x];
                        }
                    }
                }
            }
            dy
        };

        let mut y = DVector::<f64>::zeros(order * d);
        for x in 0..d {
            let mut p = 1.0;
            for k in 0..order {
                p *= f[x];
                y[k * d + x] = p;
            }
        }

        let mut table = MomentTable {
            t: grid.to_vec(),
            order,
            m: vec![Vec::with_capacity(grid.len()); order],
        };
        let mut t_now = 0.0;
        for &t in grid {
            if t > t_now {
                y = rk45_integrate(&rhs, t_now, &y, t, atol, rtol);
                t_now = t;
            }
            for k in 0..order {
                table.m[k].push(y.rows(k * d, d).into_owned());
            }
        }
        table
    }

    // -- variance constants ------------------------------------------

    /// `σ²_sm = ∫_0^∞ e^{λ₁s} ⟨A²(T_s f_sm)², φ̂₁⟩ ds + ⟨f_sm², φ̂₁⟩`.
    pub fn sigma_sm(&self, dec: &Decomposition) -> Result<f64, MomentError> {
        if dec.f_sm.norm() <= 1e-12 || self.model.is_deterministic_branching() {
            return Ok(0.0);
        }
        let flow = self.forward_flow(&dec.projection, SpectralClass::Small);
        let integral = self.exp_poly_variance_integral(&flow, self.spectrum.lambda1())?;
        Ok(integral + self.weighted_square(&dec.f_sm))
    }

    /// `σ²_cr = (1+2τ)⁻¹ Σ_{critical k} ⟨A² |Φ_k F_k|², φ̂₁⟩`.
    pub fn sigma_cr(&self, dec: &Decomposition) -> f64 {
        if dec.f_cr.norm() <= 1e-12 || self.model.is_deterministic_branching() {
            return 0.0;
        }
        let tau = dec.tau_cr.unwrap_or(0);
        let mut sum = 0.0;
        for (k, lead) in &dec.f_cr_leading {
            let u = self.basis.phi(*k) * lead;
            let mag: DVector<f64> = u.map(|z| z.norm_sqr());
            sum += mag
                .component_mul(&self.a.a2)
                .dot(self.basis.phi1_hat());
        }
        sum / (1.0 + 2.0 * tau as f64)
    }

    /// `σ²_la = ∫_0^∞ e^{−λ₁s} ⟨A²(I_s f_la)², φ̂₁⟩ ds − ⟨f_la², φ̂₁⟩`.
    pub fn sigma_la(&self, dec: &Decomposition) -> Result<f64, MomentError> {
        if dec.f_la.norm() <= 1e-12 || self.model.is_deterministic_branching() {
            return Ok(0.0);
        }
        let flow = self.reversed_flow(&dec.projection);
        let integral = self.exp_poly_variance_integral(&flow, -self.spectrum.lambda1())?;
        Ok(integral - self.weighted_square(&dec.f_la))
    }

    /// All three constants and τ(f_cr).
    pub fn variance_constants(&self, dec: &Decomposition) -> Result<VarianceConstants, MomentError> {
        Ok(VarianceConstants {
            sigma_sm_sq: self.sigma_sm(dec)?,
            sigma_cr_sq: self.sigma_cr(dec),
            sigma_la_sq: self.sigma_la(dec)?,
            tau_cr: dec.tau_cr.unwrap_or(0),
        })
    }

    /// `⟨g², φ̂₁⟩_μ`.
    fn weighted_square(&self, g: &DVector<f64>) -> f64 {
        g.component_mul(g).dot(self.basis.phi1_hat())
    }

    /// Forward eigen-flow of one spectral class as exp-polynomial terms:
    /// `Σ_k e^{−λ_k s} Φ_k D_k(s) v_k`.
    fn forward_flow(&self, projection: &Projection, class: SpectralClass) -> ExpPolyFlow {
        let mut terms = Vec::new();
        for k in self.spectrum.indices_of(class) {
            let v = projection.coefficients(k);
            if v.norm() <= 1e-14 {
                continue;
            }
            let coeffs = coefficient_polynomials(self.spectrum.structure(k), v);
            let poly: Vec<DVector<Complex64>> =
                coeffs.iter().map(|c| self.basis.phi(k) * c).collect();
            terms.push((-self.spectrum.lambda(k), poly));
        }
        ExpPolyFlow { terms }
    }

    /// Reversed large flow `I_s`: rates `+λ_k`, propagator at `−s`.
    fn reversed_flow(&self, projection: &Projection) -> ExpPolyFlow {
        let mut terms = Vec::new();
        for k in self.spectrum.indices_of(SpectralClass::Large) {
            let v = projection.coefficients(k);
            if v.norm() <= 1e-14 {
                continue;
            }
            let coeffs = coefficient_polynomials(self.spectrum.structure(k), v);
            let poly: Vec<DVector<Complex64>> = coeffs
                .iter()
                .enumerate()
                .map(|(a, c)| {
                    let sign = if a % 2 == 0 { 1.0 } else { -1.0 };
                    self.basis.phi(k) * c * Complex64::new(sign, 0.0)
                })
                .collect();
            terms.push((self.spectrum.lambda(k), poly));
        }
        ExpPolyFlow { terms }
    }

    /// `∫_0^∞ e^{shift·s} ⟨A² · flow(s)², φ̂₁⟩ ds` in closed form.
    fn exp_poly_variance_integral(
        &self,
        flow: &ExpPolyFlow,
        shift: f64,
    ) -> Result<f64, MomentError> {
        let phi1_hat = self.basis.phi1_hat();
        let a2 = &self.a.a2;
        let mut total = Complex64::new(0.0, 0.0);
        for (rho_i, poly_i) in &flow.terms {
            for (rho_j, poly_j) in &flow.terms {
                let b = Complex64::new(shift, 0.0) + rho_i + rho_j;
                if b.re >= -1e-9 {
                    return Err(MomentError::NonConvergent { rate: b.re });
                }
                // Polynomial product, weighted and integrated term by term.
                let mut factorial = 1.0;
                for a in 0..(poly_i.len() + poly_j.len() - 1) {
                    if a > 0 {
                        factorial *= a as f64;
                    }
                    let mut weight = Complex64::new(0.0, 0.0);
                    for ai in 0..poly_i.len() {
                        let aj = a.wrapping_sub(ai);
                        if aj >= poly_j.len() {
                            continue;
                        }
                        for x in 0..phi1_hat.len() {
                            weight +=
                                poly_i[ai][x] * poly_j[aj][x] * (a2[x] * phi1_hat[x]);
                        }
                    }
                    total += weight * factorial / (-b).powu(a as u32 + 1);
                }
            }
        }
        debug_assert!(
            total.im.abs() <= 1e-9 * total.norm().max(1.0),
            "variance integral imaginary part {}",
            total.im
        );
        Ok(total.re)
    }

    /// Quadrature fallback for the same integral, truncating the tail
    /// when the integrand bound drops below 1e-14.
    pub fn sigma_integral_quadrature(
        &self,
        projection: &Projection,
        class: SpectralClass,
        reversed: bool,
        shift: f64,
    ) -> Result<f64, MomentError> {
        let flow = if reversed {
            self.reversed_flow(projection)
        } else {
            self.forward_flow(projection, class)
        };
        if flow.terms.is_empty() {
            return Ok(0.0);
        }
        let mut b_max = f64::NEG_INFINITY;
        let mut max_deg = 0usize;
        for (ri, pi) in &flow.terms {
            for (rj, pj) in &flow.terms {
                b_max = b_max.max(shift + ri.re + rj.re);
                max_deg = max_deg.max(pi.len() + pj.len() - 2);
            }
        }
        if b_max >= -1e-9 {
            return Err(MomentError::NonConvergent { rate: b_max });
        }
        let horizon = (50.0 + 5.0 * max_deg as f64) / (-b_max);
        let phi1_hat = self.basis.phi1_hat();
        let a2 = &self.a.a2;
        let value = gauss_legendre_adaptive(
            |s| {
                let g = flow.eval(s);
                let val: f64 = (0..g.len()).map(|x| g[x] * g[x] * a2[x] * phi1_hat[x]).sum();
                nalgebra::dvector![(shift * s).exp() * val]
            },
            0.0,
            horizon,
            1e-12,
        )?;
        Ok(value[0])
    }

    /// Compares `e^{λ₁t}·Var_x⟨f_sm, X_t⟩` and
    /// `t^{−(1+2τ)}e^{λ₁t}·Var_x⟨f_cr, X_t⟩` against their limits, using
    /// the moment-ODE route.
    pub fn variance_limit_check(
        &self,
        dec: &Decomposition,
        t: f64,
    ) -> Result<VarianceLimitReport, MomentError> {
        let lambda1 = self.spectrum.lambda1();
        let phi1 = self.basis.phi1();
        let check = |f: &DVector<f64>, norm: f64, target_const: f64| -> ComponentLimit {
            let table = self.moment_ode(f, &[t], 2);
            let m1 = &table.m[0][0];
            let m2 = &table.m[1][0];
            let mut worst = 0.0f64;
            for x in 0..f.len() {
                let var = m2[x] - m1[x] * m1[x];
                let estimate = (lambda1 * t).exp() * var / norm;
                let target = target_const * phi1[x];
                let residual = if target.abs() > 0.0 {
                    ((estimate - target) / target).abs()
                } else {
                    estimate.abs()
                };
                worst = worst.max(residual);
            }
            ComponentLimit {
                target_const,
                max_rel_residual: worst,
                vacuous: false,
            }
        };

        let sm = if dec.f_sm.norm() > 1e-12 {
            check(&dec.f_sm, 1.0, self.sigma_sm(dec)?)
        } else {
            ComponentLimit::vacuous()
        };
        let cr = if dec.f_cr.norm() > 1e-12 {
            let tau = dec.tau_cr.unwrap_or(0);
            check(
                &dec.f_cr,
                t.powi(1 + 2 * tau as i32),
                self.sigma_cr(dec),
            )
        } else {
            ComponentLimit::vacuous()
        };
        Ok(VarianceLimitReport { t, sm, cr })
    }
}

/// Finite sum of `e^{ρs}·p(s)` terms with vector polynomial
/// coefficients; the symbolic form of a restricted semigroup flow.
struct ExpPolyFlow {
    terms: Vec<(Complex64, Vec<DVector<Complex64>>)>,
}

impl ExpPolyFlow {
    /// Pointwise (real) evaluation, for the quadrature fallback.
    fn eval(&self, s: f64) -> DVector<f64> {
        let d = self.terms.first().map_or(0, |(_, p)| p[0].len());
        let mut acc = DVector::<Complex64>::zeros(d);
        for (rho, poly) in &self.terms {
            let growth = (rho * s).exp();
            let mut power = 1.0;
            for c in poly {
                acc += c * (growth * power);
                power *= s;
            }
        }
        acc.map(|z| z.re)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentLimit {
    pub target_const: f64,
    pub max_rel_residual: f64,
    pub vacuous: bool,
}

impl ComponentLimit {
    fn vacuous() -> Self {
        Self {
            target_const: 0.0,
            max_rel_residual: 0.0,
            vacuous: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceLimitReport {
    pub t: f64,
    pub sm: ComponentLimit,
    pub cr: ComponentLimit,
}
