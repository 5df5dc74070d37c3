//! Projection of test functions onto the eigenbasis and the
//! large / critical / small splitting with its indices.
//!
//! γ(f) is the first cluster with a nonzero projection, ζ(f) the last
//! cluster sharing γ's real part, τ(f) the top polynomial degree of
//! `D_k(t)⟨f, Φ̂_k⟩` over that level, and `F_{f,k}` the coefficient of
//! `t^{τ(f)}` — extracted symbolically from the Jordan structure, never
//! by numerical limits. Zero components have degree −∞ and are excluded
//! from the maximum.

use crate::linalg::{self, real_part_checked};
use crate::spectral::{propagate_coeffs, EigenBasis, JordanStructure, SpectralClass, Spectrum};
use nalgebra::DVector;
use num_complex::Complex64;
use thiserror::Error;

/// Default threshold separating structural zeros of `‖v_k‖` from
/// roundoff.
pub const DEFAULT_ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("projection is zero on every cluster (γ(f) = ∞)")]
    GammaInfinite,
    #[error("no H∞ estimate supplied for large cluster {k}")]
    MissingHInf { k: usize },
}

/// Per-cluster projection coefficients `v_k = ⟨f, Φ̂_k⟩_μ`.
#[derive(Debug, Clone)]
pub struct Projection {
    v: Vec<DVector<Complex64>>,
}

impl Projection {
    pub fn coefficients(&self, k: usize) -> &DVector<Complex64> {
        &self.v[k]
    }

    pub fn cluster_count(&self) -> usize {
        self.v.len()
    }

    pub fn norm_of(&self, k: usize) -> f64 {
        self.v[k].norm()
    }

    /// Projection with clusters outside `keep` zeroed.
    pub fn restricted<P: Fn(usize) -> bool>(&self, keep: P) -> Projection {
        Projection {
            v: self
                .v
                .iter()
                .enumerate()
                .map(|(k, vk)| {
                    if keep(k) {
                        vk.clone()
                    } else {
                        DVector::zeros(vk.len())
                    }
                })
                .collect(),
        }
    }
}

/// `v_k = ⟨f, Φ̂_k⟩_μ` for every cluster.
pub fn project(basis: &EigenBasis, f: &DVector<f64>) -> Projection {
    Projection {
        v: basis.project(f),
    }
}

/// γ(f): first cluster with `‖v_k‖ > zero_tol`; `None` encodes ∞.
pub fn gamma(projection: &Projection, zero_tol: f64) -> Option<usize> {
    (0..projection.cluster_count()).find(|&k| projection.norm_of(k) > zero_tol)
}

/// (γ(f), ζ(f)); ζ is the last cluster whose real part matches γ's
/// within the spectrum's clustering tolerance.
pub fn gamma_zeta(
    projection: &Projection,
    spectrum: &Spectrum,
    zero_tol: f64,
) -> Option<(usize, usize)> {
    let g = gamma(projection, zero_tol)?;
    let level = spectrum.lambda(g).re;
    let mut z = g;
    for k in g..spectrum.count() {
        if (spectrum.lambda(k).re - level).abs() <= spectrum.cluster_tol() {
            z = k;
        }
    }
    Some((g, z))
}

/// Coefficient vectors (by power of `t`) of the polynomial
/// `D_k(t)·v`: entry `ℓ` of power `a` is `v[ℓ+a]/a!` when `ℓ+a` lies in
/// `ℓ`'s block.
pub fn coefficient_polynomials(
    structure: &JordanStructure,
    v: &DVector<Complex64>,
) -> Vec<DVector<Complex64>> {
    let n = structure.multiplicity;
    let max_deg = structure.block_sizes.iter().max().copied().unwrap_or(1) - 1;
    let mut coeffs = vec![DVector::<Complex64>::zeros(n); max_deg + 1];
    let mut factorial = 1.0;
    for a in 0..=max_deg {
        if a > 0 {
            factorial *= a as f64;
        }
        let mut offset = 0;
        for &size in &structure.block_sizes {
            for l in 0..size {
                if l + a < size {
                    coeffs[a][offset + l] = v[offset + l + a] / factorial;
                }
            }
            offset += size;
        }
    }
    coeffs
}

/// τ(f): top degree of `D_k(t)·v_k` over the leading real-part level.
pub fn tau_degree(
    projection: &Projection,
    spectrum: &Spectrum,
    zero_tol: f64,
) -> Result<usize, DecomposeError> {
    let (g, z) = gamma_zeta(projection, spectrum, zero_tol).ok_or(DecomposeError::GammaInfinite)?;
    let mut tau = 0usize;
    for k in g..=z {
        let st = spectrum.structure(k);
        let coeffs = coefficient_polynomials(st, projection.coefficients(k));
        for (a, ca) in coeffs.iter().enumerate() {
            if ca.iter().any(|c| c.norm() > zero_tol) {
                tau = tau.max(a);
            }
        }
    }
    Ok(tau)
}

/// `F_{f,k}` for `γ(f) ≤ k ≤ ζ(f)`: the coefficient of `t^{τ(f)}` in
/// `D_k(t)·v_k` (zero when the cluster's degree is lower). Returned as
/// `(k, F)` pairs.
pub fn leading_coefficients(
    projection: &Projection,
    spectrum: &Spectrum,
    zero_tol: f64,
) -> Result<Vec<(usize, DVector<Complex64>)>, DecomposeError> {
    let (g, z) = gamma_zeta(projection, spectrum, zero_tol).ok_or(DecomposeError::GammaInfinite)?;
    let tau = tau_degree(projection, spectrum, zero_tol)?;
    let mut out = Vec::new();
    for k in g..=z {
        let st = spectrum.structure(k);
        let coeffs = coefficient_polynomials(st, projection.coefficients(k));
        let f = coeffs
            .get(tau)
            .cloned()
            .unwrap_or_else(|| DVector::zeros(st.multiplicity));
        out.push((k, f));
    }
    Ok(out)
}

/// The large/critical/small splitting of a real test function with all
/// associated indices.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub f_la: DVector<f64>,
    pub f_cr: DVector<f64>,
    pub f_sm: DVector<f64>,
    /// γ(f), ζ(f) as cluster indices; `None` encodes ∞ (zero function).
    pub gamma: Option<usize>,
    pub zeta: Option<usize>,
    /// τ(f) at the leading level of f itself.
    pub tau: Option<usize>,
    /// τ(f_cr) when the critical component is nonzero.
    pub tau_cr: Option<usize>,
    /// `F_{f_cr,k}` per critical cluster (empty when `f_cr = 0`).
    pub f_cr_leading: Vec<(usize, DVector<Complex64>)>,
    /// The projection of f itself.
    pub projection: Projection,
}

/// Split `f` into `f_la + f_cr + f_sm` (exact by construction) and
/// compute the indices and critical leading coefficients.
pub fn split(spectrum: &Spectrum, basis: &EigenBasis, f: &DVector<f64>) -> Decomposition {
    split_with_tol(spectrum, basis, f, DEFAULT_ZERO_TOL)
}

pub fn split_with_tol(
    spectrum: &Spectrum,
    basis: &EigenBasis,
    f: &DVector<f64>,
    zero_tol: f64,
) -> Decomposition {
    let projection = project(basis, f);
    let combine_class = |class: SpectralClass| -> DVector<f64> {
        let restricted = projection.restricted(|k| spectrum.class_of(k) == class);
        let sum = basis.combine(&restricted.v);
        real_part_checked(&sum, 1e-10)
    };
    let f_la = combine_class(SpectralClass::Large);
    let f_cr = combine_class(SpectralClass::Critical);
    let f_sm = f - &f_la - &f_cr;

    let gz = gamma_zeta(&projection, spectrum, zero_tol);
    let tau = gz.map(|_| tau_degree(&projection, spectrum, zero_tol).unwrap());

    let critical = projection.restricted(|k| spectrum.class_of(k) == SpectralClass::Critical);
    let (tau_cr, f_cr_leading) = if gamma(&critical, zero_tol).is_some() {
        let t = tau_degree(&critical, spectrum, zero_tol).unwrap();
        let leads = leading_coefficients(&critical, spectrum, zero_tol).unwrap();
        (Some(t), leads)
    } else {
        (None, Vec::new())
    };

    Decomposition {
        f_la,
        f_cr,
        f_sm,
        gamma: gz.map(|(g, _)| g),
        zeta: gz.map(|(_, z)| z),
        tau,
        tau_cr,
        f_cr_leading,
        projection,
    }
}

/// Compensator `E_t(f_la) = Σ_{large k} e^{−λ_k t} H^{(k)} D_k(t) v_k`.
///
/// `h` holds one row vector per cluster (only large clusters are read);
/// conjugate pairs combine to a real number.
pub fn compensator(
    spectrum: &Spectrum,
    h: &[Option<nalgebra::RowDVector<Complex64>>],
    projection: &Projection,
    t: f64,
) -> Result<f64, DecomposeError> {
    let mut acc = Complex64::new(0.0, 0.0);
    for k in spectrum.indices_of(SpectralClass::Large) {
        let hk = h
            .get(k)
            .and_then(|o| o.as_ref())
            .ok_or(DecomposeError::MissingHInf { k })?;
        let coeffs = propagate_coeffs(spectrum.structure(k), t, projection.coefficients(k));
        let growth = (-spectrum.lambda(k) * t).exp();
        acc += growth * (hk * coeffs)[0];
    }
    let scale = acc.norm().max(1.0);
    debug_assert!(acc.im.abs() <= 1e-9 * scale, "compensator imaginary part {}", acc.im);
    Ok(acc.re)
}

/// Reversed large flow
/// `I_s f_la = Σ_{large k} e^{λ_k s} Φ_k D_k(−s) v_k` (real).
pub fn large_flow(
    spectrum: &Spectrum,
    basis: &EigenBasis,
    projection: &Projection,
    s: f64,
) -> DVector<f64> {
    assert!(s >= 0.0, "large_flow requires s >= 0");
    let d = basis.phi1().len();
    let mut acc = DVector::<Complex64>::zeros(d);
    for k in spectrum.indices_of(SpectralClass::Large) {
        let decay = (spectrum.lambda(k) * s).exp();
        let coeffs = propagate_coeffs(spectrum.structure(k), -s, projection.coefficients(k));
        acc += basis.phi(k) * (coeffs * decay);
    }
    linalg::real_part_checked(&acc, 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use approx::assert_relative_eq;
    use nalgebra::{dvector, RowDVector};

    #[test]
    fn projecting_phi1_hits_only_first_cluster() {
        let fx = testutil::two_state_small();
        let p = project(&fx.basis, fx.basis.phi1());
        assert_relative_eq!(p.coefficients(0)[0].re, 1.0, epsilon = 1e-10);
        assert!(p.norm_of(1) < 1e-10);
        assert_eq!(gamma_zeta(&p, &fx.spectrum, DEFAULT_ZERO_TOL), Some((0, 0)));
    }

    #[test]
    fn zero_function_has_infinite_gamma() {
        let fx = testutil::two_state_small();
        let p = project(&fx.basis, &dvector![0.0, 0.0]);
        assert_eq!(gamma(&p, DEFAULT_ZERO_TOL), None);
        assert!(matches!(
            tau_degree(&p, &fx.spectrum, DEFAULT_ZERO_TOL),
            Err(DecomposeError::GammaInfinite)
        ));
    }

    #[test]
    fn indicator_projects_evenly_on_symmetric_model() {
        let fx = testutil::two_state_small();
        let p = project(&fx.basis, &dvector![1.0, 0.0]);
        let s = 1.0 / 2f64.sqrt();
        assert_relative_eq!(p.coefficients(0)[0].re, s, epsilon = 1e-10);
        assert_relative_eq!(p.coefficients(1)[0].norm(), s, epsilon = 1e-10);
    }

    #[test]
    fn reconstruction_from_projection() {
        let fx = testutil::three_state_cyclic();
        let f = dvector![0.4, -1.1, 2.3];
        let p = project(&fx.basis, &f);
        let rec = fx.basis.combine(&p.v);
        for i in 0..3 {
            assert_relative_eq!(rec[i].re, f[i], epsilon = 1e-9);
        }
        // Conjugate symmetry of coefficients for real f.
        let v1 = p.coefficients(1);
        let v2 = p.coefficients(2);
        assert_relative_eq!(v1[0].re, v2[0].re, epsilon = 1e-10);
        assert_relative_eq!(v1[0].im, -v2[0].im, epsilon = 1e-10);
    }

    #[test]
    fn gamma_zeta_spans_complex_pair_level() {
        // f orthogonal to φ̂₁ with weight on the conjugate pair: γ = 2,
        // ζ = 3 in 1-based terms (cluster indices 1 and 2 here).
        let fx = testutil::three_state_cyclic();
        let phi1_hat = fx.basis.phi1_hat();
        let mut f = dvector![1.0, -0.3, 0.0];
        // Remove the φ₁ component: f ← f − ⟨f, φ̂₁⟩ φ₁.
        let c = f.dot(phi1_hat);
        f -= fx.basis.phi1() * c;
        let p = project(&fx.basis, &f);
        assert!(p.norm_of(0) < 1e-10);
        assert_eq!(gamma_zeta(&p, &fx.spectrum, DEFAULT_ZERO_TOL), Some((1, 2)));
    }

    #[test]
    fn tau_zero_for_diagonalizable_clusters() {
        let fx = testutil::two_state_small();
        let p = project(&fx.basis, &dvector![0.7, 0.9]);
        assert_eq!(tau_degree(&p, &fx.spectrum, DEFAULT_ZERO_TOL).unwrap(), 0);
    }

    #[test]
    fn tau_and_leading_coefficients_on_jordan_block() {
        use crate::spectral::JordanStructure;
        let st = JordanStructure {
            multiplicity: 2,
            block_sizes: vec![2],
        };
        // v = (0, 1): D(t)v = (t, 1), degree 1, coefficient of t is (1, 0).
        let v = dvector![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)];
        let coeffs = coefficient_polynomials(&st, &v);
        assert_relative_eq!(coeffs[0][1].re, 1.0);
        assert_relative_eq!(coeffs[1][0].re, 1.0);
        assert_relative_eq!(coeffs[1][1].re, 0.0);
        // v = (1, 0): D(t)v = (1, 0), degree 0.
        let v0 = dvector![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        let coeffs0 = coefficient_polynomials(&st, &v0);
        assert_relative_eq!(coeffs0[0][0].re, 1.0);
        assert!(coeffs0[1].iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn jordan_fixture_tau_via_decomposition() {
        let fx = testutil::jordan_designed();
        // f = second chain vector: v₂ = (0, 1) on the critical cluster.
        let f = fx.basis.phi(1).column(1).map(|z| z.re);
        let dec = split(&fx.spectrum, &fx.basis, &f);
        assert_eq!(dec.tau_cr, Some(1));
        let (k, lead) = &dec.f_cr_leading[0];
        assert_eq!(*k, 1);
        assert_relative_eq!(lead[0].re, 1.0, epsilon = 1e-9);
        assert_relative_eq!(lead[1].norm(), 0.0, epsilon = 1e-9);
        // f = eigenvector: τ = 0 and F = v.
        let f0 = fx.basis.phi(1).column(0).map(|z| z.re);
        let dec0 = split(&fx.spectrum, &fx.basis, &f0);
        assert_eq!(dec0.tau_cr, Some(0));
    }

    #[test]
    fn split_classifies_fixtures() {
        let s = 1.0 / 2f64.sqrt();
        let f = dvector![s, -s];

        // φ₁ is always large (2λ₁ < λ₁ for supercritical models).
        let fx = testutil::two_state_small();
        let dec = split(&fx.spectrum, &fx.basis, fx.basis.phi1());
        assert_relative_eq!((&dec.f_la - fx.basis.phi1()).norm(), 0.0, epsilon = 1e-10);
        assert_relative_eq!(dec.f_cr.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(dec.f_sm.norm(), 0.0, epsilon = 1e-12);

        // Small fixture: λ₂ = 1, 2ℜλ₂ = 2 > λ₁ = −1.
        let dec = split(&fx.spectrum, &fx.basis, &f);
        assert_relative_eq!((&dec.f_sm - &f).norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!(dec.f_la.norm(), 0.0, epsilon = 1e-9);

        // Critical fixture: λ₂ = −1/2, 2ℜλ₂ = −1 = λ₁.
        let fx = testutil::two_state_critical();
        let dec = split(&fx.spectrum, &fx.basis, &f);
        assert_relative_eq!((&dec.f_cr - &f).norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!(dec.f_la.norm(), 0.0, epsilon = 1e-9);
        assert_eq!(dec.tau_cr, Some(0));
    }

    #[test]
    fn split_is_exact_and_linear() {
        let fx = testutil::three_state_cyclic();
        let f = dvector![1.0, 2.0, -0.5];
        let g = dvector![0.3, -1.0, 0.7];
        let df = split(&fx.spectrum, &fx.basis, &f);
        let dg = split(&fx.spectrum, &fx.basis, &g);
        // Exact identity by construction.
        let sum = &df.f_la + &df.f_cr + &df.f_sm;
        assert_eq!(sum, f);
        // Linearity within tolerance.
        let combo = &f * 2.0 - &g * 3.0;
        let dc = split(&fx.spectrum, &fx.basis, &combo);
        let expect_la = &df.f_la * 2.0 - &dg.f_la * 3.0;
        assert!((dc.f_la - expect_la).norm() < 1e-10);
        let expect_sm = &df.f_sm * 2.0 - &dg.f_sm * 3.0;
        assert!((dc.f_sm - expect_sm).norm() < 1e-10);
    }

    #[test]
    fn split_is_idempotent() {
        let fx = testutil::two_state_critical();
        let f = dvector![1.3, -0.2];
        let dec = split(&fx.spectrum, &fx.basis, &f);
        for (component, pick) in [
            (&dec.f_la, 0usize),
            (&dec.f_cr, 1),
            (&dec.f_sm, 2),
        ] {
            let again = split(&fx.spectrum, &fx.basis, component);
            let same = match pick {
                0 => &again.f_la,
                1 => &again.f_cr,
                _ => &again.f_sm,
            };
            assert!(
                (component - same).norm() < 1e-9,
                "component {pick} not idempotent"
            );
        }
    }

    #[test]
    fn critical_span_is_flow_invariant() {
        let fx = testutil::two_state_critical();
        let f = dvector![1.0, 0.0];
        let dec = split(&fx.spectrum, &fx.basis, &f);
        let flowed = crate::spectral::semigroup_apply(&fx.spectrum, &fx.basis, &dec.f_cr, 1.7);
        let dec2 = split(&fx.spectrum, &fx.basis, &flowed);
        assert!((dec2.f_cr - &flowed).norm() < 1e-9 * flowed.norm().max(1.0));
    }

    #[test]
    fn compensator_yule_single_cluster() {
        let fx = testutil::yule();
        let p = project(&fx.basis, &dvector![1.0]);
        let w = 0.85;
        let h = vec![Some(RowDVector::from_vec(vec![Complex64::new(w, 0.0)]))];
        let t = 2.0;
        let e = compensator(&fx.spectrum, &h, &p, t).unwrap();
        // λ₁ = −1 so E_t = e^{t} w.
        assert_relative_eq!(e, t.exp() * w, max_relative = 1e-12);
    }

    #[test]
    fn compensator_zero_large_part() {
        let fx = testutil::two_state_small();
        let s = 1.0 / 2f64.sqrt();
        let dec = split(&fx.spectrum, &fx.basis, &dvector![s, -s]);
        let h = vec![
            Some(RowDVector::from_vec(vec![Complex64::new(1.0, 0.0)])),
            None,
        ];
        let p = project(&fx.basis, &dec.f_la);
        let e = compensator(&fx.spectrum, &h, &p, 3.0).unwrap();
        assert_relative_eq!(e, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compensator_requires_every_large_cluster() {
        let fx = testutil::three_state_cyclic();
        let p = project(&fx.basis, &dvector![1.0, 0.0, 0.0]);
        let h = vec![Some(RowDVector::from_vec(vec![Complex64::new(1.0, 0.0)]))];
        assert!(matches!(
            compensator(&fx.spectrum, &h, &p, 1.0),
            Err(DecomposeError::MissingHInf { .. })
        ));
    }

    #[test]
    fn compensator_conjugate_pair_is_real() {
        let fx = testutil::three_state_cyclic();
        let f = dvector![1.0, 0.0, -0.5];
        let p = project(&fx.basis, &f);
        // Conjugate-symmetric H rows, as produced by observing a real
        // particle field.
        let h: Vec<Option<RowDVector<Complex64>>> = (0..3)
            .map(|k| {
                let kc = fx.spectrum.conjugate(k);
                let val = if kc == k {
                    Complex64::new(0.9, 0.0)
                } else {
                    let base = Complex64::new(0.4 + k.min(kc) as f64, 0.3);
                    if k < kc {
                        base
                    } else {
                        base.conj()
                    }
                };
                Some(RowDVector::from_vec(vec![val]))
            })
            .collect();
        let e = compensator(&fx.spectrum, &h, &p, 2.0).unwrap();
        assert!(e.is_finite());
    }

    #[test]
    fn large_flow_identities() {
        let fx = testutil::yule();
        let p = project(&fx.basis, &dvector![1.0]);
        // s = 0 returns f_la; Yule decays as e^{λ₁ s} = e^{−s}.
        let at0 = large_flow(&fx.spectrum, &fx.basis, &p, 0.0);
        assert_relative_eq!(at0[0], 1.0, epsilon = 1e-12);
        let at2 = large_flow(&fx.spectrum, &fx.basis, &p, 2.0);
        assert_relative_eq!(at2[0], (-2.0f64).exp(), max_relative = 1e-12);

        // Zero large component flows to zero.
        let fx = testutil::two_state_small();
        let s = 1.0 / 2f64.sqrt();
        let dec = split(&fx.spectrum, &fx.basis, &dvector![s, -s]);
        let p = project(&fx.basis, &dec.f_la);
        let flow = large_flow(&fx.spectrum, &fx.basis, &p, 1.0);
        assert!(flow.norm() < 1e-12);
    }
}
