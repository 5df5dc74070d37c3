//! Dense numerical kernels shared across modules: matrix exponential,
//! adaptive Gauss–Legendre quadrature and an adaptive Runge–Kutta
//! integrator.

mod expm;
mod ode;
mod quad;

pub use expm::expm;
pub use ode::rk45_integrate;
pub use quad::{gauss_legendre_adaptive, QuadError};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Lift a real matrix into complex entries.
pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Real part of a complex vector, asserting the imaginary part is noise.
///
/// `tol` is absolute on the largest imaginary magnitude, scaled by the
/// vector's overall magnitude.
pub fn real_part_checked(v: &DVector<Complex64>, tol: f64) -> DVector<f64> {
    let scale = v.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
    let worst = v.iter().map(|z| z.im.abs()).fold(0.0f64, f64::max);
    debug_assert!(
        worst <= tol * scale,
        "imaginary residue {worst:.3e} exceeds {tol:.3e} * {scale:.3e}"
    );
    v.map(|z| z.re)
}

/// `⟨f, g⟩_μ = Σ_x f(x) · conj(g(x))` with counting measure μ.
pub fn inner_mu(f: &DVector<Complex64>, g: &DVector<Complex64>) -> Complex64 {
    f.iter().zip(g.iter()).map(|(a, b)| a * b.conj()).sum()
}

/// Real inner product `Σ_x f(x) g(x)`.
pub fn inner_mu_real(f: &DVector<f64>, g: &DVector<f64>) -> f64 {
    f.dot(g)
}
