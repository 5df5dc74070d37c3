//! Adaptive Gauss–Legendre quadrature for smooth vector-valued
//! integrands.
//!
//! A 20-point Gauss–Legendre rule is applied to an interval; the
//! interval is bisected until the rule and its two-panel refinement
//! agree within the error budget, which is distributed proportionally
//! to interval length.

use nalgebra::DVector;
use std::sync::OnceLock;
use thiserror::Error;

const GL_POINTS: usize = 20;
const MAX_DEPTH: usize = 40;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("quadrature failed to converge on [{a}, {b}] (residual {residual:.3e})")]
    NoConvergence { a: f64, b: f64, residual: f64 },
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1],
/// computed once by Newton iteration on the Legendre polynomial.
fn gl_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_POINTS;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            // Newton on P_n(x); derivative via the standard recurrence.
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0f64, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

fn gl_panel<F: FnMut(f64) -> DVector<f64>>(f: &mut F, a: f64, b: f64) -> DVector<f64> {
    let (nodes, weights) = gl_rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = f(mid + half * nodes[0]) * weights[0];
    for i in 1..GL_POINTS {
        acc += f(mid + half * nodes[i]) * weights[i];
    }
    acc * half
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Integrate `f` over `[a, b]` to relative tolerance `rtol`.
///
/// The tolerance is relative to the integral's own magnitude with an
/// absolute floor of `rtol` itself, so integrals near zero do not force
/// endless refinement.
pub fn gauss_legendre_adaptive<F: FnMut(f64) -> DVector<f64>>(
    mut f: F,
    a: f64,
    b: f64,
    rtol: f64,
) -> Result<DVector<f64>, QuadError> {
    if a == b {
        let dim = f(a).len();
        return Ok(DVector::zeros(dim));
    }
    let whole = gl_panel(&mut f, a, b);
    let scale = max_abs(&whole).max(1.0);
    let budget = rtol * scale;

    // Work queue of (a, b, panel estimate, error budget, depth).
    let mut queue = vec![(a, b, whole.clone(), budget, 0usize)];
    let mut total = DVector::zeros(whole.len());
    while let Some((lo, hi, coarse, tol, depth)) = queue.pop() {
        let mid = 0.5 * (lo + hi);
        let left = gl_panel(&mut f, lo, mid);
        let right = gl_panel(&mut f, mid, hi);
        let refined = &left + &right;
        let err = max_abs(&(&refined - &coarse));
        if err <= tol || err <= f64::EPSILON * scale {
            total += refined;
        } else if depth >= MAX_DEPTH {
            return Err(QuadError::NoConvergence {
                a: lo,
                b: hi,
                residual: err,
            });
        } else {
            queue.push((lo, mid, left, tol * 0.5, depth + 1));
            queue.push((mid, hi, right, tol * 0.5, depth + 1));
        }
    }
    Ok(total)
}
