//! Adaptive Dormand–Prince 5(4) integrator for smooth stiff-free
//! systems. Mixed absolute/relative error control so exponentially
//! growing moment systems keep relative accuracy.

use nalgebra::DVector;

// Dormand–Prince Butcher tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th-order solution weights equal A[6]; error weights are b5 - b4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate `dy/dt = rhs(t, y)` from `(t0, y0)` to `t1`.
///
/// Panics on step-size underflow (step below 1e-14 of the span), which
/// for the moment systems integrated here signals a modelling error.
pub fn rk45_integrate<F>(
    rhs: &F,
    t0: f64,
    y0: &DVector<f64>,
    t1: f64,
    atol: f64,
    rtol: f64,
) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    assert!(t1 >= t0, "rk45 integrates forward only");
    if t1 == t0 {
        return y0.clone();
    }
    let span = t1 - t0;
    let mut t = t0;
    let mut y = y0.clone();
    let mut h = (span / 16.0).min(0.1).max(1e-8);
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);

    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        k.clear();
        k.push(rhs(t, &y));
        for i in 1..7 {
            let mut yi = y.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[i][j] != 0.0 {
                    yi += kj * (h * A[i][j]);
                }
            }
            k.push(rhs(t + C[i] * h, &yi));
        }
        let mut y5 = y.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            if A[6][j] != 0.0 {
                y5 += kj * (h * A[6][j]);
            }
        }
        // Error estimate from the embedded 4th-order weights.
        let mut err_norm = 0.0f64;
        for idx in 0..y.len() {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[idx];
            }
            e *= h;
            let scale = atol + rtol * y[idx].abs().max(y5[idx].abs());
            err_norm = err_norm.max((e / scale).abs());
        }

        if err_norm <= 1.0 {
            t += h;
            y = y5;
        }
        let factor = if err_norm == 0.0 {
            5.0
        } else {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        assert!(
            h > 1e-14 * span,
            "rk45 step-size underflow at t = {t} (err {err_norm:.3e})"
        );
    }
    y
}
