//! Closed-form references for degenerate models, kept deliberately free
//! of the code paths they validate.
//!
//! A unit-rate binary-fission population at time `t` is geometric with
//! success probability `q = e^{−βt}`; a binary birth–death process has
//! an explicit extinction probability. Both are classical results used
//! as external truth in tests and the verification harness.

/// Raw moments `E Z_t^k` (k = 1..4) of the pure binary-fission
/// population started from one particle: Z_t geometric with
/// `q = e^{−βt}`.
pub fn yule_moments(beta: f64, t: f64, order: usize) -> f64 {
    assert!((1..=4).contains(&order), "order must be 1..=4");
    assert!(t >= 0.0);
    let q = (-beta * t).exp();
    match order {
        1 => 1.0 / q,
        2 => (2.0 - q) / (q * q),
        3 => (6.0 - 6.0 * q + q * q) / (q * q * q),
        _ => (24.0 - 36.0 * q + 14.0 * q * q - q * q * q) / (q * q * q * q),
    }
}

/// `Var(W_t)` for the unit-rate binary fission martingale
/// `W_t = e^{−βt} Z_t`: equals `1 − e^{−βt}`.
pub fn yule_martingale_variance(beta: f64, t: f64) -> f64 {
    1.0 - (-beta * t).exp()
}

/// Extinction probability by time `t` of the binary birth–death process
/// (offspring 0 with probability `p0`, 2 with probability `p2 = 1−p0`,
/// branch rate `beta`), started from one particle.
pub fn birth_death_extinction(beta: f64, p0: f64, p2: f64, t: f64) -> f64 {
    assert!((p0 + p2 - 1.0).abs() < 1e-12, "p0 + p2 must equal 1");
    assert!(t >= 0.0);
    let birth = beta * p2;
    let death = beta * p0;
    if birth == 0.0 {
        return 1.0 - (-death * t).exp();
    }
    if (birth - death).abs() < 1e-14 {
        // Critical case: μt/(1+μt).
        return death * t / (1.0 + death * t);
    }
    if birth > death {
        // Divide through by e^{(b−d)t}; stable for any horizon.
        let decay = (-(birth - death) * t).exp();
        death * (1.0 - decay) / (birth - death * decay)
    } else {
        let growth = ((birth - death) * t).exp();
        death * (growth - 1.0) / (birth * growth - death)
    }
}
