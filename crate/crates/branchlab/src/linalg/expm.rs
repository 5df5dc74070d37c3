//! Real matrix exponential by Padé approximation with scaling and
//! squaring (Higham 2005). Independent of the spectral route, so the two
//! can cross-check each other.

use nalgebra::DMatrix;

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const PADE9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

// θ thresholds on the 1-norm for each Padé order (Higham, Table 10.2).
const THETA3: f64 = 1.495_585_217_958_292e-2;
const THETA5: f64 = 2.539_398_330_063_23e-1;
const THETA7: f64 = 9.504_178_996_162_932e-1;
const THETA9: f64 = 2.097_847_961_257_068;
const THETA13: f64 = 5.371_920_351_148_152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum())
        .fold(0.0, f64::max)
}

/// Evaluate the (U, V) pair for an odd Padé order given the coefficient
/// table and precomputed even powers `[I, A², A⁴, A⁶]` (as available).
fn pade_uv(a: &DMatrix<f64>, powers: &[DMatrix<f64>], b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut u_inner = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for (k, p) in powers.iter().enumerate() {
        u_inner += p * b[2 * k + 1];
        v += p * b[2 * k];
    }
    (a * u_inner, v)
}

/// Matrix exponential `exp(A)` of a square real matrix.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    let norm = one_norm(a);

    let ident = DMatrix::<f64>::identity(n, n);
    let (u, v, squarings) = if norm <= THETA9 {
        let a2 = a * a;
        let order: &[f64] = if norm <= THETA3 {
            &PADE3
        } else if norm <= THETA5 {
            &PADE5
        } else if norm <= THETA7 {
            &PADE7
        } else {
            &PADE9
        };
        let mut powers = vec![ident.clone(), a2.clone()];
        while powers.len() < order.len() / 2 {
            let next = powers.last().unwrap() * &a2;
            powers.push(next);
        }
        let (u, v) = pade_uv(a, &powers, order);
        (u, v, 0u32)
    } else {
        let mut s = ((norm / THETA13).log2().ceil()) as i32;
        if s < 0 {
            s = 0;
        }
        let scaled = a * 2f64.powi(-s);
        let a2 = &scaled * &scaled;
        let a4 = &a2 * &a2;
        let a6 = &a2 * &a4;
        let b = &PADE13;
        // Order-13 split form: U = A[A6(b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I]
        let w1 = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
        let w2 = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
        let u = &scaled * (&a6 * w1 + w2);
        let z1 = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
        let v = &a6 * z1 + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
        (u, v, s as u32)
    };

    // Padé approximant is (V + U) / (V - U).
    let denom = &v - &u;
    let numer = &v + &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("expm: Padé denominator is singular");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}
