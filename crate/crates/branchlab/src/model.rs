//! Finite-state branching model: motion generator, branching rates,
//! offspring laws, and the derived factorial-moment coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Structural validation tolerance (row sums, pmf normalization).
pub const STRUCT_TOL: f64 = 1e-12;
/// Largest offspring count accepted by the config schema.
pub const MAX_OFFSPRING: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse model config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid model:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

/// On-disk model schema. Unknown keys are rejected.
///
/// `offspring[x]` lists `[k, prob]` pairs giving `p_k(x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub offspring: Vec<Vec<(usize, f64)>>,
}

/// Validated branching model on states `{0, …, d−1}` with counting
/// measure.
#[derive(Debug, Clone)]
pub struct BranchingModel {
    d: usize,
    q: DMatrix<f64>,
    beta: DVector<f64>,
    /// Dense pmf per state, index = offspring count.
    offspring: Vec<Vec<f64>>,
}

/// Factorial-moment coefficients `A^(k)(x)`:
/// `A^(1) = β(m−1)`, `A^(k) = β · Σ_j j(j−1)…(j−k+1) p_j` for k ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchingMoments {
    pub a1: DVector<f64>,
    pub a2: DVector<f64>,
    pub a3: DVector<f64>,
    pub a4: DVector<f64>,
}

impl BranchingModel {
    /// Validate and construct; the error lists every violated invariant.
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        let mut violations = Vec::new();
        let d = config.d;
        if d == 0 {
            violations.push("d must be positive".to_string());
        }
        if config.q.len() != d || config.q.iter().any(|row| row.len() != d) {
            violations.push(format!("Q must be {d}x{d}"));
        }
        if config.beta.len() != d {
            violations.push(format!("beta must have length {d}"));
        }
        if config.offspring.len() != d {
            violations.push(format!("offspring must have {d} per-state pmfs"));
        }
        if !violations.is_empty() {
            return Err(ModelError::Invalid(violations));
        }

        let q = DMatrix::from_fn(d, d, |i, j| config.q[i][j]);
        for i in 0..d {
            let row_sum: f64 = config.q[i].iter().sum();
            if row_sum.abs() > STRUCT_TOL {
                violations.push(format!(
                    "Q row {i} sums to {row_sum:.3e}, not 0 (tolerance {STRUCT_TOL:.0e})"
                ));
            }
            for j in 0..d {
                if i != j && config.q[i][j] < 0.0 {
                    violations.push(format!("Q[{i}][{j}] = {} is negative", config.q[i][j]));
                }
            }
            if config.beta[i] < 0.0 {
                violations.push(format!("beta[{i}] = {} is negative", config.beta[i]));
            }
        }

        let mut offspring = Vec::with_capacity(d);
        for (x, pairs) in config.offspring.iter().enumerate() {
            let kmax = pairs.iter().map(|&(k, _)| k).max().unwrap_or(0);
            if kmax > MAX_OFFSPRING {
                violations.push(format!(
                    "offspring[{x}] has count {kmax} above the supported maximum {MAX_OFFSPRING}"
                ));
                offspring.push(vec![1.0]);
                continue;
            }
            let mut pmf = vec![0.0; kmax + 1];
            for &(k, p) in pairs {
                if p < 0.0 {
                    violations.push(format!("offspring[{x}] mass p_{k} = {p} is negative"));
                }
                pmf[k] += p;
            }
            let total: f64 = pmf.iter().sum();
            if (total - 1.0).abs() > STRUCT_TOL {
                violations.push(format!(
                    "offspring[{x}] pmf sums to {total}, not 1 (tolerance {STRUCT_TOL:.0e})"
                ));
            }
            offspring.push(pmf);
        }

        if !is_irreducible(&q) {
            violations.push("Q is reducible (state graph is not strongly connected)".to_string());
        }

        if violations.is_empty() {
            Ok(Self {
                d,
                q,
                beta: DVector::from_vec(config.beta.clone()),
                offspring,
            })
        } else {
            Err(ModelError::Invalid(violations))
        }
    }

    /// Construct without validation. Intended for diagnostics of
    /// deliberately broken models; everything downstream assumes a
    /// validated model.
    pub fn new_unchecked(
        q: DMatrix<f64>,
        beta: DVector<f64>,
        offspring: Vec<Vec<f64>>,
    ) -> Self {
        let d = q.nrows();
        Self {
            d,
            q,
            beta,
            offspring,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    /// Dense offspring pmf of state `x` (index = count).
    pub fn offspring_pmf(&self, x: usize) -> &[f64] {
        &self.offspring[x]
    }

    /// `sup_x Σ_k k^m p_k(x)`; finite by construction.
    pub fn offspring_moment_sup(&self, m: u32) -> f64 {
        self.offspring
            .iter()
            .map(|pmf| {
                pmf.iter()
                    .enumerate()
                    .map(|(k, p)| (k as f64).powi(m as i32) * p)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// True when no state has random branching (`p_1 = 1` or `β = 0`
    /// everywhere), the degenerate case with zero fluctuation.
    pub fn is_deterministic_branching(&self) -> bool {
        (0..self.d).all(|x| {
            let pmf = &self.offspring[x];
            self.beta[x] == 0.0 || (pmf.len() > 1 && pmf[1] == 1.0)
        })
    }
}

/// Strong connectivity of the digraph `x → y ⟺ Q_xy > 0`.
fn is_irreducible(q: &DMatrix<f64>) -> bool {
    let d = q.nrows();
    if d == 1 {
        return true;
    }
    let reach = |transpose: bool| {
        let mut seen = vec![false; d];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for y in 0..d {
                let w = if transpose { q[(y, x)] } else { q[(x, y)] };
                if x != y && w > 0.0 && !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(false) && reach(true)
}

/// Parse and validate a model from a JSON document.
pub fn load_model_str(json: &str) -> Result<BranchingModel, ModelError> {
    let config: ModelConfig = serde_json::from_str(json)?;
    BranchingModel::new(&config)
}

/// Parse and validate a model from a JSON file.
pub fn load_model(path: &std::path::Path) -> Result<BranchingModel, ModelError> {
    let text = std::fs::read_to_string(path)?;
    load_model_str(&text)
}

/// Factorial moments `A^(1) … A^(4)` of the branching mechanism.
pub fn branching_moments(model: &BranchingModel) -> BranchingMoments {
    let d = model.dim();
    let factorial_moment = |x: usize, order: usize| -> f64 {
        model
            .offspring_pmf(x)
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut term = 1.0;
                for i in 0..order {
                    term *= (k as i64 - i as i64) as f64;
                }
                term * p
            })
            .sum()
    };
    let at = |order: usize| {
        DVector::from_fn(d, |x, _| {
            let base = factorial_moment(x, order);
            let base = if order == 1 { base - 1.0 } else { base };
            model.beta()[x] * base
        })
    };
    BranchingMoments {
        a1: at(1),
        a2: at(2),
        a3: at(3),
        a4: at(4),
    }
}

/// Mean-semigroup generator `L = Q + diag(A^(1))`, so `T_t = exp(tL)`.
pub fn mean_generator(model: &BranchingModel) -> DMatrix<f64> {
    let moments = branching_moments(model);
    let mut l = model.q().clone();
    for x in 0..model.dim() {
        l[(x, x)] += moments.a1[x];
    }
    l
}

/// Diagnostic report for the standing hypotheses. Everything here is a
/// warning surface, not a hard failure: finite-state models may violate
/// the general-space conditions without affecting multitype conclusions.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub irreducible: bool,
    pub beta_bounded: bool,
    pub beta_sup: f64,
    /// λ₁ (negated dominant eigenvalue of L); supercritical ⟺ λ₁ < 0.
    pub lambda_1: f64,
    pub supercritical: bool,
    pub offspring_k2_sup: f64,
    pub offspring_k4_sup: f64,
    pub probe_time: f64,
    /// Row sums of squared entries of exp(tQ) at the probe time.
    pub a_t: Vec<f64>,
    /// Column sums of squared entries of exp(tQ).
    pub a_hat_t: Vec<f64>,
    /// Row sums of squared entries of exp(tL).
    pub b_t: Vec<f64>,
    /// Column sums of squared entries of exp(tL).
    pub b_hat_t: Vec<f64>,
    /// Max column sum of exp(tQ) (≤ 1 is the sub-stochastic dual bound).
    pub dual_column_sum_max: f64,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

/// Check the decidable hypotheses at finite scale and report the
/// diagnostic quantities at `probe_time`.
pub fn check_hypotheses(model: &BranchingModel, probe_time: f64) -> HypothesisReport {
    let mut warnings = Vec::new();

    let irreducible = is_irreducible(model.q());
    if !irreducible {
        warnings.push("Q is reducible; Perron theory may degenerate".to_string());
    }

    let beta_sup = model.beta().iter().fold(0.0f64, |acc, &b| acc.max(b));

    let l = mean_generator(model);
    // Dominant eigenvalue of L via the spectral module when possible,
    // with a direct eigenvalue fallback for broken models.
    let lambda_1 = match crate::spectral::compute_spectrum(&l, crate::spectral::DEFAULT_CLUSTER_TOL)
    {
        Ok((spectrum, _)) => spectrum.lambda(0).re,
        Err(_) => {
            let eigs = l.complex_eigenvalues();
            -eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
        }
    };
    let supercritical = lambda_1 < 0.0;
    if !supercritical {
        warnings.push(format!("not supercritical: lambda_1 = {lambda_1:.6} >= 0"));
    }

    let etq = crate::linalg::expm(&(model.q() * probe_time));
    let etl = crate::linalg::expm(&(&l * probe_time));
    let d = model.dim();
    let row_sq = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..d)
            .map(|i| (0..d).map(|j| m[(i, j)] * m[(i, j)]).sum())
            .collect()
    };
    let col_sq = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..d)
            .map(|j| (0..d).map(|i| m[(i, j)] * m[(i, j)]).sum())
            .collect()
    };
    let dual_column_sum_max = (0..d)
        .map(|j| (0..d).map(|i| etq[(i, j)]).sum::<f64>())
        .fold(0.0, f64::max);
    if dual_column_sum_max > 1.0 + 1e-9 {
        warnings.push(format!(
            "dual column sums of exp(tQ) reach {dual_column_sum_max:.6} > 1; \
             the sub-stochastic dual bound fails (reported only)"
        ));
    }

    HypothesisReport {
        irreducible,
        beta_bounded: true,
        beta_sup,
        lambda_1,
        supercritical,
        offspring_k2_sup: model.offspring_moment_sup(2),
        offspring_k4_sup: model.offspring_moment_sup(4),
        probe_time,
        a_t: row_sq(&etq),
        a_hat_t: col_sq(&etq),
        b_t: row_sq(&etl),
        b_hat_t: col_sq(&etl),
        dual_column_sum_max,
        warnings,
        notes: vec![
            "finite support makes every offspring moment finite".to_string(),
            "integrability of a_t/b_t has no finite-state content beyond finiteness; \
             values reported for documentation only"
                .to_string(),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn yule_json() -> &'static str {
        r#"{"d":1,"Q":[[0]],"beta":[1],"offspring":[[[2,1]]]}"#
    }

    #[test]
    fn yule_model_loads() {
        let model = load_model_str(yule_json()).unwrap();
        assert_eq!(model.dim(), 1);
        assert_eq!(model.offspring_pmf(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn two_state_model_loads() {
        let json = r#"{"d":2,"Q":[[-1,1],[1,-1]],"beta":[1,1],
                       "offspring":[[[2,1]],[[2,1]]]}"#;
        let model = load_model_str(json).unwrap();
        assert_eq!(model.dim(), 2);
    }

    #[test]
    fn unnormalized_pmf_rejected() {
        let json = r#"{"d":1,"Q":[[0]],"beta":[1],"offspring":[[[2,0.9]]]}"#;
        let err = load_model_str(json).unwrap_err();
        match err {
            ModelError::Invalid(v) => assert!(v.iter().any(|m| m.contains("sums to 0.9"))),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn all_violations_reported_together() {
        let json = r#"{"d":2,"Q":[[-1,0.5],[1,-1]],"beta":[-1,1],
                       "offspring":[[[2,0.5]],[[2,1]]]}"#;
        let err = load_model_str(json).unwrap_err();
        match err {
            ModelError::Invalid(v) => {
                assert!(v.len() >= 3, "expected several violations, got {v:?}");
                assert!(v.iter().any(|m| m.contains("row 0")));
                assert!(v.iter().any(|m| m.contains("beta[0]")));
                assert!(v.iter().any(|m| m.contains("pmf sums")));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"d":1,"Q":[[0]],"beta":[1],"offspring":[[[2,1]]],"extra":1}"#;
        assert!(matches!(load_model_str(json), Err(ModelError::Parse(_))));
    }

    #[test]
    fn reducible_q_rejected() {
        let json = r#"{"d":2,"Q":[[0,0],[0,0]],"beta":[1,1],
                       "offspring":[[[2,1]],[[2,1]]]}"#;
        let err = load_model_str(json).unwrap_err();
        match err {
            ModelError::Invalid(v) => assert!(v.iter().any(|m| m.contains("reducible"))),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn yule_factorial_moments() {
        let model = load_model_str(yule_json()).unwrap();
        let m = branching_moments(&model);
        assert_relative_eq!(m.a1[0], 1.0);
        assert_relative_eq!(m.a2[0], 2.0);
        assert_relative_eq!(m.a3[0], 0.0);
        assert_relative_eq!(m.a4[0], 0.0);
    }

    #[test]
    fn deterministic_unit_offspring_moments() {
        let json = r#"{"d":1,"Q":[[0]],"beta":[5],"offspring":[[[1,1]]]}"#;
        let model = load_model_str(json).unwrap();
        let m = branching_moments(&model);
        assert_relative_eq!(m.a1[0], 0.0);
        assert_relative_eq!(m.a2[0], 0.0);
        assert_relative_eq!(m.a3[0], 0.0);
        assert_relative_eq!(m.a4[0], 0.0);
        assert!(model.is_deterministic_branching());
    }

    #[test]
    fn mixed_binary_moments() {
        // p0=1/4, p2=3/4, beta=1: A1 = 1/2, A2 = 3/2.
        let json = r#"{"d":1,"Q":[[0]],"beta":[1],"offspring":[[[0,0.25],[2,0.75]]]}"#;
        let model = load_model_str(json).unwrap();
        let m = branching_moments(&model);
        assert_relative_eq!(m.a1[0], 0.5);
        assert_relative_eq!(m.a2[0], 1.5);
    }

    #[test]
    fn factorial_moments_nonnegative_for_orders_two_plus() {
        // Invariant: A2, A3, A4 >= 0 for arbitrary pmfs.
        for seed in 0..50u64 {
            let mut r = crate::rng::CounterRng::new(seed);
            let kmax = 1 + (r.below(8) as usize);
            let mut pmf: Vec<f64> = (0..=kmax).map(|_| r.next_f64()).collect();
            let total: f64 = pmf.iter().sum();
            pmf.iter_mut().for_each(|p| *p /= total);
            let pairs: Vec<(usize, f64)> = pmf.iter().cloned().enumerate().collect();
            let config = ModelConfig {
                d: 1,
                q: vec![vec![0.0]],
                beta: vec![1.0 + r.next_f64()],
                offspring: vec![pairs],
            };
            let model = BranchingModel::new(&config).unwrap();
            let m = branching_moments(&model);
            assert!(m.a2[0] >= 0.0 && m.a3[0] >= 0.0 && m.a4[0] >= 0.0);
        }
    }

    #[test]
    fn yule_mean_generator() {
        let model = load_model_str(yule_json()).unwrap();
        let l = mean_generator(&model);
        assert_relative_eq!(l[(0, 0)], 1.0);
    }

    #[test]
    fn two_state_mean_generator() {
        let json = r#"{"d":2,"Q":[[-1,1],[1,-1]],"beta":[1,1],
                       "offspring":[[[2,1]],[[2,1]]]}"#;
        let model = load_model_str(json).unwrap();
        let l = mean_generator(&model);
        assert_relative_eq!(l[(0, 0)], 0.0);
        assert_relative_eq!(l[(0, 1)], 1.0);
        assert_relative_eq!(l[(1, 0)], 1.0);
        assert_relative_eq!(l[(1, 1)], 0.0);
    }

    #[test]
    fn no_branching_leaves_generator_untouched() {
        let json = r#"{"d":2,"Q":[[-2,2],[3,-3]],"beta":[0,0],
                       "offspring":[[[2,1]],[[2,1]]]}"#;
        let model = load_model_str(json).unwrap();
        let l = mean_generator(&model);
        assert_eq!(l, *model.q());
    }

    #[test]
    fn doubled_beta_with_unit_offspring_keeps_l() {
        let mk = |beta: f64| {
            let json = format!(
                r#"{{"d":2,"Q":[[-1,1],[1,-1]],"beta":[{beta},{beta}],
                    "offspring":[[[1,1]],[[1,1]]]}}"#
            );
            load_model_str(&json).unwrap()
        };
        assert_eq!(mean_generator(&mk(1.0)), mean_generator(&mk(2.0)));
    }

    #[test]
    fn hypotheses_yule_supercritical() {
        let model = load_model_str(yule_json()).unwrap();
        let report = check_hypotheses(&model, 1.0);
        assert!(report.supercritical);
        assert_relative_eq!(report.lambda_1, -1.0, epsilon = 1e-10);
        assert!(report.irreducible);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn hypotheses_pure_death_not_supercritical() {
        let json = r#"{"d":1,"Q":[[0]],"beta":[1],"offspring":[[[0,1]]]}"#;
        let model = load_model_str(json).unwrap();
        let report = check_hypotheses(&model, 1.0);
        assert!(!report.supercritical);
        assert_relative_eq!(report.lambda_1, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn hypotheses_reducible_warns() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let model = BranchingModel::new_unchecked(
            q,
            DVector::from_vec(vec![1.0, 1.0]),
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        );
        let report = check_hypotheses(&model, 1.0);
        assert!(!report.irreducible);
        assert!(report.warnings.iter().any(|w| w.contains("reducible")));
    }

    #[test]
    fn supercritical_when_mean_offspring_above_one_everywhere() {
        // Invariant: min_x Σ k p_k > 1 and β > 0 forces λ₁ < 0.
        let json = r#"{"d":2,"Q":[[-1,1],[1,-1]],"beta":[0.3,2],
                       "offspring":[[[1,0.5],[2,0.5]],[[3,1]]]}"#;
        let model = load_model_str(json).unwrap();
        let report = check_hypotheses(&model, 1.0);
        assert!(report.supercritical, "lambda_1 = {}", report.lambda_1);
    }
}
