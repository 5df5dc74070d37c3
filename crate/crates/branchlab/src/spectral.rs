//! Eigenstructure of the mean-semigroup generator: clustered eigenvalues
//! with Jordan block structure, biorthogonal generalized eigenbases, the
//! polynomial propagators `D_k(t)` and the semigroup action.
//!
//! Sign convention: the generator `L` has eigenvalues `−λ_k`; this module
//! stores and reports `λ_k`, so supercritical means `λ_1 < 0` and the
//! dominant growth is `e^{−λ_1 t}`.
//!
//! Right chains satisfy `(L + λ_k)φ_j = φ_{j−1}` within each block, so
//! `L·Φ_k = Φ_k(−λ_k I + N_k)` with `N_k` the block superdiagonal
//! nilpotent and `D_k(t) = exp(t N_k)`. Duals are the conjugate-transposed
//! rows of the inverse basis matrix, which makes biorthogonality exact by
//! construction.

use crate::linalg::{self, expm, to_complex};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default eigenvalue clustering tolerance (absolute, with relative gap
/// scaling by eigenvalue magnitude).
pub const DEFAULT_CLUSTER_TOL: f64 = 1e-8;
/// Basis condition number above which chain recovery is refused.
pub const MAX_BASIS_CONDITION: f64 = 1e12;
/// Residual bound the constructed basis must satisfy.
pub const BASIS_RESIDUAL_TOL: f64 = 1e-9;
/// Rank decisions in chain recovery and declaration checks.
const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("dominant eigenvalue is not simple (multiplicity {0}); the supercritical setting requires a simple Perron root")]
    NonSimpleDominant(usize),
    #[error("dominant eigenvalue is not real (found {0})")]
    ComplexDominant(Complex64),
    #[error("Perron eigenvector is not strictly positive; is the generator irreducible?")]
    PerronNotPositive,
    #[error("chain recovery ill-conditioned (condition estimate {cond:.3e} > {MAX_BASIS_CONDITION:.0e}); declare the structure explicitly")]
    IllConditioned { cond: f64 },
    #[error("basis residual {residual:.3e} exceeds {BASIS_RESIDUAL_TOL:.0e} in {check}; declare the structure explicitly")]
    ResidualTooLarge { check: &'static str, residual: f64 },
    #[error("Jordan chain recovery failed: {0}")]
    ChainRecovery(String),
    #[error("declared structure rejected: {0}")]
    DeclarationMismatch(String),
}

/// Jordan data of one eigenvalue cluster.
#[derive(Debug, Clone, Serialize)]
pub struct JordanStructure {
    /// Total generalized multiplicity `n_k`.
    pub multiplicity: usize,
    /// Block sizes `d_{k,j}` in basis column order; their sum is `n_k`.
    pub block_sizes: Vec<usize>,
}

/// Clustered eigenvalues `λ_k` with Jordan structure, ordered so that
/// `−λ_1 > −ℜλ_2 ≥ −ℜλ_3 ≥ …`, ties broken by `ℑλ` ascending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    lambdas: Vec<Complex64>,
    structure: Vec<JordanStructure>,
    conjugate_map: Vec<usize>,
    cluster_tol: f64,
    dim: usize,
}

/// Position of an eigenvalue relative to the fluctuation threshold
/// `2ℜλ_k` vs `λ_1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralClass {
    Large,
    Critical,
    Small,
}

impl Spectrum {
    pub fn count(&self) -> usize {
        self.lambdas.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self, k: usize) -> Complex64 {
        self.lambdas[k]
    }

    /// λ₁ as a real number.
    pub fn lambda1(&self) -> f64 {
        self.lambdas[0].re
    }

    pub fn structure(&self, k: usize) -> &JordanStructure {
        &self.structure[k]
    }

    /// Index `k′` with `λ_{k′} = conj(λ_k)`.
    pub fn conjugate(&self, k: usize) -> usize {
        self.conjugate_map[k]
    }

    pub fn cluster_tol(&self) -> f64 {
        self.cluster_tol
    }

    pub fn class_of(&self, k: usize) -> SpectralClass {
        let gap = 2.0 * self.lambdas[k].re - self.lambda1();
        if gap.abs() <= self.cluster_tol {
            SpectralClass::Critical
        } else if gap < 0.0 {
            SpectralClass::Large
        } else {
            SpectralClass::Small
        }
    }

    /// Indices of a given class.
    pub fn indices_of(&self, class: SpectralClass) -> Vec<usize> {
        (0..self.count()).filter(|&k| self.class_of(k) == class).collect()
    }
}

/// Biorthogonal generalized eigenbases. `phi(k)` columns are the right
/// chain vectors of cluster `k`; `phi_hat(k)` the dual left vectors.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    phi: Vec<DMatrix<Complex64>>,
    phi_hat: Vec<DMatrix<Complex64>>,
    phi1: DVector<f64>,
    phi1_hat: DVector<f64>,
}

impl EigenBasis {
    pub fn phi(&self, k: usize) -> &DMatrix<Complex64> {
        &self.phi[k]
    }

    pub fn phi_hat(&self, k: usize) -> &DMatrix<Complex64> {
        &self.phi_hat[k]
    }

    /// Perron right eigenvector, strictly positive, ‖φ₁‖₂ = 1.
    pub fn phi1(&self) -> &DVector<f64> {
        &self.phi1
    }

    /// Perron left eigenvector, strictly positive, ⟨φ₁, φ̂₁⟩_μ = 1.
    pub fn phi1_hat(&self) -> &DVector<f64> {
        &self.phi1_hat
    }

    /// Projection coefficients `v_k = ⟨f, Φ̂_k⟩_μ` of a complex vector.
    pub fn project_complex(&self, f: &DVector<Complex64>) -> Vec<DVector<Complex64>> {
        self.phi_hat.iter().map(|ph| ph.ad_mul(f)).collect()
    }

    /// Projection coefficients of a real vector.
    pub fn project(&self, f: &DVector<f64>) -> Vec<DVector<Complex64>> {
        let fc = f.map(|x| Complex64::new(x, 0.0));
        self.project_complex(&fc)
    }

    /// `Σ_k Φ_k v_k` for given coefficients.
    pub fn combine(&self, v: &[DVector<Complex64>]) -> DVector<Complex64> {
        let d = self.phi1.len();
        let mut acc = DVector::<Complex64>::zeros(d);
        for (k, vk) in v.iter().enumerate() {
            if vk.len() > 0 {
                acc += &self.phi[k] * vk;
            }
        }
        acc
    }
}

/// Declared spectral structure, the numerically-stable construction path
/// for defective or nearly-defective generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralDeclaration {
    pub clusters: Vec<DeclaredCluster>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredCluster {
    /// λ_k, paper sign: the generator eigenvalue is −λ_k.
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub blocks: Vec<usize>,
}

/// Factorial as f64 (n ≤ 170).
fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Jordan propagator `D_k(t)`: block diagonal with
/// `(J_{k,j}(t))_{p,q} = t^{q−p}/(q−p)!` for `q ≥ p`.
pub fn propagator(structure: &JordanStructure, t: f64) -> DMatrix<Complex64> {
    let n = structure.multiplicity;
    let mut d = DMatrix::<Complex64>::zeros(n, n);
    let mut offset = 0;
    for &size in &structure.block_sizes {
        for p in 0..size {
            for q in p..size {
                let entry = t.powi((q - p) as i32) / factorial(q - p);
                d[(offset + p, offset + q)] = Complex64::new(entry, 0.0);
            }
        }
        offset += size;
    }
    d
}

/// Apply `D_k(t)` to a coefficient vector without forming the matrix.
pub fn propagate_coeffs(
    structure: &JordanStructure,
    t: f64,
    v: &DVector<Complex64>,
) -> DVector<Complex64> {
    let mut out = DVector::<Complex64>::zeros(v.len());
    let mut offset = 0;
    for &size in &structure.block_sizes {
        for p in 0..size {
            let mut acc = Complex64::new(0.0, 0.0);
            for q in p..size {
                acc += v[offset + q] * (t.powi((q - p) as i32) / factorial(q - p));
            }
            out[offset + p] = acc;
        }
        offset += size;
    }
    out
}

// ---------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------

fn rank_with_tol(m: &DMatrix<Complex64>) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// Orthonormal nullspace basis of a complex matrix via SVD.
fn nullspace(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let d = m.ncols();
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("SVD requested V");
    let smax = svd.singular_values.max().max(f64::MIN_POSITIVE);
    let null_cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= RANK_TOL * smax)
        .collect();
    // Rows of V^H beyond the singular value count also span the kernel
    // when the matrix is rectangular; here matrices are square.
    let mut basis = DMatrix::<Complex64>::zeros(d, null_cols.len());
    for (j, &i) in null_cols.iter().enumerate() {
        basis.set_column(j, &vt.row(i).adjoint());
    }
    basis
}

/// Replace a complex basis of a real subspace by a real orthonormal one.
fn realify_basis(basis: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let d = basis.nrows();
    let m = basis.ncols();
    if m == 0 {
        return basis.clone();
    }
    let mut stacked = DMatrix::<f64>::zeros(d, 2 * m);
    for j in 0..m {
        for i in 0..d {
            stacked[(i, j)] = basis[(i, j)].re;
            stacked[(i, m + j)] = basis[(i, j)].im;
        }
    }
    let svd = stacked.svd(true, false);
    let u = svd.u.expect("SVD requested U");
    let smax = svd.singular_values.max().max(f64::MIN_POSITIVE);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * smax)
        .count();
    debug_assert_eq!(rank, m, "realified basis lost rank");
    let mut out = DMatrix::<Complex64>::zeros(d, m);
    for j in 0..m.min(rank) {
        for i in 0..d {
            out[(i, j)] = Complex64::new(u[(i, j)], 0.0);
        }
    }
    out
}

/// One recovered chain: `vectors[0]` is the eigenvector, `vectors[j]`
/// satisfies `B·vectors[j] = vectors[j−1]`.
struct Chain {
    vectors: Vec<DVector<Complex64>>,
}

/// Recover Jordan chains of the cluster at generator eigenvalue `a`
/// with expected multiplicity `n`.
fn recover_chains(
    l: &DMatrix<Complex64>,
    a: Complex64,
    n: usize,
    real_cluster: bool,
) -> Result<Vec<Chain>, SpectralError> {
    let d = l.nrows();
    let ident = DMatrix::<Complex64>::identity(d, d);
    let b = l - &ident * a;

    // Kernel filtration K_m = ker(B^m) until nullity reaches n.
    let mut kernels: Vec<DMatrix<Complex64>> = vec![DMatrix::zeros(d, 0)];
    let mut power = ident.clone();
    let mut nullities = vec![0usize];
    for _ in 1..=n {
        power = &power * &b;
        let mut basis = nullspace(&power);
        if real_cluster {
            basis = realify_basis(&basis);
        }
        let nullity = basis.ncols();
        kernels.push(basis);
        nullities.push(nullity);
        if nullity == n {
            break;
        }
        if nullity < *nullities.get(nullities.len() - 2).unwrap_or(&0) {
            break;
        }
    }
    let max_height = kernels.len() - 1;
    if nullities[max_height] != n {
        return Err(SpectralError::ChainRecovery(format!(
            "cluster at generator eigenvalue {a} has nullity profile {nullities:?}, expected to reach {n}"
        )));
    }

    // Blocks of size ≥ m: nullity(B^m) − nullity(B^(m−1)).
    let blocks_ge: Vec<usize> = (1..=max_height)
        .map(|m| nullities[m] - nullities[m - 1])
        .collect();
    let blocks_exactly = |m: usize| -> usize {
        let ge_m = blocks_ge[m - 1];
        let ge_m1 = if m < max_height { blocks_ge[m] } else { 0 };
        ge_m - ge_m1
    };

    // Chain tops from tallest height down, each independent of the lower
    // kernel and of images of taller tops.
    let mut tops: Vec<(usize, DVector<Complex64>)> = Vec::new();
    let mut b_powers: Vec<DMatrix<Complex64>> = vec![ident.clone()];
    for _ in 1..=max_height {
        let next = b_powers.last().unwrap() * &b;
        b_powers.push(next);
    }
    for m in (1..=max_height).rev() {
        let needed = blocks_exactly(m);
        if needed == 0 {
            continue;
        }
        let mut obstruction_cols: Vec<DVector<Complex64>> = Vec::new();
        for j in 0..kernels[m - 1].ncols() {
            obstruction_cols.push(kernels[m - 1].column(j).into_owned());
        }
        for (h, top) in &tops {
            if *h > m {
                obstruction_cols.push(&b_powers[h - m] * top);
            }
        }
        let mut accepted = 0;
        for j in 0..kernels[m].ncols() {
            if accepted == needed {
                break;
            }
            let candidate = kernels[m].column(j).into_owned();
            let mut test = DMatrix::<Complex64>::zeros(d, obstruction_cols.len() + 1);
            for (c, col) in obstruction_cols.iter().enumerate() {
                test.set_column(c, col);
            }
            test.set_column(obstruction_cols.len(), &candidate);
            let base_rank = if obstruction_cols.is_empty() {
                0
            } else {
                rank_with_tol(&DMatrix::from_columns(&obstruction_cols))
            };
            if rank_with_tol(&test) > base_rank {
                obstruction_cols.push(candidate.clone());
                tops.push((m, candidate));
                accepted += 1;
            }
        }
        if accepted != needed {
            return Err(SpectralError::ChainRecovery(format!(
                "could not find {needed} independent chain tops of height {m} at eigenvalue {a}"
            )));
        }
    }

    // Expand tops into chains, eigenvector first.
    let mut chains: Vec<Chain> = tops
        .into_iter()
        .map(|(h, top)| {
            let mut vectors = vec![top];
            for _ in 1..h {
                let next = &b * vectors.last().unwrap();
                vectors.push(next);
            }
            vectors.reverse();
            Chain { vectors }
        })
        .collect();

    // Deterministic scaling: unit-norm eigenvector whose first
    // significant entry is positive real.
    for chain in &mut chains {
        let eig = &chain.vectors[0];
        let norm = eig.norm();
        let lead = eig
            .iter()
            .find(|z| z.norm() > 1e-8 * norm)
            .copied()
            .unwrap_or(Complex64::new(1.0, 0.0));
        let scale = (lead / lead.norm()).conj() / norm;
        for v in &mut chain.vectors {
            *v *= scale;
        }
    }
    // Largest blocks first.
    chains.sort_by(|x, y| y.vectors.len().cmp(&x.vectors.len()));
    Ok(chains)
}

/// Cluster raw eigenvalues of the generator by connectivity at the
/// given tolerance (scaled by magnitude).
fn cluster_eigenvalues(eigs: &[Complex64], tol: f64) -> Vec<(Complex64, usize)> {
    let n = eigs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let p = parent[i];
        if p != i {
            let r = find(parent, p);
            parent[i] = r;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = 1.0f64.max(eigs[i].norm()).max(eigs[j].norm());
            if (eigs[i] - eigs[j]).norm() <= tol * scale {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups
        .values()
        .map(|members| {
            let mean = members.iter().map(|&i| eigs[i]).sum::<Complex64>() / members.len() as f64;
            (mean, members.len())
        })
        .collect()
}

/// Canonical cluster order: descending generator real part (so λ₁
/// first), ties by ℑλ ascending.
fn sort_clusters(clusters: &mut [(Complex64, usize)]) {
    clusters.sort_by(|x, y| {
        y.0.re
            .partial_cmp(&x.0.re)
            .unwrap()
            .then((-x.0.im).partial_cmp(&(-y.0.im)).unwrap())
    });
}

fn build_from_clusters(
    l: &DMatrix<f64>,
    clusters: Vec<(Complex64, usize)>,
    declared_blocks: Option<Vec<Vec<usize>>>,
    cluster_tol: f64,
) -> Result<(Spectrum, EigenBasis), SpectralError> {
    let d = l.nrows();
    let lc = to_complex(l);
    let n_clusters = clusters.len();

    // Dominant cluster checks.
    let (a1, m1) = clusters[0];
    if m1 != 1 {
        return Err(SpectralError::NonSimpleDominant(m1));
    }
    if a1.im.abs() > cluster_tol * 1.0f64.max(a1.norm()) {
        return Err(SpectralError::ComplexDominant(-a1));
    }

    // Conjugate pairing over cluster means.
    let mut conjugate_map = vec![usize::MAX; n_clusters];
    for k in 0..n_clusters {
        let target = clusters[k].0.conj();
        let mut best = (f64::INFINITY, k);
        for j in 0..n_clusters {
            let dist = (clusters[j].0 - target).norm();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        let scale = 1.0f64.max(clusters[k].0.norm());
        if best.0 > 10.0 * cluster_tol * scale {
            return Err(SpectralError::ChainRecovery(format!(
                "no conjugate partner for cluster at {}",
                clusters[k].0
            )));
        }
        conjugate_map[k] = best.1;
    }
    // Involution sanity.
    for k in 0..n_clusters {
        if conjugate_map[conjugate_map[k]] != k {
            return Err(SpectralError::ChainRecovery(
                "conjugate pairing is not an involution".into(),
            ));
        }
    }

    // Symmetrize conjugate cluster means exactly and realify real ones.
    let mut means: Vec<Complex64> = clusters.iter().map(|c| c.0).collect();
    for k in 0..n_clusters {
        let kc = conjugate_map[k];
        if kc == k {
            means[k] = Complex64::new(means[k].re, 0.0);
        } else if means[k].im < 0.0 {
            means[k] = means[kc].conj();
        }
    }

    // Chains per cluster; conjugate clusters mirrored, not recomputed.
    let mut chain_sets: Vec<Option<Vec<Chain>>> = (0..n_clusters).map(|_| None).collect();
    for k in 0..n_clusters {
        if chain_sets[k].is_some() {
            continue;
        }
        let kc = conjugate_map[k];
        let real_cluster = kc == k;
        let chains = recover_chains(&lc, means[k], clusters[k].1, real_cluster)?;
        if let Some(expected) = declared_blocks.as_ref().map(|b| &b[k]) {
            let found: Vec<usize> = chains.iter().map(|c| c.vectors.len()).collect();
            if &found != expected {
                return Err(SpectralError::DeclarationMismatch(format!(
                    "cluster at λ = {} has block sizes {found:?}, declaration says {expected:?}",
                    -means[k]
                )));
            }
        }
        if kc != k {
            let mirrored: Vec<Chain> = chains
                .iter()
                .map(|c| Chain {
                    vectors: c.vectors.iter().map(|v| v.map(|z| z.conj())).collect(),
                })
                .collect();
            chain_sets[kc] = Some(mirrored);
        }
        chain_sets[k] = Some(chains);
    }

    // Assemble the full right basis, Perron column first.
    let mut structure = Vec::with_capacity(n_clusters);
    let mut phi: Vec<DMatrix<Complex64>> = Vec::with_capacity(n_clusters);
    let mut p = DMatrix::<Complex64>::zeros(d, d);
    let mut col = 0usize;
    for (k, chains) in chain_sets.iter().enumerate() {
        let chains = chains.as_ref().unwrap();
        let nk = clusters[k].1;
        let mut mat = DMatrix::<Complex64>::zeros(d, nk);
        let mut local = 0usize;
        let mut block_sizes = Vec::with_capacity(chains.len());
        for chain in chains {
            block_sizes.push(chain.vectors.len());
            for v in &chain.vectors {
                mat.set_column(local, v);
                p.set_column(col + local, v);
                local += 1;
            }
        }
        debug_assert_eq!(local, nk);
        col += nk;
        structure.push(JordanStructure {
            multiplicity: nk,
            block_sizes,
        });
        phi.push(mat);
    }

    // Perron normalization: strictly positive, unit 2-norm.
    {
        let mut perron = phi[0].column(0).into_owned();
        let norm = perron.norm();
        perron /= Complex64::new(norm, 0.0);
        let worst_im = perron.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        if worst_im > 1e-9 {
            return Err(SpectralError::ComplexDominant(-means[0]));
        }
        let mut real: DVector<f64> = perron.map(|z| z.re);
        if real.iter().all(|&x| x < 0.0) {
            real = -real;
        }
        if !real.iter().all(|&x| x > 0.0) {
            return Err(SpectralError::PerronNotPositive);
        }
        let complex = real.map(|x| Complex64::new(x, 0.0));
        phi[0].set_column(0, &complex);
        p.set_column(0, &complex);
    }

    // Condition estimate before inverting.
    let svd = p.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > MAX_BASIS_CONDITION {
        return Err(SpectralError::IllConditioned { cond });
    }

    // Dual basis: conjugate-transposed rows of P⁻¹.
    let p_inv = p
        .clone()
        .lu()
        .try_inverse()
        .ok_or(SpectralError::IllConditioned { cond: f64::INFINITY })?;
    let p_hat = p_inv.adjoint();

    let mut phi_hat: Vec<DMatrix<Complex64>> = Vec::with_capacity(n_clusters);
    let mut offset = 0usize;
    for k in 0..n_clusters {
        let nk = clusters[k].1;
        let mut mat = DMatrix::<Complex64>::zeros(d, nk);
        for j in 0..nk {
            mat.set_column(j, &p_hat.column(offset + j));
        }
        offset += nk;
        phi_hat.push(mat);
    }
    // Exact conjugate symmetry and realified real clusters for the duals.
    for k in 0..n_clusters {
        let kc = conjugate_map[k];
        if kc == k {
            phi_hat[k] = phi_hat[k].map(|z| Complex64::new(z.re, 0.0));
        } else if means[k].im > 0.0 {
            let mirrored = phi_hat[kc].map(|z| z.conj());
            phi_hat[k] = mirrored;
        }
    }

    // Perron dual must be strictly positive (real by the step above).
    let phi1_hat_c = phi_hat[0].column(0).into_owned();
    let phi1_hat: DVector<f64> = phi1_hat_c.map(|z| z.re);
    if !phi1_hat.iter().all(|&x| x > 0.0) {
        return Err(SpectralError::PerronNotPositive);
    }
    let phi1: DVector<f64> = phi[0].column(0).map(|z| z.re);

    let spectrum = Spectrum {
        lambdas: means.iter().map(|a| -a).collect(),
        structure,
        conjugate_map,
        cluster_tol,
        dim: d,
    };
    let basis = EigenBasis {
        phi,
        phi_hat,
        phi1,
        phi1_hat,
    };

    // Self-check: biorthogonality and generator action.
    let mut biorth_residual = 0.0f64;
    for k in 0..spectrum.count() {
        for kk in 0..spectrum.count() {
            let gram = basis.phi(k).transpose() * basis.phi_hat(kk).map(|z| z.conj());
            for j in 0..gram.nrows() {
                for jj in 0..gram.ncols() {
                    let expected = if k == kk && j == jj { 1.0 } else { 0.0 };
                    biorth_residual =
                        biorth_residual.max((gram[(j, jj)] - expected).norm());
                }
            }
        }
    }
    if biorth_residual > BASIS_RESIDUAL_TOL {
        return Err(SpectralError::ResidualTooLarge {
            check: "biorthogonality",
            residual: biorth_residual,
        });
    }
    let scale = l.iter().map(|x| x.abs()).fold(1.0, f64::max);
    let mut action_residual = 0.0f64;
    for k in 0..spectrum.count() {
        let st = spectrum.structure(k);
        let nk = st.multiplicity;
        let mut upper = DMatrix::<Complex64>::identity(nk, nk) * (-spectrum.lambda(k));
        let mut pos = 0usize;
        for &size in &st.block_sizes {
            for i in 1..size {
                upper[(pos + i - 1, pos + i)] = Complex64::new(1.0, 0.0);
            }
            pos += size;
        }
        let diff = &lc * basis.phi(k) - basis.phi(k) * upper;
        action_residual = action_residual.max(diff.iter().map(|z| z.norm()).fold(0.0, f64::max));
    }
    if action_residual > BASIS_RESIDUAL_TOL * scale {
        return Err(SpectralError::ResidualTooLarge {
            check: "generator action",
            residual: action_residual,
        });
    }

    Ok((spectrum, basis))
}

/// Numerical construction path: eigenvalues, clustering, chain recovery.
pub fn compute_spectrum(
    l: &DMatrix<f64>,
    cluster_tol: f64,
) -> Result<(Spectrum, EigenBasis), SpectralError> {
    assert!(cluster_tol > 0.0);
    let eigs: Vec<Complex64> = l.complex_eigenvalues().iter().copied().collect();
    let mut clusters = cluster_eigenvalues(&eigs, cluster_tol);
    sort_clusters(&mut clusters);
    build_from_clusters(l, clusters, None, cluster_tol)
}

/// Declared-structure path: verifies the declaration by rank profiles of
/// `(L + λI)^m`, then constructs chains consistent with it.
pub fn declared_structure(
    l: &DMatrix<f64>,
    declaration: &SpectralDeclaration,
) -> Result<(Spectrum, EigenBasis), SpectralError> {
    let d = l.nrows();
    let lc = to_complex(l);
    let total: usize = declaration
        .clusters
        .iter()
        .map(|c| c.blocks.iter().sum::<usize>())
        .sum();
    if total != d {
        return Err(SpectralError::DeclarationMismatch(format!(
            "declared multiplicities sum to {total}, generator dimension is {d}"
        )));
    }

    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for c in &declaration.clusters {
        let a = -Complex64::new(c.lambda_re, c.lambda_im);
        let n: usize = c.blocks.iter().sum();
        if n == 0 {
            return Err(SpectralError::DeclarationMismatch(
                "cluster with empty block list".into(),
            ));
        }
        let mut sorted = c.blocks.clone();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        clusters.push((a, n));
        blocks.push(sorted);
    }

    // Rank profile verification: nullity(B^m) = Σ_j min(m, d_j).
    for (idx, (a, _n)) in clusters.iter().enumerate() {
        let ident = DMatrix::<Complex64>::identity(d, d);
        let b = &lc - &ident * *a;
        let max_block = *blocks[idx].iter().max().unwrap();
        let mut power = ident.clone();
        for m in 1..=max_block {
            power = &power * &b;
            let nullity = d - rank_with_tol(&power);
            let expected: usize = blocks[idx].iter().map(|&bj| bj.min(m)).sum();
            if nullity != expected {
                return Err(SpectralError::DeclarationMismatch(format!(
                    "rank profile of (L + λI)^{m} at λ = {} gives nullity {nullity}, declaration implies {expected}",
                    -a
                )));
            }
        }
    }

    // Canonical order, carrying block lists along.
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&x, &y| {
        clusters[y]
            .0
            .re
            .partial_cmp(&clusters[x].0.re)
            .unwrap()
            .then((-clusters[x].0.im).partial_cmp(&(-clusters[y].0.im)).unwrap())
    });
    let clusters_sorted: Vec<(Complex64, usize)> = order.iter().map(|&i| clusters[i]).collect();
    let blocks_sorted: Vec<Vec<usize>> = order.iter().map(|&i| blocks[i].clone()).collect();

    build_from_clusters(l, clusters_sorted, Some(blocks_sorted), DEFAULT_CLUSTER_TOL)
}

/// `T_t f` through the eigen-expansion:
/// `Σ_k e^{−λ_k t} Φ_k D_k(t) ⟨f, Φ̂_k⟩_μ`.
pub fn semigroup_apply(
    spectrum: &Spectrum,
    basis: &EigenBasis,
    f: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    assert!(t >= 0.0, "semigroup_apply requires t >= 0");
    let v = basis.project(f);
    let mut acc = DVector::<Complex64>::zeros(f.len());
    for k in 0..spectrum.count() {
        let growth = (-spectrum.lambda(k) * t).exp();
        let coeffs = propagate_coeffs(spectrum.structure(k), t, &v[k]);
        acc += basis.phi(k) * (coeffs * growth);
    }
    linalg::real_part_checked(&acc, 1e-10)
}

/// Matrix-exponential route for the same action (independent cross-check).
pub fn semigroup_apply_expm(l: &DMatrix<f64>, f: &DVector<f64>, t: f64) -> DVector<f64> {
    expm(&(l * t)) * f
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn two_state_l() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }

    /// L with eigenvalues 1 (Perron) and a defective 1/2 (2-block);
    /// the jordan-designed generator plus unit branching potential.
    fn jordan_l() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                17.0 / 24.0,
                5.0 / 24.0,
                2.0 / 24.0,
                3.0 / 24.0,
                15.0 / 24.0,
                6.0 / 24.0,
                4.0 / 24.0,
                4.0 / 24.0,
                16.0 / 24.0,
            ],
        )
    }

    fn jordan_declaration() -> SpectralDeclaration {
        SpectralDeclaration {
            clusters: vec![
                DeclaredCluster {
                    lambda_re: -1.0,
                    lambda_im: 0.0,
                    blocks: vec![1],
                },
                DeclaredCluster {
                    lambda_re: -0.5,
                    lambda_im: 0.0,
                    blocks: vec![2],
                },
            ],
        }
    }

    #[test]
    fn scalar_yule_spectrum() {
        let l = DMatrix::from_row_slice(1, 1, &[1.0]);
        let (spectrum, basis) = compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap();
        assert_relative_eq!(spectrum.lambda1(), -1.0, epsilon = 1e-12);
        assert_relative_eq!(basis.phi1()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(basis.phi1_hat()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_two_state_eigenpairs() {
        let (spectrum, basis) = compute_spectrum(&two_state_l(), DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(spectrum.count(), 2);
        assert_relative_eq!(spectrum.lambda1(), -1.0, epsilon = 1e-10);
        assert_relative_eq!(spectrum.lambda(1).re, 1.0, epsilon = 1e-10);
        let s = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            assert_relative_eq!(basis.phi1()[i], s, epsilon = 1e-10);
            assert_relative_eq!(basis.phi1_hat()[i], s, epsilon = 1e-10);
        }
        // Second eigenvector is (1,-1)/√2 up to the sign convention.
        let phi2 = basis.phi(1).column(0).into_owned();
        assert_relative_eq!(phi2[0].re, s, epsilon = 1e-10);
        assert_relative_eq!(phi2[1].re, -s, epsilon = 1e-10);
    }

    #[test]
    fn biorthogonality_and_reconstruction_random() {
        // A non-symmetric irreducible generator-plus-potential.
        let l = DMatrix::from_row_slice(
            3,
            3,
            &[0.1, 0.7, 0.2, 0.4, -0.3, 0.6, 0.5, 0.1, 0.2],
        );
        let (spectrum, basis) = compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(spectrum.dim(), 3);
        let f = dvector![0.3, -1.2, 0.8];
        let v = basis.project(&f);
        let rec = basis.combine(&v);
        for i in 0..3 {
            assert_relative_eq!(rec[i].re, f[i], epsilon = 1e-9);
            assert!(rec[i].im.abs() < 1e-9);
        }
    }

    #[test]
    fn complex_pair_conjugation() {
        // Cyclic motion gives a complex pair.
        let q = DMatrix::from_row_slice(
            3,
            3,
            &[-0.25, 0.25, 0.0, 0.0, -0.25, 0.25, 0.25, 0.0, -0.25],
        );
        let l = &q + DMatrix::identity(3, 3);
        let (spectrum, basis) = compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(spectrum.count(), 3);
        assert_eq!(spectrum.conjugate(1), 2);
        assert_eq!(spectrum.conjugate(2), 1);
        assert_eq!(spectrum.conjugate(0), 0);
        // Constructed, exact conjugation.
        let p1 = basis.phi(1);
        let p2 = basis.phi(2);
        for i in 0..3 {
            assert_eq!(p1[(i, 0)].re, p2[(i, 0)].re);
            assert_eq!(p1[(i, 0)].im, -p2[(i, 0)].im);
        }
        // Tie-break: ℑλ ascending among the pair.
        assert!(spectrum.lambda(1).im < spectrum.lambda(2).im);
    }

    #[test]
    fn propagator_block_two() {
        let st = JordanStructure {
            multiplicity: 2,
            block_sizes: vec![2],
        };
        let d1 = propagator(&st, 1.0);
        assert_relative_eq!(d1[(0, 0)].re, 1.0);
        assert_relative_eq!(d1[(0, 1)].re, 1.0);
        assert_relative_eq!(d1[(1, 0)].re, 0.0);
        assert_relative_eq!(d1[(1, 1)].re, 1.0);
    }

    #[test]
    fn propagator_block_three_at_two() {
        let st = JordanStructure {
            multiplicity: 3,
            block_sizes: vec![3],
        };
        let d = propagator(&st, 2.0);
        let expected = [[1.0, 2.0, 2.0], [0.0, 1.0, 2.0], [0.0, 0.0, 1.0]];
        for p in 0..3 {
            for q in 0..3 {
                assert_relative_eq!(d[(p, q)].re, expected[p][q], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn propagator_zero_is_identity_and_group_law() {
        let st = JordanStructure {
            multiplicity: 5,
            block_sizes: vec![3, 2],
        };
        let d0 = propagator(&st, 0.0);
        assert_relative_eq!(
            (d0 - DMatrix::<Complex64>::identity(5, 5)).map(|z| z.norm()).max(),
            0.0,
            epsilon = 1e-15
        );
        for (s, t) in [(0.5, 1.7), (-3.0, 3.0), (40.0, 60.0), (-25.0, 13.0)] {
            let left = propagator(&st, s) * propagator(&st, t);
            let right = propagator(&st, s + t);
            let err = (left - &right).map(|z| z.norm()).max();
            let scale = right.map(|z| z.norm()).max();
            assert!(err <= 1e-12 * scale.max(1.0), "s={s} t={t} err={err}");
        }
    }

    #[test]
    fn propagator_inverse_is_negated_time() {
        let st = JordanStructure {
            multiplicity: 3,
            block_sizes: vec![3],
        };
        let prod = propagator(&st, 7.0) * propagator(&st, -7.0);
        let err = (prod - DMatrix::<Complex64>::identity(3, 3))
            .map(|z| z.norm())
            .max();
        assert!(err < 1e-12);
    }

    #[test]
    fn jordan_block_recovered_by_declaration() {
        let l = jordan_l();
        let (spectrum, basis) = declared_structure(&l, &jordan_declaration()).unwrap();
        assert_eq!(spectrum.count(), 2);
        assert_relative_eq!(spectrum.lambda1(), -1.0, epsilon = 1e-12);
        assert_relative_eq!(spectrum.lambda(1).re, -0.5, epsilon = 1e-12);
        assert_eq!(spectrum.structure(1).block_sizes, vec![2]);
        // Chain action: (L − ½)φ₂ = φ₁ with φ₁ the eigenvector.
        let lc = to_complex(&l);
        let phi = basis.phi(1);
        let b = &lc - DMatrix::<Complex64>::identity(3, 3) * Complex64::new(0.5, 0.0);
        let chain = &b * phi.column(1) - phi.column(0);
        assert!(chain.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-9);
    }

    #[test]
    fn wrong_declaration_rejected() {
        let l = jordan_l();
        let bad = SpectralDeclaration {
            clusters: vec![
                DeclaredCluster {
                    lambda_re: -1.0,
                    lambda_im: 0.0,
                    blocks: vec![1],
                },
                DeclaredCluster {
                    lambda_re: -0.5,
                    lambda_im: 0.0,
                    blocks: vec![1, 1],
                },
            ],
        };
        assert!(matches!(
            declared_structure(&l, &bad),
            Err(SpectralError::DeclarationMismatch(_))
        ));
    }

    #[test]
    fn declaration_agrees_with_numerical_path_when_diagonalizable() {
        let l = two_state_l();
        let decl = SpectralDeclaration {
            clusters: vec![
                DeclaredCluster {
                    lambda_re: -1.0,
                    lambda_im: 0.0,
                    blocks: vec![1],
                },
                DeclaredCluster {
                    lambda_re: 1.0,
                    lambda_im: 0.0,
                    blocks: vec![1],
                },
            ],
        };
        let (s1, b1) = compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap();
        let (s2, b2) = declared_structure(&l, &decl).unwrap();
        assert_eq!(s1.count(), s2.count());
        for k in 0..s1.count() {
            assert_relative_eq!(s1.lambda(k).re, s2.lambda(k).re, epsilon = 1e-9);
            let diff = (b1.phi(k) - b2.phi(k)).map(|z| z.norm()).max();
            assert!(diff < 1e-8, "basis mismatch {diff}");
        }
    }

    #[test]
    fn semigroup_matches_matrix_exponential() {
        for l in [two_state_l(), jordan_l()] {
            let pair = if l.nrows() == 3 {
                declared_structure(&l, &jordan_declaration()).unwrap()
            } else {
                compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap()
            };
            let (spectrum, basis) = pair;
            let f = DVector::from_fn(l.nrows(), |i, _| 0.3 + 0.9 * i as f64);
            for t in [0.0, 0.3, 1.0, 2.5] {
                let via_eigen = semigroup_apply(&spectrum, &basis, &f, t);
                let via_expm = semigroup_apply_expm(&l, &f, t);
                let scale = via_expm.iter().map(|x| x.abs()).fold(1.0, f64::max);
                for i in 0..f.len() {
                    assert!(
                        (via_eigen[i] - via_expm[i]).abs() <= 1e-8 * scale,
                        "t={t} i={i}: {} vs {}",
                        via_eigen[i],
                        via_expm[i]
                    );
                }
            }
        }
    }

    #[test]
    fn semigroup_eigenfunction_flow() {
        let (spectrum, basis) = compute_spectrum(&two_state_l(), DEFAULT_CLUSTER_TOL).unwrap();
        // f = φ₁: flows by e^{−λ₁ t}; Yule-style doubling at ln 2 happens
        // for the scalar case below.
        let f = basis.phi1().clone();
        let t = 0.8;
        let out = semigroup_apply(&spectrum, &basis, &f, t);
        for i in 0..2 {
            assert_relative_eq!(out[i], (t).exp() * f[i], max_relative = 1e-10);
        }
        // Second eigenpair decays.
        let g = dvector![1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let out = semigroup_apply(&spectrum, &basis, &g, 1.0);
        for i in 0..2 {
            assert_relative_eq!(out[i], (-1.0f64).exp() * g[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn yule_doubles_at_ln2() {
        let l = DMatrix::from_row_slice(1, 1, &[1.0]);
        let (spectrum, basis) = compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap();
        let out = semigroup_apply(&spectrum, &basis, &dvector![1.0], 2f64.ln());
        assert_relative_eq!(out[0], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn semigroup_law_and_positivity_random_models() {
        let mut rng = crate::rng::CounterRng::new(99);
        for _ in 0..10 {
            let d = 2 + (rng.below(3) as usize);
            // Random irreducible generator + potential.
            let mut l = DMatrix::<f64>::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        l[(i, j)] = 0.1 + rng.next_f64();
                    }
                }
                l[(i, i)] = -1.0 + rng.next_f64();
            }
            let (spectrum, basis) = compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap();
            let f = DVector::from_fn(d, |_, _| rng.next_f64() * 2.0 - 1.0);
            let (s, t) = (0.7 + rng.next_f64(), 0.3 + rng.next_f64());
            let two_step = semigroup_apply(
                &spectrum,
                &basis,
                &semigroup_apply(&spectrum, &basis, &f, s),
                t,
            );
            let one_step = semigroup_apply(&spectrum, &basis, &f, s + t);
            let scale = one_step.iter().map(|x| x.abs()).fold(1.0, f64::max);
            for i in 0..d {
                assert!((two_step[i] - one_step[i]).abs() <= 1e-8 * scale);
            }
            // Positivity on a nonnegative function.
            let g = DVector::from_fn(d, |_, _| rng.next_f64());
            let tg = semigroup_apply(&spectrum, &basis, &g, 1.3);
            assert!(tg.iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn duality_against_transposed_generator() {
        let l = DMatrix::from_row_slice(
            3,
            3,
            &[0.2, 0.5, 0.1, 0.3, -0.1, 0.4, 0.6, 0.2, 0.0],
        );
        let f = dvector![1.0, -0.5, 0.25];
        let g = dvector![0.3, 0.8, -0.2];
        let t = 1.7;
        let tf = semigroup_apply_expm(&l, &f, t);
        let tg_dual = semigroup_apply_expm(&l.transpose(), &g, t);
        assert_relative_eq!(tf.dot(&g), f.dot(&tg_dual), max_relative = 1e-10);
    }

    #[test]
    fn dominance_at_large_time() {
        // e^{λ₁ t} T_t f → ⟨f, φ̂₁⟩ φ₁.
        let (spectrum, basis) = compute_spectrum(&two_state_l(), DEFAULT_CLUSTER_TOL).unwrap();
        let f = dvector![2.0, -0.7];
        let t = 50.0;
        let flowed = semigroup_apply(&spectrum, &basis, &f, t) * (spectrum.lambda1() * t).exp();
        let target = basis.phi1() * f.dot(basis.phi1_hat());
        for i in 0..2 {
            assert!((flowed[i] - target[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn defective_matrix_advises_declaration_when_unclustered() {
        // An exact Jordan block whose numerical eigenvalues split by
        // ~sqrt(eps): with a clustering tolerance far below the split the
        // numerical path must refuse rather than return a bad basis.
        let l = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5]);
        match compute_spectrum(&l, 1e-13) {
            Err(
                SpectralError::IllConditioned { .. }
                | SpectralError::ResidualTooLarge { .. }
                | SpectralError::NonSimpleDominant(_)
                | SpectralError::ChainRecovery(_),
            ) => {}
            other => panic!("expected a refusal, got {other:?}"),
        }
        // Even declared, this matrix is rejected: its dominant eigenvalue
        // is the defective one, which the supercritical setting forbids.
        let decl = SpectralDeclaration {
            clusters: vec![DeclaredCluster {
                lambda_re: -0.5,
                lambda_im: 0.0,
                blocks: vec![2],
            }],
        };
        assert!(matches!(
            declared_structure(&l, &decl),
            Err(SpectralError::NonSimpleDominant(2))
        ));
    }
}
