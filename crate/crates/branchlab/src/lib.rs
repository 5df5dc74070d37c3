//! Spectral analysis and exact Monte Carlo for supercritical branching
//! Markov processes on finite state spaces.
//!
//! A particle system on `E = {0, …, d−1}` is described by a conservative
//! motion generator `Q`, a per-state branching rate `β` and per-state
//! offspring distributions. The mean semigroup `T_t = exp(t L)` with
//! `L = Q + diag(A¹)` drives everything else:
//!
//! - [`spectral`] computes the eigenvalues `−λ_k` of `L`, their Jordan
//!   structure, biorthogonal generalized eigenbases and the polynomial
//!   propagators `D_k(t)`.
//! - [`decompose`] splits a test function into its large / critical /
//!   small components and extracts the indices `γ`, `ζ`, `τ` and leading
//!   coefficients `F`.
//! - [`moments`] evaluates exact moments of `⟨f, X_t⟩` up to order four
//!   along two independent routes and the limiting variance constants
//!   `σ²_sm`, `σ²_cr`, `σ²_la`.
//! - [`simulate`] runs exact event-driven Monte Carlo over aggregated
//!   per-state counts with reproducible counter-based randomness.
//! - [`verify`] tests central-limit and iterated-logarithm predictions
//!   against ensembles and the computed constants.
//!
//! The `branchlab` binary exposes the pipeline as subcommands
//! (`spectrum`, `decompose`, `constants`, `moments`, `simulate`,
//! `verify`, `oracle`).

pub mod cli;
pub mod decompose;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod spectral;
pub mod stats;
pub mod verify;

pub use model::{BranchingModel, BranchingMoments};
pub use spectral::{EigenBasis, Spectrum};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::model::{load_model_str, mean_generator, BranchingModel};
    use crate::spectral::{
        self, DeclaredCluster, EigenBasis, Spectrum, SpectralDeclaration, DEFAULT_CLUSTER_TOL,
    };

    pub struct Fixture {
        pub model: BranchingModel,
        pub spectrum: Spectrum,
        pub basis: EigenBasis,
    }

    fn build(json: &str) -> Fixture {
        let model = load_model_str(json).unwrap();
        let l = mean_generator(&model);
        let (spectrum, basis) = spectral::compute_spectrum(&l, DEFAULT_CLUSTER_TOL).unwrap();
        Fixture {
            model,
            spectrum,
            basis,
        }
    }

    /// Single-state binary fission at unit rate: λ₁ = −1.
    pub fn yule() -> Fixture {
        build(r#"{"d":1,"Q":[[0]],"beta":[1],"offspring":[[[2,1]]]}"#)
    }

    /// Symmetric two-state motion (q = 1): second eigenpair is small.
    pub fn two_state_small() -> Fixture {
        build(
            r#"{"d":2,"Q":[[-1,1],[1,-1]],"beta":[1,1],
                "offspring":[[[2,1]],[[2,1]]]}"#,
        )
    }

    /// Slow two-state motion (q = 1/4): second eigenpair exactly critical.
    pub fn two_state_critical() -> Fixture {
        build(
            r#"{"d":2,"Q":[[-0.25,0.25],[0.25,-0.25]],"beta":[1,1],
                "offspring":[[[2,1]],[[2,1]]]}"#,
        )
    }

    /// Cyclic three-state motion: a complex conjugate pair in the large
    /// class (ℜλ₂ = −5/8 < λ₁/2).
    pub fn three_state_cyclic() -> Fixture {
        build(
            r#"{"d":3,"Q":[[-0.25,0.25,0],[0,-0.25,0.25],[0.25,0,-0.25]],
                "beta":[1,1,1],"offspring":[[[2,1]],[[2,1]],[[2,1]]]}"#,
        )
    }

    pub fn jordan_designed_json() -> &'static str {
        // L = Q + I has eigenvalues 1 and a defective 1/2 (one 2-block),
        // making the second cluster exactly critical.
        r#"{"d":3,
            "Q":[[-0.2916666666666667,0.20833333333333334,0.08333333333333333],
                 [0.125,-0.375,0.25],
                 [0.16666666666666666,0.16666666666666666,-0.3333333333333333]],
            "beta":[1,1,1],"offspring":[[[2,1]],[[2,1]],[[2,1]]]}"#
    }

    /// Critical Jordan-block fixture, constructed through the declared
    /// path because a defective eigenvalue cannot be recovered blindly.
    pub fn jordan_designed() -> Fixture {
        let model = load_model_str(jordan_designed_json()).unwrap();
        let l = mean_generator(&model);
        let declaration = SpectralDeclaration {
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
        };
        let (spectrum, basis) = spectral::declared_structure(&l, &declaration).unwrap();
        Fixture {
            model,
            spectrum,
            basis,
        }
    }
}
