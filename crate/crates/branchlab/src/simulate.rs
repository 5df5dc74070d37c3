//! Exact event-driven Monte Carlo of the branching Markov process over
//! aggregated per-state counts.
//!
//! With `n_x` particles in state `x` the total event rate is
//! `R = Σ_x n_x (q_x + β_x)` where `q_x = −Q_xx`. Event times are
//! exponential(R); the event is a motion jump `x → y` with probability
//! `n_x Q_xy / R` or a branch at `x` with probability `n_x β_x / R`, the
//! branching particle being replaced by `k ~ p_·(x)` offspring on the
//! same site. Aggregation over exchangeable particles makes the event
//! cost independent of the population layout.
//!
//! Trajectories are pure functions of `(model, initial, grid, seed)`;
//! ensemble replicate `r` uses the counter-RNG stream
//! [`crate::rng::child_key`]`(master_seed, r)`, so parallel and serial
//! execution produce identical output.

use crate::decompose::Projection;
use crate::model::BranchingModel;
use crate::rng::CounterRng;
use crate::spectral::{EigenBasis, Spectrum};
use nalgebra::{DVector, RowDVector};
use num_complex::Complex64;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Default particle cap; supercritical growth must fail loudly instead
/// of exhausting the machine.
pub const DEFAULT_POP_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub pop_cap: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            pop_cap: DEFAULT_POP_CAP,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("population cap {cap} exceeded at t = {time:.6}")]
    PopulationCap { time: f64, cap: u64 },
    #[error("grid must be strictly increasing and nonnegative")]
    BadGrid,
    #[error("initial counts must have length {expected}")]
    BadInitial { expected: usize },
}

/// Particle counts per state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub time: f64,
    pub counts: Vec<u64>,
}

/// One exact trajectory sampled on a time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    pub grid: Vec<f64>,
    pub states: Vec<PopulationState>,
    pub event_count: u64,
}

impl Trajectory {
    pub fn total_at(&self, i: usize) -> u64 {
        self.states[i].counts.iter().sum()
    }

    /// Alive at the final grid point.
    pub fn survives(&self) -> bool {
        self.total_at(self.states.len() - 1) > 0
    }
}

/// Exact simulation of the aggregated-count process.
pub fn simulate(
    model: &BranchingModel,
    initial: &[u64],
    grid: &[f64],
    seed: u64,
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    let d = model.dim();
    if initial.len() != d {
        return Err(SimError::BadInitial { expected: d });
    }
    if grid.is_empty()
        || grid[0] < 0.0
        || grid.windows(2).any(|w| w[1] <= w[0])
        || grid.iter().any(|t| !t.is_finite())
    {
        return Err(SimError::BadGrid);
    }

    let jump_rate: Vec<f64> = (0..d).map(|x| -model.q()[(x, x)]).collect();
    let beta: Vec<f64> = model.beta().iter().copied().collect();
    let total_rate: Vec<f64> = (0..d).map(|x| jump_rate[x] + beta[x]).collect();
    // Flat row-major copy of Q keeps the selection walk cache-friendly.
    let q_flat: Vec<f64> = (0..d)
        .flat_map(|x| (0..d).map(move |y| model.q()[(x, y)]))
        .collect();
    // Cumulative offspring laws for inverse-CDF sampling; single-atom
    // laws skip the draw entirely.
    let offspring_cdf: Vec<Vec<f64>> = (0..d)
        .map(|x| {
            let mut acc = 0.0;
            model
                .offspring_pmf(x)
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();
    let fixed_offspring: Vec<Option<u64>> = (0..d)
        .map(|x| {
            let pmf = model.offspring_pmf(x);
            let atoms: Vec<usize> = (0..pmf.len()).filter(|&k| pmf[k] > 0.0).collect();
            if atoms.len() == 1 {
                Some(atoms[0] as u64)
            } else {
                None
            }
        })
        .collect();

    let mut rng = CounterRng::new(seed);
    let mut counts: Vec<u64> = initial.to_vec();
    let mut total: u64 = counts.iter().sum();
    let mut t = 0.0f64;
    let mut events: u64 = 0;
    let mut states: Vec<PopulationState> = Vec::with_capacity(grid.len());
    let mut gi = 0usize;

    'outer: loop {
        let rate: f64 = (0..d).map(|x| counts[x] as f64 * total_rate[x]).sum();
        if rate <= 0.0 {
            // Extinct or frozen: remaining grid points see this state.
            while gi < grid.len() {
                states.push(PopulationState {
                    time: grid[gi],
                    counts: counts.clone(),
                });
                gi += 1;
            }
            break;
        }
        let t_next = t + rng.exp(rate);
        while gi < grid.len() && grid[gi] <= t_next {
            states.push(PopulationState {
                time: grid[gi],
                counts: counts.clone(),
            });
            gi += 1;
            if gi == grid.len() {
                break 'outer;
            }
        }
        t = t_next;
        events += 1;

        // Category walk over states: jump mass first, then branch mass.
        let mut v = rng.next_f64() * rate;
        let mut chosen = false;
        for x in 0..d {
            let n = counts[x] as f64;
            if n == 0.0 {
                continue;
            }
            let jump_mass = n * jump_rate[x];
            if v < jump_mass {
                let mut w = v;
                let mut target = usize::MAX;
                let row = &q_flat[x * d..(x + 1) * d];
                for (y, &qxy) in row.iter().enumerate() {
                    if y == x {
                        continue;
                    }
                    w -= n * qxy;
                    if w < 0.0 {
                        target = y;
                        break;
                    }
                }
                if target == usize::MAX {
                    // Rounding fell off the end: last positive-rate target.
                    target = (0..d).rev().find(|&y| y != x && row[y] > 0.0).unwrap_or(x);
                }
                if target != x {
                    counts[x] -= 1;
                    counts[target] += 1;
                }
                chosen = true;
                break;
            }
            v -= jump_mass;
            let branch_mass = n * beta[x];
            if v < branch_mass {
                let k = match fixed_offspring[x] {
                    Some(k) => k,
                    None => {
                        let u = rng.next_f64();
                        let cdf = &offspring_cdf[x];
                        let mut k = cdf.len() - 1;
                        for (j, &c) in cdf.iter().enumerate() {
                            if u < c {
                                k = j;
                                break;
                            }
                        }
                        k as u64
                    }
                };
                counts[x] -= 1;
                counts[x] += k;
                total = total - 1 + k;
                chosen = true;
                break;
            }
            v -= branch_mass;
        }
        if !chosen {
            // v landed on the boundary by rounding; re-draw next loop.
            events -= 1;
            continue;
        }
        if total > opts.pop_cap {
            return Err(SimError::PopulationCap {
                time: t,
                cap: opts.pop_cap,
            });
        }
    }

    Ok(Trajectory {
        seed,
        grid: grid.to_vec(),
        states,
        event_count: events,
    })
}

/// Derived observables along a trajectory's grid.
#[derive(Debug, Clone)]
pub struct ObservablePath {
    pub t: Vec<f64>,
    /// `⟨f, X_t⟩`.
    pub f_x: Vec<f64>,
    /// `W_t = e^{λ₁ t} ⟨φ₁, X_t⟩`.
    pub w: Vec<f64>,
    /// Requested martingale rows `H_t^{(k)} = e^{λ_k t} ⟨Φ_k, X_t⟩ D_k(−t)`,
    /// stored as `(k, per-time row)`.
    pub h: Vec<(usize, Vec<RowDVector<Complex64>>)>,
}

impl ObservablePath {
    pub fn h_for(&self, k: usize) -> Option<&Vec<RowDVector<Complex64>>> {
        self.h.iter().find(|(kk, _)| *kk == k).map(|(_, rows)| rows)
    }

    /// H rows at the final grid time, slotted per cluster.
    pub fn h_at_horizon(&self, cluster_count: usize) -> Vec<Option<RowDVector<Complex64>>> {
        let mut out = vec![None; cluster_count];
        for (k, rows) in &self.h {
            out[*k] = rows.last().cloned();
        }
        out
    }
}

/// `⟨f, X⟩ = Σ_x f(x)·n_x` against a count vector (a measure pairing,
/// no conjugation).
pub fn pairing(counts: &[u64], f: &DVector<f64>) -> f64 {
    counts
        .iter()
        .zip(f.iter())
        .map(|(&c, &fv)| c as f64 * fv)
        .sum()
}

/// `W_t = e^{λ₁ t} ⟨φ₁, X_t⟩` from raw counts.
pub fn w_value(counts: &[u64], spectrum: &Spectrum, basis: &EigenBasis, t: f64) -> f64 {
    (spectrum.lambda1() * t).exp() * pairing(counts, basis.phi1())
}

/// Martingale row `H_t^{(k)} = e^{λ_k t} (⟨φ_j^{(k)}, X_t⟩)_j D_k(−t)`
/// from raw counts.
pub fn martingale_row(
    counts: &[u64],
    spectrum: &Spectrum,
    basis: &EigenBasis,
    k: usize,
    t: f64,
) -> RowDVector<Complex64> {
    let phi = basis.phi(k);
    let nk = phi.ncols();
    let mut row = RowDVector::<Complex64>::zeros(nk);
    for j in 0..nk {
        let mut acc = Complex64::new(0.0, 0.0);
        for (x, &c) in counts.iter().enumerate() {
            if c > 0 {
                acc += phi[(x, j)] * c as f64;
            }
        }
        row[j] = acc;
    }
    let growth = (spectrum.lambda(k) * t).exp();
    propagate_coeffs_transpose(spectrum, k, -t, &row) * growth
}

/// Compute `⟨f, X⟩`, `W` and requested `H^{(k)}` along the grid.
pub fn observe(
    trajectory: &Trajectory,
    spectrum: &Spectrum,
    basis: &EigenBasis,
    f: &DVector<f64>,
    requested_k: &[usize],
) -> ObservablePath {
    let n = trajectory.states.len();
    let mut f_x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut h: Vec<(usize, Vec<RowDVector<Complex64>>)> = requested_k
        .iter()
        .map(|&k| (k, Vec::with_capacity(n)))
        .collect();

    for state in &trajectory.states {
        let t = state.time;
        f_x.push(pairing(&state.counts, f));
        w.push(w_value(&state.counts, spectrum, basis, t));
        for (k, rows) in h.iter_mut() {
            rows.push(martingale_row(&state.counts, spectrum, basis, *k, t));
        }
    }
    ObservablePath {
        t: trajectory.grid.clone(),
        f_x,
        w,
        h,
    }
}

/// `row · D_k(t)` computed against the block structure.
fn propagate_coeffs_transpose(
    spectrum: &Spectrum,
    k: usize,
    t: f64,
    row: &RowDVector<Complex64>,
) -> RowDVector<Complex64> {
    // (row · D)_q = Σ_p row_p D_{p,q}; reuse the column action on the
    // transposed propagator by noting D(t)ᵀ has blocks with t^{p−q}.
    let st = spectrum.structure(k);
    let mut out = RowDVector::<Complex64>::zeros(row.len());
    let mut offset = 0;
    for &size in &st.block_sizes {
        for q in 0..size {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut factorial = 1.0;
            for a in 0..=q {
                if a > 0 {
                    factorial *= a as f64;
                }
                acc += row[offset + q - a] * (t.powi(a as i32) / factorial);
            }
            out[offset + q] = acc;
        }
        offset += size;
    }
    out
}

/// Fluctuation `e^{λ₁ t/2}(⟨f, X_t⟩ − Ê_t(f_la))` along the grid, the
/// horizon value `H_T^{(k)}` standing in for `H_∞^{(k)}`.
pub fn fluctuation(
    path: &ObservablePath,
    spectrum: &Spectrum,
    projection: &Projection,
    h_horizon: &[Option<RowDVector<Complex64>>],
) -> Result<Vec<f64>, crate::decompose::DecomposeError> {
    let lambda1 = spectrum.lambda1();
    let mut out = Vec::with_capacity(path.t.len());
    for (i, &t) in path.t.iter().enumerate() {
        let e_t = crate::decompose::compensator(spectrum, h_horizon, projection, t)?;
        out.push((lambda1 * t / 2.0).exp() * (path.f_x[i] - e_t));
    }
    Ok(out)
}

/// What to observe along each replicate.
#[derive(Debug, Clone)]
pub struct ObservableSpec {
    pub f: DVector<f64>,
    pub requested_k: Vec<usize>,
}

/// One ensemble member: either observables or the per-replicate error.
#[derive(Debug)]
pub struct Replicate {
    pub rep: u64,
    pub seed: u64,
    pub outcome: Result<(Trajectory, ObservablePath), SimError>,
}

/// Independent replicates with deterministically split RNG streams.
#[derive(Debug)]
pub struct Ensemble {
    pub grid: Vec<f64>,
    pub master_seed: u64,
    pub replicates: Vec<Replicate>,
}

fn run_replicate(
    model: &BranchingModel,
    spectrum: &Spectrum,
    basis: &EigenBasis,
    initial: &[u64],
    grid: &[f64],
    master_seed: u64,
    rep: u64,
    spec: &ObservableSpec,
    opts: &SimOptions,
) -> Replicate {
    let seed = crate::rng::child_key(master_seed, rep);
    let outcome = simulate(model, initial, grid, seed, opts).map(|trajectory| {
        let path = observe(&trajectory, spectrum, basis, &spec.f, &spec.requested_k);
        (trajectory, path)
    });
    Replicate { rep, seed, outcome }
}

/// Serial ensemble driver (always available).
#[allow(clippy::too_many_arguments)]
pub fn ensemble_serial(
    model: &BranchingModel,
    spectrum: &Spectrum,
    basis: &EigenBasis,
    initial: &[u64],
    grid: &[f64],
    n_reps: u64,
    master_seed: u64,
    spec: &ObservableSpec,
    opts: &SimOptions,
) -> Ensemble {
    let replicates = (0..n_reps)
        .map(|rep| run_replicate(model, spectrum, basis, initial, grid, master_seed, rep, spec, opts))
        .collect();
    Ensemble {
        grid: grid.to_vec(),
        master_seed,
        replicates,
    }
}

/// Data-parallel ensemble driver; identical output to the serial one.
#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn ensemble_parallel(
    model: &BranchingModel,
    spectrum: &Spectrum,
    basis: &EigenBasis,
    initial: &[u64],
    grid: &[f64],
    n_reps: u64,
    master_seed: u64,
    spec: &ObservableSpec,
    opts: &SimOptions,
) -> Ensemble {
    let replicates: Vec<Replicate> = (0..n_reps)
        .into_par_iter()
        .map(|rep| run_replicate(model, spectrum, basis, initial, grid, master_seed, rep, spec, opts))
        .collect();
    Ensemble {
        grid: grid.to_vec(),
        master_seed,
        replicates,
    }
}

/// Ensemble driver following the crate's `parallel` feature.
#[allow(clippy::too_many_arguments)]
pub fn ensemble(
    model: &BranchingModel,
    spectrum: &Spectrum,
    basis: &EigenBasis,
    initial: &[u64],
    grid: &[f64],
    n_reps: u64,
    master_seed: u64,
    spec: &ObservableSpec,
    opts: &SimOptions,
) -> Ensemble {
    #[cfg(feature = "parallel")]
    {
        ensemble_parallel(model, spectrum, basis, initial, grid, n_reps, master_seed, spec, opts)
    }
    #[cfg(not(feature = "parallel"))]
    {
        ensemble_serial(model, spectrum, basis, initial, grid, n_reps, master_seed, spec, opts)
    }
}

/// Summary statistics across replicates (unconditional moments plus
/// survivor counts at the horizon).
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnsembleSummary {
    pub n_reps: u64,
    pub n_ok: u64,
    pub n_errors: u64,
    pub survivors_at_horizon: u64,
    pub t: Vec<f64>,
    pub mean_f: Vec<f64>,
    pub var_f: Vec<f64>,
    pub mean_w: Vec<f64>,
    pub var_w: Vec<f64>,
}

pub fn summarize(ensemble: &Ensemble) -> EnsembleSummary {
    let grid = &ensemble.grid;
    let ok: Vec<&(Trajectory, ObservablePath)> = ensemble
        .replicates
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .collect();
    let n_ok = ok.len() as u64;
    let survivors = ok.iter().filter(|(tr, _)| tr.survives()).count() as u64;
    let m = grid.len();
    let mut mean_f = vec![0.0; m];
    let mut var_f = vec![0.0; m];
    let mut mean_w = vec![0.0; m];
    let mut var_w = vec![0.0; m];
    if n_ok > 0 {
        for i in 0..m {
            let fs: Vec<f64> = ok.iter().map(|(_, p)| p.f_x[i]).collect();
            let ws: Vec<f64> = ok.iter().map(|(_, p)| p.w[i]).collect();
            mean_f[i] = crate::stats::mean(&fs);
            mean_w[i] = crate::stats::mean(&ws);
            if n_ok > 1 {
                var_f[i] = crate::stats::variance(&fs);
                var_w[i] = crate::stats::variance(&ws);
            }
        }
    }
    EnsembleSummary {
        n_reps: ensemble.replicates.len() as u64,
        n_ok,
        n_errors: ensemble.replicates.len() as u64 - n_ok,
        survivors_at_horizon: survivors,
        t: grid.clone(),
        mean_f,
        var_f,
        mean_w,
        var_w,
    }
}

/// Render the ensemble as CSV: one row per (replicate, grid time) with
/// state counts, `⟨f,X⟩`, `W` and the requested `H` components. Output
/// is byte-deterministic for a fixed (model, config, seed).
pub fn write_ensemble_csv(ensemble: &Ensemble, d: usize) -> String {
    let mut out = String::new();
    out.push_str("rep,t");
    for x in 0..d {
        out.push_str(&format!(",n{x}"));
    }
    out.push_str(",f_X,W");
    if let Some(Replicate {
        outcome: Ok((_, path)),
        ..
    }) = ensemble.replicates.iter().find(|r| r.outcome.is_ok())
    {
        for (k, rows) in &path.h {
            let nk = rows.first().map_or(0, |r| r.len());
            for j in 0..nk {
                out.push_str(&format!(",H{}_{}_re,H{}_{}_im", k + 1, j + 1, k + 1, j + 1));
            }
        }
    }
    out.push('\n');
    for rep in &ensemble.replicates {
        let (trajectory, path) = match &rep.outcome {
            Ok(pair) => pair,
            Err(_) => continue,
        };
        for (i, state) in trajectory.states.iter().enumerate() {
            out.push_str(&format!("{},{}", rep.rep, state.time));
            for &c in &state.counts {
                out.push_str(&format!(",{c}"));
            }
            out.push_str(&format!(",{},{}", path.f_x[i], path.w[i]));
            for (_, rows) in &path.h {
                for z in rows[i].iter() {
                    out.push_str(&format!(",{},{}", z.re, z.im));
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Per-replicate state counts parsed back from an ensemble CSV.
#[derive(Debug, Clone)]
pub struct RawReplicate {
    pub rep: u64,
    pub counts: Vec<Vec<u64>>,
}

/// Parse the count columns of an ensemble CSV (observables are
/// recomputed downstream rather than trusted).
pub fn read_ensemble_csv(text: &str, d: usize) -> Result<(Vec<f64>, Vec<RawReplicate>), String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty CSV")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 + d || cols[0] != "rep" || cols[1] != "t" {
        return Err(format!("unexpected CSV header: {header}"));
    }
    let mut grid: Vec<f64> = Vec::new();
    let mut reps: Vec<RawReplicate> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 + d {
            return Err(format!("line {}: too few fields", lineno + 2));
        }
        let rep: u64 = fields[0].parse().map_err(|e| format!("line {}: {e}", lineno + 2))?;
        let t: f64 = fields[1].parse().map_err(|e| format!("line {}: {e}", lineno + 2))?;
        let counts: Vec<u64> = (0..d)
            .map(|x| fields[2 + x].parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", lineno + 2))?;
        if reps.last().map(|r| r.rep) != Some(rep) {
            reps.push(RawReplicate {
                rep,
                counts: Vec::new(),
            });
        }
        if reps.len() == 1 {
            grid.push(t);
        }
        reps.last_mut().unwrap().counts.push(counts);
    }
    for r in &reps {
        if r.counts.len() != grid.len() {
            return Err(format!("replicate {} has {} rows, grid has {}", r.rep, r.counts.len(), grid.len()));
        }
    }
    Ok((grid, reps))
}
