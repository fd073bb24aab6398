//! Event-driven exact integrator for finite-graph flows.
//!
//! Within a fixed sign pattern on the TV pairs the inclusion reduces to a
//! smooth ODE on cluster representatives (clusters are the components of the
//! zero-sign pairs; their members move rigidly). This module tracks the
//! pattern, solves the reduced system exactly when every power structure is
//! quadratic (symmetric eigendecomposition of the cluster coupling matrix)
//! and by adaptive Runge-Kutta with dense output otherwise, locates merge
//! and split events by bracketed root finding, and re-selects the pattern at
//! each event.
//!
//! Pattern selection is the minimal-section principle: the right derivative
//! of the flow is the least-norm element of `-∂F(u)`, a box-constrained
//! least-squares problem over the undecided TV duals. Merging clusters at
//! value crossings and splitting where a dual saturates both fall out of
//! that one solve; uniqueness of the strong solution guarantees the selected
//! continuation is the solution.
//!
//! TV structures sharing a pair are lumped: only the weighted dual sum
//! enters the dynamics, so the lumped dual lives in `[-W_e, W_e]` with `W_e`
//! the total TV weight, and per-structure duals are recovered by scaling.

use crate::flow::{diagnostics_for, Trajectory};
use crate::linalg::{alternating_feasibility, box_constrained_drift, min_norm_solve, UnknownEdge};
use crate::ode::{integrate_dense, DenseOutput, OdeError};
use crate::problem::{Growth, Problem};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("the problem has no total-variation structure; use implicit Euler instead")]
    NoTvStructure,
    #[error("sources are not supported by the exact integrator")]
    SourceUnsupported,
    #[error("state has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("mode inconsistent with state: values spread {spread:.3e} within cluster {cluster}")]
    InconsistentMode { cluster: usize, spread: f64 },
    #[error("internal dual system inconsistent: residual {residual:.3e}")]
    InconsistentDuals { residual: f64 },
    #[error("cycling guard tripped after {limit} events")]
    CyclingGuard { limit: usize },
    #[error("event at t = {t} did not change the mode")]
    ZeroProgress { t: f64 },
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[derive(Debug, Clone, Copy)]
struct TvPair {
    i: usize,
    j: usize,
    /// Lumped TV weight over all TV structures carrying this pair.
    weight: f64,
}

#[derive(Debug, Clone, Copy)]
struct PowerEdge {
    i: usize,
    j: usize,
    weight: f64,
    p: f64,
}

#[derive(Debug, Clone)]
struct ExactModel {
    n: usize,
    omega: Vec<f64>,
    tv: Vec<TvPair>,
    power: Vec<PowerEdge>,
    edge_count: usize,
}

impl ExactModel {
    fn build(problem: &Problem) -> Result<Self, ExactError> {
        let model = problem.model();
        let mut tv_map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut power = Vec::new();
        let mut edge_count = 0;
        for term in model.terms() {
            edge_count += term.edges.len();
            match term.growth {
                Growth::TotalVariation => {
                    for e in &term.edges {
                        *tv_map.entry((e.i, e.j)).or_insert(0.0) += e.weight;
                    }
                }
                Growth::Power(p) => {
                    for e in &term.edges {
                        power.push(PowerEdge { i: e.i, j: e.j, weight: e.weight, p });
                    }
                }
            }
        }
        if tv_map.is_empty() {
            return Err(ExactError::NoTvStructure);
        }
        let tv = tv_map
            .into_iter()
            .map(|((i, j), weight)| TvPair { i, j, weight })
            .collect();
        Ok(Self { n: model.len(), omega: model.omega().to_vec(), tv, power, edge_count })
    }

    /// Drift contributions that are single-valued in the current pattern:
    /// strict TV duals at their sign and power fluxes at the state.
    fn fixed_drift(&self, sigma: &[i8], u: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.n];
        for (idx, tv) in self.tv.iter().enumerate() {
            if sigma[idx] != 0 {
                let xi = tv.weight * sigma[idx] as f64;
                r[tv.i] += xi;
                r[tv.j] -= xi;
            }
        }
        for pe in &self.power {
            let d = u[pe.j] - u[pe.i];
            if d != 0.0 {
                let xi = pe.weight * d.abs().powf(pe.p - 1.0) * d.signum();
                r[pe.i] += xi;
                r[pe.j] -= xi;
            }
        }
        r
    }
}

/// Sign pattern on the lumped TV pairs plus the induced clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    /// Sign of `u_j - u_i` per TV pair (orientation `i < j`); 0 marks an
    /// edge whose endpoints move rigidly.
    pub sigma: Vec<i8>,
    /// Vertex to cluster id; clusters are components of the sigma = 0 pairs.
    pub cluster_of: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
}

fn components(n: usize, links: impl Iterator<Item = (usize, usize)>) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for (a, b) in links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut cluster_of = vec![usize::MAX; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for x in 0..n {
        let root = find(&mut parent, x);
        if cluster_of[root] == usize::MAX {
            cluster_of[root] = clusters.len();
            clusters.push(Vec::new());
        }
        cluster_of[x] = cluster_of[root];
        clusters[cluster_of[x]].push(x);
    }
    (cluster_of, clusters)
}

/// Select the mode at a state via the minimal section of the subdifferential:
/// cluster equal values, solve the box-constrained least-norm problem for the
/// undecided duals, then read new signs off the resulting derivative field.
///
/// Returns the mode, the state snapped to nu-weighted cluster means (mass
/// preserving), and the right-derivative field.
fn minimal_section_mode(
    model: &ExactModel,
    u_in: &[f64],
) -> (Mode, Vec<f64>, Vec<f64>) {
    let n = model.n;
    let scale = 1.0 + u_in.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let eq_tol = 1e-9 * scale;

    // Cluster by value equality, transitively closed.
    let (pre_cluster, pre_members) = components(
        n,
        model
            .tv
            .iter()
            .filter(|tv| (u_in[tv.j] - u_in[tv.i]).abs() <= eq_tol)
            .map(|tv| (tv.i, tv.j)),
    );
    let mut u = u_in.to_vec();
    for members in &pre_members {
        if members.len() > 1 {
            let mass: f64 = members.iter().map(|&x| u_in[x] * model.omega[x]).sum();
            let nu: f64 = members.iter().map(|&x| model.omega[x]).sum();
            let mean = mass / nu;
            for &x in members {
                u[x] = mean;
            }
        }
    }

    // Undecided pairs are those inside a value cluster (closure makes a
    // borderline chain consistent even when the end-to-end gap exceeds the
    // tolerance).
    let zero_pairs: Vec<usize> = model
        .tv
        .iter()
        .enumerate()
        .filter(|(_, tv)| pre_cluster[tv.i] == pre_cluster[tv.j])
        .map(|(idx, _)| idx)
        .collect();
    let mut sigma: Vec<i8> = model
        .tv
        .iter()
        .map(|tv| {
            let d = u[tv.j] - u[tv.i];
            if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect();
    for &idx in &zero_pairs {
        sigma[idx] = 0;
    }

    let r = model.fixed_drift(&sigma, &u);
    let unknowns: Vec<UnknownEdge> = zero_pairs
        .iter()
        .map(|&idx| UnknownEdge {
            i: model.tv[idx].i,
            j: model.tv[idx].j,
            bound: model.tv[idx].weight,
        })
        .collect();
    let zeta = box_constrained_drift(&unknowns, &r, &model.omega, None);
    let mut res = r;
    for (e, &z) in unknowns.iter().zip(&zeta) {
        res[e.i] += z;
        res[e.j] -= z;
    }
    let u_dot: Vec<f64> = res.iter().zip(&model.omega).map(|(r, w)| r / w).collect();

    let der_scale = 1.0 + u_dot.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let der_tol = 1e-9 * der_scale;
    for &idx in &zero_pairs {
        let tv = &model.tv[idx];
        let dd = u_dot[tv.j] - u_dot[tv.i];
        sigma[idx] = if dd > der_tol {
            1
        } else if dd < -der_tol {
            -1
        } else {
            0
        };
    }

    let (cluster_of, clusters) = components(
        n,
        model
            .tv
            .iter()
            .enumerate()
            .filter(|(idx, _)| sigma[*idx] == 0)
            .map(|(_, tv)| (tv.i, tv.j)),
    );
    // Degenerate closure: a pair inside a final cluster cannot stay strict.
    for (idx, tv) in model.tv.iter().enumerate() {
        if cluster_of[tv.i] == cluster_of[tv.j] {
            sigma[idx] = 0;
        }
    }
    (Mode { sigma, cluster_of, clusters }, u, u_dot)
}

/// Mode selection at a state, exposed with the instantaneous derivative.
pub fn mode_from_state(problem: &Problem, u: &[f64]) -> Result<(Mode, Vec<f64>), ExactError> {
    let model = ExactModel::build(problem)?;
    if u.len() != model.n {
        return Err(ExactError::StateLength { expected: model.n, got: u.len() });
    }
    let (mode, _, u_dot) = minimal_section_mode(&model, u);
    Ok((mode, u_dot))
}

/// The smooth ODE on cluster representatives induced by a mode.
#[derive(Debug, Clone)]
pub struct ReducedOde {
    /// nu-mass per cluster.
    pub cluster_measures: Vec<f64>,
    /// Constant part of `c'` (strict TV duals, already divided by measure).
    pub constant: Vec<f64>,
    /// Cross-cluster power couplings `(ci, cj, weight, p)`.
    couplings: Vec<(usize, usize, f64, f64)>,
    /// All couplings quadratic: the dynamics are affine.
    pub is_affine: bool,
}

impl ReducedOde {
    pub fn dim(&self) -> usize {
        self.cluster_measures.len()
    }

    pub fn rhs(&self, c: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.constant);
        for &(ci, cj, w, p) in &self.couplings {
            let d = c[cj] - c[ci];
            let flux = if d == 0.0 { 0.0 } else { w * d.abs().powf(p - 1.0) * d.signum() };
            out[ci] += flux / self.cluster_measures[ci];
            out[cj] -= flux / self.cluster_measures[cj];
        }
    }
}

fn build_reduced(model: &ExactModel, mode: &Mode) -> ReducedOde {
    let m = mode.clusters.len();
    let mut nu = vec![0.0; m];
    for (x, &c) in mode.cluster_of.iter().enumerate() {
        nu[c] += model.omega[x];
    }
    let mut constant = vec![0.0; m];
    for (idx, tv) in model.tv.iter().enumerate() {
        if mode.sigma[idx] != 0 {
            let xi = tv.weight * mode.sigma[idx] as f64;
            constant[mode.cluster_of[tv.i]] += xi;
            constant[mode.cluster_of[tv.j]] -= xi;
        }
    }
    for (b, &m) in constant.iter_mut().zip(&nu) {
        *b /= m;
    }
    let mut couplings = Vec::new();
    let mut is_affine = true;
    for pe in &model.power {
        let (ci, cj) = (mode.cluster_of[pe.i], mode.cluster_of[pe.j]);
        if ci != cj {
            couplings.push((ci, cj, pe.weight, pe.p));
            if (pe.p - 2.0).abs() > 1e-14 {
                is_affine = false;
            }
        }
    }
    ReducedOde { cluster_measures: nu, constant, couplings, is_affine }
}

/// Build the reduced system for a given mode, validating that the state
/// honors the cluster-equality constraints.
pub fn reduced_system(
    problem: &Problem,
    mode: &Mode,
    state: &[f64],
) -> Result<ReducedOde, ExactError> {
    let model = ExactModel::build(problem)?;
    if state.len() != model.n {
        return Err(ExactError::StateLength { expected: model.n, got: state.len() });
    }
    let scale = 1.0 + state.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for (c, members) in mode.clusters.iter().enumerate() {
        let lo = members.iter().map(|&x| state[x]).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|&x| state[x]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-7 * scale {
            return Err(ExactError::InconsistentMode { cluster: c, spread: hi - lo });
        }
    }
    Ok(build_reduced(&model, mode))
}

/// Exact affine solution `c' = A c + b` through the symmetric
/// eigendecomposition of the nu-weighted coupling matrix.
#[derive(Debug, Clone)]
struct AffineFlow {
    t0: f64,
    nu_sqrt: Vec<f64>,
    q: DMatrix<f64>,
    evals: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn exp_psi(tau: f64, lambda: f64) -> (f64, f64) {
    let x = lambda * tau;
    let e = x.exp();
    let psi = if x.abs() < 1e-8 {
        tau * (1.0 + 0.5 * x + x * x / 6.0)
    } else {
        (e - 1.0) / lambda
    };
    (e, psi)
}

impl AffineFlow {
    fn new(reduced: &ReducedOde, c0: &[f64], t0: f64) -> Self {
        let m = reduced.dim();
        let nu = &reduced.cluster_measures;
        let nu_sqrt: Vec<f64> = nu.iter().map(|v| v.sqrt()).collect();
        let mut w = DMatrix::<f64>::zeros(m, m);
        for &(ci, cj, weight, _p) in &reduced.couplings {
            w[(ci, cj)] += weight;
            w[(cj, ci)] += weight;
            w[(ci, ci)] -= weight;
            w[(cj, cj)] -= weight;
        }
        let mut s = w;
        for i in 0..m {
            for j in 0..m {
                s[(i, j)] /= nu_sqrt[i] * nu_sqrt[j];
            }
        }
        let eig = s.symmetric_eigen();
        let q = eig.eigenvectors;
        let evals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        let d0 = DVector::from_iterator(m, c0.iter().zip(&nu_sqrt).map(|(c, s)| c * s));
        let g = DVector::from_iterator(
            m,
            reduced.constant.iter().zip(&nu_sqrt).map(|(b, s)| b * s),
        );
        let alpha = (q.transpose() * d0).iter().cloned().collect();
        let beta = (q.transpose() * g).iter().cloned().collect();
        Self { t0, nu_sqrt, q, evals, alpha, beta }
    }

    fn eval(&self, t: f64) -> Vec<f64> {
        let tau = t - self.t0;
        let m = self.evals.len();
        let mut y = DVector::<f64>::zeros(m);
        for i in 0..m {
            let (e, psi) = exp_psi(tau, self.evals[i]);
            y[i] = e * self.alpha[i] + psi * self.beta[i];
        }
        let d = &self.q * y;
        (0..m).map(|i| d[i] / self.nu_sqrt[i]).collect()
    }

    fn deriv(&self, t: f64) -> Vec<f64> {
        let tau = t - self.t0;
        let m = self.evals.len();
        let mut y = DVector::<f64>::zeros(m);
        for i in 0..m {
            let (e, _) = exp_psi(tau, self.evals[i]);
            y[i] = e * (self.evals[i] * self.alpha[i] + self.beta[i]);
        }
        let d = &self.q * y;
        (0..m).map(|i| d[i] / self.nu_sqrt[i]).collect()
    }
}

#[derive(Debug, Clone)]
enum Dynamics {
    Affine(AffineFlow),
    Numeric(DenseOutput),
}

/// What terminated a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalKind {
    Horizon,
    Merge,
    Split,
}

/// One maximal interval on which the mode is constant.
#[derive(Debug, Clone)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub mode: Mode,
    pub terminal: TerminalKind,
    reduced: ReducedOde,
    dynamics: Dynamics,
}

impl Segment {
    pub fn reduced(&self) -> &ReducedOde {
        &self.reduced
    }

    pub fn eval_clusters(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(self.t_start, self.t_end);
        match &self.dynamics {
            Dynamics::Affine(a) => a.eval(t),
            Dynamics::Numeric(d) => {
                let mut out = vec![0.0; self.reduced.dim()];
                d.eval(t, &mut out);
                out
            }
        }
    }

    pub fn cluster_derivative(&self, t: f64) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Affine(a) => a.deriv(t.clamp(self.t_start, self.t_end)),
            Dynamics::Numeric(_) => {
                let c = self.eval_clusters(t);
                let mut out = vec![0.0; self.reduced.dim()];
                self.reduced.rhs(&c, &mut out);
                out
            }
        }
    }

    pub fn eval_state(&self, t: f64) -> Vec<f64> {
        let c = self.eval_clusters(t);
        self.mode.cluster_of.iter().map(|&cl| c[cl]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Merge,
    Split,
}

/// A mode change: which pairs entered (merge) or left (split) the zero set.
#[derive(Debug, Clone)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub pairs: Vec<(usize, usize)>,
    pub state: Vec<f64>,
}

/// Dense exact solution with its event log.
#[derive(Debug, Clone)]
pub struct ExactRun {
    pub segments: Vec<Segment>,
    pub events: Vec<Event>,
    /// Lumped TV pairs, index-aligned with every mode's sigma.
    pub tv_pairs: Vec<(usize, usize)>,
    pub horizon: f64,
    omega: Vec<f64>,
}

impl ExactRun {
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let idx = self
            .segments
            .partition_point(|s| s.t_end < t)
            .min(self.segments.len() - 1);
        self.segments[idx].eval_state(t)
    }

    pub fn final_state(&self) -> Vec<f64> {
        self.segments
            .last()
            .expect("at least one segment")
            .eval_state(self.horizon)
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }

    /// Sample onto a uniform grid as a [`Trajectory`] (no per-step
    /// certificates; the dual story lives in the segments).
    pub fn to_trajectory(&self, problem: &Problem, sample_step: f64) -> Trajectory {
        let mut times = Vec::new();
        let mut t = 0.0;
        while t < self.horizon - 1e-12 * self.horizon.max(1.0) {
            times.push(t);
            t += sample_step;
        }
        times.push(self.horizon);
        let states: Vec<Vec<f64>> = times.iter().map(|&t| self.eval(t)).collect();
        let diagnostics = states.iter().map(|u| diagnostics_for(problem, u)).collect();
        Trajectory {
            times,
            states,
            certificates: Vec::new(),
            diagnostics,
            source_samples: None,
            omega: self.omega.clone(),
            solver_tol: 0.0,
        }
    }
}

/// Internal duals of one cluster's zero pairs at an instant.
#[derive(Debug, Clone)]
pub struct ClusterDuals {
    pub cluster: usize,
    pub pairs: Vec<(usize, usize)>,
    /// Normalized duals `g = zeta / W_e`, oriented `i < j`.
    pub g: Vec<f64>,
    /// Consistency residual of the least-squares system.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct InternalDuals {
    pub clusters: Vec<ClusterDuals>,
    /// All duals representable within `|g| <= 1` (after a feasibility
    /// projection if the min-norm solution strays outside).
    pub feasible: bool,
    pub max_abs_g: f64,
}

struct ClusterSystem {
    cluster: usize,
    members: Vec<usize>,
    pair_indices: Vec<usize>,
    a: DMatrix<f64>,
    bounds: Vec<f64>,
}

fn cluster_systems(model: &ExactModel, mode: &Mode) -> Vec<ClusterSystem> {
    let mut per_cluster: Vec<Vec<usize>> = vec![Vec::new(); mode.clusters.len()];
    for (idx, tv) in model.tv.iter().enumerate() {
        if mode.sigma[idx] == 0 {
            per_cluster[mode.cluster_of[tv.i]].push(idx);
        }
    }
    let mut systems = Vec::new();
    for (cluster, pair_indices) in per_cluster.into_iter().enumerate() {
        if pair_indices.is_empty() {
            continue;
        }
        let members = mode.clusters[cluster].clone();
        let mut local = vec![usize::MAX; model.n];
        for (row, &x) in members.iter().enumerate() {
            local[x] = row;
        }
        let mut a = DMatrix::<f64>::zeros(members.len(), pair_indices.len());
        let mut bounds = Vec::with_capacity(pair_indices.len());
        for (col, &idx) in pair_indices.iter().enumerate() {
            let tv = &model.tv[idx];
            a[(local[tv.i], col)] = 1.0;
            a[(local[tv.j], col)] = -1.0;
            bounds.push(tv.weight);
        }
        systems.push(ClusterSystem { cluster, members, pair_indices, a, bounds });
    }
    systems
}

fn internal_duals_impl(
    model: &ExactModel,
    mode: &Mode,
    systems: &[ClusterSystem],
    state: &[f64],
    cluster_derivative: &[f64],
) -> Result<InternalDuals, ExactError> {
    let drift = model.fixed_drift(&mode.sigma, state);
    let mut clusters = Vec::new();
    let mut feasible = true;
    let mut max_abs_g: f64 = 0.0;
    for sys in systems {
        let rhs = DVector::from_iterator(
            sys.members.len(),
            sys.members
                .iter()
                .map(|&x| model.omega[x] * cluster_derivative[sys.cluster] - drift[x]),
        );
        let (zeta, residual) = min_norm_solve(&sys.a, &rhs);
        let scale = 1.0 + rhs.amax();
        if residual > 1e-8 * scale {
            return Err(ExactError::InconsistentDuals { residual });
        }
        let mut zeta = zeta;
        let inside = zeta
            .iter()
            .zip(&sys.bounds)
            .all(|(z, &b)| z.abs() <= b * (1.0 + 1e-9) + 1e-12);
        if !inside {
            match alternating_feasibility(&sys.a, &rhs, &sys.bounds, &zeta, 1e-10 * scale) {
                Some(better) => zeta = better,
                None => feasible = false,
            }
        }
        let g: Vec<f64> = zeta
            .iter()
            .zip(&sys.bounds)
            .map(|(z, &b)| z / b)
            .collect();
        for &gv in &g {
            max_abs_g = max_abs_g.max(gv.abs());
        }
        clusters.push(ClusterDuals {
            cluster: sys.cluster,
            pairs: sys.pair_indices.iter().map(|&i| (model.tv[i].i, model.tv[i].j)).collect(),
            g,
            residual,
        });
    }
    Ok(InternalDuals { clusters, feasible, max_abs_g })
}

/// Recover the duals on the zero-sign pairs from the requirement that every
/// vertex of a cluster shares the cluster derivative. Underdetermined
/// systems return the minimum-norm solution; a feasibility projection runs
/// before any infeasibility is reported.
pub fn recover_internal_g(
    problem: &Problem,
    mode: &Mode,
    state: &[f64],
    cluster_derivative: &[f64],
) -> Result<InternalDuals, ExactError> {
    let model = ExactModel::build(problem)?;
    if state.len() != model.n {
        return Err(ExactError::StateLength { expected: model.n, got: state.len() });
    }
    let systems = cluster_systems(&model, mode);
    internal_duals_impl(&model, mode, &systems, state, cluster_derivative)
}

fn bisect_root(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    // f(lo) > 0 >= f(hi).
    for _ in 0..90 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 * hi.abs().max(1.0) {
            return mid;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn bisect_boundary(f: &dyn Fn(f64) -> bool, mut lo: f64, mut hi: f64) -> f64 {
    // f(lo) true, f(hi) false.
    for _ in 0..90 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 * hi.abs().max(1.0) {
            return mid;
        }
        if f(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn find_event(model: &ExactModel, seg: &Segment) -> Option<(f64, TerminalKind)> {
    let (t0, t1) = (seg.t_start, seg.t_end);
    let span = t1 - t0;
    if span <= 0.0 {
        return None;
    }
    // Strict pairs crossing zero are merges; internal duals leaving the box
    // are splits. All signals are scanned on a common grid and refined by
    // bisection inside the first bracketing interval.
    let strict: Vec<(usize, usize, usize, f64)> = model
        .tv
        .iter()
        .enumerate()
        .filter(|(idx, _)| seg.mode.sigma[*idx] != 0)
        .map(|(idx, tv)| {
            (
                idx,
                seg.mode.cluster_of[tv.i],
                seg.mode.cluster_of[tv.j],
                seg.mode.sigma[idx] as f64,
            )
        })
        .collect();
    let systems = cluster_systems(model, &seg.mode);
    if strict.is_empty() && systems.is_empty() {
        return None;
    }
    let gap = |idx: usize, c: &[f64]| -> f64 {
        let (_, ci, cj, s) = strict[idx];
        (c[cj] - c[ci]) * s
    };
    let feasible_at = |t: f64| -> bool {
        let state = seg.eval_state(t);
        let cd = seg.cluster_derivative(t);
        match internal_duals_impl(model, &seg.mode, &systems, &state, &cd) {
            Ok(d) => d.feasible,
            Err(_) => false,
        }
    };
    let samples = ((span / 1e-3).ceil() as usize).clamp(256, 8192);
    let c0 = seg.eval_clusters(t0);
    let mut prev: Vec<f64> = (0..strict.len()).map(|e| gap(e, &c0).max(0.0)).collect();
    let mut prev_t = t0;
    let mut prev_feasible = if systems.is_empty() { true } else { feasible_at(t0) };
    for k in 1..=samples {
        let tk = t0 + span * (k as f64) / (samples as f64);
        let c = seg.eval_clusters(tk);
        let mut best: Option<(f64, TerminalKind)> = None;
        for e in 0..strict.len() {
            let g = gap(e, &c);
            if prev[e] > 0.0 && g <= 0.0 {
                let f = |t: f64| gap(e, &seg.eval_clusters(t));
                let hit = bisect_root(&f, prev_t, tk);
                if best.map_or(true, |(bt, _)| hit < bt) {
                    best = Some((hit, TerminalKind::Merge));
                }
            }
            prev[e] = g;
        }
        if !systems.is_empty() {
            let ok = feasible_at(tk);
            if prev_feasible && !ok {
                let hit = bisect_boundary(&feasible_at, prev_t, tk);
                if best.map_or(true, |(bt, _)| hit < bt) {
                    best = Some((hit, TerminalKind::Split));
                }
            }
            prev_feasible = ok;
        }
        if let Some((t_hit, kind)) = best {
            if t_hit > t0 + 1e-13 * (1.0 + t0.abs()) {
                return Some((t_hit, kind));
            }
        }
        prev_t = tk;
    }
    None
}

fn diff_modes(
    model: &ExactModel,
    old: &[i8],
    new: &[i8],
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut merged = Vec::new();
    let mut split = Vec::new();
    for (idx, tv) in model.tv.iter().enumerate() {
        match (old[idx], new[idx]) {
            (a, 0) if a != 0 => merged.push((tv.i, tv.j)),
            (0, b) if b != 0 => split.push((tv.i, tv.j)),
            (a, b) if a != 0 && b != 0 && a != b => split.push((tv.i, tv.j)),
            _ => {}
        }
    }
    (merged, split)
}

/// Integrate the flow exactly from `u0` to `horizon`.
///
/// The problem must carry at least one TV structure (the smooth case has no
/// events; use implicit Euler there) and no source term.
pub fn integrate_exact(
    problem: &Problem,
    u0: &[f64],
    horizon: f64,
) -> Result<ExactRun, ExactError> {
    let model = ExactModel::build(problem)?;
    if u0.len() != model.n {
        return Err(ExactError::StateLength { expected: model.n, got: u0.len() });
    }
    if !(horizon > 0.0) {
        return Err(ExactError::BadHorizon(horizon));
    }
    let event_limit = 10 * model.n * model.edge_count;
    let (mut mode, mut u, _) = minimal_section_mode(&model, u0);
    let mut t = 0.0;
    let mut segments: Vec<Segment> = Vec::new();
    let mut events: Vec<Event> = Vec::new();
    loop {
        let reduced = build_reduced(&model, &mode);
        let c0: Vec<f64> = mode.clusters.iter().map(|members| u[members[0]]).collect();
        let dynamics = if reduced.is_affine {
            Dynamics::Affine(AffineFlow::new(&reduced, &c0, t))
        } else {
            let mut rhs = |_t: f64, c: &[f64], out: &mut [f64]| reduced.rhs(c, out);
            Dynamics::Numeric(integrate_dense(&mut rhs, t, &c0, horizon, 1e-10, 1e-12)?)
        };
        let mut seg = Segment {
            t_start: t,
            t_end: horizon,
            mode: mode.clone(),
            terminal: TerminalKind::Horizon,
            reduced,
            dynamics,
        };
        if let Some((t_hit, kind)) = find_event(&model, &seg) {
            if t_hit < horizon - 1e-12 * horizon.max(1.0) {
                seg.t_end = t_hit;
                seg.terminal = kind;
            }
        }
        let t_end = seg.t_end;
        let terminal = seg.terminal;
        let state = seg.eval_state(t_end);
        segments.push(seg);
        if terminal == TerminalKind::Horizon {
            break;
        }
        let (new_mode, new_u, _) = minimal_section_mode(&model, &state);
        let (merged, split) = diff_modes(&model, &mode.sigma, &new_mode.sigma);
        if merged.is_empty() && split.is_empty() {
            return Err(ExactError::ZeroProgress { t: t_end });
        }
        if !merged.is_empty() {
            events.push(Event {
                t: t_end,
                kind: EventKind::Merge,
                pairs: merged,
                state: new_u.clone(),
            });
        }
        if !split.is_empty() {
            events.push(Event {
                t: t_end,
                kind: EventKind::Split,
                pairs: split,
                state: new_u.clone(),
            });
        }
        if events.len() > event_limit {
            return Err(ExactError::CyclingGuard { limit: event_limit });
        }
        mode = new_mode;
        u = new_u;
        t = t_end;
    }
    Ok(ExactRun {
        segments,
        events,
        tv_pairs: model.tv.iter().map(|tv| (tv.i, tv.j)).collect(),
        horizon,
        omega: model.omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Growth, TwoStructureProblem};
    use crate::space::RandomWalkSpace;

    fn path3_tv_p2() -> Problem {
        let s = RandomWalkSpace::from_weighted_graph(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        Problem::TwoStructure(
            TwoStructureProblem::new(s.clone(), s, Growth::TotalVariation, Growth::Power(2.0))
                .unwrap(),
        )
    }

    #[test]
    fn initial_mode_clusters_equal_tail() {
        let p = path3_tv_p2();
        let (mode, u_dot) = mode_from_state(&p, &[1.0, 0.0, 0.0]).unwrap();
        // Pair (0,1) strict negative, pair (1,2) glued.
        assert_eq!(mode.sigma, vec![-1, 0]);
        assert_eq!(mode.cluster_of[1], mode.cluster_of[2]);
        assert_ne!(mode.cluster_of[0], mode.cluster_of[1]);
        assert!((u_dot[0] + 2.0).abs() < 1e-9, "{u_dot:?}");
        assert!((u_dot[1] - 2.0 / 3.0).abs() < 1e-9);
        assert!((u_dot[2] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_mode_is_single_cluster() {
        let p = path3_tv_p2();
        let (mode, u_dot) = mode_from_state(&p, &[0.25, 0.25, 0.25]).unwrap();
        assert_eq!(mode.clusters.len(), 1);
        assert!(u_dot.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn reduced_system_case_a() {
        let p = path3_tv_p2();
        let u = [1.0, 0.0, 0.0];
        let (mode, _) = mode_from_state(&p, &u).unwrap();
        let reduced = reduced_system(&p, &mode, &u).unwrap();
        assert_eq!(reduced.dim(), 2);
        let mut out = vec![0.0; 2];
        let c = [1.0, 0.0]; // singleton {0}, cluster {1,2}
        reduced.rhs(&c, &mut out);
        // x' = -1 + (y - x) = -2 ; 3 y' = 1 + (x - y) = 2.
        let (ix, iy) = if mode.cluster_of[0] == 0 { (0, 1) } else { (1, 0) };
        assert!((out[ix] + 2.0).abs() < 1e-12);
        assert!((out[iy] - 2.0 / 3.0).abs() < 1e-12);
        assert!(reduced.is_affine);
    }

    #[test]
    fn inconsistent_mode_rejected() {
        let p = path3_tv_p2();
        let u = [1.0, 0.0, 0.0];
        let (mode, _) = mode_from_state(&p, &u).unwrap();
        assert!(matches!(
            reduced_system(&p, &mode, &[1.0, 0.0, 0.5]),
            Err(ExactError::InconsistentMode { .. })
        ));
    }

    #[test]
    fn case_a_merge_time_and_equilibrium() {
        let p = path3_tv_p2();
        let run = integrate_exact(&p, &[1.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(run.events.len(), 1);
        let t1 = 0.75 * 2.0f64.ln();
        assert!((run.events[0].t - t1).abs() < 1e-10, "t = {}", run.events[0].t);
        assert_eq!(run.events[0].kind, EventKind::Merge);
        for v in run.final_state() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // Closed form before the merge.
        let t = 0.3;
        let u = run.eval(t);
        assert!((u[0] - (1.5 * (-4.0 * t / 3.0).exp() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn internal_dual_matches_closed_form() {
        let p = path3_tv_p2();
        let run = integrate_exact(&p, &[1.0, 0.0, 0.0], 1.0).unwrap();
        let seg = &run.segments[0];
        let t = 0.2;
        let duals = recover_internal_g(
            &p,
            &seg.mode,
            &seg.eval_state(t),
            &seg.cluster_derivative(t),
        )
        .unwrap();
        assert!(duals.feasible);
        let expected = -(2.0 / 3.0) * (-4.0 * t / 3.0).exp();
        assert_eq!(duals.clusters.len(), 1);
        assert_eq!(duals.clusters[0].pairs, vec![(1, 2)]);
        assert!((duals.clusters[0].g[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn no_tv_structure_is_rejected() {
        let s = RandomWalkSpace::from_weighted_graph(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let p = Problem::TwoStructure(
            TwoStructureProblem::new(s.clone(), s, Growth::Power(2.0), Growth::Power(2.0))
                .unwrap(),
        );
        assert!(matches!(
            integrate_exact(&p, &[1.0, 0.0], 1.0),
            Err(ExactError::NoTvStructure)
        ));
    }

    #[test]
    fn constant_initial_state_has_no_events() {
        let p = path3_tv_p2();
        let run = integrate_exact(&p, &[0.5, 0.5, 0.5], 2.0).unwrap();
        assert!(run.events.is_empty());
        assert_eq!(run.segments.len(), 1);
        for v in run.final_state() {
            assert!((v - 0.5).abs() < 1e-14);
        }
    }
}
