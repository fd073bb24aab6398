//! Implicit Euler integration of `u_t ∈ -∂F(u) + f` and the trajectory-level
//! checks: mass conservation, the comparison/contraction principle, decay
//! bounds driven by Poincaré constants, and extinction detection.

use crate::cert::SubgradientCertificate;
use crate::problem::Problem;
use crate::prox::{ProxError, ProxSolver};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow grid invalid: need 0 < h <= T, got h={h}, T={horizon}")]
    InvalidGrid { h: f64, horizon: f64 },
    #[error("initial state has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("source sample {step} has length {got}, expected {expected}")]
    SourceLength { step: usize, expected: usize, got: usize },
    #[error("source samples exhausted at step {step}")]
    SourceExhausted { step: usize },
    #[error("prox failed at step {step} (t = {t}): {source}")]
    Prox {
        step: usize,
        t: f64,
        #[source]
        source: ProxError,
    },
    #[error("trajectories do not share a time grid")]
    GridMismatch,
}

/// Right-hand side forcing, sampled at the left endpoint of each step.
#[derive(Debug, Clone, Default)]
pub enum Source {
    #[default]
    Zero,
    Constant(Vec<f64>),
    /// One sample per step, indexed by step number.
    Samples(Vec<Vec<f64>>),
}

impl Source {
    fn sample(&self, step: usize, n: usize) -> Result<Option<Vec<f64>>, FlowError> {
        match self {
            Source::Zero => Ok(None),
            Source::Constant(f) => {
                if f.len() != n {
                    return Err(FlowError::SourceLength { step, expected: n, got: f.len() });
                }
                Ok(Some(f.clone()))
            }
            Source::Samples(all) => {
                let f = all.get(step).ok_or(FlowError::SourceExhausted { step })?;
                if f.len() != n {
                    return Err(FlowError::SourceLength { step, expected: n, got: f.len() });
                }
                Ok(Some(f.clone()))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Source::Zero)
    }
}

#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub problem: Problem,
    pub u0: Vec<f64>,
    pub source: Source,
    pub horizon: f64,
    pub step: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Diagnostics {
    pub mass: f64,
    pub energy: f64,
    pub dist_mean_l1: f64,
    pub dist_mean_l2: f64,
}

/// Time-stamped states with per-step certificates and derived diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// One certificate per step (`times.len() - 1` entries).
    pub certificates: Vec<SubgradientCertificate>,
    pub diagnostics: Vec<Diagnostics>,
    /// Source sampled at the left endpoint of each step, when present.
    pub source_samples: Option<Vec<Vec<f64>>>,
    /// Base measure (nu_1), kept so norm checks need no problem object.
    pub omega: Vec<f64>,
    pub solver_tol: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn total_measure(&self) -> f64 {
        self.omega.iter().sum()
    }

    pub fn mass(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.omega).map(|(u, w)| u * w).sum()
    }

    pub fn lq_norm(&self, u: &[f64], q: f64) -> f64 {
        if q.is_infinite() {
            return u.iter().fold(0.0, |a, v| a.max(v.abs()));
        }
        u.iter()
            .zip(&self.omega)
            .map(|(u, w)| u.abs().powf(q) * w)
            .sum::<f64>()
            .powf(1.0 / q)
    }

    fn dist_to_initial_mean(&self, u: &[f64], q: f64) -> f64 {
        let mean = self.mass(&self.states[0]) / self.total_measure();
        let centered: Vec<f64> = u.iter().map(|v| v - mean).collect();
        self.lq_norm(&centered, q)
    }
}

pub(crate) fn diagnostics_for(problem: &Problem, u: &[f64]) -> Diagnostics {
    let space = problem.base_space();
    Diagnostics {
        mass: space.mass(u),
        energy: problem.model().eval_energy(u),
        dist_mean_l1: space.distance_to_mean(u, 1.0),
        dist_mean_l2: space.distance_to_mean(u, 2.0),
    }
}

/// Integrate by implicit Euler: `u^{k+1} = prox(lambda = h, u^k + h f(t_k))`.
pub fn implicit_euler(fp: &FlowProblem) -> Result<Trajectory, FlowError> {
    let n = fp.problem.len();
    if fp.u0.len() != n {
        return Err(FlowError::StateLength { expected: n, got: fp.u0.len() });
    }
    if !(fp.step > 0.0) || !(fp.horizon > 0.0) || fp.step > fp.horizon {
        return Err(FlowError::InvalidGrid { h: fp.step, horizon: fp.horizon });
    }
    let counts: Vec<usize> = (0..fp.problem.model().terms().len())
        .map(|t| fp.problem.structure_space(t).pair_count())
        .collect();
    let mut solver = ProxSolver::new(fp.problem.model(), counts);

    let mut times = vec![0.0];
    let mut states = vec![fp.u0.clone()];
    let mut certificates = Vec::new();
    let mut diagnostics = vec![diagnostics_for(&fp.problem, &fp.u0)];
    let mut source_samples = if fp.source.is_zero() { None } else { Some(Vec::new()) };

    let mut t = 0.0;
    let mut step = 0usize;
    let mut u = fp.u0.clone();
    while t < fp.horizon - 1e-12 * fp.horizon {
        let h = fp.step.min(fp.horizon - t);
        let f = fp.source.sample(step, n)?;
        let mut v = u.clone();
        if let Some(f) = &f {
            for (vx, fx) in v.iter_mut().zip(f) {
                *vx += h * fx;
            }
        }
        let sol = solver
            .solve(&v, h, fp.tol)
            .map_err(|source| FlowError::Prox { step, t, source })?;
        u = sol.u;
        t += h;
        times.push(t);
        states.push(u.clone());
        certificates.push(sol.certificate);
        diagnostics.push(diagnostics_for(&fp.problem, &u));
        if let Some(samples) = &mut source_samples {
            samples.push(f.unwrap_or_else(|| vec![0.0; n]));
        }
        step += 1;
    }
    Ok(Trajectory {
        times,
        states,
        certificates,
        diagnostics,
        source_samples,
        omega: fp.problem.model().omega().to_vec(),
        solver_tol: fp.tol,
    })
}

#[derive(Debug, Clone)]
pub struct ContractionReport {
    /// Worst `lhs - rhs` over the grid; nonpositive means the estimate held
    /// with room to spare.
    pub max_slack: f64,
    pub q: f64,
}

/// Check the order-contraction estimate
/// `||(u - u~)(t)^+||_q <= ||(u0 - u~0)^+||_q + sum h ||(f - f~)^+||_q`
/// on a shared grid.
pub fn check_contraction(
    a: &Trajectory,
    b: &Trajectory,
    q: f64,
) -> Result<ContractionReport, FlowError> {
    if a.times.len() != b.times.len()
        || a.times
            .iter()
            .zip(&b.times)
            .any(|(x, y)| (x - y).abs() > 1e-12 * (1.0 + x.abs()))
        || a.omega != b.omega
    {
        return Err(FlowError::GridMismatch);
    }
    let n = a.omega.len();
    let pos_part = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(x, y)| (x - y).max(0.0)).collect()
    };
    let zeros = vec![0.0; n];
    let mut rhs = a.lq_norm(&pos_part(&a.states[0], &b.states[0]), q);
    let mut max_slack = f64::NEG_INFINITY;
    for k in 0..a.times.len() {
        let lhs = a.lq_norm(&pos_part(&a.states[k], &b.states[k]), q);
        max_slack = max_slack.max(lhs - rhs);
        if k + 1 < a.times.len() {
            let h = a.times[k + 1] - a.times[k];
            let fa = a
                .source_samples
                .as_ref()
                .map_or(zeros.as_slice(), |s| s[k].as_slice());
            let fb = b
                .source_samples
                .as_ref()
                .map_or(zeros.as_slice(), |s| s[k].as_slice());
            rhs += h * a.lq_norm(&pos_part(fa, fb), q);
        }
    }
    Ok(ContractionReport { max_slack, q })
}

#[derive(Debug, Clone, Copy)]
pub struct ConservationReport {
    pub initial_mass: f64,
    pub max_drift: f64,
}

/// Largest deviation of the nu_1-mass from its initial value.
pub fn conservation_report(traj: &Trajectory) -> ConservationReport {
    let m0 = traj.mass(&traj.states[0]);
    let max_drift = traj
        .states
        .iter()
        .map(|u| (traj.mass(u) - m0).abs())
        .fold(0.0, f64::max);
    ConservationReport { initial_mass: m0, max_drift }
}

/// Smallest grid time from which `||u(t) - mean(u0)||_{L^2(nu_1)} <= eps`
/// holds for every remaining sample; `None` if the tail never settles.
pub fn extinction_time(traj: &Trajectory, eps: f64) -> Option<f64> {
    let mut first_settled = None;
    for (k, u) in traj.states.iter().enumerate() {
        if traj.dist_to_initial_mean(u, 2.0) <= eps {
            if first_settled.is_none() {
                first_settled = Some(k);
            }
        } else {
            first_settled = None;
        }
    }
    first_settled.map(|k| traj.times[k])
}

/// Which Poincaré-driven bound to check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayMode {
    /// `||u(t) - mean||_{L^1} <= ||u0||^2_{L^2} / (2 lambda t)`.
    OnePoincare,
    /// `||u(t) - mean||_{L^2} <= (||u0 - mean||_{L^2} - lambda t)^+`.
    TwoPoincare,
    /// Integrated (q,2) bound: for q < 2,
    /// `d(t)^{2-q} <= (d(0)^{2-q} - q (2-q) lambda t)^+`; for q = 2 the
    /// exponential bound `d(t) <= d(0) exp(-2 lambda t)`.
    QTwoPoincare { q: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct DecayReport {
    pub max_violation: f64,
    pub pass: bool,
}

/// Verify the decay bound pointwise on the grid with the given slack.
pub fn decay_bound_check(
    traj: &Trajectory,
    lambda: f64,
    mode: DecayMode,
    slack: f64,
) -> DecayReport {
    let d0 = traj.dist_to_initial_mean(&traj.states[0], 2.0);
    let u0_l2 = traj.lq_norm(&traj.states[0], 2.0);
    let mut max_violation: f64 = 0.0;
    for (k, u) in traj.states.iter().enumerate() {
        let t = traj.times[k];
        let violation = match mode {
            DecayMode::OnePoincare => {
                if t <= 0.0 {
                    continue;
                }
                traj.dist_to_initial_mean(u, 1.0) - u0_l2 * u0_l2 / (2.0 * lambda * t)
            }
            DecayMode::TwoPoincare => {
                traj.dist_to_initial_mean(u, 2.0) - (d0 - lambda * t).max(0.0)
            }
            DecayMode::QTwoPoincare { q } => {
                let d = traj.dist_to_initial_mean(u, 2.0);
                if (q - 2.0).abs() < 1e-12 {
                    d - d0 * (-2.0 * lambda * t).exp()
                } else {
                    d.powf(2.0 - q) - (d0.powf(2.0 - q) - q * (2.0 - q) * lambda * t).max(0.0)
                }
            }
        };
        max_violation = max_violation.max(violation);
    }
    DecayReport { max_violation, pass: max_violation <= slack }
}

/// Largest per-step energy increase (zero on a dissipating trajectory).
pub fn max_energy_increase(traj: &Trajectory) -> f64 {
    traj.diagnostics
        .windows(2)
        .map(|w| w[1].energy - w[0].energy)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Growth, TwoStructureProblem};
    use crate::space::RandomWalkSpace;

    fn path3_problem() -> Problem {
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
    fn constant_state_stays_constant() {
        let fp = FlowProblem {
            problem: path3_problem(),
            u0: vec![0.7, 0.7, 0.7],
            source: Source::Zero,
            horizon: 0.5,
            step: 0.05,
            tol: 1e-10,
        };
        let traj = implicit_euler(&fp).unwrap();
        for u in &traj.states {
            for &v in u {
                assert!((v - 0.7).abs() < 1e-9);
            }
        }
        assert_eq!(extinction_time(&traj, 1e-8), Some(0.0));
    }

    #[test]
    fn grid_validation() {
        let fp = FlowProblem {
            problem: path3_problem(),
            u0: vec![0.0; 3],
            source: Source::Zero,
            horizon: 0.5,
            step: 0.6,
            tol: 1e-8,
        };
        assert!(matches!(implicit_euler(&fp), Err(FlowError::InvalidGrid { .. })));
    }

    #[test]
    fn mass_is_conserved_without_source() {
        let fp = FlowProblem {
            problem: path3_problem(),
            u0: vec![1.0, 0.0, 0.0],
            source: Source::Zero,
            horizon: 1.0,
            step: 0.01,
            tol: 1e-9,
        };
        let traj = implicit_euler(&fp).unwrap();
        let report = conservation_report(&traj);
        assert!((report.initial_mass - 1.0).abs() < 1e-12);
        assert!(report.max_drift < 1e-7, "drift {}", report.max_drift);
        assert!(max_energy_increase(&traj) <= 1e-9);
    }

    #[test]
    fn identical_inputs_contract_trivially() {
        let fp = FlowProblem {
            problem: path3_problem(),
            u0: vec![1.0, 0.0, 0.0],
            source: Source::Zero,
            horizon: 0.2,
            step: 0.02,
            tol: 1e-9,
        };
        let t1 = implicit_euler(&fp).unwrap();
        let t2 = implicit_euler(&fp).unwrap();
        for q in [1.0, 2.0, f64::INFINITY] {
            let r = check_contraction(&t1, &t2, q).unwrap();
            assert!(r.max_slack <= 1e-12);
        }
    }

    #[test]
    fn decay_trivial_when_started_at_mean() {
        let fp = FlowProblem {
            problem: path3_problem(),
            u0: vec![0.25, 0.25, 0.25],
            source: Source::Zero,
            horizon: 0.2,
            step: 0.02,
            tol: 1e-9,
        };
        let traj = implicit_euler(&fp).unwrap();
        for mode in [
            DecayMode::OnePoincare,
            DecayMode::TwoPoincare,
            DecayMode::QTwoPoincare { q: 1.5 },
            DecayMode::QTwoPoincare { q: 2.0 },
        ] {
            assert!(decay_bound_check(&traj, 1.0, mode, 1e-10).pass);
        }
    }
}
