//! Subgradient certificates: the dual fields witnessing that a vector lies in
//! the subdifferential of the energy at a state.
//!
//! For a total-variation structure the witness is an antisymmetric `g` with
//! `|g| <= 1` and `g in sign(grad u)` wherever the structure's kernel weight
//! is positive; for a power structure it is the explicit flux
//! `|grad u|^{p-2} grad u`. Set-valued optimality is only testable through
//! these fields, so the prox solver returns them with every solution.

use crate::problem::EdgeWeights;
use crate::space::{EdgeField, RandomWalkSpace};

#[derive(Debug, Clone)]
pub enum CertPart {
    /// TV dual field on the structure's space, `|g| <= 1` enforced exactly.
    Tv { g: EdgeField },
    /// Power-structure flux `|grad u|^{p-2} grad u`.
    Power { flux: EdgeField },
}

/// Dual witness that `(v - u)/lambda` belongs to the subdifferential at `u`,
/// together with the measured optimality defects.
#[derive(Debug, Clone)]
pub struct SubgradientCertificate {
    /// One part per structure, in model order.
    pub parts: Vec<CertPart>,
    /// nu_1-weighted L2 norm of the stationarity defect.
    pub stationarity: f64,
    /// Worst per-edge defect of `g * grad u = |grad u|` over TV structures.
    pub complementarity: f64,
}

impl SubgradientCertificate {
    pub fn tv_part(&self, term: usize) -> Option<&EdgeField> {
        match self.parts.get(term) {
            Some(CertPart::Tv { g }) => Some(g),
            _ => None,
        }
    }
}

/// Report of the three clauses of the TV subdifferential characterisation.
#[derive(Debug, Clone, Copy, Default)]
pub struct TvCheckReport {
    /// max(|g| - 1, 0) over the support.
    pub bound_violation: f64,
    /// max_x |v(x) + sum_y g(x,y) K(x,y) M[x][y]|.
    pub divergence_violation: f64,
    /// max over pairs with K > 0 of | g * grad u - |grad u| |.
    pub complementarity_violation: f64,
}

impl TvCheckReport {
    pub fn max_violation(&self) -> f64 {
        self.bound_violation
            .max(self.divergence_violation)
            .max(self.complementarity_violation)
    }
}

/// Verify a TV certificate clause by clause; report-only, never fails.
///
/// `weights` is the structure's kernel weight (`None` means identically 1);
/// `v` is the subgradient element the certificate claims for this structure.
pub fn tv_certificate_check(
    space: &RandomWalkSpace,
    weights: Option<&EdgeWeights>,
    u: &[f64],
    v: &[f64],
    g: &EdgeField,
) -> TvCheckReport {
    let mut report = TvCheckReport::default();
    let mut div = vec![0.0; space.len()];
    for (pair, &(i, j)) in space.pairs().iter().enumerate() {
        let k = weights.map_or(1.0, |w| w.values()[pair]);
        let gv = g.values()[pair];
        if k > 0.0 {
            report.bound_violation = report.bound_violation.max(gv.abs() - 1.0).max(0.0);
            let du = u[j] - u[i];
            if du != 0.0 {
                report.complementarity_violation =
                    report.complementarity_violation.max((gv * du - du.abs()).abs());
            }
        }
        div[i] += gv * k * space.kernel(i, j);
        div[j] -= gv * k * space.kernel(j, i);
    }
    for x in 0..space.len() {
        report.divergence_violation = report.divergence_violation.max((v[x] + div[x]).abs());
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_vertex() -> RandomWalkSpace {
        RandomWalkSpace::from_weighted_graph(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    #[test]
    fn zero_certificate_for_constant_state() {
        let s = two_vertex();
        let g = EdgeField::zeros(&s);
        let r = tv_certificate_check(&s, None, &[2.0, 2.0], &[0.0, 0.0], &g);
        assert_eq!(r.max_violation(), 0.0);
    }

    #[test]
    fn valid_certificate_two_vertex() {
        let s = two_vertex();
        let mut g = EdgeField::zeros(&s);
        g.set(&s, 0, 1, 1.0);
        let r = tv_certificate_check(&s, None, &[0.0, 1.0], &[-1.0, 1.0], &g);
        assert_eq!(r.max_violation(), 0.0);
    }

    #[test]
    fn sign_mismatch_reports_two() {
        let s = two_vertex();
        let mut g = EdgeField::zeros(&s);
        g.set(&s, 0, 1, -1.0);
        let r = tv_certificate_check(&s, None, &[0.0, 1.0], &[1.0, -1.0], &g);
        assert_eq!(r.complementarity_violation, 2.0);
        assert_eq!(r.divergence_violation, 0.0);
    }
}
