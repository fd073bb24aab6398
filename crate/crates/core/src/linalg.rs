//! Small dense solves behind the exact integrator: box-constrained least
//! squares for minimal-section duals, min-norm consistency solves, and
//! feasibility projections. Sizes are desk scale (clusters of a few dozen
//! vertices at most), so SVD-based routines are the robust choice.

use nalgebra::{DMatrix, DVector};

/// Signed incidence column of one unknown edge: +1 at `i`, -1 at `j`.
#[derive(Debug, Clone, Copy)]
pub struct UnknownEdge {
    pub i: usize,
    pub j: usize,
    pub bound: f64,
}

/// Minimize `sum_x (r_x + sum_e C[x,e] z_e)^2 / omega_x` over `|z_e| <= bound_e`
/// by cyclic coordinate descent with exact per-coordinate minimization.
///
/// The objective is a convex quadratic over a box; the residual vector is the
/// vertex drift, so the minimizer is the minimal-section derivative field.
pub fn box_constrained_drift(
    edges: &[UnknownEdge],
    r: &[f64],
    omega: &[f64],
    z0: Option<&[f64]>,
) -> Vec<f64> {
    let mut z: Vec<f64> = match z0 {
        Some(z0) => z0.to_vec(),
        None => vec![0.0; edges.len()],
    };
    for (e, zv) in edges.iter().zip(z.iter_mut()) {
        *zv = zv.clamp(-e.bound, e.bound);
    }
    let mut res = r.to_vec();
    for (e, &zv) in edges.iter().zip(z.iter()) {
        res[e.i] += zv;
        res[e.j] -= zv;
    }
    for _sweep in 0..50_000 {
        let mut max_change: f64 = 0.0;
        for (e, zv) in edges.iter().zip(z.iter_mut()) {
            let wi = 1.0 / omega[e.i];
            let wj = 1.0 / omega[e.j];
            let base_i = res[e.i] - *zv;
            let base_j = res[e.j] + *zv;
            let new = ((base_j * wj - base_i * wi) / (wi + wj)).clamp(-e.bound, e.bound);
            let delta = new - *zv;
            if delta != 0.0 {
                res[e.i] += delta;
                res[e.j] -= delta;
                max_change = max_change.max(delta.abs());
                *zv = new;
            }
        }
        if max_change <= 1e-15 {
            break;
        }
    }
    z
}

/// Min-norm least squares solution of `A z = b` via SVD, with the residual
/// norm of the returned solution.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1.0);
    let z = svd.solve(b, eps).expect("svd solve");
    let resid = (a * &z - b).norm();
    (z, resid)
}

/// Find a point in `{A z = b} ∩ {|z_e| <= bound_e}` by alternating
/// projections, or report infeasibility. `A z = b` must be consistent.
pub fn alternating_feasibility(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    bounds: &[f64],
    start: &DVector<f64>,
    tol: f64,
) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1.0);
    let mut z = start.clone();
    for _ in 0..2_000 {
        // Project onto the affine set.
        let defect = a * &z - b;
        let corr = svd.solve(&defect, eps).expect("svd solve");
        z -= corr;
        // Project onto the box.
        let mut clipped = false;
        for (zv, &bound) in z.iter_mut().zip(bounds) {
            let c = zv.clamp(-bound, bound);
            if c != *zv {
                clipped = true;
                *zv = c;
            }
        }
        if !clipped || (a * &z - b).norm() <= tol {
            break;
        }
    }
    // One final affine correction followed by a box check.
    let defect = a * &z - b;
    let corr = svd.solve(&defect, eps).expect("svd solve");
    z -= corr;
    let inside = z.iter().zip(bounds).all(|(zv, &bound)| zv.abs() <= bound + tol);
    if inside && (a * &z - b).norm() <= tol {
        for (zv, &bound) in z.iter_mut().zip(bounds) {
            *zv = zv.clamp(-bound, bound);
        }
        Some(z)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_descent_matches_interior_optimum() {
        // One unknown edge between two vertices, generous bound: the optimum
        // equalizes the weighted residuals.
        let edges = [UnknownEdge { i: 0, j: 1, bound: 10.0 }];
        let z = box_constrained_drift(&edges, &[-2.0, 0.8], &[2.0, 1.0], None);
        // Minimize (z-2)^2/2 + (0.8-z)^2: derivative (z-2) + 2(z-0.8) = 0.
        assert!((z[0] - 1.2).abs() < 1e-12, "{z:?}");
    }

    #[test]
    fn coordinate_descent_clamps_at_bound() {
        let edges = [UnknownEdge { i: 0, j: 1, bound: 1.0 }];
        let z = box_constrained_drift(&edges, &[-11.0, 11.0], &[1.0, 2.0], None);
        assert_eq!(z[0], 1.0);
    }

    #[test]
    fn min_norm_underdetermined() {
        // One equation, two unknowns: min-norm splits evenly.
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_row_slice(&[2.0]);
        let (z, resid) = min_norm_solve(&a, &b);
        assert!(resid < 1e-12);
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feasibility_found_when_min_norm_violates() {
        // z1 + z2 = 1.8 with |z1| <= 1, |z2| <= 1: min-norm (0.9, 0.9) is
        // feasible; shrink the first bound so it is not.
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_row_slice(&[1.8]);
        let start = DVector::from_row_slice(&[0.9, 0.9]);
        let z = alternating_feasibility(&a, &b, &[0.85, 1.0], &start, 1e-11).unwrap();
        assert!(z[0].abs() <= 0.85 + 1e-10);
        assert!(((z[0] + z[1]) - 1.8).abs() < 1e-9);
    }

    #[test]
    fn feasibility_reports_empty_intersection() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_row_slice(&[3.0]);
        let start = DVector::from_row_slice(&[0.0, 0.0]);
        assert!(alternating_feasibility(&a, &b, &[1.0, 1.0], &start, 1e-11).is_none());
    }
}
