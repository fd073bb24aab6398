//! Finite reversible random walk spaces and the nonlocal calculus on them.
//!
//! A space is a finite state set `{0, .., n-1}` with a row-stochastic kernel
//! `M` (`M[x][y]` is the mass the walk at `x` puts on `y`) and a positive
//! measure `nu` satisfying detailed balance `nu[x] M[x][y] = nu[y] M[y][x]`.
//! Weighted graphs and kernel-discretized boxes both construct into this one
//! type; everything downstream (energies, prox, flows) only sees it.

use thiserror::Error;

/// Row-stochasticity is checked to this absolute tolerance at construction.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Detailed balance is checked to this relative tolerance at construction.
pub const DETAILED_BALANCE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("vertex {0} has zero degree")]
    ZeroDegreeVertex(usize),
    #[error("weights are asymmetric at ({i},{j}): {wij} vs {wji}")]
    AsymmetricWeights { i: usize, j: usize, wij: f64, wji: f64 },
    #[error("negative weight at ({i},{j})")]
    NegativeWeight { i: usize, j: usize },
    #[error("kernel row {vertex} sums to {sum}, not 1")]
    RowSumNotOne { vertex: usize, sum: f64 },
    #[error("detailed balance fails at ({x},{y}): relative error {rel:.3e}")]
    DetailedBalance { x: usize, y: usize, rel: f64 },
    #[error("measure is not positive at vertex {0}")]
    NonPositiveMeasure(usize),
    #[error("negative kernel entry at ({x},{y})")]
    NegativeKernel { x: usize, y: usize },
    #[error("expected a vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("matrix is {rows}x{cols}, expected square of size {n}")]
    ShapeMismatch { rows: usize, cols: usize, n: usize },
    #[error("non-finite value at vertex {0}")]
    NonFinite(usize),
}

const NO_PAIR: usize = usize::MAX;

/// A finite reversible random walk space.
#[derive(Debug, Clone)]
pub struct RandomWalkSpace {
    n: usize,
    /// Row-major n*n transition kernel.
    kernel: Vec<f64>,
    /// Reversible measure, one positive entry per vertex.
    measure: Vec<f64>,
    /// Off-diagonal support stored once per unordered pair, i < j.
    pairs: Vec<(usize, usize)>,
    /// n*n lookup: pair index of (x,y), or NO_PAIR (diagonal and zero entries).
    pair_id: Vec<usize>,
    total_measure: f64,
}

impl RandomWalkSpace {
    /// Build a space from an explicit kernel and measure, validating all
    /// structural invariants (stochastic rows, positivity, detailed balance).
    pub fn new(kernel: Vec<Vec<f64>>, measure: Vec<f64>) -> Result<Self, SpaceError> {
        let n = measure.len();
        if kernel.len() != n || kernel.iter().any(|r| r.len() != n) {
            return Err(SpaceError::ShapeMismatch {
                rows: kernel.len(),
                cols: kernel.first().map_or(0, |r| r.len()),
                n,
            });
        }
        let mut flat = Vec::with_capacity(n * n);
        for row in &kernel {
            flat.extend_from_slice(row);
        }
        Self::from_flat(flat, measure)
    }

    fn from_flat(kernel: Vec<f64>, measure: Vec<f64>) -> Result<Self, SpaceError> {
        let n = measure.len();
        for (x, &m) in measure.iter().enumerate() {
            if !m.is_finite() {
                return Err(SpaceError::NonFinite(x));
            }
            if m <= 0.0 {
                return Err(SpaceError::NonPositiveMeasure(x));
            }
        }
        for x in 0..n {
            let mut sum = 0.0;
            for y in 0..n {
                let v = kernel[x * n + y];
                if !v.is_finite() || v < 0.0 {
                    return Err(SpaceError::NegativeKernel { x, y });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(SpaceError::RowSumNotOne { vertex: x, sum });
            }
        }
        for x in 0..n {
            for y in (x + 1)..n {
                let fwd = measure[x] * kernel[x * n + y];
                let bwd = measure[y] * kernel[y * n + x];
                let scale = fwd.abs().max(bwd.abs());
                if scale > 0.0 && (fwd - bwd).abs() > DETAILED_BALANCE_TOL * scale {
                    return Err(SpaceError::DetailedBalance {
                        x,
                        y,
                        rel: (fwd - bwd).abs() / scale,
                    });
                }
                // Detailed balance forces symmetric support; treat one-sided
                // entries below the tolerance floor as zero on both sides.
                if scale > 0.0 && (fwd == 0.0 || bwd == 0.0) {
                    return Err(SpaceError::DetailedBalance { x, y, rel: 1.0 });
                }
            }
        }
        let mut pairs = Vec::new();
        let mut pair_id = vec![NO_PAIR; n * n];
        for x in 0..n {
            for y in (x + 1)..n {
                if kernel[x * n + y] > 0.0 {
                    pair_id[x * n + y] = pairs.len();
                    pair_id[y * n + x] = pairs.len();
                    pairs.push((x, y));
                }
            }
        }
        let total_measure = measure.iter().sum();
        Ok(Self { n, kernel, measure, pairs, pair_id, total_measure })
    }

    /// Space of a weighted graph: `M[x][y] = w_xy / d_x`, `nu[x] = d_x`.
    ///
    /// Weights must be symmetric and nonnegative with every vertex of
    /// positive degree; loops (`w_xx > 0`) are allowed.
    pub fn from_weighted_graph(weights: &[Vec<f64>]) -> Result<Self, SpaceError> {
        let n = weights.len();
        for (i, row) in weights.iter().enumerate() {
            if row.len() != n {
                return Err(SpaceError::ShapeMismatch { rows: n, cols: row.len(), n });
            }
            for (j, &w) in row.iter().enumerate() {
                if !w.is_finite() || w < 0.0 {
                    return Err(SpaceError::NegativeWeight { i, j });
                }
                if (w - weights[j][i]).abs() > 0.0 {
                    return Err(SpaceError::AsymmetricWeights { i, j, wij: w, wji: weights[j][i] });
                }
            }
        }
        let mut kernel = vec![0.0; n * n];
        let mut measure = vec![0.0; n];
        for x in 0..n {
            let degree: f64 = weights[x].iter().sum();
            if degree <= 0.0 {
                return Err(SpaceError::ZeroDegreeVertex(x));
            }
            for y in 0..n {
                kernel[x * n + y] = weights[x][y] / degree;
            }
            measure[x] = degree;
        }
        Self::from_flat(kernel, measure)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Transition mass `m_x({y})`.
    pub fn kernel(&self, x: usize, y: usize) -> f64 {
        self.kernel[x * self.n + y]
    }

    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    pub fn total_measure(&self) -> f64 {
        self.total_measure
    }

    /// Off-diagonal support pairs, one entry per unordered pair, `i < j`.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Index of the unordered support pair containing (x,y), if any.
    pub fn pair_index(&self, x: usize, y: usize) -> Option<usize> {
        if x == y || x >= self.n || y >= self.n {
            return None;
        }
        match self.pair_id[x * self.n + y] {
            NO_PAIR => None,
            id => Some(id),
        }
    }

    fn check_len(&self, u: &[f64]) -> Result<(), SpaceError> {
        if u.len() != self.n {
            return Err(SpaceError::LengthMismatch { expected: self.n, got: u.len() });
        }
        if let Some(x) = u.iter().position(|v| !v.is_finite()) {
            return Err(SpaceError::NonFinite(x));
        }
        Ok(())
    }

    /// Nonlocal gradient `(x,y) -> u(y) - u(x)` on the support.
    pub fn nonlocal_gradient(&self, u: &[f64]) -> Result<EdgeField, SpaceError> {
        self.check_len(u)?;
        let values = self.pairs.iter().map(|&(i, j)| u[j] - u[i]).collect();
        Ok(EdgeField { values })
    }

    /// m-divergence of an antisymmetric edge field:
    /// `(div z)(x) = sum_y z(x,y) M[x][y]`.
    pub fn divergence(&self, z: &EdgeField) -> Result<Vec<f64>, SpaceError> {
        if z.values.len() != self.pairs.len() {
            return Err(SpaceError::LengthMismatch {
                expected: self.pairs.len(),
                got: z.values.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        for (id, &(i, j)) in self.pairs.iter().enumerate() {
            let v = z.values[id];
            out[i] += v * self.kernel(i, j);
            out[j] -= v * self.kernel(j, i);
        }
        Ok(out)
    }

    /// Absolute defect of the integration by parts identity
    /// `sum_x v div(z) nu + 1/2 sum_{x,y} z grad(v) nu M = 0`.
    pub fn integration_by_parts_residual(
        &self,
        v: &[f64],
        z: &EdgeField,
    ) -> Result<f64, SpaceError> {
        self.check_len(v)?;
        let div = self.divergence(z)?;
        let lhs: f64 = (0..self.n).map(|x| v[x] * div[x] * self.measure[x]).sum();
        let mut rhs = 0.0;
        for (id, &(i, j)) in self.pairs.iter().enumerate() {
            let zv = z.values[id];
            // Both orientations of the pair.
            rhs += zv * (v[j] - v[i]) * self.measure[i] * self.kernel(i, j);
            rhs += (-zv) * (v[i] - v[j]) * self.measure[j] * self.kernel(j, i);
        }
        Ok((lhs + 0.5 * rhs).abs())
    }

    /// m-interaction `L_m(A,B) = sum_{x in A} nu[x] m_x(B)`.
    pub fn interaction(&self, a: &[usize], b: &[usize]) -> f64 {
        let mut in_b = vec![false; self.n];
        for &y in b {
            in_b[y] = true;
        }
        let mut total = 0.0;
        for &x in a {
            let mut mass = 0.0;
            for y in 0..self.n {
                if in_b[y] {
                    mass += self.kernel(x, y);
                }
            }
            total += self.measure[x] * mass;
        }
        total
    }

    /// Whether the undirected support graph is connected.
    ///
    /// At finite scale with positive measure everywhere this is equivalent to
    /// m-connectedness: no two-set cover with vanishing interaction.
    pub fn is_m_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for y in 0..self.n {
                if !seen[y] && (self.kernel(x, y) > 0.0 || self.kernel(y, x) > 0.0) {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// `sum_x u(x) nu[x]`.
    pub fn mass(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.measure).map(|(u, m)| u * m).sum()
    }

    /// nu-mean of `u`.
    pub fn mean(&self, u: &[f64]) -> f64 {
        self.mass(u) / self.total_measure
    }

    /// `L^q(nu)` norm; `q = f64::INFINITY` gives the sup norm.
    pub fn lq_norm(&self, u: &[f64], q: f64) -> f64 {
        if q.is_infinite() {
            return u.iter().fold(0.0, |acc, v| acc.max(v.abs()));
        }
        let s: f64 = u
            .iter()
            .zip(&self.measure)
            .map(|(u, m)| u.abs().powf(q) * m)
            .sum();
        s.powf(1.0 / q)
    }

    /// `L^2(nu)` norm, the Hilbert norm the flows live in.
    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        let s: f64 = u.iter().zip(&self.measure).map(|(u, m)| u * u * m).sum();
        s.sqrt()
    }

    /// Distance to the nu-mean in `L^q(nu)`.
    pub fn distance_to_mean(&self, u: &[f64], q: f64) -> f64 {
        let mean = self.mean(u);
        let centered: Vec<f64> = u.iter().map(|v| v - mean).collect();
        self.lq_norm(&centered, q)
    }
}

/// An antisymmetric function on the off-diagonal support of a space.
///
/// One value is stored per unordered pair (orientation `i < j`); reading the
/// reverse orientation negates it, so antisymmetry is structural rather than
/// numeric. Loops carry no value (antisymmetry forces zero there).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    values: Vec<f64>,
}

impl EdgeField {
    pub fn zeros(space: &RandomWalkSpace) -> Self {
        Self { values: vec![0.0; space.pair_count()] }
    }

    /// Internal constructor from values already in pair order.
    pub(crate) fn raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Build from a function of the oriented pair `(i, j)` with `i < j`.
    pub fn from_fn(space: &RandomWalkSpace, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self { values: space.pairs().iter().map(|&(i, j)| f(i, j)).collect() }
    }

    pub fn from_values(space: &RandomWalkSpace, values: Vec<f64>) -> Result<Self, SpaceError> {
        if values.len() != space.pair_count() {
            return Err(SpaceError::LengthMismatch {
                expected: space.pair_count(),
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    /// Signed value at the ordered pair (x,y); zero off support and on loops.
    pub fn get(&self, space: &RandomWalkSpace, x: usize, y: usize) -> f64 {
        match space.pair_index(x, y) {
            None => 0.0,
            Some(id) => {
                if x < y {
                    self.values[id]
                } else {
                    -self.values[id]
                }
            }
        }
    }

    pub fn set(&mut self, space: &RandomWalkSpace, x: usize, y: usize, value: f64) {
        if let Some(id) = space.pair_index(x, y) {
            self.values[id] = if x < y { value } else { -value };
        }
    }

    /// Values in pair order (orientation `i < j`).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3(a: f64, b: f64) -> RandomWalkSpace {
        let w = vec![
            vec![0.0, a, 0.0],
            vec![a, 0.0, b],
            vec![0.0, b, 0.0],
        ];
        RandomWalkSpace::from_weighted_graph(&w).unwrap()
    }

    #[test]
    fn three_vertex_path_measure_and_kernel() {
        let s = path3(1.0, 1.0);
        assert_eq!(s.measure(), &[1.0, 2.0, 1.0]);
        assert_eq!(s.kernel(1, 0), 0.5);
        assert_eq!(s.kernel(1, 1), 0.0);
        assert_eq!(s.kernel(1, 2), 0.5);
        assert_eq!(s.kernel(0, 1), 1.0);
    }

    #[test]
    fn two_vertex_graph() {
        let s = RandomWalkSpace::from_weighted_graph(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(s.measure(), &[1.0, 1.0]);
        assert_eq!(s.kernel(0, 1), 1.0);
        assert_eq!(s.kernel(1, 0), 1.0);
    }

    #[test]
    fn four_cycle_unit_weights() {
        let mut w = vec![vec![0.0; 4]; 4];
        for &(i, j) in &[(0usize, 1usize), (1, 2), (2, 3), (3, 0)] {
            w[i][j] = 1.0;
            w[j][i] = 1.0;
        }
        let s = RandomWalkSpace::from_weighted_graph(&w).unwrap();
        assert_eq!(s.measure(), &[2.0, 2.0, 2.0, 2.0]);
        for x in 0..4 {
            let row: Vec<f64> = (0..4).map(|y| s.kernel(x, y)).collect();
            assert_eq!(row.iter().filter(|&&v| v == 0.5).count(), 2);
        }
    }

    #[test]
    fn zero_degree_vertex_is_named() {
        let w = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]];
        match RandomWalkSpace::from_weighted_graph(&w) {
            Err(SpaceError::ZeroDegreeVertex(2)) => {}
            other => panic!("expected zero-degree error for vertex 2, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_weights_rejected() {
        let w = vec![vec![0.0, 1.0], vec![0.5, 0.0]];
        assert!(matches!(
            RandomWalkSpace::from_weighted_graph(&w),
            Err(SpaceError::AsymmetricWeights { .. })
        ));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let s = path3(1.0, 1.0);
        let g = s.nonlocal_gradient(&[3.5, 3.5, 3.5]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_values_and_antisymmetry() {
        let s = path3(1.0, 1.0);
        let g = s.nonlocal_gradient(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.get(&s, 0, 1), -1.0);
        assert_eq!(g.get(&s, 1, 0), 1.0);
        assert_eq!(g.get(&s, 1, 2), 0.0);
        // Off-support pair reads as zero.
        assert_eq!(g.get(&s, 0, 2), 0.0);
    }

    #[test]
    fn gradient_length_mismatch() {
        let s = path3(1.0, 1.0);
        assert!(matches!(
            s.nonlocal_gradient(&[1.0, 2.0]),
            Err(SpaceError::LengthMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn divergence_single_edge() {
        let s = RandomWalkSpace::from_weighted_graph(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut z = EdgeField::zeros(&s);
        z.set(&s, 0, 1, 1.0);
        let div = s.divergence(&z).unwrap();
        assert_eq!(div, vec![1.0, -1.0]);
    }

    #[test]
    fn interaction_on_path() {
        let s = path3(1.0, 1.0);
        // Non-adjacent singletons do not interact.
        assert_eq!(s.interaction(&[0], &[2]), 0.0);
        // nu(0) * M[0][1] = 1.
        assert_eq!(s.interaction(&[0], &[1]), 1.0);
    }

    #[test]
    fn connectivity() {
        assert!(path3(1.0, 1.0).is_m_connected());
        let mut w = vec![vec![0.0; 4]; 4];
        w[0][1] = 1.0;
        w[1][0] = 1.0;
        w[2][3] = 1.0;
        w[3][2] = 1.0;
        let two_edges = RandomWalkSpace::from_weighted_graph(&w).unwrap();
        assert!(!two_edges.is_m_connected());
    }

    #[test]
    fn mass_and_mean() {
        let s = path3(1.0, 1.0);
        assert_eq!(s.mass(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(s.mean(&[1.0, 0.0, 0.0]), 0.25);
        assert_eq!(s.mean(&[2.5, 2.5, 2.5]), 2.5);
    }

    #[test]
    fn loops_are_permitted_and_carry_no_field() {
        let w = vec![vec![1.0, 1.0], vec![1.0, 0.0]];
        let s = RandomWalkSpace::from_weighted_graph(&w).unwrap();
        assert_eq!(s.measure(), &[2.0, 1.0]);
        assert_eq!(s.pair_count(), 1);
        let g = s.nonlocal_gradient(&[5.0, 7.0]).unwrap();
        assert_eq!(g.get(&s, 0, 0), 0.0);
        assert_eq!(g.get(&s, 0, 1), 2.0);
    }

    #[test]
    fn ibp_identity_two_vertices() {
        let s = RandomWalkSpace::from_weighted_graph(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut z = EdgeField::zeros(&s);
        z.set(&s, 0, 1, -2.25);
        let r = s.integration_by_parts_residual(&[3.0, -1.5], &z).unwrap();
        assert!(r < 1e-14, "residual {r}");
    }
}
