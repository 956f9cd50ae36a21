//! Levenberg-Marquardt for stacked residual blocks over manifold parameters.
//!
//! Parameters live in blocks that are either Euclidean vectors (additive
//! update) or rotations (`R ← exp(δφ)·R`). Each residual block reads a subset
//! of the parameter blocks; its Jacobian is formed by central differences in
//! the tangent space of those blocks only, unless the block supplies an
//! analytic one. The damped normal equations `(JᵀJ + μI)·δ = −Jᵀr` are
//! assembled densely and solved by Cholesky.

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::exp_so3;

/// Central-difference step for both Euclidean and rotation blocks.
pub const JACOBIAN_STEP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("non-finite residual in residual block {residual_block}")]
    NonFiniteResidual { residual_block: usize },
    #[error("non-finite Jacobian of residual block {residual_block} with respect to parameter block {parameter_block}")]
    NonFiniteJacobian { residual_block: usize, parameter_block: usize },
    #[error("residual block {residual_block} references missing parameter block {parameter_block}")]
    BadIndex { residual_block: usize, parameter_block: usize },
    #[error("residual block {residual_block} returned {got} residuals, declared {declared}")]
    DimensionMismatch { residual_block: usize, got: usize, declared: usize },
    #[error("normal equations are singular")]
    Singular,
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Euclidean(DVector<f64>),
    Rotation(Rotation3<f64>),
}

/// One group of optimization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub value: BlockValue,
    /// Fixed blocks are read by residuals but never updated.
    pub fixed: bool,
}

impl ParameterBlock {
    pub fn euclidean(v: DVector<f64>) -> Self {
        Self { value: BlockValue::Euclidean(v), fixed: false }
    }

    pub fn vector3(v: &Vector3<f64>) -> Self {
        Self::euclidean(DVector::from_column_slice(v.as_slice()))
    }

    pub fn scalar(x: f64) -> Self {
        Self::euclidean(DVector::from_element(1, x))
    }

    pub fn rotation(r: Rotation3<f64>) -> Self {
        Self { value: BlockValue::Rotation(r), fixed: false }
    }

    pub fn into_fixed(mut self) -> Self {
        self.fixed = true;
        self
    }

    /// Dimension of the tangent space, regardless of `fixed`.
    pub fn manifold_dim(&self) -> usize {
        match &self.value {
            BlockValue::Euclidean(v) => v.len(),
            BlockValue::Rotation(_) => 3,
        }
    }

    /// Number of free variables contributed to the solve.
    pub fn free_dim(&self) -> usize {
        if self.fixed {
            0
        } else {
            self.manifold_dim()
        }
    }

    /// Applies a tangent-space increment.
    pub fn retract(&self, delta: &[f64]) -> Self {
        let value = match &self.value {
            BlockValue::Euclidean(v) => BlockValue::Euclidean(v + DVector::from_column_slice(delta)),
            BlockValue::Rotation(r) => {
                let d = Vector3::new(delta[0], delta[1], delta[2]);
                BlockValue::Rotation(exp_so3(&d) * r)
            }
        };
        Self { value, fixed: self.fixed }
    }

    pub fn as_euclidean(&self) -> Option<&DVector<f64>> {
        match &self.value {
            BlockValue::Euclidean(v) => Some(v),
            BlockValue::Rotation(_) => None,
        }
    }

    pub fn as_rotation(&self) -> Option<&Rotation3<f64>> {
        match &self.value {
            BlockValue::Rotation(r) => Some(r),
            BlockValue::Euclidean(_) => None,
        }
    }

    /// First three components of a Euclidean block.
    ///
    /// Panics on rotation blocks or blocks shorter than three.
    pub fn vec3(&self) -> Vector3<f64> {
        let v = self.as_euclidean().expect("expected a Euclidean block");
        Vector3::new(v[0], v[1], v[2])
    }

    /// Panics on Euclidean blocks.
    pub fn rot(&self) -> Rotation3<f64> {
        *self.as_rotation().expect("expected a rotation block")
    }

    /// Panics on rotation blocks.
    pub fn scalar_value(&self) -> f64 {
        self.as_euclidean().expect("expected a Euclidean block")[0]
    }

    fn norm(&self) -> f64 {
        match &self.value {
            BlockValue::Euclidean(v) => v.norm(),
            BlockValue::Rotation(_) => 0.0,
        }
    }
}

/// A group of residuals depending on a few parameter blocks.
pub trait ResidualBlock: Sync {
    fn num_residuals(&self) -> usize;

    /// Indices into the global parameter-block list, in the order the
    /// blocks are passed to [`ResidualBlock::evaluate`].
    fn parameter_indices(&self) -> &[usize];

    fn evaluate(&self, params: &[&ParameterBlock]) -> DVector<f64>;

    /// Analytic Jacobians, one `num_residuals × manifold_dim` matrix per
    /// parameter block, with respect to the same tangent-space increments
    /// that [`ParameterBlock::retract`] applies. `None` selects central
    /// differences.
    fn jacobians(&self, _params: &[&ParameterBlock]) -> Option<Vec<DMatrix<f64>>> {
        None
    }
}

/// Residual block backed by a closure.
pub struct FnResidual<F> {
    dim: usize,
    indices: Vec<usize>,
    f: F,
}

impl<F> FnResidual<F>
where
    F: Fn(&[&ParameterBlock]) -> DVector<f64> + Sync,
{
    pub fn new(dim: usize, indices: Vec<usize>, f: F) -> Self {
        Self { dim, indices, f }
    }
}

impl<F> ResidualBlock for FnResidual<F>
where
    F: Fn(&[&ParameterBlock]) -> DVector<f64> + Sync,
{
    fn num_residuals(&self) -> usize {
        self.dim
    }

    fn parameter_indices(&self) -> &[usize] {
        &self.indices
    }

    fn evaluate(&self, params: &[&ParameterBlock]) -> DVector<f64> {
        (self.f)(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmParams {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Max-norm of the gradient `Jᵀr`.
    pub gradient_tol: f64,
    /// Step norm relative to `1 + ‖x‖`.
    pub step_tol: f64,
    /// Relative cost decrease of an accepted step.
    pub cost_tol: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 10.0,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            cost_tol: 1e-12,
        }
    }
}

impl LmParams {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("initial_damping", self.initial_damping),
            ("damping_up", self.damping_up),
            ("damping_down", self.damping_down),
            ("gradient_tol", self.gradient_tol),
            ("step_tol", self.step_tol),
            ("cost_tol", self.cost_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SolverError::InvalidParams(format!("{name} must be positive")));
            }
        }
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidParams("max_iterations must be positive".into()));
        }
        if self.damping_up <= 1.0 || self.damping_down <= 1.0 {
            return Err(SolverError::InvalidParams("damping factors must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    GradientTolerance,
    StepTolerance,
    CostTolerance,
    ZeroCost,
    NoFreeParameters,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub initial_cost: f64,
    /// `½·Σ r²` at the returned parameters.
    pub final_cost: f64,
    pub iterations: usize,
    pub termination_reason: TerminationReason,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn gather<'a>(blocks: &'a [ParameterBlock], indices: &[usize]) -> Vec<&'a ParameterBlock> {
    indices.iter().map(|&i| &blocks[i]).collect()
}

fn check_indices(residuals: &[&dyn ResidualBlock], blocks: &[ParameterBlock]) -> Result<(), SolverError> {
    for (r, res) in residuals.iter().enumerate() {
        if let Some(&p) = res.parameter_indices().iter().find(|&&p| p >= blocks.len()) {
            return Err(SolverError::BadIndex { residual_block: r, parameter_block: p });
        }
    }
    Ok(())
}

fn evaluate_block(res: &dyn ResidualBlock, blocks: &[ParameterBlock], index: usize) -> Result<DVector<f64>, SolverError> {
    let e = res.evaluate(&gather(blocks, res.parameter_indices()));
    if e.len() != res.num_residuals() {
        return Err(SolverError::DimensionMismatch { residual_block: index, got: e.len(), declared: res.num_residuals() });
    }
    if e.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFiniteResidual { residual_block: index });
    }
    Ok(e)
}

/// Jacobian of one residual block with respect to its `local`-th parameter
/// block, by central differences in that block's tangent space.
pub fn numeric_jacobian(res: &dyn ResidualBlock, blocks: &[ParameterBlock], local: usize) -> Result<DMatrix<f64>, SolverError> {
    let indices = res.parameter_indices();
    let global = indices[local];
    let mut params: Vec<ParameterBlock> = indices.iter().map(|&i| blocks[i].clone()).collect();
    let dim = params[local].manifold_dim();
    let m = res.num_residuals();
    let base = params[local].clone();
    let mut jac = DMatrix::zeros(m, dim);
    let mut delta = vec![0.0; dim];
    for c in 0..dim {
        delta[c] = JACOBIAN_STEP;
        params[local] = base.retract(&delta);
        let plus = res.evaluate(&params.iter().collect::<Vec<_>>());
        delta[c] = -JACOBIAN_STEP;
        params[local] = base.retract(&delta);
        let minus = res.evaluate(&params.iter().collect::<Vec<_>>());
        delta[c] = 0.0;
        if plus.len() != m || minus.len() != m {
            return Err(SolverError::DimensionMismatch { residual_block: 0, got: plus.len(), declared: m });
        }
        let col = (plus - minus) / (2.0 * JACOBIAN_STEP);
        if col.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFiniteJacobian { residual_block: 0, parameter_block: global });
        }
        jac.set_column(c, &col);
    }
    Ok(jac)
}

struct Layout {
    offsets: Vec<Option<usize>>,
    dim: usize,
}

impl Layout {
    fn new(blocks: &[ParameterBlock]) -> Self {
        let mut dim = 0;
        let offsets = blocks
            .iter()
            .map(|b| {
                if b.fixed {
                    None
                } else {
                    let o = dim;
                    dim += b.manifold_dim();
                    Some(o)
                }
            })
            .collect();
        Self { offsets, dim }
    }
}

/// Linearization of the full problem: `½‖r‖²`, `JᵀJ`, `Jᵀr`.
#[derive(Debug)]
pub struct NormalEquations {
    pub cost: f64,
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub num_residuals: usize,
}

struct Linearized {
    residual: DVector<f64>,
    jacobians: Vec<Option<DMatrix<f64>>>,
}

fn linearize_block(res: &dyn ResidualBlock, blocks: &[ParameterBlock], index: usize) -> Result<Linearized, SolverError> {
    let residual = evaluate_block(res, blocks, index)?;
    let params = gather(blocks, res.parameter_indices());
    let analytic = res.jacobians(&params);
    let mut jacobians = Vec::with_capacity(params.len());
    for (local, p) in params.iter().enumerate() {
        if p.fixed {
            jacobians.push(None);
            continue;
        }
        let j = match &analytic {
            Some(js) => js[local].clone(),
            None => numeric_jacobian(res, blocks, local).map_err(|e| match e {
                SolverError::NonFiniteJacobian { parameter_block, .. } => {
                    SolverError::NonFiniteJacobian { residual_block: index, parameter_block }
                }
                SolverError::DimensionMismatch { got, declared, .. } => {
                    SolverError::DimensionMismatch { residual_block: index, got, declared }
                }
                other => other,
            })?,
        };
        if j.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFiniteJacobian {
                residual_block: index,
                parameter_block: res.parameter_indices()[local],
            });
        }
        jacobians.push(Some(j));
    }
    Ok(Linearized { residual, jacobians })
}

/// Assembles the normal equations at `blocks`. Blocks are linearized in
/// parallel and reduced in residual order, so the result is deterministic.
pub fn normal_equations(residuals: &[&dyn ResidualBlock], blocks: &[ParameterBlock]) -> Result<NormalEquations, SolverError> {
    check_indices(residuals, blocks)?;
    let layout = Layout::new(blocks);
    let lin: Vec<Linearized> = residuals
        .par_iter()
        .enumerate()
        .map(|(i, r)| linearize_block(*r, blocks, i))
        .collect::<Result<_, _>>()?;

    let n = layout.dim;
    let mut hessian = DMatrix::zeros(n, n);
    let mut gradient = DVector::zeros(n);
    let mut cost = 0.0;
    let mut num_residuals = 0;
    for (res, l) in residuals.iter().zip(&lin) {
        cost += 0.5 * l.residual.norm_squared();
        num_residuals += l.residual.len();
        let idx = res.parameter_indices();
        for (a, ja) in l.jacobians.iter().enumerate() {
            let (Some(ja), Some(oa)) = (ja, layout.offsets[idx[a]]) else { continue };
            let mut g = gradient.rows_mut(oa, ja.ncols());
            g += ja.tr_mul(&l.residual);
            for (b, jb) in l.jacobians.iter().enumerate() {
                let (Some(jb), Some(ob)) = (jb, layout.offsets[idx[b]]) else { continue };
                let mut h = hessian.view_mut((oa, ob), (ja.ncols(), jb.ncols()));
                h += ja.tr_mul(jb);
            }
        }
    }
    Ok(NormalEquations { cost, hessian, gradient, num_residuals })
}

/// `½·Σ r²` over all residual blocks.
pub fn total_cost(residuals: &[&dyn ResidualBlock], blocks: &[ParameterBlock]) -> Result<f64, SolverError> {
    check_indices(residuals, blocks)?;
    let parts: Vec<f64> = residuals
        .par_iter()
        .enumerate()
        .map(|(i, r)| evaluate_block(*r, blocks, i).map(|e| 0.5 * e.norm_squared()))
        .collect::<Result<_, _>>()?;
    Ok(parts.iter().sum())
}

/// All residuals stacked in block order.
pub fn stacked_residuals(residuals: &[&dyn ResidualBlock], blocks: &[ParameterBlock]) -> Result<DVector<f64>, SolverError> {
    check_indices(residuals, blocks)?;
    let parts: Vec<DVector<f64>> = residuals
        .iter()
        .enumerate()
        .map(|(i, r)| evaluate_block(*r, blocks, i))
        .collect::<Result<_, _>>()?;
    let total = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut o = 0;
    for p in parts {
        out.rows_mut(o, p.len()).copy_from(&p);
        o += p.len();
    }
    Ok(out)
}

fn retract_all(blocks: &[ParameterBlock], layout: &Layout, delta: &DVector<f64>) -> Vec<ParameterBlock> {
    blocks
        .iter()
        .zip(&layout.offsets)
        .map(|(b, off)| match off {
            Some(o) => b.retract(&delta.as_slice()[*o..*o + b.manifold_dim()]),
            None => b.clone(),
        })
        .collect()
}

/// Minimizes `½·Σ‖r_i‖²` over the free parameter blocks.
///
/// Accepted steps never increase the cost. A rejected step (cost increase,
/// non-finite cost or a failed factorization) multiplies the damping by
/// `damping_up`; an accepted one divides it by `damping_down`.
pub fn lm_minimize(
    residuals: &[&dyn ResidualBlock],
    blocks: Vec<ParameterBlock>,
    params: &LmParams,
) -> Result<(Vec<ParameterBlock>, SolveReport), SolverError> {
    params.validate()?;
    let layout = Layout::new(&blocks);
    let mut blocks = blocks;
    let mut ne = normal_equations(residuals, &blocks)?;
    let initial_cost = ne.cost;
    let mut history = vec![ne.cost];
    let mut damping = params.initial_damping;

    let finish = |blocks: Vec<ParameterBlock>, cost: f64, iterations: usize, reason: TerminationReason, history: Vec<f64>| {
        let report = SolveReport {
            converged: reason != TerminationReason::MaxIterations,
            initial_cost,
            final_cost: cost,
            iterations,
            termination_reason: reason,
            cost_history: history,
        };
        Ok((blocks, report))
    };

    if layout.dim == 0 {
        return finish(blocks, ne.cost, 0, TerminationReason::NoFreeParameters, history);
    }

    for iteration in 1..=params.max_iterations {
        if ne.cost == 0.0 {
            return finish(blocks, ne.cost, iteration - 1, TerminationReason::ZeroCost, history);
        }
        if ne.gradient.amax() <= params.gradient_tol {
            return finish(blocks, ne.cost, iteration - 1, TerminationReason::GradientTolerance, history);
        }

        let mut damped = ne.hessian.clone();
        for i in 0..layout.dim {
            damped[(i, i)] += damping;
        }
        let Some(chol) = damped.cholesky() else {
            damping *= params.damping_up;
            continue;
        };
        let step = chol.solve(&(-&ne.gradient));
        let x_norm: f64 = blocks.iter().filter(|b| !b.fixed).map(|b| b.norm().powi(2)).sum::<f64>().sqrt();
        if step.norm() <= params.step_tol * (1.0 + x_norm) {
            return finish(blocks, ne.cost, iteration, TerminationReason::StepTolerance, history);
        }

        let candidate = retract_all(&blocks, &layout, &step);
        let new_cost = match total_cost(residuals, &candidate) {
            Ok(c) => c,
            Err(SolverError::NonFiniteResidual { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };

        if new_cost.is_finite() && new_cost < ne.cost {
            let relative = (ne.cost - new_cost) / ne.cost;
            blocks = candidate;
            ne = normal_equations(residuals, &blocks)?;
            debug_assert!(ne.cost <= *history.last().unwrap());
            history.push(ne.cost);
            damping = (damping / params.damping_down).max(1e-300);
            log::trace!("lm iter {iteration}: cost {:.6e} damping {damping:.1e}", ne.cost);
            if relative <= params.cost_tol {
                return finish(blocks, ne.cost, iteration, TerminationReason::CostTolerance, history);
            }
        } else {
            damping *= params.damping_up;
        }
    }
    let cost = ne.cost;
    finish(blocks, cost, params.max_iterations, TerminationReason::MaxIterations, history)
}

/// Gauss-Newton covariance `(JᵀJ)⁻¹` restricted to the listed free blocks,
/// in the order given. Residuals are assumed whitened.
pub fn marginal_covariance(residuals: &[&dyn ResidualBlock], blocks: &[ParameterBlock], wanted: &[usize]) -> Result<DMatrix<f64>, SolverError> {
    let layout = Layout::new(blocks);
    let ne = normal_equations(residuals, blocks)?;
    let chol = ne.hessian.cholesky().ok_or(SolverError::Singular)?;
    let cols: Vec<usize> = wanted
        .iter()
        .flat_map(|&b| {
            let o = layout.offsets[b].expect("marginal covariance requested for a fixed block");
            o..o + blocks[b].manifold_dim()
        })
        .collect();
    let mut rhs = DMatrix::zeros(layout.dim, cols.len());
    for (j, &c) in cols.iter().enumerate() {
        rhs[(c, j)] = 1.0;
    }
    let sol = chol.solve(&rhs);
    Ok(DMatrix::from_fn(cols.len(), cols.len(), |i, j| sol[(cols[i], j)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::log_so3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_monotone(report: &SolveReport) {
        assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]), "{:?}", report.cost_history);
    }

    #[test]
    fn quadratic_bowl() {
        let a = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let target = a.clone();
        let res = FnResidual::new(3, vec![0], move |p| p[0].as_euclidean().unwrap() - &target);
        let (blocks, report) = lm_minimize(&[&res], vec![ParameterBlock::euclidean(DVector::zeros(3))], &LmParams::default()).unwrap();
        assert!((blocks[0].as_euclidean().unwrap() - a).amax() < 1e-10);
        assert!(report.converged);
        assert!(report.cost_history.len() - 1 <= 3, "{report:?}");
        assert_monotone(&report);
    }

    /// Plain gradient descent with backtracking, run long enough to settle.
    fn rosenbrock_gradient_descent(mut x: [f64; 2]) -> [f64; 2] {
        let f = |x: [f64; 2]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        for _ in 0..2_000_000 {
            let g = [
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ];
            let mut step = 1e-3;
            let fx = f(x);
            loop {
                let y = [x[0] - step * g[0], x[1] - step * g[1]];
                if f(y) < fx || step < 1e-12 {
                    x = y;
                    break;
                }
                step *= 0.5;
            }
        }
        x
    }

    #[test]
    fn rosenbrock() {
        let oracle = rosenbrock_gradient_descent([-1.2, 1.0]);
        assert!((oracle[0] - 1.0).abs() < 1e-6 && (oracle[1] - 1.0).abs() < 1e-6, "{oracle:?}");

        let res = FnResidual::new(2, vec![0], |p| {
            let x = p[0].as_euclidean().unwrap();
            DVector::from_vec(vec![1.0 - x[0], 10.0 * (x[1] - x[0] * x[0])])
        });
        let start = ParameterBlock::euclidean(DVector::from_vec(vec![-1.2, 1.0]));
        let (blocks, report) = lm_minimize(&[&res], vec![start], &LmParams::default()).unwrap();
        let x = blocks[0].as_euclidean().unwrap();
        assert!((x[0] - oracle[0]).abs() < 1e-6 && (x[1] - oracle[1]).abs() < 1e-6, "{x:?}");
        assert!(report.converged);
        assert_monotone(&report);
    }

    #[test]
    fn rotation_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let rv = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let target = exp_so3(&(rv(&mut rng) * 1.5));
            let start = exp_so3(&(rv(&mut rng) * 1.5));
            let res = FnResidual::new(3, vec![0], move |p| {
                let e = log_so3(&(target.inverse() * p[0].rot()));
                DVector::from_column_slice(e.as_slice())
            });
            let (blocks, report) = lm_minimize(&[&res], vec![ParameterBlock::rotation(start)], &LmParams::default()).unwrap();
            let r = blocks[0].rot();
            assert!(log_so3(&(target.inverse() * r)).norm() < 1e-9);
            assert!(crate::geometry::so3::is_rotation(r.matrix(), 1e-9));
            assert_monotone(&report);
        }
    }

    #[test]
    fn numeric_jacobian_linear() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -4.0, 0.5, 6.0]);
        let a2 = a.clone();
        let res = FnResidual::new(2, vec![0], move |p| &a2 * p[0].as_euclidean().unwrap());
        let blocks = vec![ParameterBlock::euclidean(DVector::from_vec(vec![0.3, -0.2, 1.1]))];
        let j = numeric_jacobian(&res, &blocks, 0).unwrap();
        assert!((j - a).amax() < 1e-7);
    }

    #[test]
    fn numeric_jacobian_rotation_at_identity() {
        let res = FnResidual::new(3, vec![0], |p| DVector::from_column_slice(log_so3(&p[0].rot()).as_slice()));
        let j = numeric_jacobian(&res, &[ParameterBlock::rotation(Rotation3::identity())], 0).unwrap();
        assert!((j - DMatrix::identity(3, 3)).amax() < 1e-5);
    }

    #[test]
    fn non_finite_residual_reports_block() {
        let ok = FnResidual::new(1, vec![0], |p| DVector::from_element(1, p[0].scalar_value()));
        let bad = FnResidual::new(1, vec![0], |_| DVector::from_element(1, f64::NAN));
        let err = lm_minimize(&[&ok, &bad], vec![ParameterBlock::scalar(1.0)], &LmParams::default()).unwrap_err();
        assert_eq!(err, SolverError::NonFiniteResidual { residual_block: 1 });
    }

    #[test]
    fn non_finite_jacobian_reports_block() {
        // Finite at x = 0 exactly but not at the perturbed points.
        let res = FnResidual::new(1, vec![0], |p| {
            let x = p[0].scalar_value();
            DVector::from_element(1, if x == 0.0 { 0.0 } else { f64::INFINITY })
        });
        let err = normal_equations(&[&res], &[ParameterBlock::scalar(0.0)]).unwrap_err();
        assert_eq!(err, SolverError::NonFiniteJacobian { residual_block: 0, parameter_block: 0 });
    }

    #[test]
    fn fixed_blocks_do_not_move() {
        let res = FnResidual::new(2, vec![0, 1], |p| DVector::from_vec(vec![p[0].scalar_value() - 2.0, p[0].scalar_value() - p[1].scalar_value()]));
        let blocks = vec![ParameterBlock::scalar(0.0), ParameterBlock::scalar(5.0).into_fixed()];
        let (out, _) = lm_minimize(&[&res], blocks, &LmParams::default()).unwrap();
        assert_eq!(out[1].scalar_value(), 5.0);
        assert_relative_eq!(out[0].scalar_value(), 3.5, epsilon = 1e-9);
    }

    struct AnalyticLinear;
    impl ResidualBlock for AnalyticLinear {
        fn num_residuals(&self) -> usize {
            2
        }
        fn parameter_indices(&self) -> &[usize] {
            &[0]
        }
        fn evaluate(&self, p: &[&ParameterBlock]) -> DVector<f64> {
            let x = p[0].as_euclidean().unwrap();
            DVector::from_vec(vec![2.0 * x[0] - 1.0, x[0] + x[1]])
        }
        fn jacobians(&self, _p: &[&ParameterBlock]) -> Option<Vec<DMatrix<f64>>> {
            Some(vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0])])
        }
    }

    #[test]
    fn analytic_jacobians_are_used() {
        let (blocks, report) = lm_minimize(&[&AnalyticLinear], vec![ParameterBlock::euclidean(DVector::zeros(2))], &LmParams::default()).unwrap();
        let x = blocks[0].as_euclidean().unwrap();
        assert_relative_eq!(x[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(x[1], -0.5, epsilon = 1e-10);
        assert!(report.converged);
    }

    #[test]
    fn deterministic() {
        let res = FnResidual::new(2, vec![0], |p| {
            let x = p[0].as_euclidean().unwrap();
            DVector::from_vec(vec![x[0].sin() - 0.3, x[0] * x[1] - 1.0])
        });
        let start = vec![ParameterBlock::euclidean(DVector::from_vec(vec![0.1, 0.2]))];
        let a = lm_minimize(&[&res], start.clone(), &LmParams::default()).unwrap();
        let b = lm_minimize(&[&res], start, &LmParams::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn marginal_covariance_of_linear_fit() {
        // y = a + b·x with unit noise: covariance is (AᵀA)⁻¹.
        let xs = [0.0, 1.0, 2.0, 3.0];
        let blocks_r: Vec<_> = xs
            .iter()
            .map(|&x| FnResidual::new(1, vec![0, 1], move |p| DVector::from_element(1, p[0].scalar_value() + p[1].scalar_value() * x - 1.0)))
            .collect();
        let refs: Vec<&dyn ResidualBlock> = blocks_r.iter().map(|r| r as &dyn ResidualBlock).collect();
        let cov = marginal_covariance(&refs, &[ParameterBlock::scalar(0.0), ParameterBlock::scalar(0.0)], &[1]).unwrap();
        // var(b) = n / (n Σx² − (Σx)²) = 4 / (4·14 − 36) = 0.2
        assert_relative_eq!(cov[(0, 0)], 0.2, epsilon = 1e-6);
    }

    #[test]
    fn invalid_params_rejected() {
        let res = FnResidual::new(1, vec![0], |p| DVector::from_element(1, p[0].scalar_value()));
        let params = LmParams { damping_up: 0.5, ..Default::default() };
        assert!(matches!(
            lm_minimize(&[&res], vec![ParameterBlock::scalar(1.0)], &params),
            Err(SolverError::InvalidParams(_))
        ));
    }
}
