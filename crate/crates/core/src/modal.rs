//! Modal-space PDE learning support: sine basis construction, closed-form
//! least-squares projection of nodal snapshots to modal coefficients, and
//! reconstruction back to nodal values.

use std::f64::consts::PI;

use crate::datasets::{Trajectory, TrajectorySet};
use crate::error::{DueError, Result};
use crate::linalg::{spd_condition, Cholesky};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Sine,
}

/// Basis evaluation matrix Ψ (p×n) with a cached factorization of the Gram
/// matrix ΨΨᵀ.
#[derive(Debug, Clone)]
pub struct Basis {
    pub kind: BasisKind,
    pub modes: usize,
    /// p×n values ψ_m(x_i).
    pub eval: Tensor,
    gram: Cholesky,
    pub condition: f64,
}

/// ψ_m(x) = sin(m x), m = 1..p, evaluated at interior nodes of (0, 2π).
pub fn basis_sine(mesh_x: &[f64], p: usize) -> Result<Basis> {
    let n = mesh_x.len();
    if p == 0 || p > n {
        return Err(DueError::Domain(format!(
            "mode count {} outside 1..={}",
            p, n
        )));
    }
    if mesh_x.iter().any(|&x| x <= 0.0 || x >= 2.0 * PI) {
        return Err(DueError::Domain(
            "mesh nodes must lie strictly inside (0, 2π)".into(),
        ));
    }
    let mut eval = Tensor::zeros(vec![p, n]);
    for m in 1..=p {
        for (i, &x) in mesh_x.iter().enumerate() {
            eval.set(m - 1, i, (m as f64 * x).sin());
        }
    }
    let mut gram = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..p {
            gram[a * p + b] = (0..n).map(|i| eval.at(a, i) * eval.at(b, i)).sum();
        }
    }
    let condition = spd_condition(&gram, p).map_err(|_| {
        DueError::Numeric("basis Gram matrix is not positive definite".into())
    })?;
    if condition > 1e12 {
        return Err(DueError::Numeric(format!(
            "basis Gram matrix ill-conditioned (cond ≈ {:.3e})",
            condition
        )));
    }
    let gram = Cholesky::factor(&gram, p)?;
    Ok(Basis {
        kind: BasisKind::Sine,
        modes: p,
        eval,
        gram,
        condition,
    })
}

impl Basis {
    pub fn nodes(&self) -> usize {
        self.eval.cols()
    }

    /// Least-squares coefficients V = (ΨΨᵀ)⁻¹ΨU for a nodal snapshot U
    /// (n×d_u). Returns p×d_u.
    pub fn project_forward(&self, u: &Tensor) -> Result<Tensor> {
        if u.rows() != self.nodes() {
            return Err(DueError::Dimension(format!(
                "snapshot has {} rows, basis expects {}",
                u.rows(),
                self.nodes()
            )));
        }
        let rhs = self.eval.matmul(u)?; // p×d_u
        let (p, d) = (self.modes, rhs.cols());
        let mut out = Tensor::zeros(vec![p, d]);
        let mut col = vec![0.0; p];
        for c in 0..d {
            for r in 0..p {
                col[r] = rhs.at(r, c);
            }
            self.gram.solve(&mut col);
            for r in 0..p {
                out.set(r, c, col[r]);
            }
        }
        Ok(out)
    }

    /// Nodal values ΨᵀV of an expansion (V is p×d_u). Returns n×d_u.
    pub fn project_backward(&self, v: &Tensor) -> Result<Tensor> {
        if v.rows() != self.modes {
            return Err(DueError::Dimension(format!(
                "coefficients have {} rows, basis has {} modes",
                v.rows(),
                self.modes
            )));
        }
        self.eval.transpose().matmul(v)
    }
}

/// Map every snapshot of a nodal trajectory set (rows are width-n nodal
/// states, d_u = 1) through the forward projection. Times are preserved; the
/// result feeds the standard ODE-learning pipeline.
pub fn project_trajectory_set(basis: &Basis, ts: &TrajectorySet) -> Result<TrajectorySet> {
    if ts.width() != basis.nodes() {
        return Err(DueError::Dimension(format!(
            "trajectory width {} does not match basis node count {}",
            ts.width(),
            basis.nodes()
        )));
    }
    let p = basis.modes;
    let mut out = Vec::with_capacity(ts.trajectories.len());
    for traj in &ts.trajectories {
        let mut data = Vec::with_capacity(traj.len() * p);
        for k in 0..traj.len() {
            let snap = Tensor::new(vec![basis.nodes(), 1], traj.states.row(k).to_vec())?;
            let v = basis.project_forward(&snap)?;
            data.extend_from_slice(v.data());
        }
        out.push(Trajectory::new(
            traj.times.clone(),
            Tensor::new(vec![traj.len(), p], data)?,
        )?);
    }
    let names = (1..=p).map(|m| format!("v{m}")).collect();
    TrajectorySet::new(out, names)
}

/// Inverse of [`project_trajectory_set`]: modal trajectories back to nodal.
pub fn reconstruct_trajectory_set(basis: &Basis, ts: &TrajectorySet) -> Result<TrajectorySet> {
    if ts.width() != basis.modes {
        return Err(DueError::Dimension(format!(
            "trajectory width {} does not match mode count {}",
            ts.width(),
            basis.modes
        )));
    }
    let n = basis.nodes();
    let mut out = Vec::with_capacity(ts.trajectories.len());
    for traj in &ts.trajectories {
        let mut data = Vec::with_capacity(traj.len() * n);
        for k in 0..traj.len() {
            let v = Tensor::new(vec![basis.modes, 1], traj.states.row(k).to_vec())?;
            let u = basis.project_backward(&v)?;
            data.extend_from_slice(u.data());
        }
        out.push(Trajectory::new(
            traj.times.clone(),
            Tensor::new(vec![traj.len(), n], data)?,
        )?);
    }
    let names = (1..=n).map(|i| format!("u{i}")).collect();
    TrajectorySet::new(out, names)
}
