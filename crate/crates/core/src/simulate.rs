//! Synthetic-data generation and reference integrators: explicit RK4, an
//! L-stable backward-Euler/Newton integrator for stiff systems, the benchmark
//! ODE systems, and a finite-difference viscous Burgers solver.

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::datasets::Trajectory;
use crate::error::{DueError, Result};
use crate::linalg::lu_solve;
use crate::tensor::Tensor;

type RhsFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type JacFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

pub struct OdeSystem {
    pub dim: usize,
    pub name: String,
    rhs: RhsFn,
    jac: Option<JacFn>,
}

impl OdeSystem {
    pub fn new(dim: usize, name: &str, rhs: RhsFn, jac: Option<JacFn>) -> Self {
        OdeSystem {
            dim,
            name: name.to_string(),
            rhs,
            jac,
        }
    }

    pub fn rhs(&self, u: &[f64], du: &mut [f64]) {
        (self.rhs)(u, du)
    }

    pub fn jacobian(&self, u: &[f64], j: &mut [f64]) -> Result<()> {
        match &self.jac {
            Some(f) => {
                f(u, j);
                Ok(())
            }
            None => Err(DueError::Contract(format!(
                "system {} has no Jacobian",
                self.name
            ))),
        }
    }

    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PendulumParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            alpha: 0.1,
            beta: 9.80665,
        }
    }
}

pub fn pendulum(p: PendulumParams) -> OdeSystem {
    let PendulumParams { alpha, beta } = p;
    OdeSystem::new(
        2,
        "pendulum",
        Box::new(move |u, du| {
            du[0] = u[1];
            du[1] = -alpha * u[1] - beta * u[0].sin();
        }),
        Some(Box::new(move |u, j| {
            j[0] = 0.0;
            j[1] = 1.0;
            j[2] = -beta * u[0].cos();
            j[3] = -alpha;
        })),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        LorenzParams {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

pub fn lorenz(p: LorenzParams) -> OdeSystem {
    let LorenzParams { sigma, rho, beta } = p;
    OdeSystem::new(
        3,
        "lorenz",
        Box::new(move |u, du| {
            du[0] = sigma * (u[1] - u[0]);
            du[1] = u[0] * (rho - u[2]) - u[1];
            du[2] = u[0] * u[1] - beta * u[2];
        }),
        Some(Box::new(move |u, j| {
            j[0] = -sigma;
            j[1] = sigma;
            j[2] = 0.0;
            j[3] = rho - u[2];
            j[4] = -1.0;
            j[5] = -u[0];
            j[6] = u[1];
            j[7] = u[0];
            j[8] = -beta;
        })),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct RobertsonParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for RobertsonParams {
    fn default() -> Self {
        RobertsonParams {
            k1: 0.04,
            k2: 1e4,
            k3: 3e7,
        }
    }
}

pub fn robertson(p: RobertsonParams) -> OdeSystem {
    let RobertsonParams { k1, k2, k3 } = p;
    OdeSystem::new(
        3,
        "robertson",
        Box::new(move |u, du| {
            du[0] = -k1 * u[0] + k2 * u[1] * u[2];
            du[1] = k1 * u[0] - k2 * u[1] * u[2] - k3 * u[1] * u[1];
            du[2] = k3 * u[1] * u[1];
        }),
        Some(Box::new(move |u, j| {
            j[0] = -k1;
            j[1] = k2 * u[2];
            j[2] = k2 * u[1];
            j[3] = k1;
            j[4] = -k2 * u[2] - 2.0 * k3 * u[1];
            j[5] = -k2 * u[1];
            j[6] = 0.0;
            j[7] = 2.0 * k3 * u[1];
            j[8] = 0.0;
        })),
    )
}

/// Classical RK4 update.
pub fn rk4_step(sys: &OdeSystem, u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = sys.dim;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    sys.rhs(u, &mut k1);
    for i in 0..n {
        tmp[i] = u[i] + 0.5 * dt * k1[i];
    }
    sys.rhs(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = u[i] + 0.5 * dt * k2[i];
    }
    sys.rhs(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = u[i] + dt * k3[i];
    }
    sys.rhs(&tmp, &mut k4);
    let out: Vec<f64> = (0..n)
        .map(|i| u[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DueError::Divergence(format!(
            "rk4_step produced non-finite state from u={:?}, dt={}",
            u, dt
        )));
    }
    Ok(out)
}

/// RK4 trajectory recording every `record_every` substeps (the initial state
/// is always row 0).
pub fn rk4_trajectory(
    sys: &OdeSystem,
    u0: &[f64],
    dt: f64,
    steps: usize,
    record_every: usize,
) -> Result<Trajectory> {
    if dt <= 0.0 {
        return Err(DueError::Domain(format!("dt {} must be positive", dt)));
    }
    let every = record_every.max(1);
    let n = sys.dim;
    let mut u = u0.to_vec();
    let mut times = vec![0.0];
    let mut data = u.clone();
    for k in 0..steps * every {
        u = rk4_step(sys, &u, dt)?;
        if (k + 1) % every == 0 {
            times.push((k + 1) as f64 * dt);
            data.extend_from_slice(&u);
        }
    }
    Trajectory::new(times, Tensor::new(vec![steps + 1, n], data)?)
}

/// One backward-Euler step solved by Newton with the analytic Jacobian.
fn backward_euler_step(sys: &OdeSystem, u: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = sys.dim;
    let mut v = u.to_vec();
    let mut f = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    for _ in 0..50 {
        sys.rhs(&v, &mut f);
        // residual F(v) = v - u - h f(v)
        let mut res: Vec<f64> = (0..n).map(|i| v[i] - u[i] - h * f[i]).collect();
        sys.jacobian(&v, &mut jac)?;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = if i == j { 1.0 } else { 0.0 } - h * jac[i * n + j];
            }
        }
        lu_solve(&mut a, &mut res, n)?;
        let unorm = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let dnorm = res.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..n {
            v[i] -= res[i];
        }
        if dnorm < 1e-12 * (1.0 + unorm) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DueError::Divergence("implicit step went non-finite".into()));
            }
            return Ok(v);
        }
    }
    Err(DueError::Stiffness(format!(
        "Newton failed to converge at step size {}",
        h
    )))
}

/// Attempted backward-Euler advance with step-doubling error control. Returns
/// (state, error estimate).
fn be_double_step(sys: &OdeSystem, u: &[f64], h: f64) -> Result<(Vec<f64>, f64)> {
    let full = backward_euler_step(sys, u, h)?;
    let half = backward_euler_step(sys, u, 0.5 * h)?;
    let halves = backward_euler_step(sys, &half, 0.5 * h)?;
    let err = full
        .iter()
        .zip(&halves)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    // Local Richardson extrapolation: cancels the leading O(h²) error term
    // and preserves linear invariants (both solves do).
    let extrap: Vec<f64> = halves
        .iter()
        .zip(&full)
        .map(|(h2, f)| 2.0 * h2 - f)
        .collect();
    Ok((extrap, err))
}

/// Adaptive backward-Euler integration with dense output at `record_times`
/// (strictly increasing, starting at or after 0; integration starts at t=0
/// from `u0`). Each step's doubling estimate must satisfy the mixed
/// absolute/relative target `tol·(1 + ‖u‖∞)`.
pub fn implicit_trajectory(
    sys: &OdeSystem,
    u0: &[f64],
    record_times: &[f64],
    tol: f64,
) -> Result<Trajectory> {
    if tol <= 0.0 {
        return Err(DueError::Domain("tolerance must be positive".into()));
    }
    if !sys.has_jacobian() {
        return Err(DueError::Contract(format!(
            "implicit integration of {} requires a Jacobian",
            sys.name
        )));
    }
    let n = sys.dim;
    let mut t = 0.0;
    let mut u = u0.to_vec();
    let mut h = 1e-6_f64;
    let mut times = Vec::new();
    let mut data = Vec::new();
    for &target in record_times {
        if target < t {
            return Err(DueError::Domain(format!(
                "record time {} precedes current time {}",
                target, t
            )));
        }
        while t < target {
            let step = h.min(target - t);
            let mut attempt = step;
            let mut halvings = 0;
            loop {
                let budget = tol * (1.0 + u.iter().fold(0.0f64, |m, x| m.max(x.abs())));
                match be_double_step(sys, &u, attempt) {
                    Ok((unew, err)) => {
                        if err <= budget {
                            u = unew;
                            t += attempt;
                            let grow = 0.9 * (budget / err.max(1e-300)).sqrt();
                            h = (attempt * grow.clamp(0.2, 5.0)).max(1e-14);
                            break;
                        }
                        attempt *= 0.5;
                    }
                    Err(DueError::Stiffness(_)) => attempt *= 0.5,
                    Err(e) => return Err(e),
                }
                halvings += 1;
                if halvings > 40 {
                    return Err(DueError::Stiffness(format!(
                        "step control failed near t={} for {}",
                        t, sys.name
                    )));
                }
            }
        }
        times.push(target);
        data.extend_from_slice(&u);
    }
    Trajectory::new(times, Tensor::new(vec![record_times.len(), n], data)?)
}

/// Uniform interior grid on (0, 2π) for the viscous Burgers solver; Dirichlet
/// zeros live on the (implicit) end points.
#[derive(Debug, Clone, Copy)]
pub struct BurgersGrid {
    pub nodes: usize,
    pub viscosity: f64,
}

impl BurgersGrid {
    pub fn new(nodes: usize, viscosity: f64) -> Self {
        BurgersGrid { nodes, viscosity }
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / (self.nodes as f64 + 1.0)
    }

    pub fn xs(&self) -> Vec<f64> {
        let h = self.spacing();
        (1..=self.nodes).map(|s| s as f64 * h).collect()
    }

    /// Mesh coordinates as an n×1 tensor.
    pub fn mesh(&self) -> Tensor {
        let xs = self.xs();
        Tensor::new(vec![self.nodes, 1], xs).expect("grid mesh")
    }

    fn rhs(&self, u: &[f64], du: &mut [f64]) {
        let n = self.nodes;
        let h = self.spacing();
        let nu = self.viscosity;
        let val = |i: isize| -> f64 {
            if i < 0 || i as usize >= n {
                0.0
            } else {
                u[i as usize]
            }
        };
        for i in 0..n as isize {
            let (um, u0, up) = (val(i - 1), val(i), val(i + 1));
            let flux = (up * up - um * um) / (4.0 * h); // ∂x(u²/2) central
            let lap = (up - 2.0 * u0 + um) / (h * h);
            du[i as usize] = -flux + nu * lap;
        }
    }
}

/// Method-of-lines Burgers solve: RK4 in time with a CFL-safe internal step
/// re-evaluated per record interval. Rows of the result are nodal snapshots.
pub fn burgers_trajectory(
    grid: &BurgersGrid,
    u0: &[f64],
    record_lag: f64,
    records: usize,
) -> Result<Trajectory> {
    if record_lag <= 0.0 {
        return Err(DueError::Domain("record lag must be positive".into()));
    }
    let n = grid.nodes;
    let h = grid.spacing();
    let mut u = u0.to_vec();
    let mut times = vec![0.0];
    let mut data = u.clone();
    let mut du = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for r in 1..=records {
        let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        let dt_cfl = (0.25 * h * h / grid.viscosity).min(0.5 * h / umax);
        let substeps = (record_lag / dt_cfl).ceil() as usize;
        let dt = record_lag / substeps as f64;
        for _ in 0..substeps {
            grid.rhs(&u, &mut du);
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * dt * du[i];
            }
            grid.rhs(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * dt * k2[i];
            }
            grid.rhs(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = u[i] + dt * k3[i];
            }
            grid.rhs(&tmp, &mut k4);
            for i in 0..n {
                u[i] += dt / 6.0 * (du[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(DueError::Divergence(format!(
                "Burgers solve blew up before t={}",
                r as f64 * record_lag
            )));
        }
        times.push(r as f64 * record_lag);
        data.extend_from_slice(&u);
    }
    Trajectory::new(times, Tensor::new(vec![records + 1, n], data)?)
}

/// Which benchmark's initial-condition distribution to draw from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IcKind {
    /// uniform on [−π/2, π/2]×[−π, π]
    Pendulum,
    /// uniform on [−π/2, π/2]³
    Lorenz,
    /// uniform on [0,1]×[0,5e−5]×[0,1]
    Robertson,
    /// random sine series Σ a_m sin(mx), a_m ~ U[−1/m, 1/m], on the grid
    Burgers { nodes: usize },
}

/// Coefficients a_m ~ U[−1/m, 1/m], m = 1..10, for the Burgers initial
/// condition series.
pub fn sample_fourier_coeffs(rng: &mut ChaCha20Rng) -> [f64; 10] {
    let mut a = [0.0; 10];
    for (m, am) in a.iter_mut().enumerate() {
        let bound = 1.0 / (m as f64 + 1.0);
        *am = rng.random_range(-bound..=bound);
    }
    a
}

pub fn eval_sine_series(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(m, a)| a * ((m as f64 + 1.0) * x).sin())
        .sum()
}

pub fn sample_initial_conditions(kind: IcKind, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match kind {
            IcKind::Pendulum => vec![
                rng.random_range(-PI / 2.0..=PI / 2.0),
                rng.random_range(-PI..=PI),
            ],
            IcKind::Lorenz => (0..3)
                .map(|_| rng.random_range(-PI / 2.0..=PI / 2.0))
                .collect(),
            IcKind::Robertson => vec![
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=5e-5),
                rng.random_range(0.0..=1.0),
            ],
            IcKind::Burgers { nodes } => {
                let coeffs = sample_fourier_coeffs(&mut rng);
                let grid = BurgersGrid::new(nodes, 0.1);
                grid.xs()
                    .iter()
                    .map(|&x| eval_sine_series(&coeffs, x))
                    .collect()
            }
        })
        .collect()
}

/// 10^U with U uniform on [lo_exp, hi_exp].
pub fn sample_lags_loguniform(
    lo_exp: f64,
    hi_exp: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if lo_exp >= hi_exp {
        return Err(DueError::Domain(format!(
            "exponent range [{}, {}] is empty",
            lo_exp, hi_exp
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| 10f64.powf(rng.random_range(lo_exp..=hi_exp)))
        .collect())
}
