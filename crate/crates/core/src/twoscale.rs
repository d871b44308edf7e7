//! Coupled fast/slow dynamics: latent densities relax on the fast clock
//! (`ε dρ/dt = F(q)ρ`) while the degree distribution drifts slowly
//! (`dq/dt = H(ρ)q`).

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DegreeDistribution;
use crate::kernel::{KernelParams, LogisticKernel, TransitionKernel};
use crate::meanfield::{
    fmt_f, project_to_simplex, quasi_steady_flat, residual_flat, FastDynamics, MeanFieldState, DRIFT_REJECT,
};
use crate::ode::{step_count, Rk4};

pub const Q_DRIFT_LIMIT: f64 = 1e-9;

/// Slow vector field `q ↦ H(ρ) q`. `H` has non-negative off-diagonal
/// entries and zero column sums, so `Σ_l q_l` is conserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlowDynamics {
    /// `H ≡ 0`.
    Frozen,
    /// Birth–death chain on degree classes. A node gains a source at rate
    /// `lambda_add·ρ̄_T` (sources worth adding are truthful nodes) and loses
    /// one at rate `lambda_rem·ρ̄_H` (sources worth cutting are
    /// hallucinating nodes), where `ρ̄` is the unweighted mean of the
    /// per-class densities.
    BirthDeath { lambda_add: f64, lambda_rem: f64 },
    /// A fixed generator given row by row.
    Table { h: Vec<Vec<f64>> },
}

impl Default for SlowDynamics {
    fn default() -> Self {
        SlowDynamics::BirthDeath {
            lambda_add: 1.0,
            lambda_rem: 2.0,
        }
    }
}

impl SlowDynamics {
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self {
            SlowDynamics::Frozen => Ok(()),
            SlowDynamics::BirthDeath { lambda_add, lambda_rem } => {
                if !(*lambda_add >= 0.0 && *lambda_rem >= 0.0 && lambda_add.is_finite() && lambda_rem.is_finite()) {
                    return Err(Error::Config("slow dynamics: rates must be finite and >= 0".into()));
                }
                Ok(())
            }
            SlowDynamics::Table { h } => {
                if h.len() != classes || h.iter().any(|r| r.len() != classes) {
                    return Err(Error::LengthMismatch {
                        what: "slow generator table vs degree classes",
                        left: h.len(),
                        right: classes,
                    });
                }
                for c in 0..classes {
                    let sum: f64 = (0..classes).map(|r| h[r][c]).sum();
                    if sum.abs() > 1e-12 {
                        return Err(Error::Config(format!("slow generator column {c} sums to {sum}")));
                    }
                    for (r, row) in h.iter().enumerate() {
                        if r != c && row[c] < 0.0 {
                            return Err(Error::Config(format!("slow generator entry ({r}, {c}) is negative")));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Writes `H(ρ)` for flat densities `x` into `h` (row-major, `L × L`).
    fn fill(&self, x: &[f64], h: &mut [f64]) {
        let n = x.len() / 3;
        h.iter_mut().for_each(|v| *v = 0.0);
        match self {
            SlowDynamics::Frozen => {}
            SlowDynamics::BirthDeath { lambda_add, lambda_rem } => {
                let mean = |z: usize| (0..n).map(|l| x[3 * l + z]).sum::<f64>() / n as f64;
                let up = lambda_add * mean(0);
                let down = lambda_rem * mean(1);
                for l in 0..n {
                    if l + 1 < n {
                        h[(l + 1) * n + l] = up;
                        h[l * n + l] -= up;
                    }
                    if l >= 1 {
                        h[(l - 1) * n + l] = down;
                        h[l * n + l] -= down;
                    }
                }
            }
            SlowDynamics::Table { h: table } => {
                for (r, row) in table.iter().enumerate() {
                    h[r * n..(r + 1) * n].copy_from_slice(row);
                }
            }
        }
    }

    pub fn eval(&self, state: &MeanFieldState) -> DMatrix<f64> {
        let x = state.to_flat();
        let n = state.classes();
        let mut h = vec![0.0; n * n];
        self.fill(&x, &mut h);
        DMatrix::from_row_slice(n, n, &h)
    }
}

fn apply_h(h: &[f64], q: &[f64], out: &mut [f64]) {
    let n = q.len();
    for r in 0..n {
        out[r] = (0..n).map(|c| h[r * n + c] * q[c]).sum();
    }
}

/// Clips `q` to the simplex; returns the pre-normalization drift.
fn project_q(q: &mut [f64]) -> f64 {
    let neg: f64 = q.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
    let sum: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v = v.max(0.0));
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
    (sum - 1.0).abs() + neg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoScaleConfig {
    pub epsilon: f64,
    pub t_end: f64,
    pub dt_slow: f64,
    pub dt_fast: f64,
}

impl TwoScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("two-scale: epsilon={} must be > 0", self.epsilon)));
        }
        if !(self.t_end > 0.0 && self.dt_slow > 0.0 && self.dt_fast > 0.0) {
            return Err(Error::Config("two-scale: t_end, dt_slow and dt_fast must be > 0".into()));
        }
        if self.dt_fast > self.epsilon * self.dt_slow * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "two-scale: dt_fast={} exceeds epsilon*dt_slow={}",
                self.dt_fast,
                self.epsilon * self.dt_slow
            )));
        }
        Ok(())
    }
}

/// `ρ(t)` and `q(t)` sampled on the slow grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoScaleTrajectory {
    pub times: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub rho: Vec<MeanFieldState>,
}

impl TwoScaleTrajectory {
    fn with_capacity(n: usize) -> Self {
        TwoScaleTrajectory {
            times: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            rho: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, t: f64, q: &[f64], x: &[f64]) {
        self.times.push(t);
        self.q.push(q.to_vec());
        self.rho.push(MeanFieldState::from_flat_unchecked(x));
    }

    /// Columns `t,l,q_l,rho_T,rho_H,rho_D`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "l", "q_l", "rho_T", "rho_H", "rho_D"])?;
        for ((t, q), rho) in self.times.iter().zip(&self.q).zip(&self.rho) {
            for (l, (ql, d)) in q.iter().zip(rho.densities()).enumerate() {
                wtr.write_record([fmt_f(*t), l.to_string(), fmt_f(*ql), fmt_f(d.t()), fmt_f(d.h()), fmt_f(d.d())])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// RK4 on the stacked system `(ρ, q)` with the fast block scaled by `1/ε`.
/// Each slow interval is split into whole fast steps no longer than
/// `dt_fast`.
pub fn integrate_coupled(
    rho0: &MeanFieldState,
    q0: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
    slow: &SlowDynamics,
    cfg: &TwoScaleConfig,
) -> Result<TwoScaleTrajectory> {
    cfg.validate()?;
    let classes = q0.len();
    if rho0.classes() != classes {
        return Err(Error::LengthMismatch {
            what: "initial densities vs degree classes",
            left: rho0.classes(),
            right: classes,
        });
    }
    slow.validate(classes)?;
    let fast = FastDynamics::new(kernel, u, q0.l_max())?;
    let nr = 3 * classes;
    let mut y: Vec<f64> = rho0.to_flat();
    y.extend_from_slice(q0.probs());
    let mut rk = Rk4::new(y.len());
    let mut h = vec![0.0; classes * classes];
    let mut scratch = Vec::new();
    let inv_eps = 1.0 / cfg.epsilon;
    let mut field = |s: &[f64], ds: &mut [f64]| {
        let (x, q) = s.split_at(nr);
        let (dx, dq) = ds.split_at_mut(nr);
        fast.rates(q, x, dx, &mut scratch);
        dx.iter_mut().for_each(|v| *v *= inv_eps);
        slow.fill(x, &mut h);
        apply_h(&h, q, dq);
    };

    let slow_steps = step_count(cfg.t_end, cfg.dt_slow);
    let sub = (cfg.dt_slow / cfg.dt_fast - 1e-9).ceil().max(1.0) as usize;
    let dt = cfg.dt_slow / sub as f64;
    let mut traj = TwoScaleTrajectory::with_capacity(slow_steps + 1);
    traj.push(0.0, &y[nr..], &y[..nr]);
    for k in 1..=slow_steps {
        for s in 0..sub {
            rk.step(&mut field, &mut y, dt);
            let t = (k - 1) as f64 * cfg.dt_slow + (s + 1) as f64 * dt;
            let (x, q) = y.split_at_mut(nr);
            let drift = project_to_simplex(x);
            if drift > DRIFT_REJECT {
                return Err(Error::StepRejected { t, drift });
            }
            let qd = project_q(q);
            if qd > Q_DRIFT_LIMIT {
                return Err(Error::StepRejected { t, drift: qd });
            }
        }
        traj.push(k as f64 * cfg.dt_slow, &y[nr..], &y[..nr]);
    }
    Ok(traj)
}

pub const PSI_MAX_ITER: usize = 20_000;

/// Ψ with warm start and one cold restart.
struct PsiSolver<'a> {
    fast: &'a FastDynamics,
    tol: f64,
    warm: Vec<f64>,
}

impl PsiSolver<'_> {
    fn solve(&mut self, q: &[f64], t: f64) -> Result<Vec<f64>> {
        let attempt = quasi_steady_flat(self.fast, q, &self.warm, self.tol, PSI_MAX_ITER);
        let res = match attempt {
            Ok(r) => Ok(r),
            Err(_) => {
                let cold = vec![1.0 / 3.0; self.warm.len()];
                quasi_steady_flat(self.fast, q, &cold, self.tol, PSI_MAX_ITER)
            }
        };
        match res {
            Ok((x, _, _)) => {
                self.warm.copy_from_slice(&x);
                Ok(x)
            }
            Err(Error::NonConvergence { iterations, residual, .. }) => Err(Error::NonConvergence {
                iterations,
                residual,
                at: Some(t),
            }),
            Err(e) => Err(e),
        }
    }
}

/// Reduced slow system `dq/dt = H(Ψ(q)) q` with `ρ*(t) = Ψ(q*(t))`.
pub fn integrate_reduced(
    q0: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
    slow: &SlowDynamics,
    t_end: f64,
    dt: f64,
    tol: f64,
) -> Result<TwoScaleTrajectory> {
    if !(dt > 0.0 && t_end >= 0.0 && tol > 0.0) {
        return Err(Error::invalid("integrate_reduced: need dt > 0, t_end >= 0, tol > 0"));
    }
    let classes = q0.len();
    slow.validate(classes)?;
    let fast = FastDynamics::new(kernel, u, q0.l_max())?;
    let mut psi = PsiSolver {
        fast: &fast,
        tol,
        warm: vec![1.0 / 3.0; 3 * classes],
    };
    let mut q = q0.probs().to_vec();
    let x0 = psi.solve(&q, 0.0)?;
    let steps = step_count(t_end, dt);
    let mut traj = TwoScaleTrajectory::with_capacity(steps + 1);
    traj.push(0.0, &q, &x0);
    let mut rk = Rk4::new(classes);
    let mut h = vec![0.0; classes * classes];
    for k in 1..=steps {
        let t = k as f64 * dt;
        let mut failure = None;
        {
            let mut field = |s: &[f64], ds: &mut [f64]| {
                if failure.is_some() {
                    ds.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                match psi.solve(s, t) {
                    Ok(x) => {
                        slow.fill(&x, &mut h);
                        apply_h(&h, s, ds);
                    }
                    Err(e) => {
                        failure = Some(e);
                        ds.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            };
            rk.step(&mut field, &mut q, dt);
        }
        if let Some(e) = failure {
            return Err(e);
        }
        let qd = project_q(&mut q);
        if qd > Q_DRIFT_LIMIT {
            return Err(Error::StepRejected { t, drift: qd });
        }
        let x = psi.solve(&q, t)?;
        traj.push(t, &q, &x);
    }
    Ok(traj)
}

/// Largest quasi-steady residual along a reduced trajectory.
pub fn max_residual(traj: &TwoScaleTrajectory, u: f64, kernel: &dyn TransitionKernel) -> Result<f64> {
    let l_max = traj.q.first().map_or(0, |q| q.len() - 1);
    let fast = FastDynamics::new(kernel, u, l_max)?;
    Ok(traj
        .q
        .iter()
        .zip(&traj.rho)
        .map(|(q, r)| residual_flat(&fast, q, &r.to_flat()))
        .fold(0.0, f64::max))
}

/// Inputs of the ε-scaling experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingScenario {
    pub q0: Vec<f64>,
    pub u: f64,
    pub kernel: KernelParams,
    pub slow: SlowDynamics,
    pub t_end: f64,
    pub dt_slow: f64,
    /// Fast step measured on the fast clock; `dt_fast = ε·fast_step`.
    pub fast_step: f64,
    pub tol: f64,
}

impl Default for ScalingScenario {
    fn default() -> Self {
        ScalingScenario {
            q0: vec![0.0, 0.4, 0.3, 0.15, 0.1, 0.05],
            u: 20.0,
            kernel: KernelParams {
                rate: 0.5,
                bias_t: -0.5,
                ..KernelParams::default()
            },
            slow: SlowDynamics::default(),
            t_end: 2.0,
            dt_slow: 0.02,
            fast_step: 0.02,
            tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub e_q: f64,
    pub e_rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln e_q` against `ln ε`.
    pub slope_q: f64,
    pub slope_rho: f64,
}

impl ScalingTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epsilon", "e_q", "e_rho", "slope"])?;
        for r in &self.rows {
            wtr.write_record([fmt_f(r.epsilon), fmt_f(r.e_q), fmt_f(r.e_rho), String::new()])?;
        }
        wtr.write_record(["fit".to_string(), String::new(), String::new(), fmt_f(self.slope_q)])?;
        wtr.flush()?;
        Ok(())
    }
}

pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Runs the coupled and reduced systems from `ρ(0) = Ψ(q0)` for each `ε`
/// and records sup-norm gaps over `t ≥ 5ε` on the slow grid.
pub fn epsilon_scaling_experiment(eps_list: &[f64], scenario: &ScalingScenario) -> Result<ScalingTable> {
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Config("epsilon list must be non-empty and positive".into()));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("epsilon list must be sorted in descending order".into()));
    }
    let kernel = LogisticKernel::new(scenario.kernel.clone())?;
    let q0 = DegreeDistribution::new(scenario.q0.clone())?;
    let reduced = integrate_reduced(
        &q0,
        scenario.u,
        &kernel,
        &scenario.slow,
        scenario.t_end,
        scenario.dt_slow,
        scenario.tol,
    )?;
    let rho0 = reduced.rho[0].clone();
    let rows = eps_list
        .par_iter()
        .map(|&epsilon| {
            let cfg = TwoScaleConfig {
                epsilon,
                t_end: scenario.t_end,
                dt_slow: scenario.dt_slow,
                dt_fast: epsilon * scenario.fast_step.min(scenario.dt_slow),
            };
            let coupled = integrate_coupled(&rho0, &q0, scenario.u, &kernel, &scenario.slow, &cfg)?;
            let (mut e_q, mut e_rho) = (0.0f64, 0.0f64);
            for k in 0..coupled.times.len() {
                if coupled.times[k] < 5.0 * epsilon - 1e-12 {
                    continue;
                }
                for (a, b) in coupled.q[k].iter().zip(&reduced.q[k]) {
                    e_q = e_q.max((a - b).abs());
                }
                e_rho = e_rho.max(coupled.rho[k].max_abs_diff(&reduced.rho[k]));
            }
            Ok(ScalingRow { epsilon, e_q, e_rho })
        })
        .collect::<Result<Vec<_>>>()?;
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let eq: Vec<f64> = rows.iter().map(|r| r.e_q).collect();
    let er: Vec<f64> = rows.iter().map(|r| r.e_rho).collect();
    let (slope_q, slope_rho) = if rows.len() >= 2 {
        (loglog_slope(&eps, &eq), loglog_slope(&eps, &er))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ScalingTable { rows, slope_q, slope_rho })
}
