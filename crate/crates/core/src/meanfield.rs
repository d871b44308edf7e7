//! Fast-time-scale mean-field dynamics.
//!
//! Densities are kept per in-degree class. Links are sampled the
//! configuration-model way, so the probability that a random link ends at a
//! node in state `z` is `θ_z = Σ_l l·q_l·ρ^l_z / Σ_l l·q_l`. For fixed `θ`,
//! class `l` evolves by the continuous-time generator `F^l` built from the
//! multinomially averaged kernel `G^l`, and mass flows `z1 -> z2` at rate
//! `G^l[z1][z2]`, i.e. `dρ^l/dt = (F^l)ᵀ ρ^l`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::DegreeDistribution;
use crate::kernel::{triangle_index, triangle_len, KernelSlice, Mat3, TransitionKernel};
use crate::ode::{step_count, Rk4};
use crate::seeds;

/// Densities `(ρ_T, ρ_H, ρ_D)` of one degree class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexDensity(pub [f64; 3]);

impl SimplexDensity {
    pub const TRUTHFUL: SimplexDensity = SimplexDensity([1.0, 0.0, 0.0]);

    pub fn new(t: f64, h: f64, d: f64) -> Result<Self> {
        let s = SimplexDensity([t, h, d]);
        s.validate()?;
        Ok(s)
    }

    pub fn t(&self) -> f64 {
        self.0[0]
    }
    pub fn h(&self) -> f64 {
        self.0[1]
    }
    pub fn d(&self) -> f64 {
        self.0[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&x| !(-1e-12..=1.0 + 1e-12).contains(&x)) {
            return Err(Error::invalid(format!("density {:?} has entries outside [0, 1]", self.0)));
        }
        if (self.0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("density {:?} does not sum to 1", self.0)));
        }
        Ok(())
    }
}

/// Per-degree densities aligned with a [`DegreeDistribution`].
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldState {
    densities: Vec<SimplexDensity>,
}

impl MeanFieldState {
    pub fn new(densities: Vec<SimplexDensity>) -> Result<Self> {
        if densities.is_empty() {
            return Err(Error::invalid("mean-field state needs at least one class"));
        }
        for d in &densities {
            d.validate()?;
        }
        Ok(MeanFieldState { densities })
    }

    /// Every class at the same density.
    pub fn uniform(classes: usize, density: SimplexDensity) -> Self {
        MeanFieldState {
            densities: vec![density; classes.max(1)],
        }
    }

    pub fn all_truthful(classes: usize) -> Self {
        Self::uniform(classes, SimplexDensity::TRUTHFUL)
    }

    pub fn densities(&self) -> &[SimplexDensity] {
        &self.densities
    }

    pub fn classes(&self) -> usize {
        self.densities.len()
    }

    /// Flattened `[ρ^0_T, ρ^0_H, ρ^0_D, ρ^1_T, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.densities.iter().flat_map(|d| d.0).collect()
    }

    pub(crate) fn from_flat_unchecked(x: &[f64]) -> Self {
        MeanFieldState {
            densities: x.chunks_exact(3).map(|c| SimplexDensity([c[0], c[1], c[2]])).collect(),
        }
    }

    /// `Σ_l q_l ρ^l_z` for each state.
    pub fn aggregate(&self, q: &DegreeDistribution) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (d, &p) in self.densities.iter().zip(q.probs()) {
            for z in 0..3 {
                out[z] += p * d.0[z];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &MeanFieldState) -> f64 {
        self.densities
            .iter()
            .zip(&other.densities)
            .flat_map(|(a, b)| (0..3).map(move |z| (a.0[z] - b.0[z]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Link-sampling probabilities; `d` always equals `1 - t - h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaTriple {
    pub t: f64,
    pub h: f64,
    pub d: f64,
}

impl ThetaTriple {
    pub fn new(t: f64, h: f64) -> Result<Self> {
        let d = 1.0 - t - h;
        if t < 0.0 || h < 0.0 || d < -1e-12 {
            return Err(Error::invalid(format!("theta ({t}, {h}) not on the simplex")));
        }
        Ok(ThetaTriple { t, h, d: d.max(0.0) })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.t, self.h, self.d]
    }
}

fn check_lengths(q: &DegreeDistribution, classes: usize) -> Result<()> {
    if q.len() != classes {
        return Err(Error::LengthMismatch {
            what: "degree distribution vs mean-field classes",
            left: q.len(),
            right: classes,
        });
    }
    Ok(())
}

/// θ from flat densities; `(0, 0, 1)` when the network has no links.
pub(crate) fn theta_flat(q: &[f64], x: &[f64]) -> ThetaTriple {
    let mut num = [0.0; 3];
    let mut den = 0.0;
    for (l, &p) in q.iter().enumerate() {
        let w = l as f64 * p;
        if w == 0.0 {
            continue;
        }
        den += w;
        for z in 0..3 {
            num[z] += w * x[3 * l + z];
        }
    }
    if den == 0.0 {
        return ThetaTriple { t: 0.0, h: 0.0, d: 1.0 };
    }
    let t = num[0] / den;
    let h = num[1] / den;
    ThetaTriple { t, h, d: 1.0 - t - h }
}

pub fn compute_theta(q: &DegreeDistribution, state: &MeanFieldState) -> Result<ThetaTriple> {
    check_lengths(q, state.classes())?;
    Ok(theta_flat(q.probs(), &state.to_flat()))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0;
    for m in 0..k {
        c = c * (n - m) as f64 / (m + 1) as f64;
    }
    c
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Multinomial probabilities `C(l; i, j)·θ_T^i·θ_H^j·θ_D^(l-i-j)` in
/// triangular `(i, j)` order. Log-space above `l = 20`.
pub fn multinomial_weights(l: usize, theta: &ThetaTriple, out: &mut Vec<f64>) {
    out.clear();
    out.resize(triangle_len(l), 0.0);
    let (t, h, d) = (theta.t, theta.h, (1.0 - theta.t - theta.h).max(0.0));
    if l <= 20 {
        let pw = |x: f64, k: usize| x.powi(k as i32);
        for i in 0..=l {
            let ci = binomial(l, i) * pw(t, i);
            for j in 0..=(l - i) {
                out[triangle_index(l, i, j)] = ci * binomial(l - i, j) * pw(h, j) * pw(d, l - i - j);
            }
        }
    } else {
        let lnf: Vec<f64> = {
            let mut v = vec![0.0; l + 1];
            for k in 2..=l {
                v[k] = v[k - 1] + (k as f64).ln();
            }
            v
        };
        debug_assert!((lnf[l] - ln_factorial(l)).abs() < 1e-6 * lnf[l].max(1.0));
        let lp = |x: f64, k: usize| if k == 0 { 0.0 } else { k as f64 * x.ln() };
        for i in 0..=l {
            for j in 0..=(l - i) {
                let k = l - i - j;
                let ln = lnf[l] - lnf[i] - lnf[j] - lnf[k] + lp(t, i) + lp(h, j) + lp(d, k);
                out[triangle_index(l, i, j)] = ln.exp();
            }
        }
    }
}

fn average_laws(laws: &[Mat3], weights: &[f64]) -> Mat3 {
    let mut g = [[0.0; 3]; 3];
    for (k, &w) in laws.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for z1 in 0..3 {
            for z2 in 0..3 {
                g[z1][z2] += w * k[z1][z2];
            }
        }
    }
    g
}

/// Averaged one-round law `G^l` for a degree-`l` agent whose sources are
/// drawn independently with probabilities `θ`.
pub fn transition_matrix_g(
    l: usize,
    theta: &ThetaTriple,
    u: f64,
    kernel: &dyn TransitionKernel,
) -> Mat3 {
    let mut w = Vec::new();
    multinomial_weights(l, theta, &mut w);
    let mut g = [[0.0; 3]; 3];
    for i in 0..=l {
        for j in 0..=(l - i) {
            let wt = w[triangle_index(l, i, j)];
            if wt == 0.0 {
                continue;
            }
            let k = kernel.eval(u, l, i, j);
            for z1 in 0..3 {
                for z2 in 0..3 {
                    g[z1][z2] += wt * k[z1][z2];
                }
            }
        }
    }
    g
}

/// Continuous-time generator: off-diagonal entries of `G`, diagonal set to
/// minus the off-diagonal row sum.
pub fn generator_from_g(g: &Mat3) -> Mat3 {
    let mut f = *g;
    for z1 in 0..3 {
        let off: f64 = (0..3).filter(|&z2| z2 != z1).map(|z2| g[z1][z2]).sum();
        f[z1][z1] = -off;
    }
    f
}

pub fn generator_f(l: usize, theta: &ThetaTriple, u: f64, kernel: &dyn TransitionKernel) -> Mat3 {
    generator_from_g(&transition_matrix_g(l, theta, u, kernel))
}

/// The fast vector field for a fixed control, with kernel laws tabulated once.
pub struct FastDynamics {
    slice: KernelSlice,
    u: f64,
}

impl FastDynamics {
    pub fn new(kernel: &dyn TransitionKernel, u: f64, l_max: usize) -> Result<Self> {
        Ok(FastDynamics {
            slice: KernelSlice::from_kernel(kernel, u, l_max)?,
            u,
        })
    }

    pub fn control(&self) -> f64 {
        self.u
    }

    pub fn l_max(&self) -> usize {
        self.slice.l_max()
    }

    pub fn generator(&self, l: usize, theta: &ThetaTriple, scratch: &mut Vec<f64>) -> Mat3 {
        multinomial_weights(l, theta, scratch);
        generator_from_g(&average_laws(self.slice.degree(l), scratch))
    }

    /// Writes `dρ/dt` for flat densities `x` under degree distribution `q`.
    pub fn rates(&self, q: &[f64], x: &[f64], dx: &mut [f64], scratch: &mut Vec<f64>) {
        let theta = theta_flat(q, x);
        for l in 0..q.len() {
            let f = self.generator(l, &theta, scratch);
            let rho = &x[3 * l..3 * l + 3];
            for z2 in 0..3 {
                dx[3 * l + z2] = (0..3).map(|z1| f[z1][z2] * rho[z1]).sum();
            }
        }
    }

    /// Per-class stationary densities of `F^l(θ)`.
    pub(crate) fn stationary(&self, q_len: usize, theta: &ThetaTriple, prev: &[f64], out: &mut [f64]) {
        let mut scratch = Vec::new();
        for l in 0..q_len {
            let f = self.generator(l, theta, &mut scratch);
            let pi = stationary_3(&f).unwrap_or([prev[3 * l], prev[3 * l + 1], prev[3 * l + 2]]);
            out[3 * l..3 * l + 3].copy_from_slice(&pi);
        }
    }
}

/// Stationary law of a 3-state generator by the matrix-tree formula;
/// `None` when the chain has several closed classes.
pub fn stationary_3(f: &Mat3) -> Option<[f64; 3]> {
    let a = |x: usize, y: usize| f[x][y].max(0.0);
    let w = [
        a(1, 0) * a(2, 0) + a(1, 0) * a(2, 1) + a(1, 2) * a(2, 0),
        a(0, 1) * a(2, 1) + a(0, 1) * a(2, 0) + a(0, 2) * a(2, 1),
        a(0, 2) * a(1, 2) + a(0, 2) * a(1, 0) + a(0, 1) * a(1, 2),
    ];
    let s: f64 = w.iter().sum();
    if s <= 0.0 || !s.is_finite() {
        return None;
    }
    Some([w[0] / s, w[1] / s, w[2] / s])
}

/// Clips every class to `[0, 1]` and rescales to unit mass. Returns the
/// largest pre-normalization drift (mass error plus clipped negative mass).
pub(crate) fn project_to_simplex(x: &mut [f64]) -> f64 {
    let mut drift: f64 = 0.0;
    for c in x.chunks_exact_mut(3) {
        let neg: f64 = c.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
        let sum: f64 = c.iter().sum();
        drift = drift.max((sum - 1.0).abs() + neg);
        for v in c.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let s: f64 = c.iter().sum();
        if s > 0.0 {
            c.iter_mut().for_each(|v| *v /= s);
        }
    }
    drift
}

pub const DRIFT_REJECT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<MeanFieldState>,
}

impl Trajectory {
    pub fn last(&self) -> &MeanFieldState {
        self.states.last().expect("trajectory never empty")
    }

    /// CSV columns `t,l,rho_T,rho_H,rho_D,rho_T_agg,V`, one row per sample and class.
    pub fn write_csv<W: Write>(&self, q: &DegreeDistribution, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "l", "rho_T", "rho_H", "rho_D", "rho_T_agg", "V"])?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let agg = s.aggregate(q)[0];
            let v = lyapunov_v(s, q)?;
            for (l, d) in s.densities().iter().enumerate() {
                wtr.write_record([
                    fmt_f(*t),
                    l.to_string(),
                    fmt_f(d.t()),
                    fmt_f(d.h()),
                    fmt_f(d.d()),
                    fmt_f(agg),
                    fmt_f(v),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_f(x: f64) -> String {
    format!("{x:.10e}")
}

/// RK4 on the fast system with θ recomputed at every stage. The trajectory
/// is sampled every `dt` and includes the initial state.
pub fn integrate_fast(
    state0: &MeanFieldState,
    q: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::invalid(format!("integrate_fast: need dt > 0 and t_end >= 0 (dt={dt}, t_end={t_end})")));
    }
    check_lengths(q, state0.classes())?;
    let dynamics = FastDynamics::new(kernel, u, q.l_max())?;
    let qp = q.probs();
    let mut x = state0.to_flat();
    let mut rk = Rk4::new(x.len());
    let mut scratch = Vec::new();
    let steps = step_count(t_end, dt);
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
    };
    traj.times.push(0.0);
    traj.states.push(state0.clone());
    for k in 1..=steps {
        rk.step(&mut |y: &[f64], dy: &mut [f64]| dynamics.rates(qp, y, dy, &mut scratch), &mut x, dt);
        let t = k as f64 * dt;
        let drift = project_to_simplex(&mut x);
        if drift > DRIFT_REJECT {
            return Err(Error::StepRejected { t, drift });
        }
        debug_assert!(x.chunks_exact(3).all(|c| (c.iter().sum::<f64>() - 1.0).abs() <= 1e-9));
        traj.times.push(t);
        traj.states.push(MeanFieldState::from_flat_unchecked(&x));
    }
    Ok(traj)
}

/// `V(ρ) = Σ_l q_l (ρ^l_H + ρ^l_D)`.
pub fn lyapunov_v(state: &MeanFieldState, q: &DegreeDistribution) -> Result<f64> {
    check_lengths(q, state.classes())?;
    Ok(state
        .densities()
        .iter()
        .zip(q.probs())
        .map(|(d, p)| p * (d.h() + d.d()))
        .sum())
}

/// `dV/dt = Σ_l q_l (dρ^l_H/dt + dρ^l_D/dt)` along the fast vector field.
pub fn lyapunov_vdot(
    state: &MeanFieldState,
    q: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
) -> Result<f64> {
    check_lengths(q, state.classes())?;
    let dynamics = FastDynamics::new(kernel, u, q.l_max())?;
    let x = state.to_flat();
    let mut dx = vec![0.0; x.len()];
    dynamics.rates(q.probs(), &x, &mut dx, &mut Vec::new());
    Ok(q.probs()
        .iter()
        .enumerate()
        .map(|(l, p)| p * (dx[3 * l + 1] + dx[3 * l + 2]))
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct A3Report {
    pub holds: bool,
    pub samples: usize,
    pub counterexamples: usize,
}

pub const A3_SAMPLES: usize = 10_000;

/// Randomized search for states with every `ρ^l_H, ρ^l_D < ε/2` whose link
/// probabilities violate `θ_T > 1 − ε` or `θ_H < ε/2`.
pub fn check_a3(q: &DegreeDistribution, epsilon: f64) -> Result<A3Report> {
    check_a3_with(q, epsilon, A3_SAMPLES, 0xA3, |q, s| compute_theta(q, s))
}

/// [`check_a3`] with an explicit θ map (for testing alternative link models).
pub fn check_a3_with<F>(
    q: &DegreeDistribution,
    epsilon: f64,
    samples: usize,
    seed: u64,
    theta: F,
) -> Result<A3Report>
where
    F: Fn(&DegreeDistribution, &MeanFieldState) -> Result<ThetaTriple>,
{
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("check_a3: epsilon={epsilon} must be in (0, 1)")));
    }
    let mut rng = seeds::rng(seed, &[]);
    let mut counterexamples = 0;
    for _ in 0..samples {
        let densities = (0..q.len())
            .map(|_| {
                let h = rng.gen::<f64>() * epsilon / 2.0;
                let d = rng.gen::<f64>() * epsilon / 2.0;
                SimplexDensity([1.0 - h - d, h, d])
            })
            .collect();
        let th = theta(q, &MeanFieldState { densities })?;
        if !(th.t > 1.0 - epsilon && th.h < epsilon / 2.0) {
            counterexamples += 1;
        }
    }
    Ok(A3Report {
        holds: counterexamples == 0,
        samples,
        counterexamples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuasiSteady {
    pub state: MeanFieldState,
    pub residual: f64,
    pub iterations: usize,
}

/// `max_l ‖(F^l(θ(ρ)))ᵀ ρ^l‖_∞`, recomputing θ from `state`.
pub fn residual(
    state: &MeanFieldState,
    q: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
) -> Result<f64> {
    check_lengths(q, state.classes())?;
    let dynamics = FastDynamics::new(kernel, u, q.l_max())?;
    Ok(residual_flat(&dynamics, q.probs(), &state.to_flat()))
}

pub(crate) fn residual_flat(dynamics: &FastDynamics, q: &[f64], x: &[f64]) -> f64 {
    let mut dx = vec![0.0; x.len()];
    dynamics.rates(q, x, &mut dx, &mut Vec::new());
    dx.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Damped fixed point on θ; see [`solve_quasi_steady`].
pub(crate) fn quasi_steady_flat(
    dynamics: &FastDynamics,
    q: &[f64],
    init: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64, usize)> {
    let mut x = init.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut theta = theta_flat(q, &x);
    let mut last_res = f64::INFINITY;
    for it in 1..=max_iter {
        dynamics.stationary(q.len(), &theta, &x, &mut next);
        let fresh = theta_flat(q, &next);
        let change = (fresh.t - theta.t).abs().max((fresh.h - theta.h).abs());
        last_res = residual_flat(dynamics, q, &next);
        std::mem::swap(&mut x, &mut next);
        if change < tol && last_res <= tol {
            return Ok((x, last_res, it));
        }
        theta = ThetaTriple {
            t: 0.5 * (theta.t + fresh.t),
            h: 0.5 * (theta.h + fresh.h),
            d: 0.5 * (theta.d + fresh.d),
        };
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: last_res,
        at: None,
    })
}

/// Quasi-steady state `Ψ(q)`: densities with `(F^l(θ(ρ)))ᵀ ρ^l = 0` for every
/// class. Each iteration takes the per-class stationary law of `F^l(θ)`,
/// recomputes θ and damps the update by one half. `init` seeds the
/// iteration (all classes at `(1/3, 1/3, 1/3)` when absent).
pub fn solve_quasi_steady(
    q: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
    tol: f64,
    max_iter: usize,
    init: Option<&MeanFieldState>,
) -> Result<QuasiSteady> {
    if !(tol > 0.0) {
        return Err(Error::invalid("solve_quasi_steady: tol must be > 0"));
    }
    let dynamics = FastDynamics::new(kernel, u, q.l_max())?;
    let x0 = match init {
        Some(s) => {
            check_lengths(q, s.classes())?;
            s.to_flat()
        }
        None => vec![1.0 / 3.0; 3 * q.len()],
    };
    let (x, residual, iterations) = quasi_steady_flat(&dynamics, q.probs(), &x0, tol, max_iter)?;
    Ok(QuasiSteady {
        state: MeanFieldState::from_flat_unchecked(&x),
        residual,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub stable: bool,
    /// Eigenvalues `(re, im)` of the Jacobian restricted to the simplex tangent space.
    pub eigenvalues: Vec<(f64, f64)>,
    pub max_real: f64,
}

pub const FD_STEP: f64 = 1e-6;
pub const SPECTRAL_MARGIN: f64 = 1e-9;

/// Central-difference Jacobian of the full stacked fast vector field.
pub fn fast_jacobian(
    q: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
    state: &MeanFieldState,
) -> Result<DMatrix<f64>> {
    check_lengths(q, state.classes())?;
    let dynamics = FastDynamics::new(kernel, u, q.l_max())?;
    let x = state.to_flat();
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
    let mut scratch = Vec::new();
    let mut xp = x.clone();
    for c in 0..n {
        xp[c] = x[c] + FD_STEP;
        dynamics.rates(q.probs(), &xp, &mut fp, &mut scratch);
        xp[c] = x[c] - FD_STEP;
        dynamics.rates(q.probs(), &xp, &mut fm, &mut scratch);
        xp[c] = x[c];
        for r in 0..n {
            jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * FD_STEP);
        }
    }
    Ok(jac)
}

/// Restricts a stacked Jacobian to the per-class tangent space
/// `Σ_z δρ^l_z = 0`, using `(ρ_H, ρ_D)` coordinates with `ρ_T` eliminated.
/// This removes the one conserved-mass zero mode of every class.
pub fn deflate_simplex_modes(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let classes = jac.nrows() / 3;
    let m = 2 * classes;
    let mut red = DMatrix::zeros(m, m);
    for (rl, rr) in (0..classes).flat_map(|l| [(l, 1), (l, 2)]).enumerate().map(|(k, (l, z))| (k, 3 * l + z)) {
        for (cl, (l, z)) in (0..classes).flat_map(|l| [(l, 1usize), (l, 2usize)]).enumerate() {
            // tangent basis vector e_z − e_T of class l
            red[(rl, cl)] = jac[(rr, 3 * l + z)] - jac[(rr, 3 * l)];
        }
    }
    red
}

/// Spectral stability of a quasi-steady state: all eigenvalues of the
/// deflated Jacobian must have real part below `-1e-9`.
pub fn jacobian_stability_check(
    q: &DegreeDistribution,
    u: f64,
    kernel: &dyn TransitionKernel,
    rho_star: &MeanFieldState,
) -> Result<StabilityReport> {
    let res = residual(rho_star, q, u, kernel)?;
    if res > 1e-8 {
        return Err(Error::Precondition(format!(
            "jacobian check needs a quasi-steady state (residual {res:e} > 1e-8)"
        )));
    }
    let jac = fast_jacobian(q, u, kernel, rho_star)?;
    let red = deflate_simplex_modes(&jac);
    let eig = red.complex_eigenvalues();
    let eigenvalues: Vec<(f64, f64)> = eig.iter().map(|c| (c.re, c.im)).collect();
    let ambiguous = eigenvalues.iter().filter(|e| e.0.abs() < SPECTRAL_MARGIN).count();
    if ambiguous > 0 {
        return Err(Error::AmbiguousSpectrum(ambiguous));
    }
    let max_real = eigenvalues.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(StabilityReport {
        stable: max_real < -SPECTRAL_MARGIN,
        eigenvalues,
        max_real,
    })
}
