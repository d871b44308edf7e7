//! Token-budget control: communication/accuracy cost, the `u` sweep, and
//! SPSA tuning of `u` on simulated episodes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abm::{step_round, ActivationPolicy, AgentPopulation, KernelAgents};
use crate::error::{Error, Result};
use crate::graph::{generate_configuration, in_degree_distribution, DegreeDistribution};
use crate::kernel::{KernelParams, LatentState, LogisticKernel};
use crate::meanfield::{fmt_f, SimplexDensity};
use crate::seeds::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub xi_c: f64,
    pub xi_a: f64,
    /// Use `ξ_c·comm − ξ_a·(1 − ρ_T)` as printed instead of `+ξ_a`.
    pub literal_eq7_sign: bool,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            xi_c: 1e-6,
            xi_a: 1.0,
            literal_eq7_sign: false,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_c > 0.0 && self.xi_a > 0.0 && self.xi_c.is_finite() && self.xi_a.is_finite()) {
            return Err(Error::Config(format!(
                "cost weights: xi_c={} and xi_a={} must be positive",
                self.xi_c, self.xi_a
            )));
        }
        Ok(())
    }
}

/// Per-agent communication cost `c_c(l, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CommCostFn {
    /// `l·u`: `l` messages of `u` tokens.
    Linear,
    /// `values[l][m]` at `u_grid[m]`, linear in `u` between grid points and
    /// flat outside. Degrees past the last row reuse it.
    Table { u_grid: Vec<f64>, values: Vec<Vec<f64>> },
}

impl Default for CommCostFn {
    fn default() -> Self {
        CommCostFn::Linear
    }
}

impl CommCostFn {
    pub fn validate(&self) -> Result<()> {
        match self {
            CommCostFn::Linear => Ok(()),
            CommCostFn::Table { u_grid, values } => {
                if u_grid.is_empty() || values.is_empty() {
                    return Err(Error::Config("comm cost table: empty grid".into()));
                }
                if u_grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("comm cost table: u_grid must be strictly increasing".into()));
                }
                for (l, row) in values.iter().enumerate() {
                    if row.len() != u_grid.len() {
                        return Err(Error::Config(format!(
                            "comm cost table: row {l} has {} entries, u_grid has {}",
                            row.len(),
                            u_grid.len()
                        )));
                    }
                    if row.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                        return Err(Error::Config(format!("comm cost table: row {l} has a negative entry")));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, l: usize, u: f64) -> f64 {
        match self {
            CommCostFn::Linear => l as f64 * u.max(0.0),
            CommCostFn::Table { u_grid, values } => {
                let row = &values[l.min(values.len() - 1)];
                let m = u_grid.partition_point(|&g| g <= u);
                if m == 0 {
                    row[0]
                } else if m == u_grid.len() {
                    row[m - 1]
                } else {
                    let w = (u - u_grid[m - 1]) / (u_grid[m] - u_grid[m - 1]);
                    row[m - 1] + w * (row[m] - row[m - 1])
                }
            }
        }
    }

    /// `E_q[c_c(l, u)]`.
    pub fn expected(&self, q: &DegreeDistribution, u: f64) -> f64 {
        q.probs().iter().enumerate().map(|(l, p)| p * self.eval(l, u)).sum()
    }
}

/// `ξ_c·Σ_k E_{q_k}[c_c(l,u)] + ξ_a·(1 − ρ_T^L)`.
pub fn evaluate_cost<'a>(
    q_traj: impl IntoIterator<Item = &'a DegreeDistribution>,
    rho_t_final: f64,
    u: f64,
    weights: &CostWeights,
    comm: &CommCostFn,
) -> f64 {
    let token: f64 = q_traj.into_iter().map(|q| comm.expected(q, u)).sum();
    combine_cost(token, rho_t_final, weights)
}

fn combine_cost(token: f64, rho_t_final: f64, weights: &CostWeights) -> f64 {
    let acc = weights.xi_a * (1.0 - rho_t_final);
    if weights.literal_eq7_sign {
        weights.xi_c * token - acc
    } else {
        weights.xi_c * token + acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpsaSchedule {
    pub a0: f64,
    pub c0: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub steps: usize,
    pub u_bounds: (f64, f64),
}

impl Default for SpsaSchedule {
    fn default() -> Self {
        SpsaSchedule {
            a0: 400.0,
            c0: 2.0,
            alpha: 0.602,
            gamma: 0.101,
            steps: 50,
            u_bounds: (1.0, 60.0),
        }
    }
}

impl SpsaSchedule {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.u_bounds;
        if !(self.a0 > 0.0 && self.c0 > 0.0) {
            return Err(Error::Config("spsa: a0 and c0 must be > 0".into()));
        }
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("spsa: alpha={} must be in (0.5, 1]", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma < self.alpha / 2.0 + 0.5) {
            return Err(Error::Config(format!(
                "spsa: gamma={} must be in (0, alpha/2 + 0.5)",
                self.gamma
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("spsa: u_bounds ({lo}, {hi}) must be increasing")));
        }
        Ok(())
    }

    pub fn a_k(&self, k: usize) -> f64 {
        self.a0 / ((k + 1) as f64).powf(self.alpha)
    }

    pub fn c_k(&self, k: usize) -> f64 {
        self.c0 / ((k + 1) as f64).powf(self.gamma)
    }

    pub fn clip(&self, u: f64) -> f64 {
        u.clamp(self.u_bounds.0, self.u_bounds.1)
    }
}

/// Stochastic cost at `u`; the second argument seeds the simulation noise.
pub type CostOracle<'a> = dyn Fn(f64, u64) -> Result<f64> + Sync + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct SpsaDiagnostics {
    pub delta: f64,
    pub y_plus: f64,
    pub y_minus: f64,
    pub g_hat: f64,
    pub a_k: f64,
    pub c_k: f64,
}

/// One SPSA update with a given perturbation sign. Both evaluations share
/// the noise seed, so `y⁺ − y⁻` only reflects the change in `u`.
pub fn spsa_step_with_delta(
    u_k: f64,
    k: usize,
    schedule: &SpsaSchedule,
    oracle: &CostOracle<'_>,
    delta: f64,
    noise_seed: u64,
) -> Result<(f64, SpsaDiagnostics)> {
    let (a_k, c_k) = (schedule.a_k(k), schedule.c_k(k));
    let (yp, ym) = rayon::join(
        || oracle(u_k + c_k * delta, noise_seed),
        || oracle(u_k - c_k * delta, noise_seed),
    );
    let (y_plus, y_minus) = (yp?, ym?);
    let g_hat = (y_plus - y_minus) / (2.0 * c_k * delta);
    let next = schedule.clip(u_k - a_k * g_hat);
    Ok((
        next,
        SpsaDiagnostics {
            delta,
            y_plus,
            y_minus,
            g_hat,
            a_k,
            c_k,
        },
    ))
}

/// One SPSA update with a Rademacher perturbation drawn from `seed`. On
/// oracle failure `u_k` is returned unchanged with no diagnostics.
pub fn spsa_step(
    u_k: f64,
    k: usize,
    schedule: &SpsaSchedule,
    oracle: &CostOracle<'_>,
    seed: u64,
) -> (f64, Option<SpsaDiagnostics>) {
    let delta = if seeds::uniform(seed, &[stream::SPSA, k as u64, 0]) < 0.5 { -1.0 } else { 1.0 };
    let noise = seeds::derive(seed, &[stream::SPSA, k as u64, 1]);
    match spsa_step_with_delta(u_k, k, schedule, oracle, delta, noise) {
        Ok((u, d)) => (u, Some(d)),
        Err(e) => {
            log::warn!("spsa step {k} at u={u_k}: oracle failed, keeping u: {e}");
            (u_k, None)
        }
    }
}

/// Synthetic episode used by the sweep and the optimizer: an ABM run on a
/// configuration-model network at a fixed control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlScenario {
    pub n: usize,
    pub q: Vec<f64>,
    pub kernel: KernelParams,
    pub initial: [f64; 3],
    /// Rounds per episode (one control update).
    pub rounds: usize,
    pub comm: CommCostFn,
    pub weights: CostWeights,
}

impl Default for ControlScenario {
    fn default() -> Self {
        ControlScenario {
            n: 200,
            q: vec![0.0, 0.25, 0.25, 0.2, 0.15, 0.1, 0.05],
            // quality peaks near u = 20: terse answers get cut off, long
            // ones drift
            kernel: KernelParams {
                beta0: 1.0,
                bias_t: 4.0,
                penalty_amp: 2.0,
                width: 12.0,
                short_amp: 2.0,
                short_mid: 8.0,
                short_width: 5.0,
                ..KernelParams::default()
            },
            initial: [0.3, 0.35, 0.35],
            rounds: 1000,
            comm: CommCostFn::Linear,
            weights: CostWeights::default(),
        }
    }
}

impl ControlScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.rounds == 0 {
            return Err(Error::Config("control scenario: n >= 2 and rounds >= 1".into()));
        }
        DegreeDistribution::new(self.q.clone())?;
        LogisticKernel::new(self.kernel.clone())?;
        SimplexDensity(self.initial).validate()?;
        self.comm.validate()?;
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub rho_t: f64,
    pub rho_h: f64,
    /// `Σ_k E_{q_k}[c_c(l, u)]` over the episode.
    pub token_cost: f64,
    pub cost: f64,
}

/// Runs one episode. `scenario_seed` fixes the network and initial states
/// (the "question"); `noise_seed` drives the per-round draws.
pub fn run_episode(s: &ControlScenario, u: f64, scenario_seed: u64, noise_seed: u64) -> Result<EpisodeOutcome> {
    let kernel = LogisticKernel::new(s.kernel.clone())?;
    let q = DegreeDistribution::new(s.q.clone())?;
    let net = generate_configuration(s.n, &q, seeds::derive(scenario_seed, &[stream::NETWORK]))?;
    let q_net = in_degree_distribution(&net);
    let mut pop = AgentPopulation::random(net, s.initial, seeds::derive(scenario_seed, &[stream::INIT_STATES]))?;
    let agents = KernelAgents { kernel: &kernel };
    for _ in 0..s.rounds {
        pop = step_round(&pop, &agents, u, &ActivationPolicy::All, noise_seed);
    }
    let n = pop.n() as f64;
    let count = |z: LatentState| pop.states.iter().filter(|s| **s == z).count() as f64 / n;
    let (rho_t, rho_h) = (count(LatentState::Truthful), count(LatentState::Hallucinating));
    // the network is static, so q_k is the same every round
    let token_cost = s.rounds as f64 * s.comm.expected(&q_net, u);
    Ok(EpisodeOutcome {
        rho_t,
        rho_h,
        token_cost,
        cost: combine_cost(token_cost, rho_t, &s.weights),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub u: f64,
    pub rho_t_mean: f64,
    pub rho_h_mean: f64,
    pub token_cost_mean: f64,
    pub n_trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Outcomes per grid point and trial.
    pub outcomes: Vec<Vec<EpisodeOutcome>>,
}

impl SweepTable {
    pub fn argmax_rho_t(&self) -> f64 {
        argmax(&self.rows, |r| r.rho_t_mean)
    }

    pub fn argmax_rho_h(&self) -> f64 {
        argmax(&self.rows, |r| r.rho_h_mean)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["u", "rho_T_mean", "rho_H_mean", "token_cost_mean", "n_trials"])?;
        for r in &self.rows {
            wtr.write_record([
                fmt_f(r.u),
                fmt_f(r.rho_t_mean),
                fmt_f(r.rho_h_mean),
                fmt_f(r.token_cost_mean),
                r.n_trials.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Columns `u,trial,rho_T,rho_H,token_cost`.
    pub fn write_trials_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["u", "trial", "rho_T", "rho_H", "token_cost"])?;
        for (r, cell) in self.rows.iter().zip(&self.outcomes) {
            for (t, o) in cell.iter().enumerate() {
                wtr.write_record([fmt_f(r.u), t.to_string(), fmt_f(o.rho_t), fmt_f(o.rho_h), fmt_f(o.token_cost)])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn argmax(rows: &[SweepRow], key: impl Fn(&SweepRow) -> f64) -> f64 {
    rows.iter()
        .max_by(|a, b| key(a).total_cmp(&key(b)))
        .map(|r| r.u)
        .unwrap_or(f64::NAN)
}

/// Final densities and token cost at each `u`, averaged over `trials`
/// episodes. Trial `t` uses the same network and noise at every `u`.
pub fn control_sweep(u_grid: &[f64], scenario: &ControlScenario, trials: usize, seed: u64) -> Result<SweepTable> {
    if u_grid.is_empty() {
        return Err(Error::Config("sweep: u grid is empty".into()));
    }
    if trials < 5 {
        return Err(Error::Config(format!("sweep: trials={trials} must be >= 5")));
    }
    scenario.validate()?;
    let cells: Vec<(usize, usize)> = (0..u_grid.len()).flat_map(|m| (0..trials).map(move |t| (m, t))).collect();
    let outs = cells
        .par_iter()
        .map(|&(m, t)| {
            let trial = seeds::derive(seed, &[stream::TRIAL, t as u64]);
            run_episode(scenario, u_grid[m], trial, seeds::derive(trial, &[stream::ROUND]))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = u_grid
        .iter()
        .enumerate()
        .map(|(m, &u)| {
            let cell = &outs[m * trials..(m + 1) * trials];
            let mean = |f: fn(&EpisodeOutcome) -> f64| cell.iter().map(f).sum::<f64>() / trials as f64;
            SweepRow {
                u,
                rho_t_mean: mean(|o| o.rho_t),
                rho_h_mean: mean(|o| o.rho_h),
                token_cost_mean: mean(|o| o.token_cost),
                n_trials: trials,
            }
        })
        .collect();
    let outcomes = outs.chunks(trials).map(|c| c.to_vec()).collect();
    Ok(SweepTable { rows, outcomes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub u0: f64,
    pub schedule: SpsaSchedule,
    pub scenario: ControlScenario,
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            u0: 45.0,
            schedule: SpsaSchedule::default(),
            scenario: ControlScenario::default(),
            train_scenarios: 10,
            eval_scenarios: 10,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.scenario.validate()?;
        if self.train_scenarios == 0 || self.eval_scenarios == 0 {
            return Err(Error::Config("optimize: train and eval scenario sets must be non-empty".into()));
        }
        let (lo, hi) = self.schedule.u_bounds;
        if !(lo..=hi).contains(&self.u0) {
            return Err(Error::Config(format!("optimize: u0={} outside bounds ({lo}, {hi})", self.u0)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub u: f64,
    pub train_cost: f64,
    pub eval_cost: f64,
    /// Update taken from this row's `u`; `None` on the last row or after an
    /// oracle failure.
    pub update: Option<SpsaDiagnostics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeTrace {
    pub rows: Vec<TraceRow>,
}

impl OptimizeTrace {
    pub fn final_u(&self) -> f64 {
        self.rows.last().map(|r| r.u).unwrap_or(f64::NAN)
    }

    /// Trailing moving average of the train cost (window `w`, first value at
    /// row `w − 1`).
    pub fn train_moving_average(&self, w: usize) -> Vec<f64> {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.train_cost).collect();
        xs.windows(w.max(1)).map(|s| s.iter().sum::<f64>() / s.len() as f64).collect()
    }

    /// The externally reported token limit: `u` rounded to an integer.
    pub fn token_limits(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.u.round().max(0.0) as u64).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["step", "u", "train_cost", "eval_cost", "g_hat", "a_k", "c_k"])?;
        for r in &self.rows {
            let (g, a, c) = match &r.update {
                Some(d) => (fmt_f(d.g_hat), fmt_f(d.a_k), fmt_f(d.c_k)),
                None => Default::default(),
            };
            wtr.write_record([r.step.to_string(), fmt_f(r.u), fmt_f(r.train_cost), fmt_f(r.eval_cost), g, a, c])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn mean_cost(s: &ControlScenario, u: f64, scenario_seeds: &[u64], noise: impl Fn(usize) -> u64 + Sync) -> Result<f64> {
    let costs = scenario_seeds
        .par_iter()
        .enumerate()
        .map(|(m, &sc)| run_episode(s, u, sc, noise(m)).map(|o| o.cost))
        .collect::<Result<Vec<_>>>()?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// SPSA on the episode cost. Oracle calls average over the train
/// scenarios with fresh noise each step (shared by `y⁺` and `y⁻`). The
/// reported train and eval costs at each `u_k` use fixed noise so the
/// trace compares controls, not draws.
pub fn optimize(cfg: &OptimizeConfig, seed: u64) -> Result<OptimizeTrace> {
    cfg.validate()?;
    let train: Vec<u64> = (0..cfg.train_scenarios)
        .map(|m| seeds::derive(seed, &[stream::SCENARIO, 0, m as u64]))
        .collect();
    let eval: Vec<u64> = (0..cfg.eval_scenarios)
        .map(|m| seeds::derive(seed, &[stream::SCENARIO, 1, m as u64]))
        .collect();
    let s = &cfg.scenario;
    let fixed = |sc: &[u64]| {
        let sc = sc.to_vec();
        move |m: usize| seeds::derive(sc[m], &[stream::ROUND])
    };
    let report = |u: f64| -> Result<(f64, f64)> {
        let (a, b) = rayon::join(|| mean_cost(s, u, &train, fixed(&train)), || mean_cost(s, u, &eval, fixed(&eval)));
        Ok((a?, b?))
    };
    let oracle = |u: f64, noise: u64| mean_cost(s, u, &train, move |m| seeds::derive(noise, &[m as u64]));
    let mut u = cfg.u0;
    let mut rows = Vec::with_capacity(cfg.schedule.steps + 1);
    for k in 0..=cfg.schedule.steps {
        let (train_cost, eval_cost) = report(u)?;
        let (next, update) = if k < cfg.schedule.steps {
            spsa_step(u, k, &cfg.schedule, &oracle, seed)
        } else {
            (u, None)
        };
        log::info!("spsa step {k}: u={u:.3} train={train_cost:.6} eval={eval_cost:.6}");
        rows.push(TraceRow {
            step: k,
            u,
            train_cost,
            eval_cost,
            update,
        });
        u = next;
    }
    Ok(OptimizeTrace { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cost_arithmetic() {
        let w = CostWeights {
            xi_c: 1.0,
            xi_a: 0.0,
            literal_eq7_sign: false,
        };
        let q = DegreeDistribution::point(3);
        let c = evaluate_cost([&q], 1.0, 10.0, &w, &CommCostFn::Linear);
        assert_eq!(c, 30.0);
        let zero_comm = CostWeights {
            xi_c: 0.0,
            xi_a: 1.0,
            literal_eq7_sign: false,
        };
        assert_eq!(evaluate_cost([&q, &q], 1.0, 10.0, &zero_comm, &CommCostFn::Linear), 0.0);
        assert!(zero_comm.validate().is_err());
    }

    #[test]
    fn literal_sign_flips_accuracy_term() {
        let q = DegreeDistribution::point(2);
        let mut w = CostWeights::default();
        let fixed = evaluate_cost([&q], 0.7, 5.0, &w, &CommCostFn::Linear);
        w.literal_eq7_sign = true;
        let literal = evaluate_cost([&q], 0.7, 5.0, &w, &CommCostFn::Linear);
        assert!((fixed - literal - 2.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn crossover_at_default_ratio() {
        // per-step token cost where comm equals a 10% accuracy shortfall
        let w = CostWeights::default();
        let q = DegreeDistribution::point(4);
        let u = 0.1 / (w.xi_c * 4.0);
        let c = evaluate_cost([&q], 0.9, u, &w, &CommCostFn::Linear);
        assert!((c - 0.2).abs() < 1e-12);
    }

    #[test]
    fn table_interpolation() {
        let t = CommCostFn::Table {
            u_grid: vec![0.0, 10.0, 20.0],
            values: vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 4.0]],
        };
        t.validate().unwrap();
        assert_eq!(t.eval(1, 15.0), 3.0);
        assert_eq!(t.eval(5, 25.0), 4.0);
        assert_eq!(t.eval(0, 7.0), 0.0);
        let bad = CommCostFn::Table {
            u_grid: vec![0.0, 1.0],
            values: vec![vec![0.0, -1.0]],
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn cost_linear_in_each_weight(xc in 1e-7f64..1.0, xa in 1e-3f64..10.0, s in 0.5f64..4.0, rho in 0.0f64..1.0, u in 0.0f64..60.0) {
            let q = DegreeDistribution::new(vec![0.1, 0.4, 0.3, 0.2]).unwrap();
            let comm = CommCostFn::Linear;
            let base = CostWeights { xi_c: xc, xi_a: xa, literal_eq7_sign: false };
            let c0 = evaluate_cost([&q, &q], rho, u, &base, &comm);
            let only_c = evaluate_cost([&q, &q], 1.0, u, &base, &comm);
            let sc = CostWeights { xi_c: s * xc, ..base.clone() };
            let sa = CostWeights { xi_a: s * xa, ..base.clone() };
            let cc = evaluate_cost([&q, &q], rho, u, &sc, &comm);
            let ca = evaluate_cost([&q, &q], rho, u, &sa, &comm);
            prop_assert!((cc - (c0 + (s - 1.0) * only_c)).abs() < 1e-9 * (1.0 + cc.abs()));
            prop_assert!((ca - (c0 + (s - 1.0) * (c0 - only_c))).abs() < 1e-9 * (1.0 + ca.abs()));
        }

        #[test]
        fn linear_comm_nondecreasing(l in 0usize..20, u in 0.0f64..100.0, du in 0.0f64..10.0) {
            prop_assert!(CommCostFn::Linear.eval(l, u + du) >= CommCostFn::Linear.eval(l, u));
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(SpsaSchedule::default().validate().is_ok());
        assert!(SpsaSchedule { alpha: 0.5, ..SpsaSchedule::default() }.validate().is_err());
        assert!(SpsaSchedule { gamma: 0.9, alpha: 0.6, ..SpsaSchedule::default() }.validate().is_err());
        assert!(SpsaSchedule { u_bounds: (5.0, 5.0), ..SpsaSchedule::default() }.validate().is_err());
    }

    fn quad(u: f64, _: u64) -> Result<f64> {
        Ok((u - 20.0) * (u - 20.0))
    }

    #[test]
    fn quadratic_oracle_converges() {
        let sched = SpsaSchedule {
            a0: 0.2,
            c0: 2.0,
            ..SpsaSchedule::default()
        };
        let mut u = 45.0;
        let mut dist = vec![];
        for k in 0..50 {
            u = spsa_step(u, k, &sched, &quad, 9).0;
            dist.push((u - 20.0).abs());
        }
        assert!((u - 20.0).abs() <= 0.5, "{u}");
        for k in 5..dist.len() - 1 {
            assert!(dist[k + 1] <= dist[k] + 1e-12, "step {k}: {} -> {}", dist[k], dist[k + 1]);
        }
    }

    #[test]
    fn symmetric_oracle_keeps_u() {
        let flat = |_: f64, _: u64| Ok(3.0);
        let (u, d) = spsa_step(33.0, 4, &SpsaSchedule::default(), &flat, 1);
        assert_eq!(u, 33.0);
        assert_eq!(d.unwrap().g_hat, 0.0);
    }

    #[test]
    fn clipped_to_bounds() {
        let sched = SpsaSchedule {
            a0: 100.0,
            u_bounds: (5.0, 60.0),
            ..SpsaSchedule::default()
        };
        let rising = |u: f64, _: u64| Ok(u);
        assert_eq!(spsa_step(10.0, 0, &sched, &rising, 3).0, 5.0);
    }

    #[test]
    fn failed_oracle_leaves_u() {
        let broken = |_: f64, _: u64| Err(Error::invalid("episode failed"));
        let (u, d) = spsa_step(21.0, 0, &SpsaSchedule::default(), &broken, 0);
        assert_eq!(u, 21.0);
        assert!(d.is_none());
    }

    #[test]
    fn plus_one_delta_is_central_difference() {
        let sched = SpsaSchedule::default();
        let f = |u: f64, _: u64| Ok(0.1 * u * u * u - 2.0 * u);
        let mut u = 30.0;
        let mut v = 30.0;
        for k in 0..10 {
            u = spsa_step_with_delta(u, k, &sched, &f, 1.0, 0).unwrap().0;
            let c = sched.c0 / ((k + 1) as f64).powf(sched.gamma);
            let a = sched.a0 / ((k + 1) as f64).powf(sched.alpha);
            let g = (f(v + c, 0).unwrap() - f(v - c, 0).unwrap()) / (2.0 * c);
            v = (v - a * g).clamp(sched.u_bounds.0, sched.u_bounds.1);
            assert_eq!(u, v);
        }
    }

    fn small() -> ControlScenario {
        ControlScenario {
            n: 60,
            rounds: 100,
            ..ControlScenario::default()
        }
    }

    #[test]
    fn sweep_token_cost_increases() {
        let t = control_sweep(&[5.0, 10.0, 20.0, 40.0], &small(), 5, 2).unwrap();
        for w in t.rows.windows(2) {
            assert!(w[1].token_cost_mean > w[0].token_cost_mean);
        }
        assert!(control_sweep(&[5.0], &small(), 4, 2).is_err());
        assert!(control_sweep(&[], &small(), 5, 2).is_err());
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("u,rho_T_mean,rho_H_mean,token_cost_mean,n_trials\n"));
    }

    #[test]
    fn optimize_is_reproducible() {
        let cfg = OptimizeConfig {
            schedule: SpsaSchedule {
                steps: 3,
                ..SpsaSchedule::default()
            },
            scenario: small(),
            train_scenarios: 2,
            eval_scenarios: 2,
            ..OptimizeConfig::default()
        };
        let a = optimize(&cfg, 17).unwrap();
        assert_eq!(a, optimize(&cfg, 17).unwrap());
        assert_eq!(a.rows.len(), 4);
        assert!(a.rows[3].update.is_none());
        assert!(optimize(&OptimizeConfig { u0: 70.0, ..cfg }, 17).is_err());
    }
}
