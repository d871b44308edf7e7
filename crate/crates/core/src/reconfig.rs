//! Reputation grading and preferential-attachment readjustment of the
//! influence network.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abm::{
    informed_agents, median, percentile, step_round, ActivationPolicy, AgentPopulation, MixedKernelAgents,
};
use crate::error::{Error, Result};
use crate::graph::{generate_configuration, DegreeDistribution, DirectedNetwork};
use crate::kernel::{KernelParams, LatentState, LogisticKernel};
use crate::meanfield::{fmt_f, MeanFieldState, SimplexDensity};
use crate::seeds::{self, stream};

/// Expected grades by latent state plus bounded additive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradingModel {
    pub mu_t: f64,
    pub mu_d: f64,
    pub mu_h: f64,
    /// Noise is uniform on `[-w/2, w/2]`; `w ≤ 1`.
    pub noise_width: f64,
    /// Upper end of the grade scale. Grades are clipped to `[0, scale]`.
    pub scale: f64,
}

impl Default for GradingModel {
    fn default() -> Self {
        GradingModel {
            mu_t: 0.665,
            mu_d: 0.550,
            mu_h: 0.498,
            noise_width: 0.2,
            scale: 1.0,
        }
    }
}

impl GradingModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("grading: scale={} must be > 0", self.scale)));
        }
        if !(self.scale >= self.mu_t && self.mu_t > self.mu_d && self.mu_d > self.mu_h && self.mu_h >= 0.0) {
            return Err(Error::Config(format!(
                "grading (B1): need {} >= mu_T > mu_D > mu_H >= 0 (got mu_T={}, mu_D={}, mu_H={})",
                self.scale, self.mu_t, self.mu_d, self.mu_h
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_width) {
            return Err(Error::Config(format!("grading: noise_width={} must be in [0, 1]", self.noise_width)));
        }
        Ok(())
    }

    pub fn mu(&self, z: LatentState) -> f64 {
        match z {
            LatentState::Truthful => self.mu_t,
            LatentState::Hallucinating => self.mu_h,
            LatentState::DoesNotKnow => self.mu_d,
        }
    }

    pub fn add_threshold(&self) -> f64 {
        0.5 * (self.mu_t + self.mu_d)
    }

    pub fn remove_threshold(&self) -> f64 {
        0.5 * (self.mu_d + self.mu_h)
    }
}

/// Grader-count floor `4·ln(2N)/gap²`.
pub fn hoeffding_floor(n: usize, gap: f64) -> f64 {
    4.0 * (2.0 * n as f64).ln() / (gap * gap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReputationVector {
    pub r: Vec<f64>,
    pub grade_count: Vec<usize>,
}

/// Agent `i` is graded by its listeners (the agents that read its answer):
/// `r_i` is the mean of one noisy read of `μ_{z_i}` per listener. Agents
/// nobody listens to get `μ_D` and a count of zero.
pub fn grade_population(pop: &AgentPopulation, grading: &GradingModel, seed: u64) -> ReputationVector {
    let (r, grade_count) = (0..pop.n())
        .into_par_iter()
        .map(|i| {
            let graders = pop.net.listeners(i);
            if graders.is_empty() {
                return (grading.mu_d, 0);
            }
            let mu = grading.mu(pop.states[i]);
            let sum: f64 = graders
                .iter()
                .map(|&g| {
                    let x = seeds::uniform(seed, &[stream::GRADING, i as u64, g as u64]);
                    (mu + grading.noise_width * (x - 0.5)).clamp(0.0, grading.scale)
                })
                .sum();
            (sum / graders.len() as f64, graders.len())
        })
        .unzip();
    ReputationVector { r, grade_count }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadjustConfig {
    /// Caps each floor at `floor_cap·N`; `None` keeps the raw floors.
    pub floor_cap: Option<f64>,
}


impl ReadjustConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.floor_cap {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("readjust: floor_cap={c} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn floors(&self, n: usize, grading: &GradingModel) -> (f64, f64) {
        let cap = |f: f64| match self.floor_cap {
            Some(c) => f.min(c * n as f64),
            None => f,
        };
        (
            cap(hoeffding_floor(n, grading.mu_t - grading.mu_d)),
            cap(hoeffding_floor(n, grading.mu_d - grading.mu_h)),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Add,
    Remove,
    Skip,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Add => "add",
            Action::Remove => "remove",
            Action::Skip => "skip",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub iteration: usize,
    pub action: Action,
    pub pair: Option<(usize, usize)>,
    pub r_j: Option<f64>,
    pub threshold: f64,
    pub neighborhood_size: Option<usize>,
}

pub fn write_audit_csv<W: Write>(log: &[AuditEntry], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["iteration", "action", "i", "j", "r_j", "threshold", "neighborhood_size"])?;
    for e in log {
        let (i, j) = match e.pair {
            Some((i, j)) => (i.to_string(), j.to_string()),
            None => (String::new(), String::new()),
        };
        wtr.write_record([
            e.iteration.to_string(),
            e.action.as_str().to_string(),
            i,
            j,
            e.r_j.map(fmt_f).unwrap_or_default(),
            fmt_f(e.threshold),
            e.neighborhood_size.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn iterations(n: usize) -> usize {
    (n as f64).ln().ceil().max(0.0) as usize
}

/// Number of candidate pairs `(i, j)` per target `j` and a uniform draw
/// over their union.
fn pick_weighted(weights: &[usize], x: f64) -> Option<(usize, usize)> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return None;
    }
    let mut k = ((x * total as f64) as usize).min(total - 1);
    for (j, &w) in weights.iter().enumerate() {
        if k < w {
            return Some((j, k));
        }
        k -= w;
    }
    None
}

/// Candidate-set sizes at the current network, for the B2 check.
pub fn candidate_counts(
    net: &DirectedNetwork,
    rep: &ReputationVector,
    grading: &GradingModel,
    cfg: &ReadjustConfig,
) -> (usize, usize) {
    let n = net.n();
    let (fa, fr) = cfg.floors(n, grading);
    let (ta, tr) = (grading.add_threshold(), grading.remove_threshold());
    let add = (0..n)
        .filter(|&j| rep.r[j] > ta && rep.grade_count[j] as f64 >= fa)
        .map(|j| n - 1 - net.listeners(j).len())
        .sum();
    let rem = (0..n)
        .filter(|&j| rep.r[j] < tr && rep.grade_count[j] as f64 >= fr)
        .map(|j| net.listeners(j).len())
        .sum();
    (add, rem)
}

/// Preferential-attachment readjustment. Runs `⌈ln N⌉` iterations; each
/// adds one uniformly chosen pair `(i, j)` with `r_j` above
/// `(μ_T+μ_D)/2`, `j` not yet a source of `i`, and enough graders of `j`,
/// then removes one uniformly chosen existing link to a node with `r_j`
/// below `(μ_D+μ_H)/2` and enough graders. Pairs are drawn with
/// replacement across iterations. Reputations stay fixed for the whole run.
pub fn algorithm1_readjust(
    net: &DirectedNetwork,
    rep: &ReputationVector,
    grading: &GradingModel,
    cfg: &ReadjustConfig,
    seed: u64,
) -> Result<(DirectedNetwork, Vec<AuditEntry>)> {
    let n = net.n();
    if rep.r.len() != n || rep.grade_count.len() != n {
        return Err(Error::LengthMismatch {
            what: "reputation vector vs network size",
            left: rep.r.len(),
            right: n,
        });
    }
    grading.validate()?;
    cfg.validate()?;
    let (floor_add, floor_rem) = cfg.floors(n, grading);
    let (t_add, t_rem) = (grading.add_threshold(), grading.remove_threshold());
    let add_ok: Vec<bool> = (0..n).map(|j| rep.r[j] > t_add && rep.grade_count[j] as f64 >= floor_add).collect();
    let rem_ok: Vec<bool> = (0..n).map(|j| rep.r[j] < t_rem && rep.grade_count[j] as f64 >= floor_rem).collect();
    let mut out = net.clone();
    let mut log = Vec::new();
    for it in 0..iterations(n) {
        // add step
        let weights: Vec<usize> = (0..n)
            .map(|j| if add_ok[j] { n - 1 - out.listeners(j).len() } else { 0 })
            .collect();
        let x = seeds::uniform(seed, &[stream::READJUST, it as u64, 0]);
        match pick_weighted(&weights, x) {
            Some((j, k)) => {
                // k-th node that is neither j nor already listening to j
                let listeners = out.listeners(j);
                let i = (0..n)
                    .filter(|&i| i != j && listeners.binary_search(&i).is_err())
                    .nth(k)
                    .expect("candidate count matches");
                debug_assert!(rep.r[j] > t_add);
                out.add_edge(i, j)?;
                log.push(AuditEntry {
                    iteration: it,
                    action: Action::Add,
                    pair: Some((i, j)),
                    r_j: Some(rep.r[j]),
                    threshold: t_add,
                    neighborhood_size: Some(rep.grade_count[j]),
                });
            }
            None => log.push(AuditEntry {
                iteration: it,
                action: Action::Skip,
                pair: None,
                r_j: None,
                threshold: t_add,
                neighborhood_size: None,
            }),
        }
        // remove step
        let weights: Vec<usize> = (0..n)
            .map(|j| if rem_ok[j] { out.listeners(j).len() } else { 0 })
            .collect();
        let x = seeds::uniform(seed, &[stream::READJUST, it as u64, 1]);
        match pick_weighted(&weights, x) {
            Some((j, k)) => {
                let i = out.listeners(j)[k];
                debug_assert!(rep.r[j] < t_rem);
                out.remove_edge(i, j)?;
                log.push(AuditEntry {
                    iteration: it,
                    action: Action::Remove,
                    pair: Some((i, j)),
                    r_j: Some(rep.r[j]),
                    threshold: t_rem,
                    neighborhood_size: Some(rep.grade_count[j]),
                });
            }
            None => log.push(AuditEntry {
                iteration: it,
                action: Action::Skip,
                pair: None,
                r_j: None,
                threshold: t_rem,
                neighborhood_size: None,
            }),
        }
    }
    Ok((out, log))
}

/// Baseline: `⌈ln N⌉` uniformly random link additions and removals.
pub fn random_rewire(net: &DirectedNetwork, seed: u64) -> Result<DirectedNetwork> {
    let n = net.n();
    let mut out = net.clone();
    for it in 0..iterations(n) {
        let weights: Vec<usize> = (0..n).map(|j| n - 1 - out.listeners(j).len()).collect();
        if let Some((j, k)) = pick_weighted(&weights, seeds::uniform(seed, &[stream::REWIRE, it as u64, 0])) {
            let listeners = out.listeners(j);
            let i = (0..n)
                .filter(|&i| i != j && listeners.binary_search(&i).is_err())
                .nth(k)
                .expect("candidate count matches");
            out.add_edge(i, j)?;
        }
        let weights: Vec<usize> = (0..n).map(|j| out.listeners(j).len()).collect();
        if let Some((j, k)) = pick_weighted(&weights, seeds::uniform(seed, &[stream::REWIRE, it as u64, 1])) {
            let i = out.listeners(j)[k];
            out.remove_edge(i, j)?;
        }
    }
    Ok(out)
}

/// Links whose target is truthful.
pub fn truthful_inlinks(pop: &AgentPopulation, net: &DirectedNetwork) -> usize {
    net.edges().filter(|&(_, j)| pop.states[j] == LatentState::Truthful).count()
}

/// `exp(−(1 − 1/N)²·ln N / (2·(max(1/(N p_T), 1/(N p_H)) − 1)²))`.
pub fn delta1_bound(n: usize, p_t: f64, p_h: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("delta1: N must be >= 2"));
    }
    if !(p_t > 0.0 && p_t <= 1.0 && p_h > 0.0 && p_h <= 1.0) {
        return Err(Error::invalid(format!("delta1: p_T={p_t}, p_H={p_h} must be in (0, 1]")));
    }
    let nf = n as f64;
    let m = (1.0 / (nf * p_t)).max(1.0 / (nf * p_h)) - 1.0;
    Ok((-(1.0 - 1.0 / nf).powi(2) * nf.ln() / (2.0 * m * m)).exp())
}

/// `Σ_{l ≥ 4 ln(2N)/gap²} q_l·d^l_z`.
pub fn compute_p_z(q: &DegreeDistribution, d: &MeanFieldState, z: LatentState, mu_gap: f64, n: usize) -> Result<f64> {
    if mu_gap == 0.0 {
        return Err(Error::invalid("p_z: grade gap must be non-zero"));
    }
    if d.classes() != q.len() {
        return Err(Error::LengthMismatch {
            what: "degree distribution vs per-degree densities",
            left: q.len(),
            right: d.classes(),
        });
    }
    let floor = hoeffding_floor(n, mu_gap);
    Ok(q
        .probs()
        .iter()
        .zip(d.densities())
        .enumerate()
        .filter(|(l, _)| *l as f64 >= floor)
        .map(|(_, (p, dens))| p * dens.0[z.index()])
        .sum())
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Scenario {
    pub n: usize,
    /// Degree distribution of the configuration-model network.
    pub q: Vec<f64>,
    pub initial: [f64; 3],
    pub grading: GradingModel,
}

impl Default for Prop1Scenario {
    fn default() -> Self {
        Prop1Scenario {
            n: 64,
            q: vec![0.0, 0.1, 0.2, 0.2, 0.2, 0.15, 0.1, 0.05],
            initial: [0.5, 0.3, 0.2],
            // a 0-10 rubric with unit-width noise
            grading: GradingModel {
                mu_t: 9.0,
                mu_d: 5.0,
                mu_h: 1.0,
                noise_width: 1.0,
                scale: 10.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Report {
    pub trials: usize,
    pub b2_violations: usize,
    pub successes: usize,
    pub frequency: f64,
    pub p_t: f64,
    pub p_h: f64,
    pub delta1: f64,
    pub bound: f64,
    pub wilson: (f64, f64),
    pub pass: bool,
}

impl Prop1Report {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "trials",
            "b2_violations",
            "successes",
            "frequency",
            "p_T",
            "p_H",
            "delta1",
            "bound",
            "wilson_lo",
            "wilson_hi",
            "pass",
        ])?;
        wtr.write_record([
            self.trials.to_string(),
            self.b2_violations.to_string(),
            self.successes.to_string(),
            fmt_f(self.frequency),
            fmt_f(self.p_t),
            fmt_f(self.p_h),
            fmt_f(self.delta1),
            fmt_f(self.bound),
            fmt_f(self.wilson.0),
            fmt_f(self.wilson.1),
            if self.pass { "PASS" } else { "FAIL" }.to_string(),
        ])?;
        wtr.flush()?;
        Ok(())
    }
}

/// Monte Carlo check that one readjustment run increases the number of
/// links into truthful nodes with probability at least `1 − δ₁`. Floors
/// are uncapped. Trials whose candidate sets are not both non-empty are
/// excluded and counted.
pub fn prop1_verify(scenario: &Prop1Scenario, trials: usize, seed: u64) -> Result<Prop1Report> {
    if trials < 500 {
        return Err(Error::Config(format!("prop1: trials={trials} must be >= 500")));
    }
    scenario.grading.validate()?;
    let q = DegreeDistribution::new(scenario.q.clone())?;
    SimplexDensity(scenario.initial).validate()?;
    let cfg = ReadjustConfig { floor_cap: None };
    let n = scenario.n;
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Option<bool>> {
            let master = seeds::derive(seed, &[stream::TRIAL, t as u64]);
            let net = generate_configuration(n, &q, master)?;
            let pop = AgentPopulation::random(net, scenario.initial, master)?;
            let rep = grade_population(&pop, &scenario.grading, seeds::derive(master, &[stream::GRADING]));
            let (a, r) = candidate_counts(&pop.net, &rep, &scenario.grading, &cfg);
            if a == 0 || r == 0 {
                return Ok(None);
            }
            let before = truthful_inlinks(&pop, &pop.net);
            let (after_net, _) =
                algorithm1_readjust(&pop.net, &rep, &scenario.grading, &cfg, seeds::derive(master, &[stream::READJUST]))?;
            Ok(Some(truthful_inlinks(&pop, &after_net) > before))
        })
        .collect::<Result<Vec<_>>>()?;
    let b2_violations = outcomes.iter().filter(|o| o.is_none()).count();
    if 2 * b2_violations > trials {
        return Err(Error::Precondition(format!(
            "prop1: {b2_violations} of {trials} trials have an empty candidate set; scenario misconfigured"
        )));
    }
    let valid = trials - b2_violations;
    let successes = outcomes.iter().filter(|o| **o == Some(true)).count();
    let density = MeanFieldState::uniform(q.len(), SimplexDensity(scenario.initial));
    let g = &scenario.grading;
    let p_t = compute_p_z(&q, &density, LatentState::Truthful, g.mu_t - g.mu_d, n)?;
    let p_h = compute_p_z(&q, &density, LatentState::Hallucinating, g.mu_h - g.mu_d, n)?;
    let delta1 = delta1_bound(n, p_t, p_h)?;
    let wilson = wilson_interval(successes, valid);
    Ok(Prop1Report {
        trials: valid,
        b2_violations,
        successes,
        frequency: successes as f64 / valid as f64,
        p_t,
        p_h,
        delta1,
        bound: 1.0 - delta1,
        wilson,
        pass: wilson.1 >= 1.0 - delta1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Algorithm1,
    Static,
    Random,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Algorithm1, Arm::Static, Arm::Random];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Algorithm1 => "algorithm1",
            Arm::Static => "static",
            Arm::Random => "random",
        }
    }
}

/// Three-arm comparison of network readjustment policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconfigBenchmark {
    pub n: usize,
    pub q: Vec<f64>,
    pub kernel: KernelParams,
    pub u: f64,
    /// Share of agents that hold the answer privately; they start truthful.
    pub informed: f64,
    /// Added to every state bias for informed agents.
    pub informed_bias: f64,
    /// Share of the remaining agents that start hallucinating.
    pub h_share: f64,
    pub rounds: usize,
    pub period: usize,
    pub grading: GradingModel,
    pub readjust: ReadjustConfig,
    pub trials: usize,
    pub threshold: f64,
    /// Trailing fraction of the horizon used for the equilibrium estimate.
    pub tail: f64,
}

impl Default for ReconfigBenchmark {
    fn default() -> Self {
        ReconfigBenchmark {
            n: 100,
            q: vec![0.0, 0.3, 0.25, 0.2, 0.15, 0.1],
            // bistable: uninformed agents only turn truthful when most of
            // their sources are
            kernel: KernelParams {
                rate: 0.01,
                beta0: 16.0,
                bias_t: -5.0,
                bias_h: -8.0,
                bias_d: -7.0,
                ..KernelParams::default()
            },
            u: 20.0,
            informed: 0.3,
            informed_bias: 8.0,
            h_share: 0.5,
            rounds: 5000,
            period: 200,
            grading: GradingModel::default(),
            readjust: ReadjustConfig { floor_cap: Some(0.03) },
            trials: 30,
            threshold: 0.9,
            tail: 0.1,
        }
    }
}

impl ReconfigBenchmark {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.rounds == 0 || self.period == 0 || self.trials == 0 {
            return Err(Error::Config("reconfig-bench: n >= 2 and rounds, period, trials >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.informed) || !(0.0..=1.0).contains(&self.h_share) {
            return Err(Error::Config("reconfig-bench: informed and h_share must be in [0, 1]".into()));
        }
        if !(self.tail > 0.0 && self.tail <= 1.0) {
            return Err(Error::Config("reconfig-bench: tail must be in (0, 1]".into()));
        }
        self.grading.validate()?;
        self.readjust.validate()?;
        if !self.informed_bias.is_finite() {
            return Err(Error::Config("reconfig-bench: informed_bias must be finite".into()));
        }
        LogisticKernel::new(self.kernel.clone())?;
        DegreeDistribution::new(self.q.clone())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    /// `ρ̂_T` per trial and round (rounds `0..=R`).
    pub series: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    /// First round with median `ρ̂_T ≥ threshold`; `rounds + 1` if never.
    pub time_to_threshold: usize,
    pub equilibrium: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkResult {
    pub arms: Vec<ArmResult>,
    /// Readjustment log of trial 0 in the Algorithm 1 arm, with the round of
    /// each readjustment.
    pub audit: Vec<(usize, AuditEntry)>,
}

impl BenchmarkResult {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("all arms present")
    }

    /// Columns `arm,round,median,p10,p90`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["arm", "round", "rho_T_median", "rho_T_p10", "rho_T_p90"])?;
        for a in &self.arms {
            for k in 0..a.median.len() {
                wtr.write_record([a.arm.name().to_string(), k.to_string(), fmt_f(a.median[k]), fmt_f(a.p10[k]), fmt_f(a.p90[k])])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Columns `arm,time_to_threshold,equilibrium`.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["arm", "time_to_threshold", "equilibrium"])?;
        for a in &self.arms {
            wtr.write_record([a.arm.name().to_string(), a.time_to_threshold.to_string(), fmt_f(a.equilibrium)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_audit_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["round", "iteration", "action", "i", "j", "r_j", "threshold", "neighborhood_size"])?;
        for (round, e) in &self.audit {
            let (i, j) = e.pair.map(|(i, j)| (i.to_string(), j.to_string())).unwrap_or_default();
            wtr.write_record([
                round.to_string(),
                e.iteration.to_string(),
                e.action.as_str().to_string(),
                i,
                j,
                e.r_j.map(fmt_f).unwrap_or_default(),
                fmt_f(e.threshold),
                e.neighborhood_size.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

type TrialOutput = (Vec<f64>, Vec<(usize, AuditEntry)>);

fn run_arm_trial(
    b: &ReconfigBenchmark,
    arm: Arm,
    kernels: (&LogisticKernel, &LogisticKernel),
    q: &DegreeDistribution,
    master: u64,
) -> Result<TrialOutput> {
    let net = generate_configuration(b.n, q, master)?;
    let mut pop = AgentPopulation::informed_fraction(net, b.informed, b.h_share, master)?;
    let agents = MixedKernelAgents {
        kernel: kernels.0,
        informed_kernel: kernels.1,
        informed: informed_agents(b.n, b.informed, master),
    };
    let policy = ActivationPolicy::All;
    let round_seed = seeds::derive(master, &[stream::ROUND]);
    let mut series = Vec::with_capacity(b.rounds + 1);
    let mut audit = Vec::new();
    let frac_t = |p: &AgentPopulation| p.states.iter().filter(|s| **s == LatentState::Truthful).count() as f64 / p.n() as f64;
    series.push(frac_t(&pop));
    for k in 1..=b.rounds {
        pop = step_round(&pop, &agents, b.u, &policy, round_seed);
        if k % b.period == 0 && k < b.rounds {
            let epoch = (k / b.period) as u64;
            match arm {
                Arm::Static => {}
                Arm::Random => {
                    pop.net = random_rewire(&pop.net, seeds::derive(master, &[stream::REWIRE, epoch]))?;
                }
                Arm::Algorithm1 => {
                    let rep = grade_population(&pop, &b.grading, seeds::derive(master, &[stream::GRADING, epoch]));
                    let (net, log) =
                        algorithm1_readjust(&pop.net, &rep, &b.grading, &b.readjust, seeds::derive(master, &[stream::READJUST, epoch]))?;
                    pop.net = net;
                    audit.extend(log.into_iter().map(|e| (k, e)));
                }
            }
        }
        series.push(frac_t(&pop));
    }
    Ok((series, audit))
}

/// Runs every arm under matched seeds: trial `t` uses the same initial
/// network, initial states and per-round draws in all arms.
pub fn reconfig_benchmark(b: &ReconfigBenchmark, seed: u64) -> Result<BenchmarkResult> {
    b.validate()?;
    let kernel = LogisticKernel::new(b.kernel.clone())?;
    let informed_kernel = LogisticKernel::new(KernelParams {
        bias_t: b.kernel.bias_t + b.informed_bias,
        bias_h: b.kernel.bias_h + b.informed_bias,
        bias_d: b.kernel.bias_d + b.informed_bias,
        ..b.kernel.clone()
    })?;
    let q = DegreeDistribution::new(b.q.clone())?;
    let mut arms = Vec::new();
    let mut audit = Vec::new();
    for arm in Arm::ALL {
        let outs = (0..b.trials)
            .into_par_iter()
            .map(|t| run_arm_trial(b, arm, (&kernel, &informed_kernel), &q, seeds::derive(seed, &[stream::TRIAL, t as u64])))
            .collect::<Result<Vec<_>>>()?;
        if arm == Arm::Algorithm1 {
            audit = outs[0].1.clone();
        }
        let series: Vec<Vec<f64>> = outs.into_iter().map(|o| o.0).collect();
        let at = |k: usize| series.iter().map(|s| s[k]).collect::<Vec<f64>>();
        let median_s: Vec<f64> = (0..=b.rounds).map(|k| median(&at(k))).collect();
        let p10: Vec<f64> = (0..=b.rounds).map(|k| percentile(&at(k), 0.1)).collect();
        let p90: Vec<f64> = (0..=b.rounds).map(|k| percentile(&at(k), 0.9)).collect();
        let time_to_threshold = median_s.iter().position(|&v| v >= b.threshold).unwrap_or(b.rounds + 1);
        let tail_len = ((b.tail * b.rounds as f64).ceil() as usize).clamp(1, b.rounds + 1);
        let tail = &median_s[median_s.len() - tail_len..];
        let equilibrium = tail.iter().sum::<f64>() / tail.len() as f64;
        arms.push(ArmResult {
            arm,
            series,
            median: median_s,
            p10,
            p90,
            time_to_threshold,
            equilibrium,
        });
    }
    Ok(BenchmarkResult { arms, audit })
}
