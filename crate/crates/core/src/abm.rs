//! Agent-based simulation of the round protocol.
//!
//! Every round each active agent reads the previous-round states of its
//! influence sources and draws its next state. Updates are synchronous.

use std::io::Write;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{generate_configuration, in_degree_distribution, DegreeDistribution, DirectedNetwork};
use crate::kernel::{KernelParams, LatentState, LogisticKernel, TransitionKernel};
use crate::meanfield::{fmt_f, integrate_fast, MeanFieldState, SimplexDensity};
use crate::seeds::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct AgentPopulation {
    pub net: DirectedNetwork,
    pub states: Vec<LatentState>,
    /// Last answer of each agent; empty for synthetic agents.
    pub transcripts: Vec<String>,
    pub round: u64,
}

impl AgentPopulation {
    pub fn new(net: DirectedNetwork, states: Vec<LatentState>) -> Result<Self> {
        if states.len() != net.n() {
            return Err(Error::LengthMismatch {
                what: "agent states vs network size",
                left: states.len(),
                right: net.n(),
            });
        }
        let n = states.len();
        Ok(AgentPopulation {
            net,
            states,
            transcripts: vec![String::new(); n],
            round: 0,
        })
    }

    /// Independent initial states with probabilities `density = (T, H, D)`.
    pub fn random(net: DirectedNetwork, density: [f64; 3], seed: u64) -> Result<Self> {
        SimplexDensity(density).validate()?;
        let states = (0..net.n())
            .map(|a| sample_state(&density, seeds::uniform(seed, &[stream::INIT_STATES, a as u64])))
            .collect();
        Self::new(net, states)
    }

    /// The first `round(fraction·N)` agents of a seeded shuffle start
    /// truthful; the rest split between `H` and `D` with share `h_share`.
    pub fn informed_fraction(net: DirectedNetwork, fraction: f64, h_share: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) || !(0.0..=1.0).contains(&h_share) {
            return Err(Error::invalid("informed fraction and h_share must be in [0, 1]"));
        }
        let informed = informed_agents(net.n(), fraction, seed);
        let states = informed
            .iter()
            .enumerate()
            .map(|(a, &inf)| {
                if inf {
                    LatentState::Truthful
                } else if seeds::uniform(seed, &[stream::INIT_STATES, a as u64]) < h_share {
                    LatentState::Hallucinating
                } else {
                    LatentState::DoesNotKnow
                }
            })
            .collect();
        Self::new(net, states)
    }

    pub fn n(&self) -> usize {
        self.states.len()
    }

    /// Counts of truthful and hallucinating sources of agent `a`.
    pub fn source_counts(&self, a: usize) -> (usize, usize) {
        let mut i = 0;
        let mut j = 0;
        for &s in self.net.sources(a) {
            match self.states[s] {
                LatentState::Truthful => i += 1,
                LatentState::Hallucinating => j += 1,
                LatentState::DoesNotKnow => {}
            }
        }
        (i, j)
    }
}

fn sample_state(row: &[f64; 3], x: f64) -> LatentState {
    if x < row[0] {
        LatentState::Truthful
    } else if x < row[0] + row[1] {
        LatentState::Hallucinating
    } else {
        LatentState::DoesNotKnow
    }
}

/// Which agents update in a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivationPolicy {
    All,
    /// Each agent is active independently with probability `fraction`.
    UniformSubset { fraction: f64 },
    FixedSet { agents: Vec<usize> },
}

impl Default for ActivationPolicy {
    fn default() -> Self {
        ActivationPolicy::All
    }
}

impl ActivationPolicy {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            ActivationPolicy::All => Ok(()),
            ActivationPolicy::UniformSubset { fraction } => {
                if *fraction > 0.0 && *fraction <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("activation fraction {fraction} must be in (0, 1]")))
                }
            }
            ActivationPolicy::FixedSet { agents } => match agents.iter().find(|&&a| a >= n) {
                Some(&a) => Err(Error::NodeOutOfRange { node: a, n }),
                None => Ok(()),
            },
        }
    }

    fn active_mask(&self, n: usize, round: u64, seed: u64) -> Vec<bool> {
        match self {
            ActivationPolicy::All => vec![true; n],
            ActivationPolicy::UniformSubset { fraction } => (0..n)
                .map(|a| seeds::uniform(seed, &[stream::ACTIVATION, a as u64, round]) < *fraction)
                .collect(),
            ActivationPolicy::FixedSet { agents } => {
                let mut m = vec![false; n];
                for &a in agents {
                    m[a] = true;
                }
                m
            }
        }
    }
}

/// Mask of the `round(fraction·N)` agents picked by a seeded shuffle; the
/// same agents [`AgentPopulation::informed_fraction`] starts truthful.
pub fn informed_agents(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeds::rng(seed, &[stream::INIT_STATES]);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let k = (fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    let mut mask = vec![false; n];
    for &a in &order[..k] {
        mask[a] = true;
    }
    mask
}

/// What an agent sees when it answers.
pub struct AgentContext<'a> {
    pub agent: usize,
    pub round: u64,
    pub u: f64,
    pub own: LatentState,
    pub degree: usize,
    pub truthful_sources: usize,
    pub hallucinating_sources: usize,
    /// Previous-round answers of the sources.
    pub source_transcripts: Vec<&'a str>,
    /// Uniform draw in [0, 1) reserved for this agent and round.
    pub draw: f64,
}

pub struct Response {
    pub state: LatentState,
    pub transcript: Option<String>,
}

pub trait AgentBehavior: Sync {
    fn respond(&self, ctx: &AgentContext<'_>) -> Response;
}

/// Agents whose next state is drawn from a transition kernel row.
pub struct KernelAgents<K> {
    pub kernel: K,
}

impl<K: TransitionKernel> AgentBehavior for KernelAgents<K> {
    fn respond(&self, ctx: &AgentContext<'_>) -> Response {
        let m = self
            .kernel
            .eval(ctx.u, ctx.degree, ctx.truthful_sources, ctx.hallucinating_sources);
        Response {
            state: sample_state(&m[ctx.own.index()], ctx.draw),
            transcript: None,
        }
    }
}

/// Two kernel populations: agents holding private evidence (`informed`)
/// follow `informed_kernel`, everyone else `kernel`.
pub struct MixedKernelAgents<K> {
    pub kernel: K,
    pub informed_kernel: K,
    pub informed: Vec<bool>,
}

impl<K: TransitionKernel> AgentBehavior for MixedKernelAgents<K> {
    fn respond(&self, ctx: &AgentContext<'_>) -> Response {
        let k = if self.informed[ctx.agent] { &self.informed_kernel } else { &self.kernel };
        let m = k.eval(ctx.u, ctx.degree, ctx.truthful_sources, ctx.hallucinating_sources);
        Response {
            state: sample_state(&m[ctx.own.index()], ctx.draw),
            transcript: None,
        }
    }
}

/// One synchronous round. Agents read only round-`k` states.
pub fn step_round(
    pop: &AgentPopulation,
    behavior: &dyn AgentBehavior,
    u: f64,
    policy: &ActivationPolicy,
    seed: u64,
) -> AgentPopulation {
    let n = pop.n();
    let active = policy.active_mask(n, pop.round, seed);
    let next: Vec<(LatentState, Option<String>)> = (0..n)
        .into_par_iter()
        .map(|a| {
            if !active[a] {
                return (pop.states[a], None);
            }
            let (i, j) = pop.source_counts(a);
            let ctx = AgentContext {
                agent: a,
                round: pop.round,
                u,
                own: pop.states[a],
                degree: pop.net.in_degree(a),
                truthful_sources: i,
                hallucinating_sources: j,
                source_transcripts: pop.net.sources(a).iter().map(|&s| pop.transcripts[s].as_str()).collect(),
                draw: seeds::uniform(seed, &[stream::ROUND, a as u64, pop.round]),
            };
            let r = behavior.respond(&ctx);
            (r.state, r.transcript)
        })
        .collect();
    let mut out = AgentPopulation {
        net: pop.net.clone(),
        states: Vec::with_capacity(n),
        transcripts: pop.transcripts.clone(),
        round: pop.round + 1,
    };
    for (a, (s, t)) in next.into_iter().enumerate() {
        out.states.push(s);
        if let Some(t) = t {
            out.transcripts[a] = t;
        }
    }
    out
}

/// Per-class and aggregate state frequencies. Classes with no agents are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDensities {
    pub per_class: Vec<Option<[f64; 3]>>,
    pub class_sizes: Vec<usize>,
    pub aggregate: [f64; 3],
}

pub fn empirical_densities(pop: &AgentPopulation) -> EmpiricalDensities {
    let l_max = (0..pop.n()).map(|a| pop.net.in_degree(a)).max().unwrap_or(0);
    let mut counts = vec![[0usize; 3]; l_max + 1];
    let mut total = [0usize; 3];
    for (a, s) in pop.states.iter().enumerate() {
        counts[pop.net.in_degree(a)][s.index()] += 1;
        total[s.index()] += 1;
    }
    let n = pop.n().max(1) as f64;
    let class_sizes: Vec<usize> = counts.iter().map(|c| c.iter().sum()).collect();
    let per_class = counts
        .iter()
        .zip(&class_sizes)
        .map(|(c, &m)| (m > 0).then(|| [c[0] as f64 / m as f64, c[1] as f64 / m as f64, c[2] as f64 / m as f64]))
        .collect();
    EmpiricalDensities {
        per_class,
        class_sizes,
        aggregate: [total[0] as f64 / n, total[1] as f64 / n, total[2] as f64 / n],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbmTrajectory {
    pub densities: Vec<EmpiricalDensities>,
}

impl AbmTrajectory {
    pub fn rho_t(&self) -> Vec<f64> {
        self.densities.iter().map(|d| d.aggregate[0]).collect()
    }

    /// Columns `round,rho_T_hat,rho_H_hat,rho_D_hat`, plus
    /// `rho_{T,H,D}_l{l}` per class when `per_class` is set (blank when absent).
    pub fn write_csv<W: Write>(&self, w: W, per_class: bool) -> Result<()> {
        let classes = self.densities.iter().map(|d| d.per_class.len()).max().unwrap_or(0);
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["round".to_string(), "rho_T_hat".into(), "rho_H_hat".into(), "rho_D_hat".into()];
        if per_class {
            for l in 0..classes {
                for z in ["T", "H", "D"] {
                    header.push(format!("rho_{z}_l{l}"));
                }
            }
        }
        wtr.write_record(&header)?;
        for (k, d) in self.densities.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(d.aggregate.iter().map(|v| fmt_f(*v)));
            if per_class {
                for l in 0..classes {
                    match d.per_class.get(l).copied().flatten() {
                        Some(r) => rec.extend(r.iter().map(|v| fmt_f(*v))),
                        None => rec.extend(std::iter::repeat(String::new()).take(3)),
                    }
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Applies [`step_round`] `rounds` times; the series includes the initial
/// densities. Returns the final population too.
pub fn run_trajectory(
    pop0: &AgentPopulation,
    behavior: &dyn AgentBehavior,
    u: f64,
    policy: &ActivationPolicy,
    rounds: usize,
    seed: u64,
) -> Result<(AbmTrajectory, AgentPopulation)> {
    policy.validate(pop0.n())?;
    let mut pop = pop0.clone();
    let mut densities = Vec::with_capacity(rounds + 1);
    densities.push(empirical_densities(&pop));
    for _ in 0..rounds {
        pop = step_round(&pop, behavior, u, policy, seed);
        densities.push(empirical_densities(&pop));
    }
    Ok((AbmTrajectory { densities }, pop))
}

/// Scenario for comparing the simulation with the mean-field trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationScenario {
    /// Degree distribution of the configuration-model network.
    pub q: Vec<f64>,
    pub kernel: KernelParams,
    pub u: f64,
    /// Initial `(T, H, D)` probabilities, drawn independently per agent.
    pub initial: [f64; 3],
    pub horizon: usize,
    /// Mean-field substeps per round.
    pub substeps: usize,
}

impl Default for ConcentrationScenario {
    fn default() -> Self {
        ConcentrationScenario {
            q: vec![0.0, 0.25, 0.25, 0.2, 0.15, 0.1, 0.05],
            kernel: KernelParams {
                rate: 0.1,
                ..KernelParams::default()
            },
            u: 20.0,
            initial: [0.3, 0.35, 0.35],
            horizon: 200,
            substeps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationRow {
    pub n: usize,
    pub median: f64,
    pub p90: f64,
    pub deviations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationTable {
    pub rows: Vec<ConcentrationRow>,
}

impl ConcentrationTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["n", "median_dev", "p10_dev", "p90_dev", "trials"])?;
        for r in &self.rows {
            wtr.write_record([
                r.n.to_string(),
                fmt_f(r.median),
                fmt_f(percentile(&r.deviations, 0.1)),
                fmt_f(r.p90),
                r.deviations.len().to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Nearest-rank percentile, `p` in (0, 1].
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = (p * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// `max_k |ρ̂_T(k) − ρ_T(k)|` for one network and seed. The mean-field run
/// starts from the realized per-class densities on the realized degree
/// distribution.
pub fn concentration_trial(n: usize, scenario: &ConcentrationScenario, master: u64) -> Result<f64> {
    let q = DegreeDistribution::new(scenario.q.clone())?;
    let kernel = LogisticKernel::new(scenario.kernel.clone())?;
    let net = generate_configuration(n, &q, master)?;
    let q_hat = in_degree_distribution(&net);
    let pop = AgentPopulation::random(net, scenario.initial, master)?;
    let emp = empirical_densities(&pop);
    let rho0 = MeanFieldState::new(
        emp.per_class
            .iter()
            .map(|c| SimplexDensity(c.unwrap_or(scenario.initial)))
            .collect(),
    )?;
    let sub = scenario.substeps.max(1);
    let mf = integrate_fast(&rho0, &q_hat, scenario.u, &kernel, scenario.horizon as f64, 1.0 / sub as f64)?;
    let agents = KernelAgents { kernel: &kernel };
    let (traj, _) = run_trajectory(&pop, &agents, scenario.u, &ActivationPolicy::All, scenario.horizon, master)?;
    let mut dev: f64 = 0.0;
    for (k, d) in traj.densities.iter().enumerate() {
        let mf_t = mf.states[k * sub].aggregate(&q_hat)[0];
        dev = dev.max((d.aggregate[0] - mf_t).abs());
    }
    Ok(dev)
}

/// Sup-horizon deviation between simulation and mean field for each `N`.
pub fn concentration_experiment(
    n_list: &[usize],
    trials: usize,
    scenario: &ConcentrationScenario,
    seed: u64,
) -> Result<ConcentrationTable> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("concentration: N list must be non-empty and increasing".into()));
    }
    if trials < 30 {
        return Err(Error::Config(format!("concentration: trials={trials} must be >= 30")));
    }
    let rows = n_list
        .iter()
        .map(|&n| {
            let deviations = (0..trials)
                .into_par_iter()
                .map(|t| concentration_trial(n, scenario, seeds::derive(seed, &[stream::TRIAL, n as u64, t as u64])))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ConcentrationRow {
                n,
                median: median(&deviations),
                p90: percentile(&deviations, 0.9),
                deviations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConcentrationTable { rows })
}

/// Maps an answer to a latent state given the true answer: `T` on a match,
/// `D` on the abstention sentinel `-1`, `H` otherwise.
pub fn classify_answer(answer: &str, truth: &str) -> LatentState {
    let a = answer.trim();
    if a == truth.trim() {
        LatentState::Truthful
    } else if a == "-1" {
        LatentState::DoesNotKnow
    } else {
        LatentState::Hallucinating
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalAgentConfig {
    pub endpoint: String,
    pub system_prompt: String,
    /// Placeholders: `{observation}`, `{neighbors}`.
    pub template: String,
    pub true_answer: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    system: &'a str,
    user: &'a str,
    max_tokens: i64,
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

/// Agents backed by a JSON-over-HTTP completion endpoint. Failures are
/// logged and the agent answers `-1` (state `D`) for that round.
pub struct ExternalAgents {
    cfg: ExternalAgentConfig,
    observations: Vec<Option<String>>,
    http: ureq::Agent,
}

impl ExternalAgents {
    pub fn new(cfg: ExternalAgentConfig, observations: Vec<Option<String>>) -> Self {
        let http = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs.max(0.001)))
            .build();
        ExternalAgents { cfg, observations, http }
    }

    pub fn render(&self, ctx: &AgentContext<'_>) -> String {
        let obs = self
            .observations
            .get(ctx.agent)
            .cloned()
            .flatten()
            .unwrap_or_default();
        let neighbors = ctx
            .source_transcripts
            .iter()
            .enumerate()
            .map(|(k, t)| format!("neighbor {}: {}", k + 1, if t.is_empty() { "(no answer yet)" } else { t }))
            .collect::<Vec<_>>()
            .join("\n");
        self.cfg.template.replace("{observation}", &obs).replace("{neighbors}", &neighbors)
    }

    fn ask(&self, user: &str, u: f64) -> std::result::Result<String, String> {
        let req = ChatRequest {
            system: &self.cfg.system_prompt,
            user,
            max_tokens: u.round().max(1.0) as i64,
        };
        let resp = self.http.post(&self.cfg.endpoint).send_json(&req).map_err(|e| e.to_string())?;
        let body: ChatResponse = resp.into_json().map_err(|e| format!("malformed response: {e}"))?;
        Ok(body.text)
    }
}

impl AgentBehavior for ExternalAgents {
    fn respond(&self, ctx: &AgentContext<'_>) -> Response {
        let user = self.render(ctx);
        let text = match self.ask(&user, ctx.u) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("agent {} round {}: endpoint failure: {e}", ctx.agent, ctx.round);
                "-1".to_string()
            }
        };
        Response {
            state: classify_answer(&text, &self.cfg.true_answer),
            transcript: Some(text.trim().to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_power_law;
    use crate::kernel::Mat3;
    use std::io::{BufRead, BufReader, Read as _};
    use std::net::TcpListener;

    fn a1_kernel() -> LogisticKernel {
        LogisticKernel::new(KernelParams {
            absorbing_when_unanimous: true,
            ..KernelParams::default()
        })
        .unwrap()
    }

    #[test]
    fn all_truthful_is_absorbing() {
        let net = generate_power_law(50, 2.5, 8, 1).unwrap();
        let pop = AgentPopulation::new(net, vec![LatentState::Truthful; 50]).unwrap();
        let k = a1_kernel();
        let agents = KernelAgents { kernel: &k };
        let (traj, end) = run_trajectory(&pop, &agents, 20.0, &ActivationPolicy::All, 1000, 3).unwrap();
        assert!(traj.rho_t().iter().all(|&r| r == 1.0));
        assert_eq!(end.states, pop.states);
        assert_eq!(end.round, 1000);
    }

    #[test]
    fn isolated_agent_follows_kernel_row() {
        let k = LogisticKernel::default();
        let agents = KernelAgents { kernel: &k };
        let mut pop = AgentPopulation::new(DirectedNetwork::empty(1), vec![LatentState::Hallucinating]).unwrap();
        let row = k.eval(20.0, 0, 0, 0)[LatentState::Hallucinating.index()];
        let trials = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let next = step_round(&pop, &agents, 20.0, &ActivationPolicy::All, 99);
            counts[next.states[0].index()] += 1;
            // keep the own state fixed, only the round counter moves on
            pop.round = next.round;
        }
        for z in 0..3 {
            let p = row[z];
            let sd = (p * (1.0 - p) / trials as f64).sqrt();
            let f = counts[z] as f64 / trials as f64;
            assert!((f - p).abs() <= 3.0 * sd + 1e-12, "z={z}: {f} vs {p}");
        }
    }

    #[test]
    fn line_graph_counts() {
        // 0 listens to 1, 1 listens to 2, 2 listens to 0 and 1
        let net = DirectedNetwork::from_edges(3, [(0, 1), (1, 2), (2, 0), (2, 1)]).unwrap();
        let pop = AgentPopulation::new(net, vec![LatentState::Truthful, LatentState::Hallucinating, LatentState::DoesNotKnow]).unwrap();
        assert_eq!(pop.source_counts(0), (0, 1));
        assert_eq!(pop.source_counts(1), (0, 0));
        assert_eq!(pop.source_counts(2), (1, 1));

        struct Record(std::sync::Mutex<Vec<(usize, usize, usize, usize)>>);
        impl AgentBehavior for Record {
            fn respond(&self, c: &AgentContext<'_>) -> Response {
                self.0.lock().unwrap().push((c.agent, c.degree, c.truthful_sources, c.hallucinating_sources));
                Response { state: c.own, transcript: None }
            }
        }
        let rec = Record(Default::default());
        step_round(&pop, &rec, 1.0, &ActivationPolicy::All, 0);
        let mut seen = rec.0.into_inner().unwrap();
        seen.sort();
        assert_eq!(seen, vec![(0, 1, 0, 1), (1, 1, 0, 0), (2, 2, 1, 1)]);
    }

    #[test]
    fn densities_by_hand() {
        let net = DirectedNetwork::from_edges(4, [(0, 1), (1, 0), (2, 0), (2, 1)]).unwrap();
        let pop = AgentPopulation::new(net, vec![LatentState::Truthful, LatentState::Hallucinating, LatentState::Truthful, LatentState::DoesNotKnow]).unwrap();
        let d = empirical_densities(&pop);
        assert_eq!(d.class_sizes, vec![1, 2, 1]);
        assert_eq!(d.per_class[0], Some([0.0, 0.0, 1.0]));
        assert_eq!(d.per_class[1], Some([0.5, 0.5, 0.0]));
        assert_eq!(d.per_class[2], Some([1.0, 0.0, 0.0]));
        assert_eq!(d.aggregate, [0.5, 0.25, 0.25]);

        let net = DirectedNetwork::from_edges(3, [(0, 1), (0, 2)]).unwrap();
        let d = empirical_densities(&AgentPopulation::new(net, vec![LatentState::Truthful; 3]).unwrap());
        assert_eq!(d.per_class[1], None);
        assert_eq!(d.per_class[2], Some([1.0, 0.0, 0.0]));
    }

    #[test]
    fn aggregation_identity() {
        let net = generate_power_law(300, 2.2, 12, 4).unwrap();
        let pop = AgentPopulation::random(net, [0.4, 0.3, 0.3], 6).unwrap();
        let k = LogisticKernel::default();
        let (traj, _) = run_trajectory(&pop, &KernelAgents { kernel: &k }, 20.0, &ActivationPolicy::All, 20, 1).unwrap();
        for d in &traj.densities {
            let recombined: f64 = d
                .per_class
                .iter()
                .zip(&d.class_sizes)
                .filter_map(|(c, &m)| c.map(|c| m as f64 / 300.0 * c[0]))
                .sum();
            assert!((recombined - d.aggregate[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_rounds_and_determinism() {
        let net = generate_power_law(80, 2.5, 8, 2).unwrap();
        let pop = AgentPopulation::random(net, [0.5, 0.25, 0.25], 3).unwrap();
        let k = LogisticKernel::default();
        let agents = KernelAgents { kernel: &k };
        let (t0, _) = run_trajectory(&pop, &agents, 20.0, &ActivationPolicy::All, 0, 1).unwrap();
        assert_eq!(t0.densities.len(), 1);
        let a = run_trajectory(&pop, &agents, 20.0, &ActivationPolicy::All, 50, 1).unwrap();
        let b = run_trajectory(&pop, &agents, 20.0, &ActivationPolicy::All, 50, 1).unwrap();
        assert_eq!(a, b);
        let c = run_trajectory(&pop, &agents, 20.0, &ActivationPolicy::All, 50, 2).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn permutation_equivariance() {
        let net = generate_power_law(40, 2.5, 6, 5).unwrap();
        let pop = AgentPopulation::random(net.clone(), [0.4, 0.3, 0.3], 9).unwrap();
        // κ that ignores the draw: deterministic function of (own, i, j)
        struct Det;
        impl TransitionKernel for Det {
            fn eval(&self, _u: f64, l: usize, i: usize, j: usize) -> Mat3 {
                let z = if 2 * i > l { 0 } else if j > i { 1 } else { 2 };
                let mut m = [[0.0; 3]; 3];
                for row in m.iter_mut() {
                    row[z] = 1.0;
                }
                m
            }
        }
        let agents = KernelAgents { kernel: Det };
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..40).collect();
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut seeds::rng(1, &[]));
            p
        };
        let pnet = DirectedNetwork::from_edges(40, net.edges().map(|(i, j)| (perm[i], perm[j]))).unwrap();
        let mut pstates = vec![LatentState::Truthful; 40];
        for a in 0..40 {
            pstates[perm[a]] = pop.states[a];
        }
        let ppop = AgentPopulation::new(pnet, pstates).unwrap();
        let x = step_round(&pop, &agents, 20.0, &ActivationPolicy::All, 0);
        let y = step_round(&ppop, &agents, 20.0, &ActivationPolicy::All, 0);
        for a in 0..40 {
            assert_eq!(x.states[a], y.states[perm[a]]);
        }
    }

    #[test]
    fn activation_policies() {
        let net = generate_power_law(200, 2.5, 8, 5).unwrap();
        let pop = AgentPopulation::random(net, [0.2, 0.4, 0.4], 1).unwrap();
        let k = LogisticKernel::new(KernelParams { rate: 1.0, ..KernelParams::default() }).unwrap();
        let agents = KernelAgents { kernel: &k };
        let fixed = ActivationPolicy::FixedSet { agents: vec![3, 7] };
        let next = step_round(&pop, &agents, 20.0, &fixed, 4);
        for a in 0..200 {
            if a != 3 && a != 7 {
                assert_eq!(next.states[a], pop.states[a]);
            }
        }
        assert!(ActivationPolicy::FixedSet { agents: vec![200] }.validate(200).is_err());
        assert!(ActivationPolicy::UniformSubset { fraction: 0.0 }.validate(200).is_err());
        let mask = ActivationPolicy::UniformSubset { fraction: 0.3 }.active_mask(10_000, 0, 2);
        let f = mask.iter().filter(|&&m| m).count() as f64 / 10_000.0;
        assert!((f - 0.3).abs() < 0.02);
    }

    #[test]
    fn informed_fraction_counts() {
        let net = generate_power_law(100, 2.5, 8, 5).unwrap();
        let pop = AgentPopulation::informed_fraction(net, 0.3, 0.5, 2).unwrap();
        assert_eq!(pop.states.iter().filter(|s| **s == LatentState::Truthful).count(), 30);
    }

    #[test]
    fn concentration_improves_with_size() {
        let s = ConcentrationScenario {
            horizon: 60,
            ..ConcentrationScenario::default()
        };
        let t = concentration_experiment(&[100, 1600], 30, &s, 7).unwrap();
        assert!(t.rows[1].median < t.rows[0].median, "{:?}", (t.rows[0].median, t.rows[1].median));
        assert_eq!(t, concentration_experiment(&[100, 1600], 30, &s, 7).unwrap());
        assert!(concentration_experiment(&[100], 10, &s, 7).is_err());
    }

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&xs, 0.9), 9.0);
        assert_eq!(percentile(&xs, 1.0), 10.0);
    }

    #[test]
    fn latent_map() {
        assert_eq!(classify_answer(" 1947 ", "1947"), LatentState::Truthful);
        assert_eq!(classify_answer("-1", "1947"), LatentState::DoesNotKnow);
        assert_eq!(classify_answer("1948", "1947"), LatentState::Hallucinating);
    }

    /// Serves `replies` in order, one connection each, and records request bodies.
    fn mock_endpoint(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn ctx(sources: Vec<&str>) -> AgentContext<'_> {
        AgentContext {
            agent: 0,
            round: 0,
            u: 20.4,
            own: LatentState::DoesNotKnow,
            degree: sources.len(),
            truthful_sources: 0,
            hallucinating_sources: 0,
            source_transcripts: sources,
            draw: 0.5,
        }
    }

    #[test]
    fn external_adapter_latent_map_and_failures() {
        let (url, server) = mock_endpoint(vec![
            (200, r#"{"text":"1947"}"#.into()),
            (200, r#"{"text":"-1"}"#.into()),
            (200, r#"{"text":"1950"}"#.into()),
            (200, r#"{"answer":"1947"}"#.into()),
            (500, r#"{"error":"boom"}"#.into()),
        ]);
        let cfg = ExternalAgentConfig {
            endpoint: url,
            system_prompt: "Answer with a year.".into(),
            template: "Context: {observation}\n{neighbors}".into(),
            true_answer: "1947".into(),
            timeout_secs: 5.0,
        };
        let agents = ExternalAgents::new(cfg, vec![Some("paragraph".into())]);
        let c = ctx(vec!["1946", ""]);
        let got: Vec<LatentState> = (0..5).map(|_| agents.respond(&c).state).collect();
        assert_eq!(
            got,
            vec![LatentState::Truthful, LatentState::DoesNotKnow, LatentState::Hallucinating, LatentState::DoesNotKnow, LatentState::DoesNotKnow]
        );
        let bodies = server.join().unwrap();
        let first: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(first["max_tokens"], 20);
        assert_eq!(first["system"], "Answer with a year.");
        assert_eq!(
            first["user"],
            "Context: paragraph\nneighbor 1: 1946\nneighbor 2: (no answer yet)"
        );
    }

    #[test]
    fn unreachable_endpoint_is_does_not_know() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = ExternalAgentConfig {
            endpoint: format!("http://127.0.0.1:{port}/"),
            system_prompt: String::new(),
            template: "{neighbors}".into(),
            true_answer: "x".into(),
            timeout_secs: 1.0,
        };
        let r = ExternalAgents::new(cfg, vec![]).respond(&ctx(vec![]));
        assert_eq!(r.state, LatentState::DoesNotKnow);
        assert_eq!(r.transcript.as_deref(), Some("-1"));
    }
}
