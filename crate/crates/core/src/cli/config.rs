//! TOML experiment configuration. Every table rejects unknown keys and
//! every field has a default, so a file holding only `kind = "..."` is a
//! complete config. `llmnet defaults <kind>` prints the effective defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::abm::{ActivationPolicy, ConcentrationScenario, ExternalAgentConfig};
use crate::control::{ControlScenario, OptimizeConfig};
use crate::error::{Error, Result};
use crate::graph::DegreeDistribution;
use crate::kernel::{KernelParams, LogisticKernel};
use crate::meanfield::SimplexDensity;
use crate::reconfig::{Prop1Scenario, ReconfigBenchmark};
use crate::twoscale::{ScalingScenario, SlowDynamics, TwoScaleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Meanfield,
    Reduce,
    EpsilonScan,
    ReconfigBench,
    Prop1,
    Sweep,
    Optimize,
    Concentration,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Simulate,
        ExperimentKind::Meanfield,
        ExperimentKind::Reduce,
        ExperimentKind::EpsilonScan,
        ExperimentKind::ReconfigBench,
        ExperimentKind::Prop1,
        ExperimentKind::Sweep,
        ExperimentKind::Optimize,
        ExperimentKind::Concentration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Meanfield => "meanfield",
            ExperimentKind::Reduce => "reduce",
            ExperimentKind::EpsilonScan => "epsilon-scan",
            ExperimentKind::ReconfigBench => "reconfig-bench",
            ExperimentKind::Prop1 => "prop1",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Optimize => "optimize",
            ExperimentKind::Concentration => "concentration",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

/// How the simulated network is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    PowerLaw { n: usize, exponent: f64, max_degree: usize },
    ErdosRenyi { n: usize, p: f64 },
    /// Each node's in-degree is drawn from `q`.
    Configuration { n: usize, q: Vec<f64> },
    /// `# nodes=N` header followed by `i j` lines (i listens to j).
    EdgeList { path: PathBuf },
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::PowerLaw {
            n: 100,
            exponent: 2.5,
            max_degree: 10,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkSpec::PowerLaw { n, exponent, max_degree } => {
                if *n < 2 || *max_degree == 0 || *max_degree >= *n || !exponent.is_finite() {
                    return Err(Error::Config(format!(
                        "network: power law needs n >= 2, 1 <= max_degree < n, finite exponent (n={n}, max_degree={max_degree})"
                    )));
                }
            }
            NetworkSpec::ErdosRenyi { n, p } => {
                if *n < 2 || !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!("network: erdos-renyi needs n >= 2 and p in [0, 1] (n={n}, p={p})")));
                }
            }
            NetworkSpec::Configuration { n, q } => {
                let q = DegreeDistribution::new(q.clone())?;
                if *n < 2 || q.l_max() >= *n {
                    return Err(Error::Config(format!("network: configuration needs n >= 2 and l_max < n (n={n})")));
                }
            }
            NetworkSpec::EdgeList { path } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("network: edge list {} not found", path.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub network: NetworkSpec,
    pub kernel: KernelParams,
    pub u: f64,
    pub rounds: usize,
    /// Initial `(T, H, D)` probabilities, drawn independently per agent.
    pub initial: [f64; 3],
    pub policy: ActivationPolicy,
    /// Adds `rho_{T,H,D}_l{l}` columns to the trajectory.
    pub per_class: bool,
    /// Replaces the kernel with an HTTP completion endpoint.
    pub external: Option<ExternalAgentConfig>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            network: NetworkSpec::default(),
            kernel: KernelParams::default(),
            u: 20.0,
            rounds: 200,
            initial: [0.7, 0.15, 0.15],
            policy: ActivationPolicy::All,
            per_class: false,
            external: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanfieldSection {
    pub q: Vec<f64>,
    pub kernel: KernelParams,
    pub u: f64,
    /// Same initial density in every degree class.
    pub initial: [f64; 3],
    pub t_end: f64,
    pub dt: f64,
}

impl Default for MeanfieldSection {
    fn default() -> Self {
        MeanfieldSection {
            q: vec![0.0, 0.25, 0.25, 0.2, 0.15, 0.1, 0.05],
            kernel: KernelParams::default(),
            u: 20.0,
            initial: [0.3, 0.35, 0.35],
            t_end: 200.0,
            dt: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReduceSection {
    pub q0: Vec<f64>,
    pub kernel: KernelParams,
    pub u: f64,
    pub slow: SlowDynamics,
    pub t_end: f64,
    pub dt: f64,
    pub tol: f64,
    /// Scale separation of the coupled run written next to the reduced one.
    pub epsilon: f64,
    /// Coupled fast step on the fast clock (`dt_fast = ε·fast_step`).
    pub fast_step: f64,
    /// Initial densities of the coupled run, uniform across classes.
    pub initial: [f64; 3],
}

impl Default for ReduceSection {
    fn default() -> Self {
        let s = ScalingScenario::default();
        ReduceSection {
            q0: s.q0,
            kernel: s.kernel,
            u: s.u,
            slow: s.slow,
            t_end: s.t_end,
            dt: s.dt_slow,
            tol: s.tol,
            epsilon: 0.01,
            fast_step: s.fast_step,
            initial: [0.5, 0.25, 0.25],
        }
    }
}

impl ReduceSection {
    pub fn two_scale(&self) -> TwoScaleConfig {
        TwoScaleConfig {
            epsilon: self.epsilon,
            t_end: self.t_end,
            dt_slow: self.dt,
            dt_fast: self.epsilon * self.fast_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonScanSection {
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub scenario: ScalingScenario,
}

impl Default for EpsilonScanSection {
    fn default() -> Self {
        EpsilonScanSection {
            epsilons: vec![0.1, 0.03, 0.01, 0.003],
            scenario: ScalingScenario::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Section {
    pub trials: usize,
    pub scenario: Prop1Scenario,
}

impl Default for Prop1Section {
    fn default() -> Self {
        Prop1Section {
            trials: 1000,
            scenario: Prop1Scenario::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub u_grid: Vec<f64>,
    pub trials: usize,
    pub scenario: ControlScenario,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            u_grid: (0..=22).map(|k| 5.0 + 2.5 * k as f64).collect(),
            trials: 10,
            scenario: ControlScenario::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationSection {
    /// Strictly increasing.
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub scenario: ConcentrationScenario,
}

impl Default for ConcentrationSection {
    fn default() -> Self {
        ConcentrationSection {
            n_list: vec![100, 400, 1600],
            trials: 30,
            scenario: ConcentrationScenario::default(),
        }
    }
}

/// One experiment. Only the table named by `kind` is validated and used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; `runs/<kind>` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; all cores when unset. Results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub meanfield: MeanfieldSection,
    #[serde(default)]
    pub reduce: ReduceSection,
    #[serde(default)]
    pub epsilon_scan: EpsilonScanSection,
    #[serde(default)]
    pub reconfig_bench: ReconfigBenchmark,
    #[serde(default)]
    pub prop1: Prop1Section,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    #[serde(default)]
    pub concentration: ConcentrationSection,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            seed: default_seed(),
            out: None,
            jobs: None,
            simulate: Default::default(),
            meanfield: Default::default(),
            reduce: Default::default(),
            epsilon_scan: Default::default(),
            reconfig_bench: Default::default(),
            prop1: Default::default(),
            sweep: Default::default(),
            optimize: Default::default(),
            concentration: Default::default(),
        }
    }

    /// Parses `text` and fills every key it leaves out from
    /// [`ExperimentConfig::new`], so a partial sub-table such as
    /// `[prop1.scenario.grading]` keeps the experiment's own defaults for
    /// its other keys.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parse_err = |e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
            Error::Parse {
                line,
                msg: e.message().to_string(),
            }
        };
        // strict pass first: unknown keys and type errors keep their line
        let strict: ExperimentConfig = toml::from_str(text).map_err(parse_err)?;
        let user: toml::Value = toml::from_str(text).map_err(parse_err)?;
        let mut merged = toml::Value::try_from(ExperimentConfig::new(strict.kind)).expect("config serializes to TOML");
        merge(&mut merged, user);
        merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse { line: 0, msg: e.message().to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The effective config; loading it back gives an identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Only the defaults relevant to `kind`.
    pub fn defaults_toml(kind: ExperimentKind) -> String {
        let cfg = ExperimentConfig::new(kind);
        let mut v = toml::Value::try_from(&cfg).expect("config serializes to TOML");
        let keep = kind.name().replace('-', "_");
        if let toml::Value::Table(t) = &mut v {
            let base = ["kind", "seed", "out", "jobs"];
            t.retain(|k, _| base.contains(&k.as_ref()) || *k == keep);
        }
        toml::to_string(&v).expect("config serializes to TOML")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(self.kind.name()))
    }

    /// Checks the section for `kind`; nothing else is inspected.
    pub fn validate(&self) -> Result<()> {
        self.validate_section().map_err(|e| Error::Stage {
            kind: self.kind.to_string(),
            stage: "validate".into(),
            source: Box::new(as_config(e)),
        })
    }

    fn validate_section(&self) -> Result<()> {
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        match self.kind {
            ExperimentKind::Simulate => {
                let s = &self.simulate;
                s.network.validate()?;
                LogisticKernel::new(s.kernel.clone())?;
                SimplexDensity(s.initial).validate()?;
                check_u(s.u)?;
                if let Some(ext) = &s.external {
                    if ext.endpoint.is_empty() || !(ext.timeout_secs > 0.0) {
                        return Err(Error::Config("external: endpoint must be set and timeout_secs > 0".into()));
                    }
                }
                match &s.network {
                    NetworkSpec::PowerLaw { n, .. } | NetworkSpec::ErdosRenyi { n, .. } | NetworkSpec::Configuration { n, .. } => {
                        s.policy.validate(*n)
                    }
                    NetworkSpec::EdgeList { .. } => Ok(()),
                }
            }
            ExperimentKind::Meanfield => {
                let s = &self.meanfield;
                DegreeDistribution::new(s.q.clone())?;
                LogisticKernel::new(s.kernel.clone())?;
                SimplexDensity(s.initial).validate()?;
                check_u(s.u)?;
                if !(s.dt > 0.0 && s.t_end >= 0.0) {
                    return Err(Error::Config("meanfield: dt > 0 and t_end >= 0 required".into()));
                }
                Ok(())
            }
            ExperimentKind::Reduce => {
                let s = &self.reduce;
                let q = DegreeDistribution::new(s.q0.clone())?;
                LogisticKernel::new(s.kernel.clone())?;
                SimplexDensity(s.initial).validate()?;
                s.slow.validate(q.len())?;
                check_u(s.u)?;
                if !(s.tol > 0.0 && s.fast_step > 0.0) {
                    return Err(Error::Config("reduce: tol and fast_step must be > 0".into()));
                }
                s.two_scale().validate()
            }
            ExperimentKind::EpsilonScan => {
                let s = &self.epsilon_scan;
                if s.epsilons.is_empty() || s.epsilons.iter().any(|&e| !(e > 0.0)) || s.epsilons.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::Config("epsilon-scan: epsilons must be positive and strictly decreasing".into()));
                }
                let sc = &s.scenario;
                let q = DegreeDistribution::new(sc.q0.clone())?;
                LogisticKernel::new(sc.kernel.clone())?;
                sc.slow.validate(q.len())?;
                if !(sc.t_end > 0.0 && sc.dt_slow > 0.0 && sc.fast_step > 0.0 && sc.tol > 0.0) {
                    return Err(Error::Config("epsilon-scan: t_end, dt_slow, fast_step, tol must be > 0".into()));
                }
                check_u(sc.u)
            }
            ExperimentKind::ReconfigBench => self.reconfig_bench.validate(),
            ExperimentKind::Prop1 => {
                let s = &self.prop1;
                if s.trials < 500 {
                    return Err(Error::Config(format!("prop1: trials={} must be >= 500", s.trials)));
                }
                let sc = &s.scenario;
                let q = DegreeDistribution::new(sc.q.clone())?;
                if sc.n < 2 || q.l_max() >= sc.n {
                    return Err(Error::Config("prop1: n >= 2 and l_max < n required".into()));
                }
                SimplexDensity(sc.initial).validate()?;
                sc.grading.validate()
            }
            ExperimentKind::Sweep => {
                let s = &self.sweep;
                if s.trials < 5 {
                    return Err(Error::Config(format!("sweep: trials={} must be >= 5", s.trials)));
                }
                if s.u_grid.is_empty() || s.u_grid.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("sweep: u_grid must be non-empty and strictly increasing".into()));
                }
                s.u_grid.iter().try_for_each(|&u| check_u(u))?;
                s.scenario.validate()
            }
            ExperimentKind::Optimize => self.optimize.validate(),
            ExperimentKind::Concentration => {
                let s = &self.concentration;
                if s.trials < 30 {
                    return Err(Error::Config(format!("concentration: trials={} must be >= 30", s.trials)));
                }
                if s.n_list.is_empty() || s.n_list.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("concentration: n_list must be non-empty and strictly increasing".into()));
                }
                let sc = &s.scenario;
                let q = DegreeDistribution::new(sc.q.clone())?;
                if s.n_list[0] <= q.l_max() {
                    return Err(Error::Config("concentration: every N must exceed l_max".into()));
                }
                LogisticKernel::new(sc.kernel.clone())?;
                SimplexDensity(sc.initial).validate()?;
                if sc.horizon == 0 || sc.substeps == 0 {
                    return Err(Error::Config("concentration: horizon and substeps must be >= 1".into()));
                }
                check_u(sc.u)
            }
        }
    }
}

/// Deep merge of `over` into `base`. A table whose `kind` tag changes is
/// replaced rather than merged, since its fields belong to another variant.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            if o.get("kind").is_some() && b.get("kind").is_some() && o.get("kind") != b.get("kind") {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn check_u(u: f64) -> Result<()> {
    if u.is_finite() && u >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("control u={u} must be finite and >= 0")))
    }
}

/// Anything rejected while validating is a config problem.
fn as_config(e: Error) -> Error {
    if e.is_validation() {
        e
    } else {
        Error::Config(e.to_string())
    }
}
