//! Runs one experiment and writes its artifacts plus `config.toml` and
//! `manifest.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ExperimentKind, NetworkSpec};
use crate::abm::{concentration_experiment, run_trajectory, AgentPopulation, ExternalAgents, KernelAgents};
use crate::control::{control_sweep, optimize};
use crate::error::{Error, Result};
use crate::graph::{generate_configuration, generate_erdos_renyi, generate_power_law, DegreeDistribution, DirectedNetwork};
use crate::kernel::LogisticKernel;
use crate::meanfield::{integrate_fast, MeanFieldState, SimplexDensity};
use crate::reconfig::{prop1_verify, reconfig_benchmark};
use crate::seeds::{self, stream};
use crate::twoscale::{epsilon_scaling_experiment, integrate_coupled, integrate_reduced};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config: String,
    pub wall_time_secs: f64,
    pub artifacts: Vec<Artifact>,
    /// Headline numbers of the run (e.g. the Prop. 1 pass flag).
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let f = File::open(&path).map_err(|e| Error::Config(format!("no manifest at {}: {e}", path.display())))?;
        serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Config(format!("malformed manifest {}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect::<String>();
    Ok((hex, bytes.len() as u64))
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn staged<T>(kind: ExperimentKind, stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        kind: kind.to_string(),
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<DirectedNetwork> {
    let s = seeds::derive(seed, &[stream::NETWORK]);
    match spec {
        NetworkSpec::PowerLaw { n, exponent, max_degree } => generate_power_law(*n, *exponent, *max_degree, s),
        NetworkSpec::ErdosRenyi { n, p } => generate_erdos_renyi(*n, *p, s),
        NetworkSpec::Configuration { n, q } => generate_configuration(*n, &DegreeDistribution::new(q.clone())?, s),
        NetworkSpec::EdgeList { path } => {
            let f = File::open(path)?;
            DirectedNetwork::read_edge_list(BufReader::new(f))
        }
    }
}

/// Validates, then runs in a pool of `cfg.jobs` threads (if set) and writes
/// everything into `cfg.out_dir()`. Nothing is created when validation fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    match cfg.jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| run_validated(cfg))
        }
        None => run_validated(cfg),
    }
}

fn run_validated(cfg: &ExperimentConfig) -> Result<Manifest> {
    let kind = cfg.kind;
    let dir = cfg.out_dir();
    staged(kind, "output", fs::create_dir_all(&dir).map_err(Error::from))?;
    let start = Instant::now();
    let mut w = Writer { dir: &dir, files: Vec::new() };
    let summary = staged(kind, "run", run_kind(cfg, &mut w))?;
    let wall = start.elapsed().as_secs_f64();

    let echo = cfg.to_toml();
    fs::write(dir.join(CONFIG_ECHO), &echo)?;
    let mut artifacts = Vec::new();
    for f in w.files.iter().chain(std::iter::once(&CONFIG_ECHO.to_string())) {
        let (sha256, bytes) = sha256_file(&dir.join(f))?;
        artifacts.push(Artifact {
            file: f.clone(),
            sha256,
            bytes,
        });
    }
    let manifest = Manifest {
        kind,
        seed: cfg.seed,
        config: echo,
        wall_time_secs: wall,
        artifacts,
        summary,
    };
    let f = BufWriter::new(File::create(dir.join(MANIFEST))?);
    serde_json::to_writer_pretty(f, &manifest).map_err(|e| Error::Io(e.into()))?;
    log::info!("{kind}: wrote {} artifacts to {} in {wall:.1}s", manifest.artifacts.len(), dir.display());
    Ok(manifest)
}

fn run_kind(cfg: &ExperimentConfig, w: &mut Writer<'_>) -> Result<serde_json::Value> {
    use serde_json::json;
    let seed = cfg.seed;
    Ok(match cfg.kind {
        ExperimentKind::Simulate => {
            let s = &cfg.simulate;
            let net = build_network(&s.network, seed)?;
            let n = net.n();
            s.policy.validate(n)?;
            w.write("network.csv", |f| {
                let mut wtr = csv::Writer::from_writer(f);
                wtr.write_record(["listener", "source"])?;
                for (i, j) in net.edges() {
                    wtr.write_record([i.to_string(), j.to_string()])?;
                }
                wtr.flush()?;
                Ok(())
            })?;
            let pop = AgentPopulation::random(net, s.initial, seeds::derive(seed, &[stream::INIT_STATES]))?;
            let kernel = LogisticKernel::new(s.kernel.clone())?;
            let (traj, _) = match &s.external {
                Some(ext) => {
                    let agents = ExternalAgents::new(ext.clone(), vec![None; n]);
                    run_trajectory(&pop, &agents, s.u, &s.policy, s.rounds, seed)?
                }
                None => run_trajectory(&pop, &KernelAgents { kernel: &kernel }, s.u, &s.policy, s.rounds, seed)?,
            };
            w.write("trajectory.csv", |f| traj.write_csv(f, s.per_class))?;
            let last = traj.densities.last().map(|d| d.aggregate).unwrap_or_default();
            json!({ "n": n, "rho_final": last })
        }
        ExperimentKind::Meanfield => {
            let s = &cfg.meanfield;
            let q = DegreeDistribution::new(s.q.clone())?;
            let kernel = LogisticKernel::new(s.kernel.clone())?;
            let x0 = MeanFieldState::uniform(q.len(), SimplexDensity(s.initial));
            let traj = integrate_fast(&x0, &q, s.u, &kernel, s.t_end, s.dt)?;
            w.write("meanfield.csv", |f| traj.write_csv(&q, f))?;
            json!({ "rho_final": traj.last().aggregate(&q) })
        }
        ExperimentKind::Reduce => {
            let s = &cfg.reduce;
            let q = DegreeDistribution::new(s.q0.clone())?;
            let kernel = LogisticKernel::new(s.kernel.clone())?;
            let reduced = integrate_reduced(&q, s.u, &kernel, &s.slow, s.t_end, s.dt, s.tol)?;
            w.write("reduced.csv", |f| reduced.write_csv(f))?;
            let x0 = MeanFieldState::uniform(q.len(), SimplexDensity(s.initial));
            let coupled = integrate_coupled(&x0, &q, s.u, &kernel, &s.slow, &s.two_scale())?;
            w.write("coupled.csv", |f| coupled.write_csv(f))?;
            let gap = reduced
                .q
                .last()
                .zip(coupled.q.last())
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
                .unwrap_or(0.0);
            json!({ "final_q_gap": gap })
        }
        ExperimentKind::EpsilonScan => {
            let s = &cfg.epsilon_scan;
            let t = epsilon_scaling_experiment(&s.epsilons, &s.scenario)?;
            w.write("epsilon_scan.csv", |f| t.write_csv(f))?;
            json!({ "slope_q": t.slope_q, "slope_rho": t.slope_rho })
        }
        ExperimentKind::ReconfigBench => {
            let r = reconfig_benchmark(&cfg.reconfig_bench, seed)?;
            w.write("reconfig_bench.csv", |f| r.write_csv(f))?;
            w.write("reconfig_summary.csv", |f| r.write_summary_csv(f))?;
            w.write("reconfig_audit.csv", |f| r.write_audit_csv(f))?;
            let arms: Vec<_> = r
                .arms
                .iter()
                .map(|a| json!({ "arm": a.arm.name(), "time_to_threshold": a.time_to_threshold, "equilibrium": a.equilibrium }))
                .collect();
            json!({ "arms": arms })
        }
        ExperimentKind::Prop1 => {
            let r = prop1_verify(&cfg.prop1.scenario, cfg.prop1.trials, seed)?;
            w.write("prop1.csv", |f| r.write_csv(f))?;
            json!({ "frequency": r.frequency, "delta1": r.delta1, "wilson": [r.wilson.0, r.wilson.1], "pass": r.pass })
        }
        ExperimentKind::Sweep => {
            let s = &cfg.sweep;
            let t = control_sweep(&s.u_grid, &s.scenario, s.trials, seed)?;
            w.write("sweep.csv", |f| t.write_csv(f))?;
            w.write("sweep_trials.csv", |f| t.write_trials_csv(f))?;
            json!({ "argmax_rho_T": t.argmax_rho_t(), "argmax_rho_H": t.argmax_rho_h() })
        }
        ExperimentKind::Optimize => {
            let t = optimize(&cfg.optimize, seed)?;
            w.write("optimize_trace.csv", |f| t.write_csv(f))?;
            let first = t.rows.first().map(|r| r.eval_cost);
            let last = t.rows.last().map(|r| r.eval_cost);
            json!({ "final_u": t.final_u(), "eval_cost_u0": first, "eval_cost_final": last })
        }
        ExperimentKind::Concentration => {
            let s = &cfg.concentration;
            let t = concentration_experiment(&s.n_list, s.trials, &s.scenario, seed)?;
            w.write("concentration.csv", |f| t.write_csv(f))?;
            let med: Vec<_> = t.rows.iter().map(|r| json!({ "n": r.n, "median": r.median })).collect();
            json!({ "median_deviation": med })
        }
    })
}

/// Artifacts of `kind` that must be identical across reruns.
pub fn csv_artifacts(m: &Manifest) -> Vec<PathBuf> {
    m.artifacts.iter().filter(|a| a.file.ends_with(".csv")).map(|a| PathBuf::from(&a.file)).collect()
}
