use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use llmnet_core::cli::{run_experiment, ExperimentConfig, ExperimentKind, Manifest, NetworkSpec};
use llmnet_core::twoscale::SlowDynamics;

fn llmnet(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_llmnet"));
    c.args(args).env_remove("LLMNET_SEED").env_remove("LLMNET_OUT").env_remove("LLMNET_CONFIG");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn minimal_config_runs_and_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "kind = \"meanfield\"\n");
    let out = dir.path().join("run");
    let o = llmnet(&["meanfield", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    let reloaded = ExperimentConfig::from_toml_str(&echo).unwrap();
    let mut want = ExperimentConfig::new(ExperimentKind::Meanfield);
    want.out = Some(out.clone());
    assert_eq!(reloaded, want);
    assert_eq!(reloaded.to_toml(), echo);

    let m = Manifest::load(&out).unwrap();
    assert_eq!((m.kind, m.seed), (ExperimentKind::Meanfield, 1));
    assert_eq!(m.config, echo);
    for a in &m.artifacts {
        let (sha, bytes) = llmnet_core::cli::runner::sha256_file(&out.join(&a.file)).unwrap();
        assert_eq!((sha, bytes), (a.sha256.clone(), a.bytes));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let b1 = write(d, "b1.toml", "kind = \"prop1\"\n[prop1.scenario.grading]\nmu_t = 1.0\nmu_h = 9.0\n");
    let never = d.join("never");
    let o = llmnet(&["prop1", "--config", &b1, "--out", never.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("B1"), "{}", stderr(&o));
    assert!(!never.exists(), "validation failure must not create output");

    let o = llmnet(&["meanfield", "--config", &b1], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("subcommand"));

    let typo = write(d, "typo.toml", "kind = \"sweep\"\n\n[sweep]\ntrails = 5\n");
    let o = llmnet(&["sweep", "--config", &typo], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4") && stderr(&o).contains("trails"), "{}", stderr(&o));

    let o = llmnet(&["meanfield", "--config", d.join("missing.toml").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);

    // step too large for the simplex guard: a runtime failure
    let blowup = write(
        d,
        "blowup.toml",
        "kind = \"meanfield\"\n[meanfield]\nq = [0.0, 1.0]\ninitial = [0.0, 1.0, 0.0]\nt_end = 10.0\ndt = 5.0\n[meanfield.kernel]\nrate = 1.0\nbias_h = 6.0\n",
    );
    let o = llmnet(&["meanfield", "--config", &blowup, "--out", d.join("r3").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("meanfield/run"), "{}", stderr(&o));

    let o = llmnet(&["plotdata", d.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest"));
}

#[test]
fn env_overrides_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env");
    let o = llmnet(&["meanfield", "--quiet"], &[("LLMNET_SEED", "5"), ("LLMNET_OUT", out.to_str().unwrap())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(Manifest::load(&out).unwrap().seed, 5);

    let o = llmnet(&["meanfield", "--quiet", "--seed", "6"], &[("LLMNET_SEED", "5"), ("LLMNET_OUT", out.to_str().unwrap())]);
    assert_eq!(code(&o), 0);
    assert_eq!(Manifest::load(&out).unwrap().seed, 6);

    // flag beats config file
    let cfg = write(dir.path(), "c.toml", "kind = \"meanfield\"\nseed = 11\n");
    let o = llmnet(&["meanfield", "--quiet", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(Manifest::load(&out).unwrap().seed, 11);
    let o = llmnet(&["meanfield", "--quiet", "--config", &cfg, "--seed", "12", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(Manifest::load(&out).unwrap().seed, 12);
}

#[test]
fn simulate_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        let o = llmnet(&["simulate", "--seed", "42", "--jobs", jobs, "--quiet", "--out", out.to_str().unwrap()], &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a", "1"), run("b", "3"));
    for f in ["trajectory.csv", "network.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn defaults_command_prints_a_loadable_config() {
    for kind in ExperimentKind::ALL {
        let o = llmnet(&["defaults", kind.name()], &[]);
        assert_eq!(code(&o), 0);
        let cfg = ExperimentConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(cfg, ExperimentConfig::new(kind));
    }
    assert_eq!(code(&llmnet(&["defaults", "bogus"], &[])), 2);
}

fn series_of(path: &Path) -> (Vec<String>, BTreeSet<String>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let series = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    (header, series)
}

fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn plotdata_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = Vec::new();

    let mut c = ExperimentConfig::new(ExperimentKind::ReconfigBench);
    c.reconfig_bench.rounds = 200;
    c.reconfig_bench.trials = 3;
    cases.push((c, "reconfig", set(&["algorithm1", "static", "random"])));

    let mut c = ExperimentConfig::new(ExperimentKind::Sweep);
    c.sweep.u_grid = vec![10.0, 30.0];
    c.sweep.trials = 5;
    c.sweep.scenario.rounds = 50;
    cases.push((c, "sweep", set(&["rho_T", "rho_H", "token_cost"])));

    let mut c = ExperimentConfig::new(ExperimentKind::Optimize);
    c.optimize.schedule.steps = 2;
    c.optimize.train_scenarios = 2;
    c.optimize.eval_scenarios = 2;
    c.optimize.scenario.rounds = 50;
    cases.push((c, "optimize", set(&["train_cost", "eval_cost", "u"])));

    let mut c = ExperimentConfig::new(ExperimentKind::Prop1);
    c.prop1.trials = 500;
    cases.push((c, "prop1", set(&["frequency", "bound"])));

    let mut c = ExperimentConfig::new(ExperimentKind::Concentration);
    c.concentration.n_list = vec![50, 100];
    c.concentration.scenario.horizon = 20;
    cases.push((c, "concentration", set(&["sup_deviation"])));

    for kind in [ExperimentKind::Simulate, ExperimentKind::Meanfield, ExperimentKind::Reduce] {
        let name = match kind {
            ExperimentKind::Simulate => "trajectory",
            ExperimentKind::Meanfield => "meanfield",
            _ => "reduce",
        };
        let want = match kind {
            ExperimentKind::Simulate => set(&["rho_T", "rho_H", "rho_D"]),
            ExperimentKind::Meanfield => set(&["rho_T", "V"]),
            _ => set(&["rho_T_reduced", "rho_T_coupled", "mean_degree_reduced", "mean_degree_coupled"]),
        };
        cases.push((ExperimentConfig::new(kind), name, want));
    }
    let mut c = ExperimentConfig::new(ExperimentKind::EpsilonScan);
    c.epsilon_scan.epsilons = vec![0.1, 0.03];
    cases.push((c, "epsilon_scan", set(&["e_q", "e_rho"])));

    for (mut c, fig, want) in cases {
        let out = dir.path().join(c.kind.name());
        c.out = Some(out.clone());
        run_experiment(&c).unwrap();
        let o = llmnet(&["plotdata", out.to_str().unwrap(), "--quiet"], &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let (header, series) = series_of(&out.join("plotdata").join(format!("{fig}.csv")));
        assert_eq!(header, ["series", "x", "y", "y_lo", "y_hi"]);
        assert_eq!(series, want, "{}", c.kind);
    }

    // bands come from trial quantiles and bracket the central value
    let mut rdr = csv::Reader::from_path(dir.path().join("reconfig-bench/plotdata/reconfig.csv")).unwrap();
    for r in rdr.records() {
        let r = r.unwrap();
        let v: Vec<f64> = (1..5).map(|i| r[i].parse().unwrap()).collect();
        assert!(v[2] <= v[1] + 1e-12 && v[1] <= v[3] + 1e-12, "{r:?}");
    }
}

/// Every mutation of a valid config must be refused before any output
/// appears.
#[test]
fn invalid_configs_never_start() {
    type Mutation = (ExperimentKind, fn(&mut ExperimentConfig));
    let mutations: Vec<Mutation> = vec![
        (ExperimentKind::Simulate, |c| c.simulate.initial = [0.5, 0.5, 0.5]),
        (ExperimentKind::Simulate, |c| c.simulate.kernel.rate = 1.5),
        (ExperimentKind::Simulate, |c| c.simulate.u = f64::NAN),
        (ExperimentKind::Simulate, |c| c.simulate.network = NetworkSpec::ErdosRenyi { n: 10, p: 2.0 }),
        (ExperimentKind::Simulate, |c| {
            c.simulate.network = NetworkSpec::EdgeList {
                path: "/nonexistent/edges.txt".into(),
            }
        }),
        (ExperimentKind::Meanfield, |c| c.meanfield.q = vec![0.5, 0.6]),
        (ExperimentKind::Meanfield, |c| c.meanfield.dt = 0.0),
        (ExperimentKind::Reduce, |c| c.reduce.epsilon = 0.0),
        (ExperimentKind::Reduce, |c| c.reduce.slow = SlowDynamics::BirthDeath { lambda_add: -1.0, lambda_rem: 1.0 }),
        (ExperimentKind::EpsilonScan, |c| c.epsilon_scan.epsilons = vec![0.01, 0.1]),
        (ExperimentKind::ReconfigBench, |c| c.reconfig_bench.grading.mu_h = 0.9),
        (ExperimentKind::ReconfigBench, |c| c.reconfig_bench.informed = 1.5),
        (ExperimentKind::Prop1, |c| c.prop1.trials = 10),
        (ExperimentKind::Prop1, |c| c.prop1.scenario.grading.noise_width = -1.0),
        (ExperimentKind::Sweep, |c| c.sweep.trials = 1),
        (ExperimentKind::Sweep, |c| c.sweep.u_grid = vec![30.0, 10.0]),
        (ExperimentKind::Sweep, |c| c.sweep.scenario.weights.xi_a = 0.0),
        (ExperimentKind::Optimize, |c| c.optimize.u0 = 100.0),
        (ExperimentKind::Optimize, |c| c.optimize.schedule.a0 = -1.0),
        (ExperimentKind::Concentration, |c| c.concentration.trials = 3),
        (ExperimentKind::Concentration, |c| c.concentration.n_list = vec![400, 100]),
        (ExperimentKind::Meanfield, |c| c.jobs = Some(0)),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (idx, (kind, mutate)) in mutations.into_iter().enumerate() {
        let mut c = ExperimentConfig::new(kind);
        let out = dir.path().join(format!("m{idx}"));
        c.out = Some(out.clone());
        c.validate().unwrap();
        mutate(&mut c);
        let e = run_experiment(&c).expect_err(&format!("mutation {idx} ({kind}) accepted"));
        assert!(e.is_validation(), "mutation {idx}: {e}");
        assert!(!out.exists(), "mutation {idx} created output");
    }
}
