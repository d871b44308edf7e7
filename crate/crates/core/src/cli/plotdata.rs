//! Long-format plot data (`series,x,y,y_lo,y_hi`) derived from a run
//! directory. Bands are trial quantiles (10th/90th percentile) where the run
//! has trials and blank otherwise.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::config::ExperimentKind;
use super::runner::Manifest;
use crate::abm::percentile;
use crate::error::{Error, Result};
use crate::meanfield::fmt_f;

pub const PLOT_DIR: &str = "plotdata";

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub band: Option<(f64, f64)>,
}

fn pt(series: &str, x: f64, y: f64, band: Option<(f64, f64)>) -> Point {
    Point {
        series: series.to_string(),
        x,
        y,
        band,
    }
}

/// A CSV read into named columns of strings.
struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column {name} missing")))
    }

    fn f(&self, row: &csv::StringRecord, name: &str) -> Result<f64> {
        let s = row.get(self.col(name)?).unwrap_or("");
        s.parse().map_err(|_| Error::Config(format!("column {name}: bad number {s:?}")))
    }

    fn s<'a>(&self, row: &'a csv::StringRecord, name: &str) -> Result<&'a str> {
        Ok(row.get(self.col(name)?).unwrap_or(""))
    }
}

fn write_points(path: &Path, pts: &[Point]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(["series", "x", "y", "y_lo", "y_hi"])?;
    for p in pts {
        let (lo, hi) = p.band.map(|(a, b)| (fmt_f(a), fmt_f(b))).unwrap_or_default();
        wtr.write_record([p.series.clone(), fmt_f(p.x), fmt_f(p.y), lo, hi])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Builds the plot tables for the run in `run_dir` and writes them under
/// `run_dir/plotdata/`. Returns the written paths.
pub fn emit_plotdata(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let m = Manifest::load(run_dir)?;
    let figs = plot_tables(run_dir, m.kind)?;
    let out = run_dir.join(PLOT_DIR);
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    for (name, pts) in figs {
        let p = out.join(format!("{name}.csv"));
        write_points(&p, &pts)?;
        written.push(p);
    }
    Ok(written)
}

pub fn plot_tables(dir: &Path, kind: ExperimentKind) -> Result<Vec<(String, Vec<Point>)>> {
    let read = |f: &str| Table::read(&dir.join(f));
    let mut figs = Vec::new();
    match kind {
        ExperimentKind::Simulate => {
            let t = read("trajectory.csv")?;
            let mut pts = Vec::new();
            for z in ["T", "H", "D"] {
                for r in &t.rows {
                    pts.push(pt(&format!("rho_{z}"), t.f(r, "round")?, t.f(r, &format!("rho_{z}_hat"))?, None));
                }
            }
            figs.push(("trajectory".into(), pts));
        }
        ExperimentKind::Meanfield => {
            let t = read("meanfield.csv")?;
            let mut rho = Vec::new();
            let mut v = Vec::new();
            for r in t.rows.iter().filter(|r| r.get(1) == Some("0")) {
                let x = t.f(r, "t")?;
                rho.push(pt("rho_T", x, t.f(r, "rho_T_agg")?, None));
                v.push(pt("V", x, t.f(r, "V")?, None));
            }
            rho.extend(v);
            figs.push(("meanfield".into(), rho));
        }
        ExperimentKind::Reduce => {
            let mut pts = Vec::new();
            for src in ["reduced", "coupled"] {
                let t = read(&format!("{src}.csv"))?;
                // t -> (Σ q_l ρ_T^l, Σ l q_l)
                let mut by_t: Vec<(f64, f64, f64)> = Vec::new();
                for r in &t.rows {
                    let (time, l, ql, rt) = (t.f(r, "t")?, t.f(r, "l")?, t.f(r, "q_l")?, t.f(r, "rho_T")?);
                    match by_t.last_mut() {
                        Some(last) if last.0 == time => {
                            last.1 += ql * rt;
                            last.2 += l * ql;
                        }
                        _ => by_t.push((time, ql * rt, l * ql)),
                    }
                }
                pts.extend(by_t.iter().map(|&(x, y, _)| pt(&format!("rho_T_{src}"), x, y, None)));
                pts.extend(by_t.iter().map(|&(x, _, y)| pt(&format!("mean_degree_{src}"), x, y, None)));
            }
            figs.push(("reduce".into(), pts));
        }
        ExperimentKind::EpsilonScan => {
            let t = read("epsilon_scan.csv")?;
            let mut pts = Vec::new();
            for name in ["e_q", "e_rho"] {
                for r in t.rows.iter().filter(|r| r.get(0) != Some("fit")) {
                    pts.push(pt(name, t.f(r, "epsilon")?, t.f(r, name)?, None));
                }
            }
            figs.push(("epsilon_scan".into(), pts));
        }
        ExperimentKind::ReconfigBench => {
            let t = read("reconfig_bench.csv")?;
            let mut pts = Vec::new();
            for r in &t.rows {
                let band = (t.f(r, "rho_T_p10")?, t.f(r, "rho_T_p90")?);
                pts.push(pt(t.s(r, "arm")?, t.f(r, "round")?, t.f(r, "rho_T_median")?, Some(band)));
            }
            figs.push(("reconfig".into(), pts));
        }
        ExperimentKind::Prop1 => {
            let t = read("prop1.csv")?;
            let mut pts = Vec::new();
            for r in &t.rows {
                let band = (t.f(r, "wilson_lo")?, t.f(r, "wilson_hi")?);
                pts.push(pt("frequency", 0.0, t.f(r, "frequency")?, Some(band)));
                pts.push(pt("bound", 0.0, t.f(r, "bound")?, None));
            }
            figs.push(("prop1".into(), pts));
        }
        ExperimentKind::Sweep => {
            let means = read("sweep.csv")?;
            let trials = read("sweep_trials.csv")?;
            let mut cells: BTreeMap<String, [Vec<f64>; 3]> = BTreeMap::new();
            for r in &trials.rows {
                let c = cells.entry(trials.s(r, "u")?.to_string()).or_default();
                c[0].push(trials.f(r, "rho_T")?);
                c[1].push(trials.f(r, "rho_H")?);
                c[2].push(trials.f(r, "token_cost")?);
            }
            let mut pts = Vec::new();
            for (k, (series, col)) in [("rho_T", "rho_T_mean"), ("rho_H", "rho_H_mean"), ("token_cost", "token_cost_mean")]
                .into_iter()
                .enumerate()
            {
                for r in &means.rows {
                    let band = cells.get(means.s(r, "u")?).map(|c| (percentile(&c[k], 0.1), percentile(&c[k], 0.9)));
                    pts.push(pt(series, means.f(r, "u")?, means.f(r, col)?, band));
                }
            }
            figs.push(("sweep".into(), pts));
        }
        ExperimentKind::Optimize => {
            let t = read("optimize_trace.csv")?;
            let mut pts = Vec::new();
            for series in ["train_cost", "eval_cost", "u"] {
                for r in &t.rows {
                    pts.push(pt(series, t.f(r, "step")?, t.f(r, series)?, None));
                }
            }
            figs.push(("optimize".into(), pts));
        }
        ExperimentKind::Concentration => {
            let t = read("concentration.csv")?;
            let mut pts = Vec::new();
            for r in &t.rows {
                let band = (t.f(r, "p10_dev")?, t.f(r, "p90_dev")?);
                pts.push(pt("sup_deviation", t.f(r, "n")?, t.f(r, "median_dev")?, Some(band)));
            }
            figs.push(("concentration".into(), pts));
        }
    }
    Ok(figs)
}
