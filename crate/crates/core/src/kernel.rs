//! Transition kernels `κ_{z1,z2}(u, l, i, j)`: the per-round law of an agent
//! with `l` influence sources, `i` of them truthful and `j` hallucinating,
//! under control `u`.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 3x3 matrix indexed by `[from][to]` in `LatentState` order.
pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LatentState {
    Truthful,
    Hallucinating,
    DoesNotKnow,
}

impl LatentState {
    pub const ALL: [LatentState; 3] = [
        LatentState::Truthful,
        LatentState::Hallucinating,
        LatentState::DoesNotKnow,
    ];

    /// Position in every 3-vector and `Mat3` of the crate.
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn from_index(idx: usize) -> Self {
        Self::ALL[idx]
    }

    /// Serialization code: T = 1, H = 0, D = -1.
    pub fn code(self) -> i8 {
        match self {
            LatentState::Truthful => 1,
            LatentState::Hallucinating => 0,
            LatentState::DoesNotKnow => -1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(LatentState::Truthful),
            0 => Some(LatentState::Hallucinating),
            -1 => Some(LatentState::DoesNotKnow),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        ['T', 'H', 'D'][self.index()]
    }
}

impl fmt::Display for LatentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// A control value in the relaxed continuous domain `[u_min, u_max]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ControlValue(f64);

impl ControlValue {
    pub fn new(u: f64, bounds: (f64, f64)) -> Result<Self> {
        if !(bounds.0 <= u && u <= bounds.1) {
            return Err(Error::invalid(format!(
                "control {u} outside [{}, {}]",
                bounds.0, bounds.1
            )));
        }
        Ok(ControlValue(u))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The integer token limit actually deployed.
    pub fn token_limit(self) -> i64 {
        self.0.round() as i64
    }
}

pub trait TransitionKernel: Send + Sync {
    /// Evaluates the 3x3 law. Callers guarantee `i + j <= l` and `l` within
    /// [`support`](Self::support).
    fn eval(&self, u: f64, l: usize, i: usize, j: usize) -> Mat3;

    /// Largest degree the kernel is defined for; `None` means unbounded.
    fn support(&self) -> Option<usize> {
        None
    }
}

impl<K: TransitionKernel + ?Sized> TransitionKernel for &K {
    fn eval(&self, u: f64, l: usize, i: usize, j: usize) -> Mat3 {
        (**self).eval(u, l, i, j)
    }
    fn support(&self) -> Option<usize> {
        (**self).support()
    }
}

impl<K: TransitionKernel + ?Sized> TransitionKernel for std::sync::Arc<K> {
    fn eval(&self, u: f64, l: usize, i: usize, j: usize) -> Mat3 {
        (**self).eval(u, l, i, j)
    }
    fn support(&self) -> Option<usize> {
        (**self).support()
    }
}

pub fn kappa_eval(kernel: &dyn TransitionKernel, u: f64, l: usize, i: usize, j: usize) -> Result<Mat3> {
    if i + j > l {
        return Err(Error::invalid(format!("kappa: i + j = {} exceeds l = {l}", i + j)));
    }
    if let Some(max) = kernel.support() {
        if l > max {
            return Err(Error::invalid(format!("kappa: degree {l} beyond kernel support {max}")));
        }
    }
    Ok(kernel.eval(u, l, i, j))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameters of the built-in logistic family.
///
/// With `f_T = i / max(l, 1)` and `f_H = j / max(l, 1)` an agent in state `z`
/// computes the evidence score
/// `s = β(u)·(f_T − f_H) + bias_z − penalty(u)` where
/// `β(u) = beta0·u / (u_half + u)` and
/// `penalty(u) = penalty_amp·σ((u − u_peak) / width) +
/// short_amp·σ((short_mid − u) / short_width)`. The second term models
/// answers cut off by a tight budget; it is off by default.
/// It targets `T` with probability `σ(s)`, and the remaining mass goes to `H`
/// with share `w_H(u) = mix_h + mix_bump·exp(−((u − u_peak)/width)²)` and to
/// `D` otherwise. Each round only a fraction `rate` of agents resample, so
/// the row for state `z` is `(1 − rate)·e_z + rate·target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    pub beta0: f64,
    pub u_half: f64,
    pub bias_t: f64,
    pub bias_h: f64,
    pub bias_d: f64,
    pub rate: f64,
    pub mix_h: f64,
    pub mix_bump: f64,
    pub penalty_amp: f64,
    pub u_peak: f64,
    pub width: f64,
    pub short_amp: f64,
    pub short_mid: f64,
    pub short_width: f64,
    /// Forces `κ_TH = κ_TD = 0` when every source is truthful.
    pub absorbing_when_unanimous: bool,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            beta0: 6.0,
            u_half: 8.0,
            bias_t: 3.0,
            bias_h: -1.0,
            bias_d: 0.0,
            rate: 0.05,
            mix_h: 0.35,
            mix_bump: 0.45,
            penalty_amp: 2.0,
            u_peak: 35.0,
            width: 6.0,
            short_amp: 0.0,
            short_mid: 10.0,
            short_width: 4.0,
            absorbing_when_unanimous: false,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.beta0,
            self.u_half,
            self.bias_t,
            self.bias_h,
            self.bias_d,
            self.rate,
            self.mix_h,
            self.mix_bump,
            self.penalty_amp,
            self.u_peak,
            self.width,
            self.short_amp,
            self.short_mid,
            self.short_width,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("kernel: parameters must be finite".into()));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("kernel: rate={} must be in (0, 1]", self.rate)));
        }
        if !(0.0..=1.0).contains(&self.mix_h) {
            return Err(Error::Config(format!("kernel: mix_h={} must be in [0, 1]", self.mix_h)));
        }
        if self.u_half < 0.0 || self.width <= 0.0 || self.short_width <= 0.0 {
            return Err(Error::Config("kernel: need u_half >= 0, width > 0 and short_width > 0".into()));
        }
        Ok(())
    }
}

/// The built-in parametric kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticKernel {
    params: KernelParams,
}

impl LogisticKernel {
    pub fn new(params: KernelParams) -> Result<Self> {
        params.validate()?;
        Ok(LogisticKernel { params })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn beta(&self, u: f64) -> f64 {
        let p = &self.params;
        if u <= 0.0 {
            0.0
        } else {
            p.beta0 * u / (p.u_half + u)
        }
    }

    pub fn penalty(&self, u: f64) -> f64 {
        let p = &self.params;
        p.penalty_amp * sigmoid((u - p.u_peak) / p.width) + p.short_amp * sigmoid((p.short_mid - u) / p.short_width)
    }

    pub fn hallucination_share(&self, u: f64) -> f64 {
        let p = &self.params;
        let z = (u - p.u_peak) / p.width;
        (p.mix_h + p.mix_bump * (-z * z).exp()).clamp(0.0, 1.0)
    }
}

impl Default for LogisticKernel {
    fn default() -> Self {
        LogisticKernel {
            params: KernelParams::default(),
        }
    }
}

impl TransitionKernel for LogisticKernel {
    fn eval(&self, u: f64, l: usize, i: usize, j: usize) -> Mat3 {
        let p = &self.params;
        let denom = l.max(1) as f64;
        let drive = self.beta(u) * (i as f64 - j as f64) / denom - self.penalty(u);
        let w_h = self.hallucination_share(u);
        let mut k = [[0.0; 3]; 3];
        for (z, bias) in [p.bias_t, p.bias_h, p.bias_d].into_iter().enumerate() {
            let to_t = sigmoid(drive + bias);
            let target = [to_t, (1.0 - to_t) * w_h, (1.0 - to_t) * (1.0 - w_h)];
            for (z2, t) in target.into_iter().enumerate() {
                k[z][z2] = p.rate * t;
            }
            k[z][z] += 1.0 - p.rate;
        }
        if p.absorbing_when_unanimous && i == l && j == 0 {
            k[0] = [1.0, 0.0, 0.0];
        }
        k
    }
}

#[inline]
pub(crate) fn triangle_len(l: usize) -> usize {
    (l + 1) * (l + 2) / 2
}

#[inline]
pub(crate) fn triangle_index(l: usize, i: usize, j: usize) -> usize {
    i * (l + 1) - i * i.saturating_sub(1) / 2 + j
}

/// Explicit kernel laws keyed by `(l, i, j)` for one control grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSlice {
    l_max: usize,
    // per degree, triangular storage over (i, j)
    laws: Vec<Vec<Mat3>>,
}

impl KernelSlice {
    /// Samples any kernel at a fixed control.
    pub fn from_kernel(kernel: &dyn TransitionKernel, u: f64, l_max: usize) -> Result<Self> {
        if let Some(max) = kernel.support() {
            if l_max > max {
                return Err(Error::invalid(format!(
                    "kernel table: degree {l_max} beyond kernel support {max}"
                )));
            }
        }
        let laws = (0..=l_max)
            .map(|l| {
                let mut v = vec![[[0.0; 3]; 3]; triangle_len(l)];
                for i in 0..=l {
                    for j in 0..=(l - i) {
                        v[triangle_index(l, i, j)] = kernel.eval(u, l, i, j);
                    }
                }
                v
            })
            .collect();
        Ok(KernelSlice { l_max, laws })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    #[inline]
    pub fn get(&self, l: usize, i: usize, j: usize) -> &Mat3 {
        &self.laws[l][triangle_index(l, i, j)]
    }

    /// All laws of degree `l` in `(i, j)` triangular order.
    #[inline]
    pub fn degree(&self, l: usize) -> &[Mat3] {
        &self.laws[l]
    }

    /// CSV with header `l,i,j,z1,z2,prob`; states use the T=1/H=0/D=-1 codes.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["l", "i", "j", "z1", "z2", "prob"])?;
        for l in 0..=self.l_max {
            for i in 0..=l {
                for j in 0..=(l - i) {
                    let k = self.get(l, i, j);
                    for z1 in LatentState::ALL {
                        for z2 in LatentState::ALL {
                            wtr.write_record([
                                l.to_string(),
                                i.to_string(),
                                j.to_string(),
                                z1.code().to_string(),
                                z2.code().to_string(),
                                format!("{:?}", k[z1.index()][z2.index()]),
                            ])?;
                        }
                    }
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV produced by [`write_csv`](Self::write_csv). Every
    /// `(l, i, j, z1, z2)` up to the largest listed degree must be present
    /// exactly once, and each row must sum to one within 1e-9.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["l", "i", "j", "z1", "z2", "prob"];
        if headers.iter().map(str::trim).ne(expected.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {}", expected.join(",")),
            });
        }
        let mut rows: Vec<(usize, usize, usize, usize, usize, f64)> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let bad = |msg: String| Error::Parse { line, msg };
            let field = |idx: usize| rec.get(idx).map(str::trim).unwrap_or("");
            let uint = |idx: usize| -> Result<usize> {
                field(idx)
                    .parse()
                    .map_err(|_| bad(format!("column {} not a non-negative integer", expected[idx])))
            };
            let state = |idx: usize| -> Result<usize> {
                field(idx)
                    .parse::<i64>()
                    .ok()
                    .and_then(LatentState::from_code)
                    .map(LatentState::index)
                    .ok_or_else(|| bad(format!("column {} must be 1, 0 or -1", expected[idx])))
            };
            let prob: f64 = field(5)
                .parse()
                .map_err(|_| bad("column prob not a number".into()))?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(bad(format!("probability {prob} outside [0, 1]")));
            }
            let (l, i, j) = (uint(0)?, uint(1)?, uint(2)?);
            if i + j > l {
                return Err(bad(format!("i + j exceeds l ({i} + {j} > {l})")));
            }
            rows.push((l, i, j, state(3)?, state(4)?, prob));
        }
        let l_max = rows
            .iter()
            .map(|r| r.0)
            .max()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty kernel table".into() })?;
        let mut laws: Vec<Vec<[[Option<f64>; 3]; 3]>> =
            (0..=l_max).map(|l| vec![[[None; 3]; 3]; triangle_len(l)]).collect();
        for (l, i, j, z1, z2, p) in rows {
            let slot = &mut laws[l][triangle_index(l, i, j)][z1][z2];
            if slot.replace(p).is_some() {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("duplicate entry l={l} i={i} j={j} z1={z1} z2={z2}"),
                });
            }
        }
        let mut out = Vec::with_capacity(l_max + 1);
        for (l, per_l) in laws.into_iter().enumerate() {
            let mut v = Vec::with_capacity(per_l.len());
            for i in 0..=l {
                for j in 0..=(l - i) {
                    let cell = per_l[triangle_index(l, i, j)];
                    let mut k = [[0.0; 3]; 3];
                    for z1 in 0..3 {
                        for z2 in 0..3 {
                            k[z1][z2] = cell[z1][z2].ok_or_else(|| Error::Parse {
                                line: 0,
                                msg: format!("missing entry l={l} i={i} j={j} z1={z1} z2={z2}"),
                            })?;
                        }
                        let s: f64 = k[z1].iter().sum();
                        if (s - 1.0).abs() > 1e-9 {
                            return Err(Error::Parse {
                                line: 0,
                                msg: format!("row l={l} i={i} j={j} z1={z1} sums to {s}"),
                            });
                        }
                        k[z1].iter_mut().for_each(|x| *x /= s);
                    }
                    v.push(k);
                }
            }
            out.push(v);
        }
        Ok(KernelSlice { l_max, laws: out })
    }
}

/// Kernel given as explicit tables on a control grid; evaluation uses the
/// nearest grid point (ties go to the smaller control).
#[derive(Clone, Debug, PartialEq)]
pub struct TableKernel {
    grid: Vec<(f64, KernelSlice)>,
}

impl TableKernel {
    pub fn new(mut grid: Vec<(f64, KernelSlice)>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::invalid("table kernel needs at least one grid point"));
        }
        if grid.iter().any(|(u, _)| !u.is_finite()) {
            return Err(Error::invalid("table kernel grid points must be finite"));
        }
        grid.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(TableKernel { grid })
    }

    pub fn single(slice: KernelSlice) -> Self {
        TableKernel {
            grid: vec![(0.0, slice)],
        }
    }

    fn slice_for(&self, u: f64) -> &KernelSlice {
        let mut best = &self.grid[0];
        for g in &self.grid[1..] {
            if (g.0 - u).abs() < (best.0 - u).abs() {
                best = g;
            }
        }
        &best.1
    }
}

impl TransitionKernel for TableKernel {
    fn eval(&self, u: f64, l: usize, i: usize, j: usize) -> Mat3 {
        *self.slice_for(u).get(l, i, j)
    }

    fn support(&self) -> Option<usize> {
        self.grid.iter().map(|g| g.1.l_max()).min()
    }
}

/// Outcome of an assumption check with the offending entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionReport {
    pub holds: bool,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub l: usize,
    pub i: usize,
    pub j: usize,
    /// The two checked entries (`κ_TH, κ_TD` for A1, `κ_HT, κ_DT` for A2).
    pub values: [f64; 2],
}

pub const A1_TOLERANCE: f64 = 1e-12;
pub const STRICTNESS_FLOOR: f64 = 1e-9;

/// A truthful agent with only truthful sources stays truthful:
/// `κ_TH(u, l, l, 0) = κ_TD(u, l, l, 0) = 0` for all `1 <= l <= l_max`.
pub fn check_a1(kernel: &dyn TransitionKernel, u: f64, l_max: usize) -> AssumptionReport {
    let mut violations = Vec::new();
    for l in 1..=l_max {
        let k = kernel.eval(u, l, l, 0);
        let (th, td) = (k[0][1], k[0][2]);
        if th > A1_TOLERANCE || td > A1_TOLERANCE {
            violations.push(Violation {
                l,
                i: l,
                j: 0,
                values: [th, td],
            });
        }
    }
    AssumptionReport {
        holds: violations.is_empty(),
        violations,
    }
}

/// Recovery is possible with enough truthful sources:
/// `κ_HT, κ_DT >= floor` for every `(l, i, j)` with `i >= l - delta_l`.
pub fn check_a2(
    kernel: &dyn TransitionKernel,
    u: f64,
    l_max: usize,
    delta_l: usize,
    floor: f64,
) -> AssumptionReport {
    let mut violations = Vec::new();
    for l in 0..=l_max {
        for i in l.saturating_sub(delta_l)..=l {
            for j in 0..=(l - i) {
                let k = kernel.eval(u, l, i, j);
                let (ht, dt) = (k[1][0], k[2][0]);
                if ht < floor || dt < floor {
                    violations.push(Violation {
                        l,
                        i,
                        j,
                        values: [ht, dt],
                    });
                }
            }
        }
    }
    AssumptionReport {
        holds: violations.is_empty(),
        violations,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlAssumptions {
    pub u: f64,
    pub a1: bool,
    pub a2: bool,
}

/// Evaluates A1 and A2 on every control of a grid.
pub fn sweep_assumptions(
    kernel: &dyn TransitionKernel,
    u_grid: &[f64],
    l_max: usize,
    delta_l: usize,
) -> Vec<ControlAssumptions> {
    u_grid
        .iter()
        .map(|&u| ControlAssumptions {
            u,
            a1: check_a1(kernel, u, l_max).holds,
            a2: check_a2(kernel, u, l_max, delta_l, STRICTNESS_FLOOR).holds,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn absorbing() -> LogisticKernel {
        LogisticKernel::new(KernelParams {
            absorbing_when_unanimous: true,
            ..KernelParams::default()
        })
        .unwrap()
    }

    /// Kernel with fixed leak out of the unanimous truthful configuration.
    struct Leaky(f64);
    impl TransitionKernel for Leaky {
        fn eval(&self, _u: f64, l: usize, i: usize, j: usize) -> Mat3 {
            let mut k = [[0.8, 0.1, 0.1], [0.3, 0.6, 0.1], [0.3, 0.1, 0.6]];
            if i == l && j == 0 {
                k[0] = [1.0 - self.0, self.0, 0.0];
            }
            k
        }
    }

    /// No recovery at all.
    struct Stuck;
    impl TransitionKernel for Stuck {
        fn eval(&self, _u: f64, _l: usize, _i: usize, _j: usize) -> Mat3 {
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        }
    }

    #[test]
    fn unanimous_row_is_absorbing() {
        let k = absorbing();
        for l in 0..10 {
            assert_eq!(kappa_eval(&k, 20.0, l, l, 0).unwrap()[0], [1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn rejects_excess_neighbors() {
        let k = LogisticKernel::default();
        assert!(kappa_eval(&k, 20.0, 3, 2, 2).is_err());
        assert!(kappa_eval(&k, 20.0, 3, 2, 1).is_ok());
    }

    #[test]
    fn closed_form_value() {
        // Hand evaluation at (u=20, l=4, i=2, j=1) with explicit parameters.
        let params = KernelParams {
            beta0: 6.0,
            u_half: 8.0,
            bias_t: 3.0,
            bias_h: -1.0,
            bias_d: 0.0,
            rate: 0.05,
            mix_h: 0.35,
            mix_bump: 0.45,
            penalty_amp: 2.0,
            u_peak: 35.0,
            width: 6.0,
            short_amp: 0.0,
            short_mid: 10.0,
            short_width: 4.0,
            absorbing_when_unanimous: false,
        };
        let k = LogisticKernel::new(params).unwrap();
        let got = kappa_eval(&k, 20.0, 4, 2, 1).unwrap();

        let beta = 6.0 * 20.0 / 28.0;
        let pen = 2.0 / (1.0 + (15.0f64 / 6.0).exp());
        let w_h = 0.35 + 0.45 * (-(15.0f64 / 6.0).powi(2)).exp();
        let drive = beta * 0.25 - pen;
        for (z, b) in [3.0, -1.0, 0.0].into_iter().enumerate() {
            let s = 1.0 / (1.0 + (-(drive + b)).exp());
            let mut row = [0.05 * s, 0.05 * (1.0 - s) * w_h, 0.05 * (1.0 - s) * (1.0 - w_h)];
            row[z] += 0.95;
            for z2 in 0..3 {
                assert!((got[z][z2] - row[z2]).abs() < 1e-15, "z={z} z2={z2}");
            }
        }
        // spot value evaluated separately in double precision
        assert!((got[1][0] - 0.023_996_941_404_871_44).abs() < 1e-14, "{}", got[1][0]);
    }

    #[test]
    fn a1_detects_leak() {
        assert!(check_a1(&absorbing(), 20.0, 8).holds);
        let report = check_a1(&Leaky(0.02), 20.0, 5);
        assert!(!report.holds);
        assert_eq!(report.violations.iter().map(|v| v.l).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        assert!(report.violations.iter().all(|v| v.values[0] == 0.02));
        assert!(check_a1(&Leaky(0.02), 20.0, 0).holds);
        assert!(!check_a1(&LogisticKernel::default(), 20.0, 3).holds);
    }

    #[test]
    fn a2_checks() {
        assert!(check_a2(&LogisticKernel::default(), 20.0, 8, 2, STRICTNESS_FLOOR).holds);
        let r = check_a2(&Stuck, 20.0, 3, 1, STRICTNESS_FLOOR);
        assert!(!r.holds);
        // qualifying tuples: per l, i in [l-1, l], j <= l - i
        let expected: usize = (0..=3usize)
            .map(|l| (l.saturating_sub(1)..=l).map(|i| l - i + 1).sum::<usize>())
            .sum();
        assert_eq!(r.violations.len(), expected);
    }

    fn brute_a1(k: &dyn TransitionKernel, u: f64, l_max: usize) -> bool {
        let mut ok = true;
        for l in 1..=l_max {
            for i in 0..=l {
                for j in 0..=(l - i) {
                    if i == l && j == 0 {
                        let m = k.eval(u, l, i, j);
                        ok &= m[0][1] <= 1e-12 && m[0][2] <= 1e-12;
                    }
                }
            }
        }
        ok
    }

    fn brute_a2(k: &dyn TransitionKernel, u: f64, l_max: usize, dl: usize) -> bool {
        let mut ok = true;
        for l in 0..=l_max {
            for i in 0..=l {
                for j in 0..=(l - i) {
                    if i + dl >= l {
                        let m = k.eval(u, l, i, j);
                        ok &= m[1][0] >= 1e-9 && m[2][0] >= 1e-9;
                    }
                }
            }
        }
        ok
    }

    #[test]
    fn checkers_agree_with_brute_force() {
        let kernels: Vec<Box<dyn TransitionKernel>> = vec![
            Box::new(absorbing()),
            Box::new(LogisticKernel::default()),
            Box::new(Leaky(0.02)),
            Box::new(Leaky(0.0)),
            Box::new(Stuck),
        ];
        for k in &kernels {
            for dl in 0..3 {
                assert_eq!(check_a1(k.as_ref(), 15.0, 8).holds, brute_a1(k.as_ref(), 15.0, 8));
                assert_eq!(
                    check_a2(k.as_ref(), 15.0, 8, dl, STRICTNESS_FLOOR).holds,
                    brute_a2(k.as_ref(), 15.0, 8, dl)
                );
            }
        }
    }

    #[test]
    fn sweep_reports_each_control() {
        let s = sweep_assumptions(&absorbing(), &[5.0, 20.0, 45.0], 6, 1);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|c| c.a1 && c.a2));
        let s = sweep_assumptions(&LogisticKernel::default(), &[5.0, 20.0], 6, 1);
        assert!(s.iter().all(|c| !c.a1 && c.a2));
    }

    #[test]
    fn table_csv_roundtrip_and_lookup() {
        let k = LogisticKernel::default();
        let slice = KernelSlice::from_kernel(&k, 20.0, 4).unwrap();
        let mut buf = Vec::new();
        slice.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("l,i,j,z1,z2,prob\n0,0,0,1,1,"));
        let back = KernelSlice::read_csv(&buf[..]).unwrap();
        for l in 0..=4 {
            for i in 0..=l {
                for j in 0..=(l - i) {
                    let (a, b) = (back.get(l, i, j), k.eval(20.0, l, i, j));
                    for z1 in 0..3 {
                        for z2 in 0..3 {
                            assert!((a[z1][z2] - b[z1][z2]).abs() < 1e-15);
                        }
                    }
                }
            }
        }
        let s5 = KernelSlice::from_kernel(&k, 5.0, 4).unwrap();
        let table = TableKernel::new(vec![(20.0, back), (5.0, s5)]).unwrap();
        assert_eq!(table.support(), Some(4));
        assert_eq!(table.eval(7.0, 2, 1, 0), k.eval(5.0, 2, 1, 0));
        let (a, b) = (table.eval(19.0, 2, 1, 0), k.eval(20.0, 2, 1, 0));
        assert!((0..9).all(|m| (a[m / 3][m % 3] - b[m / 3][m % 3]).abs() < 1e-15));
        assert!(kappa_eval(&table, 20.0, 5, 0, 0).is_err());
    }

    #[test]
    fn table_csv_rejects_incomplete() {
        let text = "l,i,j,z1,z2,prob\n0,0,0,1,1,1.0\n";
        assert!(matches!(KernelSlice::read_csv(text.as_bytes()), Err(Error::Parse { .. })));
        let text = "l,i,j,z1,z2,prob\n0,0,0,7,1,1.0\n";
        assert!(matches!(KernelSlice::read_csv(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn triangle_indexing_is_dense() {
        for l in 0..12 {
            let mut seen = vec![false; triangle_len(l)];
            for i in 0..=l {
                for j in 0..=(l - i) {
                    let idx = triangle_index(l, i, j);
                    assert!(!seen[idx]);
                    seen[idx] = true;
                }
            }
            assert!(seen.into_iter().all(|s| s));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn rows_are_stochastic(u in 0.0f64..80.0, l in 0usize..40, a in 0.0f64..1.0, b in 0.0f64..1.0, flag in any::<bool>()) {
            let i = (a * (l + 1) as f64).floor().min(l as f64) as usize;
            let j = (b * (l - i + 1) as f64).floor().min((l - i) as f64) as usize;
            let k = LogisticKernel::new(KernelParams { absorbing_when_unanimous: flag, ..KernelParams::default() }).unwrap();
            let m = kappa_eval(&k, u, l, i, j).unwrap();
            for row in m {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn truthful_inflow_monotone_in_i(u in 1.0f64..80.0, l in 1usize..20, j0 in 0usize..20) {
            let k = LogisticKernel::default();
            let j = j0.min(l);
            for i in 0..(l - j) {
                let lo = k.eval(u, l, i, j);
                let hi = k.eval(u, l, i + 1, j);
                for z in 0..3 {
                    prop_assert!(hi[z][0] >= lo[z][0]);
                }
            }
        }
    }
}
