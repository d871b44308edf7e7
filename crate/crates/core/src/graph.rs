//! Directed influence networks.
//!
//! An edge `i -> j` means agent `i` is influenced by agent `j` (it reads
//! `j`'s previous answer). `out_edges[i]` therefore lists the influence
//! sources of `i`, and the in-degree used throughout the mean-field code is
//! `out_edges[i].len()`, the number of sources an agent listens to.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds::{self, stream};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectedNetwork {
    n: usize,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl DirectedNetwork {
    pub fn empty(n: usize) -> Self {
        DirectedNetwork {
            n,
            out_edges: vec![Vec::new(); n],
            in_edges: vec![Vec::new(); n],
        }
    }

    /// Builds a network from `(i, j)` pairs, rejecting duplicates and self-loops.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut net = Self::empty(n);
        for (i, j) in edges {
            net.add_edge(i, j)?;
        }
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Influence sources of `i` (sorted).
    pub fn sources(&self, i: usize) -> &[usize] {
        &self.out_edges[i]
    }

    /// Agents influenced by `j` (sorted).
    pub fn listeners(&self, j: usize) -> &[usize] {
        &self.in_edges[j]
    }

    /// Number of influence sources of `i`; the degree class of the agent.
    pub fn in_degree(&self, i: usize) -> usize {
        self.out_edges[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.out_edges.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.out_edges[i].binary_search(&j).is_ok()
    }

    /// All edges sorted by `(i, j)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out_edges
            .iter()
            .enumerate()
            .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)))
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        for node in [i, j] {
            if node >= self.n {
                return Err(Error::NodeOutOfRange { node, n: self.n });
            }
        }
        if i == j {
            return Err(Error::SelfLoop(i));
        }
        Ok(())
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        self.check_pair(i, j)?;
        let pos = match self.out_edges[i].binary_search(&j) {
            Ok(_) => return Err(Error::DuplicateEdge(i, j)),
            Err(pos) => pos,
        };
        let rpos = self.in_edges[j].binary_search(&i).unwrap_err();
        self.out_edges[i].insert(pos, j);
        self.in_edges[j].insert(rpos, i);
        Ok(())
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) -> Result<()> {
        self.check_pair(i, j)?;
        let pos = self.out_edges[i]
            .binary_search(&j)
            .map_err(|_| Error::MissingEdge(i, j))?;
        let rpos = self.in_edges[j]
            .binary_search(&i)
            .expect("transpose index out of sync");
        self.out_edges[i].remove(pos);
        self.in_edges[j].remove(rpos);
        Ok(())
    }

    /// Full scan of the structural invariants. Used by tests and debug asserts.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.out_edges.len() != self.n || self.in_edges.len() != self.n {
            return Err("adjacency length differs from n".into());
        }
        let mut forward = 0usize;
        for (i, js) in self.out_edges.iter().enumerate() {
            if !js.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("sources of {i} unsorted or duplicated"));
            }
            for &j in js {
                if j >= self.n {
                    return Err(format!("edge {i}->{j} out of range"));
                }
                if i == j {
                    return Err(format!("self-loop at {i}"));
                }
                if self.in_edges[j].binary_search(&i).is_err() {
                    return Err(format!("edge {i}->{j} missing from transpose"));
                }
                forward += 1;
            }
        }
        let mut backward = 0usize;
        for (j, is) in self.in_edges.iter().enumerate() {
            if !is.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("listeners of {j} unsorted or duplicated"));
            }
            for &i in is {
                if i >= self.n || self.out_edges[i].binary_search(&j).is_err() {
                    return Err(format!("transpose edge {i}->{j} missing forward"));
                }
                backward += 1;
            }
        }
        if forward != backward {
            return Err(format!("edge counts differ: {forward} vs {backward}"));
        }
        Ok(())
    }

    /// Writes the edge-list format: a `# nodes=N` header, then one `i j`
    /// pair per line sorted by `(i, j)`.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = String::with_capacity(16 * (self.edge_count() + 1));
        writeln!(buf, "# nodes={}", self.n).unwrap();
        for (i, j) in self.edges() {
            writeln!(buf, "{i} {j}").unwrap();
        }
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_edge_list<R: BufRead>(r: R) -> Result<Self> {
        let mut net: Option<DirectedNetwork> = None;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                if net.is_none() {
                    let n = rest
                        .trim()
                        .strip_prefix("nodes=")
                        .and_then(|s| s.trim().parse::<usize>().ok())
                        .ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: format!("expected '# nodes=N', got {trimmed:?}"),
                        })?;
                    net = Some(DirectedNetwork::empty(n));
                }
                continue;
            }
            let net = net.as_mut().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "edge before '# nodes=N' header".into(),
            })?;
            let mut parts = trimmed.split_whitespace();
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("expected 'i j', got {trimmed:?}"),
                })
            };
            let i = parse(parts.next())?;
            let j = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("trailing fields in {trimmed:?}"),
                });
            }
            net.add_edge(i, j).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        }
        net.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "missing '# nodes=N' header".into(),
        })
    }
}

/// Each ordered pair `(i, j)`, `i != j`, is an edge independently with probability `p`.
pub fn generate_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<DirectedNetwork> {
    if n == 0 {
        return Err(Error::invalid("erdos-renyi: n must be >= 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("erdos-renyi: p={p} outside [0, 1]")));
    }
    let mut rng = seeds::rng(seed, &[stream::NETWORK]);
    let mut net = DirectedNetwork::empty(n);
    for i in 0..n {
        let sources: Vec<usize> = (0..n).filter(|&j| j != i && rng.gen_bool(p)).collect();
        for &j in &sources {
            net.in_edges[j].push(i);
        }
        net.out_edges[i] = sources;
    }
    Ok(net)
}

/// Power-law in-degree weights `P(l) ∝ l^-exponent` on `1..=max_degree`.
pub fn power_law_weights(exponent: f64, max_degree: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=max_degree).map(|l| (l as f64).powf(-exponent)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Each in-degree is drawn independently from the truncated power law, and
/// the sources of every node are a uniform sample (without duplicates) of
/// the other nodes.
pub fn generate_power_law(
    n: usize,
    exponent: f64,
    max_degree: usize,
    seed: u64,
) -> Result<DirectedNetwork> {
    if exponent <= 1.0 || !exponent.is_finite() {
        return Err(Error::invalid(format!("power-law: exponent={exponent} must be > 1")));
    }
    if max_degree == 0 || max_degree >= n {
        return Err(Error::invalid(format!(
            "power-law: max_degree={max_degree} must be in 1..n (n={n})"
        )));
    }
    let weights = power_law_weights(exponent, max_degree);
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cdf.push(acc);
    }
    let mut rng = seeds::rng(seed, &[stream::NETWORK]);
    let mut net = DirectedNetwork::empty(n);
    for i in 0..n {
        let x: f64 = rng.gen::<f64>() * acc;
        let l = 1 + cdf.partition_point(|&c| c <= x).min(max_degree - 1);
        // sample from the n-1 other nodes by skipping i
        let mut sources: Vec<usize> = index::sample(&mut rng, n - 1, l)
            .into_iter()
            .map(|k| if k >= i { k + 1 } else { k })
            .collect();
        sources.sort_unstable();
        for &j in &sources {
            net.in_edges[j].push(i);
        }
        net.out_edges[i] = sources;
    }
    // listeners were pushed in increasing i order, so they are already sorted
    Ok(net)
}

/// Directed configuration model in which every node has as many listeners
/// as sources. Degrees are drawn from `q`; node `j` contributes `l_j` stubs to
/// a shuffled pool and each node takes its sources from the pool in turn.
/// Self-loops and repeated pairs are repaired by swapping with a random
/// later stub; the few that cannot be repaired are dropped, so realized
/// degrees can fall slightly below the drawn ones.
///
/// A uniformly chosen link then ends at a degree-`l` node with probability
/// proportional to `l·q_l`, the link statistics the mean-field model assumes.
pub fn generate_configuration(n: usize, q: &DegreeDistribution, seed: u64) -> Result<DirectedNetwork> {
    if n < 2 {
        return Err(Error::invalid("configuration model: n must be >= 2"));
    }
    if q.l_max() >= n {
        return Err(Error::invalid(format!(
            "configuration model: max degree {} must be below n={n}",
            q.l_max()
        )));
    }
    let mut rng = seeds::rng(seed, &[stream::NETWORK]);
    let mut cdf = Vec::with_capacity(q.len());
    let mut acc = 0.0;
    for p in q.probs() {
        acc += p;
        cdf.push(acc);
    }
    let degrees: Vec<usize> = (0..n)
        .map(|_| {
            let x: f64 = rng.gen::<f64>() * acc;
            cdf.partition_point(|&c| c <= x).min(q.l_max())
        })
        .collect();
    let mut pool: Vec<usize> = degrees
        .iter()
        .enumerate()
        .flat_map(|(j, &l)| std::iter::repeat(j).take(l))
        .collect();
    pool.shuffle(&mut rng);
    let mut net = DirectedNetwork::empty(n);
    let mut next = 0;
    for i in 0..n {
        let mut sources = Vec::with_capacity(degrees[i]);
        for _ in 0..degrees[i] {
            if next >= pool.len() {
                break;
            }
            let mut ok = false;
            for _ in 0..32 {
                let j = pool[next];
                if j != i && !sources.contains(&j) {
                    ok = true;
                    break;
                }
                if next + 1 >= pool.len() {
                    break;
                }
                let swap = rng.gen_range(next + 1..pool.len());
                pool.swap(next, swap);
            }
            if ok {
                sources.push(pool[next]);
            }
            next += 1;
        }
        sources.sort_unstable();
        for &j in &sources {
            net.in_edges[j].push(i);
        }
        net.out_edges[i] = sources;
    }
    Ok(net)
}

/// Probability vector over in-degrees `0..=L_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeDistribution {
    probs: Vec<f64>,
}

impl DegreeDistribution {
    /// Validates non-negativity and unit mass (within 1e-9), then rescales so
    /// the stored entries sum to one within 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("degree distribution must be non-empty"));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("degree distribution has negative or non-finite entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("degree distribution sums to {total}, not 1")));
        }
        Ok(DegreeDistribution {
            probs: probs.into_iter().map(|p| p / total).collect(),
        })
    }

    /// Point mass at degree `l`.
    pub fn point(l: usize) -> Self {
        let mut probs = vec![0.0; l + 1];
        probs[l] = 1.0;
        DegreeDistribution { probs }
    }

    /// Truncated power law on `1..=max_degree` (zero mass at `l = 0`).
    pub fn power_law(exponent: f64, max_degree: usize) -> Result<Self> {
        if exponent <= 0.0 || max_degree == 0 {
            return Err(Error::invalid("power-law q: need exponent > 0 and max_degree >= 1"));
        }
        let mut probs = vec![0.0];
        probs.extend(power_law_weights(exponent, max_degree));
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn l_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(l, p)| l as f64 * p).sum()
    }
}

pub fn in_degree_distribution(net: &DirectedNetwork) -> DegreeDistribution {
    let l_max = (0..net.n()).map(|i| net.in_degree(i)).max().unwrap_or(0);
    let mut counts = vec![0usize; l_max + 1];
    for i in 0..net.n() {
        counts[net.in_degree(i)] += 1;
    }
    let n = net.n().max(1) as f64;
    DegreeDistribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    }
}
