//! Synthetic benchmark generator with a known directed dependency graph.
//!
//! Every node carries a private base signal: a sinusoid plus a slow AR(1)
//! Gaussian drift. A random directed graph wires lagged influences: the
//! series of node `d` is its base plus the weighted, lag-shifted base
//! signals of its parents, plus white Gaussian observation noise.
//!
//! The drift makes the edges informationally necessary: a pure sinusoid is
//! perfectly extrapolatable from any lagged copy of itself, so a forecaster
//! could ignore the graph entirely. With drifting bases, predicting a child
//! requires the parent's recent innovations, which are observable only at
//! the parent node — and only in the true direction. The topology
//! concentrates out-degree on a few broadcaster nodes while capping
//! in-degree at two, so a learner that selects at most k incoming neighbors
//! per node (with k below the broadcasters' out-degree but at least the
//! in-degree cap) can represent the true orientation of the edge set but
//! not its reversal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::RawSeries;
use crate::error::{Error, Result};

/// Out-degree cap for ordinary nodes; broadcaster hubs may exceed it.
pub const MAX_OUT_DEGREE: usize = 2;

/// Out-degree cap for broadcaster hubs.
pub const HUB_OUT_DEGREE: usize = 5;

/// In-degree cap for every node.
pub const MAX_IN_DEGREE: usize = 2;

/// AR(1) coefficient of the per-node base drift.
pub const DRIFT_RHO: f64 = 0.97;
/// Innovation standard deviation of the base drift.
pub const DRIFT_STD: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub nodes: usize,
    pub edges: usize,
    /// Influence delay in steps.
    pub lag: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Number of generated time steps.
    pub len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthEdge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// One node's base sinusoid: `amp · sin(2π (t + phase) / period)`.
#[derive(Debug, Clone, Copy)]
pub struct BaseSignal {
    pub amp: f64,
    pub period: f64,
    pub phase: f64,
}

impl BaseSignal {
    #[inline]
    pub fn at(&self, t: i64) -> f64 {
        self.amp * (2.0 * std::f64::consts::PI * (t as f64 + self.phase) / self.period).sin()
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub series: RawSeries,
    pub edges: Vec<SynthEdge>,
    pub bases: Vec<BaseSignal>,
    /// Per-node AR(1) drift, indexed `[node][t + lag]` for `t >= -lag`.
    pub drifts: Vec<Vec<f64>>,
    pub lag: usize,
}

impl SynthData {
    /// The full base signal of one node: sinusoid plus drift.
    pub fn base_value(&self, node: usize, t: i64) -> f64 {
        self.bases[node].at(t) + self.drifts[node][(t + self.lag as i64) as usize]
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    let n = cfg.nodes;
    if n < 2 {
        return Err(Error::Config("synthetic graphs need at least 2 nodes".into()));
    }
    if cfg.edges > n * (n - 1) {
        return Err(Error::Config(format!(
            "requested {} edges exceed the {} ordered pairs of {} nodes",
            cfg.edges,
            n * (n - 1),
            n
        )));
    }
    if cfg.len < cfg.lag + 2 {
        return Err(Error::Config(format!(
            "series length {} too short for lag {}",
            cfg.len, cfg.lag
        )));
    }
    if cfg.noise < 0.0 {
        return Err(Error::Config("noise level must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let bases: Vec<BaseSignal> = (0..n)
        .map(|_| BaseSignal {
            amp: rng.random_range(1.4..2.0),
            period: rng.random_range(12.0..24.0),
            phase: rng.random_range(0.0..40.0),
        })
        .collect();

    // Broadcaster topology: a few hub nodes emit most edges (out-degree up
    // to HUB_OUT_DEGREE), ordinary nodes send at most MAX_OUT_DEGREE, every
    // node receives at most MAX_IN_DEGREE, and no reciprocal pairs exist
    // (the uni-directional model class cannot represent a 2-cycle). Caps
    // relax in stages only when the requested edge count cannot otherwise
    // be placed.
    let hub_count = (n / 5).max(1);
    let mut hubs: Vec<usize> = Vec::new();
    while hubs.len() < hub_count {
        let c = rng.random_range(0..n);
        if !hubs.contains(&c) {
            hubs.push(c);
        }
    }
    let mut out_degree = vec![0usize; n];
    let mut in_degree = vec![0usize; n];
    let mut present = vec![false; n * n];
    let mut edges: Vec<SynthEdge> = Vec::new();
    let mut attempts = 0usize;
    let is_hub = |v: usize, hubs: &[usize]| hubs.contains(&v);
    let place = |src: usize,
                     dst: usize,
                     relax_degrees: bool,
                     relax_cycles: bool,
                     out_degree: &mut Vec<usize>,
                     in_degree: &mut Vec<usize>,
                     present: &mut Vec<bool>,
                     edges: &mut Vec<SynthEdge>,
                     hubs: &[usize],
                     rng: &mut ChaCha8Rng|
     -> bool {
        if src == dst || present[src * n + dst] {
            return false;
        }
        if !relax_cycles && present[dst * n + src] {
            return false;
        }
        let out_cap = if is_hub(src, hubs) { HUB_OUT_DEGREE } else { MAX_OUT_DEGREE };
        if !relax_degrees && (out_degree[src] >= out_cap || in_degree[dst] >= MAX_IN_DEGREE) {
            return false;
        }
        present[src * n + dst] = true;
        out_degree[src] += 1;
        in_degree[dst] += 1;
        edges.push(SynthEdge { src, dst, weight: rng.random_range(0.6..0.9) });
        true
    };
    // First give every node one parent while the edge budget allows: a node
    // with no parents is trivially self-predictable, and spurious learned
    // edges pointing at it would cost the forecaster nothing.
    let mut want_parent: Vec<usize> = (0..n).collect();
    want_parent.shuffle(&mut rng);
    want_parent.truncate(cfg.edges);
    for dst in want_parent {
        loop {
            attempts += 1;
            let relax_degrees = attempts > 60 * cfg.edges.max(8);
            let relax_cycles = attempts > 400 * cfg.edges.max(8);
            // Parents come preferentially from the broadcasters.
            let src = if !relax_degrees && rng.random::<f64>() < 0.6 {
                hubs[rng.random_range(0..hubs.len())]
            } else {
                rng.random_range(0..n)
            };
            if place(
                src,
                dst,
                relax_degrees,
                relax_cycles,
                &mut out_degree,
                &mut in_degree,
                &mut present,
                &mut edges,
                &hubs,
                &mut rng,
            ) {
                break;
            }
        }
    }
    // Remaining edges keep favoring broadcaster sources.
    while edges.len() < cfg.edges {
        attempts += 1;
        let relax_degrees = attempts > 60 * cfg.edges.max(8);
        let relax_cycles = attempts > 400 * cfg.edges.max(8);
        let src = if !relax_degrees && rng.random::<f64>() < 0.7 {
            hubs[rng.random_range(0..hubs.len())]
        } else {
            rng.random_range(0..n)
        };
        let dst = rng.random_range(0..n);
        place(
            src,
            dst,
            relax_degrees,
            relax_cycles,
            &mut out_degree,
            &mut in_degree,
            &mut present,
            &mut edges,
            &hubs,
            &mut rng,
        );
    }
    edges.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));

    // Parents per destination.
    let mut parents: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in &edges {
        parents[e.dst].push((e.src, e.weight));
    }

    // Per-node AR(1) drift covering t in [-lag, len), stationary start.
    let drift_len = cfg.len + cfg.lag;
    let stationary = DRIFT_STD / (1.0 - DRIFT_RHO * DRIFT_RHO).sqrt();
    let mut drifts: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = Vec::with_capacity(drift_len);
        let mut prev = stationary * gaussian(&mut rng);
        u.push(prev);
        for _ in 1..drift_len {
            prev = DRIFT_RHO * prev + DRIFT_STD * gaussian(&mut rng);
            u.push(prev);
        }
        drifts.push(u);
    }

    let lag = cfg.lag as i64;
    let base_value = |v: usize, t: i64| -> f64 {
        bases[v].at(t) + drifts[v][(t + lag) as usize]
    };
    let mut values = vec![0.0; cfg.len * n];
    for t in 0..cfg.len {
        for v in 0..n {
            let mut x = base_value(v, t as i64);
            for &(src, w) in &parents[v] {
                x += w * base_value(src, t as i64 - lag);
            }
            if cfg.noise > 0.0 {
                x += cfg.noise * gaussian(&mut rng);
            }
            values[t * n + v] = x;
        }
    }
    Ok(SynthData { series: RawSeries::new(values, cfg.len, n)?, edges, bases, drifts, lag: cfg.lag })
}

/// Standard normal draw (Box-Muller).
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Write the series as a comma-separated table, one row per time step.
pub fn write_series_csv(w: &mut impl std::io::Write, series: &RawSeries) -> Result<()> {
    for t in 0..series.rows {
        let row: Vec<String> =
            (0..series.cols).map(|v| format!("{}", series.get(t, v))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Ground-truth edge list, `src,dst,weight`, sorted by weight descending.
pub fn write_truth_edges(w: &mut impl std::io::Write, edges: &[SynthEdge]) -> Result<()> {
    writeln!(w, "src,dst,weight")?;
    let mut sorted = edges.to_vec();
    sorted.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.src, a.dst).cmp(&(b.src, b.dst)))
    });
    for e in sorted {
        writeln!(w, "{},{},{:.11e}", e.src, e.dst, e.weight)?;
    }
    Ok(())
}
