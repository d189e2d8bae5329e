//! Grid runs over node count, miss rate and scheme, fanned out over a
//! worker pool. Every run owns its workload copy and config.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Result};
use rayon::prelude::*;

use semsim_core::engine::{overhead, run, SimConfig, StatsReport};
use semsim_core::sdsm::Scheme;
use semsim_core::workload::{gen_synthetic, SynthParams, Workload};

use crate::plot::{line_chart, Series};
use crate::report::{stats_row, Cell, Table};

pub const THREADS_ENV: &str = "SEMSIM_THREADS";

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub base: SimConfig,
    pub nodes: Vec<u32>,
    pub miss_rates: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub instrs_per_node: usize,
    /// Replaces the synthetic generator; the miss-rate axis is then unused.
    pub trace: Option<Workload>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub nodes: u32,
    pub miss_rate: Option<f64>,
    pub scheme: Scheme,
    pub stats: StatsReport,
    /// Relative to scheme=none on the same workload.
    pub overhead_pct: f64,
}

/// Worker count from `SEMSIM_THREADS`, or every available core.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got '{v}'"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run_sweep(spec: &SweepSpec, threads: usize) -> Result<Vec<SweepCell>> {
    if spec.nodes.is_empty() || spec.schemes.is_empty() {
        bail!("sweep needs at least one node count and one scheme");
    }
    let misses: Vec<Option<f64>> = match &spec.trace {
        Some(_) => vec![None],
        None if spec.miss_rates.is_empty() => bail!("sweep needs at least one miss rate"),
        None => spec.miss_rates.iter().copied().map(Some).collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    pool.install(|| {
        let grid: Vec<(u32, Option<f64>)> =
            spec.nodes.iter().flat_map(|&n| misses.iter().map(move |&m| (n, m))).collect();
        let workloads: Vec<Workload> = grid
            .par_iter()
            .map(|&(nodes, miss)| match (&spec.trace, miss) {
                (Some(w), _) => Ok(w.clone()),
                (None, Some(m)) => {
                    let p = SynthParams {
                        nodes,
                        instrs_per_node: spec.instrs_per_node,
                        target_node_miss_rate: m,
                        rng_seed: spec.base.rng_seed,
                        ..SynthParams::default()
                    };
                    gen_synthetic(&p).map(|s| s.workload).map_err(|e| anyhow!("{nodes} nodes, miss {m}: {e}"))
                }
                (None, None) => unreachable!(),
            })
            .collect::<Result<_>>()?;
        let mut schemes = vec![Scheme::None];
        schemes.extend(spec.schemes.iter().copied().filter(|s| *s != Scheme::None));
        let jobs: Vec<(usize, Scheme)> =
            (0..grid.len()).flat_map(|g| schemes.iter().map(move |&s| (g, s))).collect();
        let reports: Vec<StatsReport> = jobs
            .par_iter()
            .map(|&(g, scheme)| {
                let cfg = SimConfig { nodes: grid[g].0, scheme, ..spec.base.clone() };
                run(&cfg, &workloads[g]).map_err(|e| anyhow!("{e}"))
            })
            .collect::<Result<_>>()?;
        let mut cells = Vec::new();
        for (g, &(nodes, miss_rate)) in grid.iter().enumerate() {
            let base = &reports[g * schemes.len()];
            for (k, &scheme) in schemes.iter().enumerate() {
                if !spec.schemes.contains(&scheme) {
                    continue;
                }
                let stats = reports[g * schemes.len() + k].clone();
                let overhead_pct = overhead(&stats, base)
                    .map_err(|e| anyhow!("{nodes} nodes: {e}"))?;
                cells.push(SweepCell { nodes, miss_rate, scheme, stats, overhead_pct });
            }
        }
        Ok(cells)
    })
}

pub fn sweep_table(cells: &[SweepCell]) -> Table {
    let mut t = Table::new(&["nodes", "miss_rate", "scheme"]);
    for c in cells {
        let mut row = stats_row(&c.stats);
        row.insert("nodes".into(), Cell::Int(c.nodes as i64));
        row.insert("miss_rate".into(), c.miss_rate.map_or(Cell::Text("trace".into()), Cell::Real));
        row.insert("scheme".into(), c.scheme.name().into());
        row.insert("overhead_pct".into(), Cell::Real(c.overhead_pct));
        t.push(row);
    }
    t
}

/// Overhead against node count, one line per (scheme, miss rate).
pub fn sweep_plot(cells: &[SweepCell]) -> String {
    let mut lines: BTreeMap<(Scheme, String), Vec<(f64, f64)>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.scheme != Scheme::None) {
        let miss = c.miss_rate.map_or("trace".into(), |m| format!("{}%", m * 100.0));
        lines.entry((c.scheme, miss)).or_default().push((c.nodes as f64, c.overhead_pct));
    }
    let series: Vec<Series> = lines
        .into_iter()
        .map(|((s, m), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: format!("{} {m}", s.name()), points }
        })
        .collect();
    line_chart("overhead vs. no security", "nodes", "overhead %", &series)
}
