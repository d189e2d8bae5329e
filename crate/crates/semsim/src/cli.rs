//! `semsim` subcommands. Every command prints its CSV on stdout and, with
//! `--out <dir>`, also writes it to `<dir>/<command>.csv` before any plot.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semsim_core::crypto::memory_overhead;
use semsim_core::dit::{amat_delta, amat_sweep, AmatGrid, AmatRow};
use semsim_core::engine::adversary::{self, CampaignConfig, Verdict};
use semsim_core::engine::{check_commits, run_traced, AdversaryScenario, DitMode, RunOptions, SimConfig};
use semsim_core::sdsm::Scheme;
use semsim_core::smu::machine::run_program;
use semsim_core::smu::ToyProgram;
use semsim_core::workload::{gen_smu_program, gen_synthetic, SmuScenario, SynthParams};

use crate::config::load_config;
use crate::files::{load_program, load_trace};
use crate::plot::{line_chart, Series};
use crate::report::{stats_row, Cell, Table};
use crate::sweep::{run_sweep, sweep_plot, sweep_table, threads_from_env, SweepSpec};

/// Exit code for attack runs whose tampering was detected.
pub const EXIT_DETECTED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "semsim", version, about = "Secure distributed shared memory simulator")]
pub struct Cli {
    /// Directory for CSV (and plot) files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with SimConfig keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dit: Option<DitMode>,
    #[arg(long = "rng-seed")]
    pub rng_seed: Option<u64>,
    /// Trusted coherence manager.
    #[arg(long, value_enum)]
    pub tcm: Option<OnOff>,
}

impl Common {
    fn sim_config(&self) -> Result<SimConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => SimConfig::default(),
        };
        if let Some(d) = self.dit {
            c.dit = d;
        }
        if let Some(s) = self.rng_seed {
            c.rng_seed = s;
        }
        if let Some(t) = self.tcm {
            c.tcm = t == OnOff::On;
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AmatGridKind {
    /// Free baseline coherence check, integrity miss 0-4%.
    Costless,
    /// Baseline coherence check costs one memory access at 0-4% miss.
    CoherenceCost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttackScenario {
    StaleRead,
    Campaign,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// One simulation of a trace file, or of a synthetic workload.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        nodes: Option<u32>,
        /// Target node-miss rate of the synthetic workload.
        #[arg(long = "miss-rate", default_value_t = 0.1)]
        miss_rate: f64,
        #[arg(long, default_value_t = 10_000)]
        instrs: usize,
    },
    /// Runs every (nodes, miss rate, scheme) point plus a scheme=none baseline.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "sdsm,baseline16")]
        scheme: Vec<Scheme>,
        #[arg(long, value_delimiter = ',', default_value = "16,64,128,256")]
        nodes: Vec<u32>,
        #[arg(long = "miss-rate", value_delimiter = ',', default_value = "0.01,0.05,0.1,0.2")]
        miss_rate: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        instrs: usize,
        #[arg(long)]
        plot: bool,
    },
    /// Closed-form AMAT of the distributed integrity tree against its baseline.
    Amat {
        #[arg(long, value_enum, default_value = "costless")]
        grid: AmatGridKind,
        /// Remote access cost in memory accesses.
        #[arg(long = "t-rem-mult", default_value_t = 5.0)]
        t_rem_mult: f64,
        #[arg(long)]
        plot: bool,
    },
    /// Metadata bytes per data byte: `overhead 64 8 2 2` or the flag form.
    Overhead {
        sizes: Vec<u32>,
        #[arg(long)]
        block: Option<u32>,
        #[arg(long)]
        counter: Option<u32>,
        #[arg(long)]
        mac: Option<u32>,
        #[arg(long)]
        hash: Option<u32>,
    },
    /// Scripted stale read, or a randomized tamper campaign.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        scenario: AttackScenario,
        #[arg(long, default_value = "sdsm")]
        scheme: Scheme,
        /// Injected actions for the campaign.
        #[arg(long, default_value_t = 1000)]
        actions: usize,
    },
    /// Replays the canned SMU programs against their expected event traces,
    /// or runs one toy program file.
    SmuGolden {
        #[arg(long, default_value = "all")]
        scenario: String,
        #[arg(long)]
        program: Option<PathBuf>,
        #[arg(long = "max-steps", default_value_t = 10_000)]
        max_steps: usize,
    },
}

fn emit(out: &mut dyn Write, dir: Option<&Path>, name: &str, t: &Table) -> Result<()> {
    t.write(&mut *out)?;
    if let Some(d) = dir {
        t.save(&d.join(format!("{name}.csv")))?;
    }
    Ok(())
}

fn emit_plot(dir: Option<&Path>, name: &str, svg: String) -> Result<()> {
    let d = dir.ok_or_else(|| anyhow!("--plot needs --out"))?;
    let p = d.join(format!("{name}.svg"));
    std::fs::write(&p, svg).with_context(|| format!("writing {}", p.display()))
}

fn row<const N: usize>(cells: [(&str, Cell); N]) -> BTreeMap<String, Cell> {
    cells.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let dir = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Run { common, workload, scheme, nodes, miss_rate, instrs } => {
            let mut cfg = common.sim_config()?;
            if let Some(s) = scheme {
                cfg.scheme = *s;
            }
            if let Some(n) = nodes {
                cfg.nodes = *n;
            }
            let w = match workload {
                Some(p) => load_trace(p)?,
                None => {
                    let p = SynthParams {
                        nodes: cfg.nodes,
                        instrs_per_node: *instrs,
                        target_node_miss_rate: *miss_rate,
                        rng_seed: cfg.rng_seed,
                        ..SynthParams::default()
                    };
                    gen_synthetic(&p).map_err(|e| anyhow!("{e}"))?.workload
                }
            };
            let st = run_traced(&cfg, &w, &RunOptions::default()).map_err(|e| anyhow!("{e}"))?.stats;
            let mut t = Table::new(&["scheme", "nodes", "dit", "tcm"]);
            let mut r = stats_row(&st);
            r.extend(row([
                ("scheme", cfg.scheme.name().into()),
                ("nodes", Cell::Int(cfg.nodes as i64)),
                ("dit", cfg.dit.name().into()),
                ("tcm", Cell::Int(cfg.tcm as i64)),
            ]));
            t.push(r);
            emit(out, dir, "run", &t)?;
            Ok(if cfg.adversary.is_some() && st.tamper_detections > 0 { EXIT_DETECTED } else { 0 })
        }
        Cmd::Sweep { common, workload, scheme, nodes, miss_rate, instrs, plot } => {
            let spec = SweepSpec {
                base: common.sim_config()?,
                nodes: nodes.clone(),
                miss_rates: miss_rate.clone(),
                schemes: scheme.clone(),
                instrs_per_node: *instrs,
                trace: workload.as_deref().map(load_trace).transpose()?,
            };
            let cells = run_sweep(&spec, threads_from_env()?)?;
            emit(out, dir, "sweep", &sweep_table(&cells))?;
            if *plot {
                emit_plot(dir, "sweep", sweep_plot(&cells))?;
            }
            Ok(0)
        }
        Cmd::Amat { grid, t_rem_mult, plot } => {
            let g = match grid {
                AmatGridKind::Costless => AmatGrid::costless_baseline(*t_rem_mult),
                AmatGridKind::CoherenceCost => AmatGrid { t_rem_mult: vec![*t_rem_mult], ..AmatGrid::coherence_cost() },
            };
            let rows = amat_sweep(&g).map_err(|e| anyhow!("{e}"))?;
            emit(out, dir, "amat", &amat_table(&rows))?;
            if *plot {
                emit_plot(dir, "amat", amat_plot(&rows, *grid))?;
            }
            Ok(0)
        }
        Cmd::Overhead { sizes, block, counter, mac, hash } => {
            let [b, c, m, h] = match (sizes.as_slice(), block, counter, mac, hash) {
                (&[b, c, m, h], None, None, None, None) => [b, c, m, h],
                (&[], Some(b), Some(c), Some(m), Some(h)) => [*b, *c, *m, *h],
                _ => bail!("overhead takes four sizes, either as BLOCK COUNTER MAC HASH or as --block --counter --mac --hash"),
            };
            let f = memory_overhead(b, c, m, h).map_err(|e| anyhow!("{e}"))?;
            let mut t = Table::new(&["block", "counter", "mac", "hash", "fraction"]);
            t.push(row([
                ("block", Cell::Int(b as i64)),
                ("counter", Cell::Int(c as i64)),
                ("mac", Cell::Int(m as i64)),
                ("hash", Cell::Int(h as i64)),
                ("fraction", Cell::Exact(f)),
            ]));
            emit(out, dir, "overhead", &t)?;
            Ok(0)
        }
        Cmd::Attack { common, scenario, scheme, actions } => {
            let base = common.sim_config()?;
            let (t, detected) = match scenario {
                AttackScenario::StaleRead => stale_read(base, *scheme)?,
                AttackScenario::Campaign => campaign(base, *scheme, *actions)?,
            };
            emit(out, dir, "attack", &t)?;
            Ok(if detected { EXIT_DETECTED } else { 0 })
        }
        Cmd::SmuGolden { scenario, program, max_steps } => {
            if let Some(p) = program {
                let prog = load_program(p)?;
                let oc = run_program(&prog, *max_steps);
                for l in oc.lines() {
                    eprintln!("{l}");
                }
                let name = p.file_stem().map_or("program".into(), |s| s.to_string_lossy().into_owned());
                let mut t = Table::new(&["program"]);
                t.push(row([
                    ("program", Cell::Text(name)),
                    ("events", Cell::Int(oc.events.len() as i64)),
                    ("finished", Cell::Int(oc.finished as i64)),
                    ("halted", oc.halted.map_or("-", |h| h.name()).into()),
                ]));
                emit(out, dir, "smu-golden", &t)?;
                return Ok(0);
            }
            let list: Vec<SmuScenario> = if scenario == "all" {
                SmuScenario::ALL.to_vec()
            } else {
                vec![scenario.parse().map_err(|e: String| anyhow!(e))?]
            };
            let mut t = Table::new(&["scenario"]);
            let mut failed = Vec::new();
            for s in list {
                let (got, want, halted) = golden(s, *max_steps)?;
                let mismatch = got.iter().zip(&want).position(|(a, b)| a != b).or_else(|| {
                    (got.len() != want.len()).then(|| got.len().min(want.len()))
                });
                if mismatch.is_some() {
                    failed.push(s.name());
                }
                t.push(row([
                    ("scenario", s.name().into()),
                    ("events", Cell::Int(got.len() as i64)),
                    ("golden_events", Cell::Int(want.len() as i64)),
                    ("matches", Cell::Int(mismatch.is_none() as i64)),
                    ("first_mismatch", Cell::Int(mismatch.map_or(-1, |i| i as i64))),
                    ("halted", halted.into()),
                ]));
            }
            emit(out, dir, "smu-golden", &t)?;
            if !failed.is_empty() {
                bail!("golden trace mismatch: {}", failed.join(", "));
            }
            Ok(0)
        }
    }
}

fn golden(s: SmuScenario, max_steps: usize) -> Result<(Vec<String>, Vec<String>, &'static str)> {
    let sp = gen_smu_program(s);
    let prog = ToyProgram::parse(sp.source).map_err(|e| anyhow!("{s}: {e}"))?;
    let oc = run_program(&prog, max_steps);
    let halted = oc.halted.map_or("-", |h| h.name());
    Ok((oc.lines(), sp.golden_lines().map(String::from).collect(), halted))
}

fn stale_read(base: SimConfig, scheme: Scheme) -> Result<(Table, bool)> {
    let cfg = SimConfig {
        scheme,
        adversary: Some(AdversaryScenario::StaleRead),
        nodes: base.nodes.max(adversary::stale_read_config(scheme, base.tcm).nodes),
        ..base
    };
    let w = adversary::stale_read_workload();
    let o = run_traced(&cfg, &w, &RunOptions::default()).map_err(|e| anyhow!("{e}"))?;
    let finished = o.stats.halted.is_none() && !o.stats.stalled;
    let rep = check_commits(&w, &o.commits, finished.then_some(&o.final_values));
    let silent = !rep.clean() && o.stats.tamper_detections == 0;
    let mut t = Table::new(&["scenario", "scheme", "tcm"]);
    t.push(row([
        ("scenario", "stale-read".into()),
        ("scheme", scheme.name().into()),
        ("tcm", Cell::Int(cfg.tcm as i64)),
        ("silent_corruption", Cell::Int(silent as i64)),
        ("wrong_reads", Cell::Int(rep.wrong_reads as i64)),
        ("final_mismatches", Cell::Int(rep.final_mismatches as i64)),
        ("tamper_detections", Cell::Int(o.stats.tamper_detections as i64)),
        ("halted", o.stats.halted.map_or("-", |h| h.name()).into()),
        ("total_cycles", Cell::Int(o.stats.total_cycles as i64)),
    ]));
    Ok((t, o.stats.tamper_detections > 0))
}

fn campaign(base: SimConfig, scheme: Scheme, actions: usize) -> Result<(Table, bool)> {
    let def = CampaignConfig::default();
    let sim = SimConfig { scheme, nodes: def.sim.nodes, cache_lines: def.sim.cache_lines, ..base };
    let rep = adversary::campaign(&CampaignConfig { sim: sim.clone(), actions, ..def }).map_err(|e| anyhow!("{e}"))?;
    let mut t = Table::new(&["scenario", "scheme", "tcm", "action"]);
    for (kind, counts) in &rep.by_kind {
        let mut r = row([
            ("scenario", "campaign".into()),
            ("scheme", scheme.name().into()),
            ("tcm", Cell::Int(sim.tcm as i64)),
            ("action", (*kind).into()),
            ("silent_corruption", Cell::Int(counts[Verdict::Silent as usize] as i64)),
        ]);
        for v in Verdict::ALL {
            r.insert(v.name().into(), Cell::Int(counts[v as usize] as i64));
        }
        t.push(r);
    }
    Ok((t, rep.count(Verdict::Detected) > 0))
}

pub fn amat_table(rows: &[AmatRow]) -> Table {
    let mut t = Table::new(&["variant", "t_coh", "t_rem_mult", "t_int_miss", "node_miss"]);
    for r in rows {
        let p = &r.params;
        t.push(row([
            ("variant", r.variant.name().into()),
            ("t_coh", Cell::Real(p.t_coh)),
            ("t_rem_mult", Cell::Real(r.t_rem_mult)),
            ("t_int_miss", Cell::Real(r.t_int_miss)),
            ("node_miss", Cell::Real(r.node_miss)),
            ("h", Cell::Real(p.h)),
            ("t_c", Cell::Real(p.t_c)),
            ("t_fetch", Cell::Real(p.t_fetch)),
            ("t_int", Cell::Real(p.t_int)),
            ("t_rem", Cell::Real(p.t_rem)),
            ("le", Cell::Real(p.le)),
            ("amat_baseline", Cell::Real(r.amat_baseline)),
            ("amat_dit", Cell::Real(r.amat_dit)),
            ("delta", Cell::Real(amat_delta(p))),
            ("overhead_pct", Cell::Real(r.overhead_pct)),
        ]));
    }
    t
}

fn amat_plot(rows: &[AmatRow], grid: AmatGridKind) -> String {
    let mut lines: BTreeMap<(u64, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let key = (r.params.t_coh.to_bits(), r.t_int_miss.to_bits());
        lines.entry(key).or_default().push((r.node_miss * 100.0, r.overhead_pct));
    }
    let series: Vec<Series> = lines
        .into_iter()
        .map(|((coh, im), points)| {
            let label = match grid {
                AmatGridKind::Costless => format!("tree miss {}%", f64::from_bits(im) * 100.0),
                AmatGridKind::CoherenceCost => format!("t_coh {}", f64::from_bits(coh)),
            };
            Series { label, points }
        })
        .collect();
    line_chart("AMAT overhead", "node miss %", "overhead %", &series)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = main_with_args(std::iter::once("semsim").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn overhead_both_forms() {
        let want = "block,counter,mac,hash,fraction\n64,8,2,2,0.16015625\n";
        assert_eq!(run(&["overhead", "64", "8", "2", "2"]), (0, want.into()));
        assert_eq!(run(&["overhead", "--block", "64", "--counter", "8", "--mac", "2", "--hash", "2"]), (0, want.into()));
        assert_eq!(run(&["overhead", "64", "8"]).0, 1);
        assert_eq!(run(&["overhead", "0", "8", "2", "2"]).0, 1);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(&["run", "--bogus"]).0, 1);
        assert_eq!(run(&["attack", "--scenario", "stale-read", "--tcm", "maybe"]).0, 1);
        assert_eq!(run(&["sweep", "--scheme", "aes"]).0, 1);
        assert_eq!(run(&["--help"]).0, 0);
    }

    #[test]
    fn stale_read_exit_codes() {
        let (code, csv) = run(&["attack", "--scenario", "stale-read", "--tcm", "off"]);
        assert_eq!(code, 0);
        assert!(csv.lines().nth(1).unwrap().starts_with("stale-read,sdsm,0,"), "{csv}");
        let (code, _) = run(&["attack", "--scenario", "stale-read", "--tcm", "on"]);
        assert_eq!(code, EXIT_DETECTED);
    }

    #[test]
    fn small_run_prints_one_row() {
        let (code, csv) = run(&["run", "--nodes", "2", "--instrs", "500", "--scheme", "none"]);
        assert_eq!(code, 0);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("scheme,nodes,dit,tcm,"));
        assert!(lines[1].starts_with("none,2,off,1,"));
    }

    #[test]
    fn golden_suite_passes() {
        let (code, csv) = run(&["smu-golden"]);
        assert_eq!(code, 0, "{csv}");
        assert_eq!(csv.lines().count(), 1 + SmuScenario::ALL.len());
        assert!(run(&["smu-golden", "--scenario", "no_such"]).0 == 1);
    }
}
