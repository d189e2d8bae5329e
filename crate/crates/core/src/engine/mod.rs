//! Discrete-event simulation of a multi-node secure machine.
//!
//! Each node runs one trace thread with blocking instructions, a private
//! LRU cache and the home memory for its slice of the address space. A
//! directory entity one hop away from every node serializes requests per
//! block. Events are ordered by (time, entity, sequence).

mod cache;
pub mod adversary;
pub mod oracle;
mod sim;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

pub use cache::{Cache, CacheLine};
pub use oracle::{check_commits, store_token, Commit, OracleReport};

use crate::coherence::{AdversaryAction, CoherenceMsg, MemImage, Trust};
use crate::dit::DitVariant;
use crate::sdsm::Scheme;
use crate::smu::HaltReason;
use crate::workload::Workload;
use crate::NodeId;

/// Half-life of the per-process request heat used to split KB slots.
pub const HEAT_WINDOW: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DitMode {
    Off,
    Tree(DitVariant),
}

impl DitMode {
    pub fn name(self) -> &'static str {
        match self {
            DitMode::Off => "off",
            DitMode::Tree(v) => v.name(),
        }
    }
}

impl FromStr for DitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(DitMode::Off),
            other => other.parse().map(DitMode::Tree),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdversaryScenario {
    /// Dropped invalidation leaves a stale sharer behind.
    StaleRead,
}

impl AdversaryScenario {
    pub fn name(self) -> &'static str {
        match self {
            AdversaryScenario::StaleRead => "stale-read",
        }
    }
}

impl FromStr for AdversaryScenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stale-read" | "stale_read" => Ok(AdversaryScenario::StaleRead),
            other => Err(format!("unknown adversary scenario '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub nodes: u32,
    pub scheme: Scheme,
    pub dit: DitMode,
    pub alu_cycles: u64,
    /// Local memory access; also the cache-miss fill time at the home.
    pub mem_cycles: u64,
    pub hop_cycles: u64,
    pub kb_cycles: u64,
    pub cache_lines: usize,
    pub fifo_capacity: usize,
    pub baseline16_buffer: usize,
    /// Trusted coherence manager. Ignored without a secure scheme.
    pub tcm: bool,
    pub rng_seed: u64,
    pub adversary: Option<AdversaryScenario>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nodes: 16,
            scheme: Scheme::Sdsm,
            dit: DitMode::Off,
            alu_cycles: 1,
            mem_cycles: 100,
            hop_cycles: 100,
            kb_cycles: 80,
            cache_lines: 512,
            fifo_capacity: 10,
            baseline16_buffer: 10,
            tcm: true,
            rng_seed: 1,
            adversary: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConfigError {
    NoNodes,
    NoCacheLines,
    NoKbSlots,
    TooManyThreads { threads: usize, nodes: u32 },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::NoNodes => f.write_str("nodes must be at least 1"),
            ConfigError::NoCacheLines => f.write_str("cache_lines must be at least 1"),
            ConfigError::NoKbSlots => f.write_str("fifo_capacity must be at least 1 under sdsm"),
            ConfigError::TooManyThreads { threads, nodes } => {
                write!(f, "workload has {threads} threads but only {nodes} nodes")
            }
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes == 0 {
            return Err(ConfigError::NoNodes);
        }
        if self.cache_lines == 0 {
            return Err(ConfigError::NoCacheLines);
        }
        if self.scheme == Scheme::Sdsm && self.fifo_capacity == 0 {
            return Err(ConfigError::NoKbSlots);
        }
        Ok(())
    }

    pub fn trust(&self) -> Trust {
        match (self.scheme.is_secure(), self.tcm) {
            (false, _) => Trust::Plain,
            (true, false) => Trust::DataMac,
            (true, true) => Trust::Tcm,
        }
    }
}

/// A report value as it appears in CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Int(u64),
    Real(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsReport {
    pub total_cycles: u64,
    pub instructions: u64,
    pub memory_accesses: u64,
    /// Mean over cores of cycles per instruction.
    pub per_core_instr_avg: f64,
    pub alu_instr_avg: f64,
    pub load_instr_avg: f64,
    pub store_instr_avg: f64,
    pub node_misses: u64,
    pub wrong_state_hits: u64,
    pub requests_forwarded: u64,
    pub requests_served: u64,
    pub requests_redirected: u64,
    pub served_immediately: u64,
    pub evict_kb_waits: u64,
    pub avg_evict_kb_delay: f64,
    pub fetch_kb_waits: u64,
    pub avg_fetch_kb_delay: f64,
    pub directory_messages: u64,
    pub messages: u64,
    pub traffic_bytes: u64,
    pub tamper_detections: u64,
    pub halts: [u64; 6],
    pub dit_updates: u64,
    pub pad_reuses: u64,
    pub stalled: bool,
    pub halted: Option<HaltReason>,
}

fn snake(name: &str) -> String {
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

impl StatsReport {
    pub fn node_miss_rate(&self) -> f64 {
        if self.memory_accesses == 0 {
            0.0
        } else {
            self.node_misses as f64 / self.memory_accesses as f64
        }
    }

    /// Every field as a named value, in column-name order.
    pub fn columns(&self) -> Vec<(String, Metric)> {
        use Metric::{Int, Real};
        let mut m: BTreeMap<String, Metric> = BTreeMap::new();
        let mut put = |k: &str, v: Metric| {
            m.insert(String::from(k), v);
        };
        put("total_cycles", Int(self.total_cycles));
        put("instructions", Int(self.instructions));
        put("memory_accesses", Int(self.memory_accesses));
        put("per_core_instr_avg", Real(self.per_core_instr_avg));
        put("alu_instr_avg", Real(self.alu_instr_avg));
        put("load_instr_avg", Real(self.load_instr_avg));
        put("store_instr_avg", Real(self.store_instr_avg));
        put("node_misses", Int(self.node_misses));
        put("node_miss_rate", Real(self.node_miss_rate()));
        put("wrong_state_hits", Int(self.wrong_state_hits));
        put("requests_forwarded", Int(self.requests_forwarded));
        put("requests_served", Int(self.requests_served));
        put("requests_redirected", Int(self.requests_redirected));
        put("served_immediately", Int(self.served_immediately));
        put("evict_kb_waits", Int(self.evict_kb_waits));
        put("avg_evict_kb_delay", Real(self.avg_evict_kb_delay));
        put("fetch_kb_waits", Int(self.fetch_kb_waits));
        put("avg_fetch_kb_delay", Real(self.avg_fetch_kb_delay));
        put("directory_messages", Int(self.directory_messages));
        put("messages", Int(self.messages));
        put("traffic_bytes", Int(self.traffic_bytes));
        put("tamper_detections", Int(self.tamper_detections));
        put("dit_updates", Int(self.dit_updates));
        put("pad_reuses", Int(self.pad_reuses));
        put("stalled", Int(self.stalled as u64));
        for r in HaltReason::ALL {
            put(&format!("halts_{}", snake(r.name())), Int(self.halts[r.code() as usize - 1]));
        }
        m.into_iter().collect()
    }

    pub fn halts_for(&self, r: HaltReason) -> u64 {
        self.halts[r.code() as usize - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverheadError;

impl fmt::Display for OverheadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("baseline run has zero cycles")
    }
}

/// Extra cycles of `scheme` relative to `baseline`, in percent.
pub fn overhead(scheme: &StatsReport, baseline: &StatsReport) -> Result<f64, OverheadError> {
    if baseline.total_cycles == 0 {
        return Err(OverheadError);
    }
    Ok((scheme.total_cycles as f64 / baseline.total_cycles as f64 - 1.0) * 100.0)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub actions: Vec<AdversaryAction>,
    /// Keep every sent message and every memory image written.
    pub record: bool,
}

/// A home-memory write seen during a recording run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemWrite {
    pub time: u64,
    pub node: NodeId,
    pub va: u64,
    pub image: MemImage,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub stats: StatsReport,
    /// Loads and stores in the order their effects took place.
    pub commits: Vec<Commit>,
    /// Coherent value of every touched block after the run.
    pub final_values: BTreeMap<u64, u64>,
    pub messages: Vec<CoherenceMsg>,
    pub mem_writes: Vec<MemWrite>,
}

pub fn run(cfg: &SimConfig, workload: &Workload) -> Result<StatsReport, ConfigError> {
    run_traced(cfg, workload, &RunOptions::default()).map(|o| o.stats)
}

/// Full run. The configured adversary scenario, if any, acts alongside
/// `opts.actions`.
pub fn run_traced(cfg: &SimConfig, workload: &Workload, opts: &RunOptions) -> Result<RunOutput, ConfigError> {
    cfg.validate()?;
    if workload.threads.len() > cfg.nodes as usize {
        return Err(ConfigError::TooManyThreads { threads: workload.threads.len(), nodes: cfg.nodes });
    }
    if let Some(s) = cfg.adversary {
        let mut opts = opts.clone();
        opts.actions.extend(adversary::scenario_actions(s));
        return Ok(sim::Sim::new(cfg, workload, &opts).run());
    }
    Ok(sim::Sim::new(cfg, workload, opts).run())
}
