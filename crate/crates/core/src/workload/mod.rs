//! Per-thread instruction traces: the text format and a synthetic generator
//! whose node-miss rate is controlled by construction.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::NodeId;

pub mod scenarios;

pub use scenarios::{gen_smu_program, ScenarioProgram, SmuScenario};

pub const BLOCK_MASK: u64 = !63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceInstr {
    Alu,
    Load(u64),
    Store(u64),
}

impl TraceInstr {
    pub fn va(self) -> Option<u64> {
        match self {
            TraceInstr::Alu => None,
            TraceInstr::Load(va) | TraceInstr::Store(va) => Some(va),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Workload {
    pub threads: Vec<Vec<TraceInstr>>,
}

impl Workload {
    pub fn new(threads: Vec<Vec<TraceInstr>>) -> Self {
        Workload { threads }
    }

    pub fn total_instrs(&self) -> usize {
        self.threads.iter().map(Vec::len).sum()
    }

    pub fn memory_accesses(&self) -> usize {
        self.threads.iter().flatten().filter(|i| i.va().is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn parse_addr(tok: &str) -> Option<u64> {
    let t = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")).unwrap_or(tok);
    u64::from_str_radix(t, 16).ok()
}

/// Parses `#thread <n>` sections of `A`, `L <hex>` and `S <hex>` lines.
pub fn parse_trace(text: &str) -> Result<Workload, ParseError> {
    let mut threads: Vec<Option<Vec<TraceInstr>>> = Vec::new();
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        let err = |m: &str| ParseError { line: lineno, message: format!("{m}: '{line}'") };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(n) = rest.strip_prefix("thread") {
                let n: usize = n.trim().parse().map_err(|_| err("bad thread id"))?;
                if n >= 1 << 16 {
                    return Err(err("thread id too large"));
                }
                if threads.len() <= n {
                    threads.resize(n + 1, None);
                }
                if threads[n].is_some() {
                    return Err(err("duplicate thread section"));
                }
                threads[n] = Some(Vec::new());
                current = Some(n);
            }
            continue;
        }
        let Some(t) = current else {
            return Err(err("instruction before any #thread header"));
        };
        let mut toks = line.split_whitespace();
        let op = toks.next().unwrap_or("");
        let arg = toks.next();
        if toks.next().is_some() {
            return Err(err("trailing tokens"));
        }
        let instr = match (op, arg) {
            ("A", None) => TraceInstr::Alu,
            ("L", Some(a)) => TraceInstr::Load(parse_addr(a).ok_or_else(|| err("bad address"))? & BLOCK_MASK),
            ("S", Some(a)) => TraceInstr::Store(parse_addr(a).ok_or_else(|| err("bad address"))? & BLOCK_MASK),
            _ => return Err(err("expected A, L <hex> or S <hex>")),
        };
        threads[t].as_mut().expect("section opened").push(instr);
    }
    Ok(Workload { threads: threads.into_iter().map(Option::unwrap_or_default).collect() })
}

pub fn render_trace(w: &Workload) -> String {
    let mut out = String::new();
    for (t, instrs) in w.threads.iter().enumerate() {
        let _ = writeln!(out, "#thread {t}");
        for i in instrs {
            let _ = match i {
                TraceInstr::Alu => writeln!(out, "A"),
                TraceInstr::Load(va) => writeln!(out, "L {va:#x}"),
                TraceInstr::Store(va) => writeln!(out, "S {va:#x}"),
            };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub nodes: u32,
    pub instrs_per_node: usize,
    pub target_node_miss_rate: f64,
    pub store_fraction: f64,
    /// Mailbox ring size per sender, in blocks.
    pub shared_region_blocks: u64,
    pub private_region_blocks: u64,
    /// Fraction of instructions that access memory.
    pub mem_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            nodes: 2,
            instrs_per_node: 10_000,
            target_node_miss_rate: 0.0,
            store_fraction: 0.3,
            shared_region_blocks: 1 << 20,
            private_region_blocks: 64,
            mem_fraction: 0.3,
            rng_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthError {
    Infeasible(String),
    Calibration { target: f64, predicted: f64 },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::Infeasible(m) => write!(f, "infeasible parameters: {m}"),
            SynthError::Calibration { target, predicted } => {
                write!(f, "generator predicts node-miss rate {predicted} for target {target}")
            }
        }
    }
}

/// Instructions between writing a message and its first possible read, so
/// that threads drifting apart in time rarely read a message before it exists.
pub const MESSAGE_LAG: usize = 500;
const MAILBOX_OFFSET: u64 = 0x1000_0000;
const COLD_OFFSET: u64 = 0x8000_0000;

/// Address in the region homed at `node`.
pub fn homed_va(node: NodeId, offset: u64) -> u64 {
    ((node as u64) << 32) | (offset & 0xffff_ffff & BLOCK_MASK)
}

/// Generator output plus its own bookkeeping of expected node misses.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorkload {
    pub workload: Workload,
    pub predicted_misses: u64,
    pub memory_accesses: u64,
}

impl SynthWorkload {
    pub fn predicted_rate(&self) -> f64 {
        if self.memory_accesses == 0 {
            0.0
        } else {
            self.predicted_misses as f64 / self.memory_accesses as f64
        }
    }
}

/// Streaming-mailbox workload. Each memory access is, with probability equal
/// to the target, a read of the newest unread message another node addressed
/// to this one (or of a cold block homed there); with the same probability, a
/// write of a fresh message to a random peer; otherwise a private access.
/// Every foreign read touches a block this node has never cached, so each is
/// a node miss by construction.
pub fn gen_synthetic(p: &SynthParams) -> Result<SynthWorkload, SynthError> {
    let bad = |m: &str| Err(SynthError::Infeasible(m.into()));
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if p.nodes == 0 {
        return bad("zero nodes");
    }
    if !unit(p.target_node_miss_rate) || !unit(p.store_fraction) || !unit(p.mem_fraction) {
        return bad("rates must lie in [0, 1]");
    }
    if p.target_node_miss_rate > 0.5 {
        return bad("target node-miss rate above 0.5 leaves no room for message writes");
    }
    if p.target_node_miss_rate > 0.0 && p.nodes < 2 {
        return bad("node misses need at least two nodes");
    }
    if p.private_region_blocks == 0 || p.shared_region_blocks == 0 {
        return bad("regions must be nonempty");
    }
    if p.private_region_blocks > (COLD_OFFSET >> 6) {
        return bad("private region too large");
    }

    let n = p.nodes as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
    let mut threads: Vec<Vec<TraceInstr>> = (0..n).map(|_| Vec::with_capacity(p.instrs_per_node)).collect();
    // inbox[receiver] holds (readable from index, address), newest last
    let mut inbox: Vec<VecDeque<(usize, u64)>> = (0..n).map(|_| VecDeque::new()).collect();
    let mut send_seq = alloc::vec![0u64; n];
    let mut cold_seq = alloc::vec![0u64; n * n];
    let ring = p.shared_region_blocks.min((COLD_OFFSET - MAILBOX_OFFSET) >> 6);
    let mut predicted = 0u64;
    let mut accesses = 0u64;
    let t = p.target_node_miss_rate;

    for step in 0..p.instrs_per_node {
        for node in 0..n {
            let instr = if rng.random::<f64>() >= p.mem_fraction {
                TraceInstr::Alu
            } else {
                // steer toward the target so small runs stay calibrated
                let deficit = t * accesses as f64 - predicted as f64;
                let p_read = if t > 0.0 { (t + deficit / 16.0).clamp(0.0, 1.0 - t) } else { 0.0 };
                accesses += 1;
                let u: f64 = rng.random();
                if u < p_read {
                    predicted += 1;
                    let q = &mut inbox[node];
                    let visible = q.iter().rposition(|(from, _)| *from <= step);
                    match visible.and_then(|i| q.remove(i)) {
                        Some((_, va)) => TraceInstr::Load(va),
                        None => {
                            let mut sender = rng.random_range(0..n - 1);
                            if sender >= node {
                                sender += 1;
                            }
                            let k = &mut cold_seq[node * n + sender];
                            let va = homed_va(sender as NodeId, COLD_OFFSET + (((*k << 8) | node as u64) << 6));
                            *k += 1;
                            TraceInstr::Load(va)
                        }
                    }
                } else if u < p_read + t {
                    let mut to = rng.random_range(0..n - 1);
                    if to >= node {
                        to += 1;
                    }
                    let slot = send_seq[node] % ring;
                    send_seq[node] += 1;
                    let va = homed_va(node as NodeId, MAILBOX_OFFSET + (slot << 6));
                    let q = &mut inbox[to];
                    q.push_back((step + MESSAGE_LAG, va));
                    if q.len() > 64 {
                        q.pop_front();
                    }
                    TraceInstr::Store(va)
                } else {
                    let b = rng.random_range(0..p.private_region_blocks);
                    let va = homed_va(node as NodeId, b << 6);
                    if rng.random::<f64>() < p.store_fraction {
                        TraceInstr::Store(va)
                    } else {
                        TraceInstr::Load(va)
                    }
                }
            };
            threads[node].push(instr);
        }
    }

    let out = SynthWorkload { workload: Workload { threads }, predicted_misses: predicted, memory_accesses: accesses };
    let expected = t * accesses as f64;
    if expected >= 100.0 {
        let rel = (out.predicted_rate() - t).abs() / t;
        if rel > 0.10 {
            return Err(SynthError::Calibration { target: t, predicted: out.predicted_rate() });
        }
    }
    Ok(out)
}
