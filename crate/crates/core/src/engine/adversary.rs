//! Scripted attacks and randomized tamper campaigns against full runs.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_commits, run_traced, AdversaryScenario, ConfigError, RunOptions, SimConfig};
use crate::coherence::{AdversaryAction, MsgKind};
use crate::sdsm::Scheme;
use crate::workload::{homed_va, TraceInstr, Workload};

/// Block shared by the stale-read scenario, homed at node 3.
pub const STALE_VA: u64 = 3 << 32 | 0x140;

pub fn scenario_actions(s: AdversaryScenario) -> Vec<AdversaryAction> {
    match s {
        AdversaryScenario::StaleRead => vec![AdversaryAction::DropInvalidate { va: STALE_VA, dst: 0, after: 0 }],
    }
}

fn alus(n: usize) -> impl Iterator<Item = TraceInstr> {
    core::iter::repeat_n(TraceInstr::Alu, n)
}

/// Node 0 reads the block, node 1 reads then overwrites it, and both node 0
/// and node 2 read it again once the write has committed.
pub fn stale_read_workload() -> Workload {
    let b: Vec<TraceInstr> =
        [TraceInstr::Load(STALE_VA)].into_iter().chain(alus(4000)).chain([TraceInstr::Load(STALE_VA)]).collect();
    let a: Vec<TraceInstr> = alus(1000).chain([TraceInstr::Load(STALE_VA)]).chain(alus(200)).chain([TraceInstr::Store(STALE_VA)]).collect();
    let c: Vec<TraceInstr> = alus(3000).chain([TraceInstr::Load(STALE_VA)]).collect();
    Workload::new(vec![b, a, c])
}

pub fn stale_read_config(scheme: Scheme, tcm: bool) -> SimConfig {
    SimConfig {
        nodes: 4,
        scheme,
        tcm,
        adversary: Some(AdversaryScenario::StaleRead),
        ..SimConfig::default()
    }
}

/// Random loads and stores over a few blocks spread across all homes.
pub fn shared_mix(nodes: u32, instrs: usize, blocks: u64, seed: u64) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<u64> = (0..blocks).map(|b| homed_va((b % nodes as u64) as u32, 0x40 * (b / nodes as u64 + 1))).collect();
    let threads = (0..nodes)
        .map(|_| {
            (0..instrs)
                .map(|_| {
                    let u: f64 = rng.random();
                    let va = pool[rng.random_range(0..pool.len())];
                    if u < 0.3 {
                        TraceInstr::Load(va)
                    } else if u < 0.5 {
                        TraceInstr::Store(va)
                    } else {
                        TraceInstr::Alu
                    }
                })
                .collect()
        })
        .collect();
    Workload::new(threads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    /// A load saw a wrong value, or a finished run left wrong memory.
    Silent,
    Detected,
    /// Some thread never finished and nothing was detected.
    Stalled,
    Inert,
}

impl Verdict {
    pub const ALL: [Verdict; 4] = [Verdict::Silent, Verdict::Detected, Verdict::Stalled, Verdict::Inert];

    pub fn name(self) -> &'static str {
        match self {
            Verdict::Silent => "silent",
            Verdict::Detected => "detected",
            Verdict::Stalled => "stalled",
            Verdict::Inert => "inert",
        }
    }
}

pub const ACTION_KINDS: [&str; 4] = ["replay", "forge", "drop-invalidate", "revert"];

pub fn action_kind(a: &AdversaryAction) -> &'static str {
    match a {
        AdversaryAction::ReplayMsg { .. } => "replay",
        AdversaryAction::ForgeData { .. } => "forge",
        AdversaryAction::DropInvalidate { .. } => "drop-invalidate",
        AdversaryAction::RevertMemory { .. } => "revert",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignConfig {
    pub sim: SimConfig,
    pub actions: usize,
    pub instrs_per_node: usize,
    pub shared_blocks: u64,
    pub rng_seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            sim: SimConfig { nodes: 4, cache_lines: 6, ..SimConfig::default() },
            actions: 1000,
            instrs_per_node: 400,
            shared_blocks: 16,
            rng_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CampaignReport {
    pub actions: usize,
    /// Counts per action kind, indexed like `Verdict::ALL`.
    pub by_kind: BTreeMap<&'static str, [usize; 4]>,
}

impl CampaignReport {
    pub fn count(&self, v: Verdict) -> usize {
        self.by_kind.values().map(|c| c[v as usize]).sum()
    }
}

/// Runs `w` once with `action` and classifies the outcome.
pub fn classify(cfg: &SimConfig, w: &Workload, action: AdversaryAction) -> Result<Verdict, ConfigError> {
    let out = run_traced(cfg, w, &RunOptions { actions: vec![action], record: false })?;
    let st = &out.stats;
    let finished = st.halted.is_none() && !st.stalled;
    let rep = check_commits(w, &out.commits, finished.then_some(&out.final_values));
    Ok(if rep.wrong_reads > 0 || rep.order_errors > 0 || rep.final_mismatches > 0 {
        Verdict::Silent
    } else if st.tamper_detections > 0 || st.halted.is_some() {
        Verdict::Detected
    } else if st.stalled {
        Verdict::Stalled
    } else {
        Verdict::Inert
    })
}

/// One recording run per workload, then single-action runs sampled from
/// what it saw: replayed messages, forged data, dropped invalidations and
/// reverted memory images, in equal shares.
pub fn campaign(cfg: &CampaignConfig) -> Result<CampaignReport, ConfigError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut rep = CampaignReport { actions: 0, by_kind: ACTION_KINDS.iter().map(|k| (*k, [0; 4])).collect() };
    let per_workload = 50;
    let mut round = 0u64;
    while rep.actions < cfg.actions {
        let w = shared_mix(cfg.sim.nodes, cfg.instrs_per_node, cfg.shared_blocks, cfg.rng_seed ^ round << 20);
        round += 1;
        let rec = run_traced(&cfg.sim, &w, &RunOptions { actions: Vec::new(), record: true })?;
        let hop = cfg.sim.hop_cycles;
        let invals: Vec<_> = rec.messages.iter().filter(|m| m.kind == MsgKind::Invalidate).collect();
        let data: Vec<_> = rec.messages.iter().filter(|m| m.kind.carries_data() && m.payload != crate::coherence::Payload::None).collect();
        // images that were later overwritten
        let stale: Vec<(usize, u64)> = rec
            .mem_writes
            .iter()
            .enumerate()
            .filter_map(|(i, mw)| {
                rec.mem_writes[i + 1..].iter().find(|l| l.node == mw.node && l.va == mw.va).map(|l| (i, l.time))
            })
            .collect();
        for _ in 0..per_workload.min(cfg.actions - rep.actions) {
            let k = rep.actions % ACTION_KINDS.len();
            let action = match k {
                1 if !data.is_empty() => {
                    let m = data[rng.random_range(0..data.len())];
                    let mut bytes = [0u8; 64];
                    rng.fill(&mut bytes[..]);
                    AdversaryAction::ForgeData { va: m.va, bytes, after: m.timestamp }
                }
                2 if !invals.is_empty() => {
                    let m = invals[rng.random_range(0..invals.len())];
                    AdversaryAction::DropInvalidate { va: m.va, dst: m.dst, after: m.timestamp }
                }
                3 if !stale.is_empty() => {
                    let (i, later) = stale[rng.random_range(0..stale.len())];
                    let mw = rec.mem_writes[i];
                    let at = later + rng.random_range(1..=4 * hop);
                    AdversaryAction::RevertMemory { node: mw.node, va: mw.va, old_state: mw.image, at }
                }
                _ => {
                    let m = rec.messages[rng.random_range(0..rec.messages.len())];
                    let at = m.timestamp + hop + rng.random_range(1..=20 * hop);
                    AdversaryAction::ReplayMsg { msg: m, at }
                }
            };
            let kind = action_kind(&action);
            let v = classify(&cfg.sim, &w, action)?;
            rep.by_kind.get_mut(kind).expect("known kind")[v as usize] += 1;
            rep.actions += 1;
        }
    }
    Ok(rep)
}
