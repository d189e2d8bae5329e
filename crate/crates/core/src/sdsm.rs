//! Seed and keystream management for secure block transfers.
//!
//! The trusted coherence manager hands out unique per-process seeds. Senders
//! turn them into pads ahead of time; a requestor learns the seed from the
//! manager while the request is being forwarded, so its own pad derivation
//! overlaps the data transfer. The comparison scheme keeps address-bound
//! pads only for recently modified blocks.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::crypto::{open_with_pad, Block, IntegrityError, Prf, SealedBlock, Seed};
use crate::{NodeId, Pid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    None,
    Sdsm,
    Baseline16,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::Sdsm => "sdsm",
            Scheme::Baseline16 => "baseline16",
        }
    }

    pub fn is_secure(self) -> bool {
        self != Scheme::None
    }
}

impl core::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Scheme::None),
            "sdsm" => Ok(Scheme::Sdsm),
            "baseline16" => Ok(Scheme::Baseline16),
            other => Err(alloc::format!("unknown scheme '{other}'")),
        }
    }
}

/// Per-process seed counters and per-sender queues of granted, unspent seeds.
#[derive(Clone, Debug, Default)]
pub struct TcmSeedLedger {
    counters: BTreeMap<Pid, u64>,
    queues: BTreeMap<(Pid, NodeId), VecDeque<Seed>>,
    issued: u64,
}

/// Result of routing one node miss through the manager.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteGrant {
    /// Sent to the requestor and named in the forwarded request.
    pub grant: Seed,
    /// Piggybacks on the forwarded request to refill the owner.
    pub replacement: Seed,
}

impl TcmSeedLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn next(&mut self, pid: Pid) -> Seed {
        let c = self.counters.entry(pid).or_insert(1);
        let s = Seed(*c);
        *c += 1;
        self.issued += 1;
        s
    }

    pub fn issue_seeds(&mut self, pid: Pid, sender: NodeId, n: usize) -> Vec<Seed> {
        let seeds: Vec<Seed> = (0..n).map(|_| self.next(pid)).collect();
        self.queues.entry((pid, sender)).or_default().extend(seeds.iter().copied());
        seeds
    }

    /// Fresh seed not tied to any sender queue (local re-encryption).
    pub fn fresh_seed(&mut self, pid: Pid) -> Seed {
        self.next(pid)
    }

    pub fn route_miss(&mut self, pid: Pid, owner: NodeId) -> RouteGrant {
        let grant = match self.queues.get_mut(&(pid, owner)).and_then(|q| q.pop_front()) {
            Some(s) => s,
            None => self.next(pid),
        };
        let replacement = self.next(pid);
        self.queues.entry((pid, owner)).or_default().push_back(replacement);
        RouteGrant { grant, replacement }
    }

    pub fn outstanding(&self, pid: Pid, sender: NodeId) -> Vec<Seed> {
        self.queues.get(&(pid, sender)).map(|q| q.iter().copied().collect()).unwrap_or_default()
    }

    pub fn issued_total(&self) -> u64 {
        self.issued
    }

    /// Next seed value that would be issued for `pid`.
    pub fn peek_counter(&self, pid: Pid) -> u64 {
        self.counters.get(&pid).copied().unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreparedPad {
    pub seed: Seed,
    pub pad: Block,
    pub ready_at: u64,
}

/// Sender-side pads prepared from granted seeds, in issue order.
#[derive(Clone, Debug)]
pub struct OutstandingKbFifo {
    capacity: usize,
    entries: VecDeque<PreparedPad>,
}

impl OutstandingKbFifo {
    pub fn new(capacity: usize) -> Self {
        OutstandingKbFifo { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends; a full FIFO hands the entry back.
    pub fn push(&mut self, entry: PreparedPad) -> Result<(), PreparedPad> {
        if self.is_full() {
            return Err(entry);
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// Removes the pad for `seed`. A pad leaves the FIFO once, so it can
    /// encrypt at most one block.
    pub fn take(&mut self, seed: Seed) -> Option<PreparedPad> {
        let i = self.entries.iter().position(|e| e.seed == seed)?;
        self.entries.remove(i)
    }

    pub fn seeds(&self) -> Vec<Seed> {
        self.entries.iter().map(|e| e.seed).collect()
    }
}

/// The requestor's single incoming-pad slot.
#[derive(Clone, Debug, Default)]
pub struct RequestorKbSlot {
    slot: Option<PreparedPad>,
}

/// Cycles the requestor waits for its pad after the data arrived.
pub fn requestor_stall(pad_ready: u64, data_arrival: u64) -> u64 {
    pad_ready.saturating_sub(data_arrival)
}

impl RequestorKbSlot {
    /// Begin deriving the pad for a granted seed; replaces any previous slot.
    pub fn start(&mut self, entry: PreparedPad) {
        self.slot = Some(entry);
    }

    pub fn current(&self) -> Option<&PreparedPad> {
        self.slot.as_ref()
    }

    /// Decrypt and verify arriving data. Returns the clear block and stall.
    pub fn complete(
        &mut self,
        prf: &Prf,
        data: &SealedBlock,
        data_arrival: u64,
    ) -> Result<(Block, u64), IntegrityError> {
        let entry = self.slot.take().ok_or(IntegrityError::MacMismatch)?;
        let clear = open_with_pad(prf, &entry.pad, data, entry.seed)?;
        Ok((clear, requestor_stall(entry.ready_at, data_arrival)))
    }
}

/// Recent remote-request counts per process, halved every `window` cycles.
#[derive(Clone, Debug)]
pub struct ProcessHeat {
    window: u64,
    epoch: u64,
    heat: BTreeMap<Pid, u64>,
}

const HEAT_UNIT: u64 = 1 << 16;

impl ProcessHeat {
    pub fn new(window: u64) -> Self {
        ProcessHeat { window: window.max(1), epoch: 0, heat: BTreeMap::new() }
    }

    fn advance(&mut self, now: u64) {
        let epoch = now / self.window;
        if epoch > self.epoch {
            let halvings = (epoch - self.epoch).min(63) as u32;
            for h in self.heat.values_mut() {
                *h >>= halvings;
            }
            self.epoch = epoch;
        }
    }

    pub fn record(&mut self, pid: Pid, now: u64) {
        self.advance(now);
        *self.heat.entry(pid).or_insert(0) += HEAT_UNIT;
    }

    /// Heat per known process, scaled so one fresh request is 65536.
    pub fn heats(&mut self, now: u64) -> Vec<(Pid, u64)> {
        self.advance(now);
        self.heat.iter().map(|(p, h)| (*p, *h)).collect()
    }
}

/// Split `capacity` slots proportionally to heat by largest remainder;
/// equal remainders favor the lower pid. All-zero heat splits evenly.
pub fn allocate_slots(capacity: usize, heats: &[(Pid, u64)]) -> Vec<(Pid, usize)> {
    if heats.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<(Pid, u64)> = heats.to_vec();
    sorted.sort_by_key(|(p, _)| *p);
    let total: u128 = sorted.iter().map(|(_, h)| *h as u128).sum();
    let weights: Vec<u128> = if total == 0 {
        sorted.iter().map(|_| 1).collect()
    } else {
        sorted.iter().map(|(_, h)| *h as u128).collect()
    };
    let total: u128 = weights.iter().sum();
    let cap = capacity as u128;
    let mut out: Vec<(Pid, usize)> = Vec::with_capacity(sorted.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(sorted.len());
    let mut given = 0usize;
    for (i, ((pid, _), w)) in sorted.iter().zip(weights.iter()).enumerate() {
        let share = cap * w / total;
        out.push((*pid, share as usize));
        given += share as usize;
        rems.push((cap * w % total, i));
    }
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in rems.into_iter().take(capacity - given) {
        out[i].1 += 1;
    }
    out
}

/// Address-bound pads for recently modified blocks, least recently
/// modified first.
#[derive(Clone, Debug)]
pub struct Baseline16Buffer {
    capacity: usize,
    entries: VecDeque<(u64, PreparedPad)>,
}

impl Baseline16Buffer {
    pub fn new(capacity: usize) -> Self {
        Baseline16Buffer { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn contains(&self, va: u64) -> bool {
        self.entries.iter().any(|(v, _)| *v == va)
    }

    /// A block was modified: keep (or create) its pad as most recent.
    /// `make` runs only when no pad exists yet.
    pub fn on_modify(&mut self, va: u64, make: impl FnOnce() -> PreparedPad) {
        if let Some(i) = self.entries.iter().position(|(v, _)| *v == va) {
            let e = self.entries.remove(i).expect("index in range");
            self.entries.push_back(e);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() >= self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((va, make()));
    }

    pub fn take(&mut self, va: u64) -> Option<PreparedPad> {
        let i = self.entries.iter().position(|(v, _)| *v == va)?;
        self.entries.remove(i).map(|(_, e)| e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// When a sender can put the data on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SendTiming {
    pub send_at: u64,
    /// Cycles spent waiting for a pad at the sender.
    pub kb_wait: u64,
    /// Cycles the requestor must still spend deriving its pad after the
    /// data arrives, independent of any overlap.
    pub requestor_kb_after_arrival: bool,
}

/// Sender timing with a pre-generated pad. A cached block goes out as soon
/// as the pad is ready; an uncached one first pays the memory fetch
/// (decryption with the cached local seed adds nothing).
pub fn sdsm_send(arrive: u64, cache_hit: bool, mem_cycles: u64, pad_ready: u64) -> SendTiming {
    let data_ready = if cache_hit { arrive } else { arrive + mem_cycles };
    let send_at = data_ready.max(pad_ready);
    SendTiming { send_at, kb_wait: send_at - data_ready, requestor_kb_after_arrival: false }
}

/// Sender timing in the comparison scheme.
///
/// `buffered` is the ready time of a buffered pad for this block, if any.
/// A modified block without one needs a fresh pad (its seed is sent to the
/// requestor right away). An unmodified block travels with its stored seed,
/// fetched from memory, and the requestor derives the pad after arrival.
pub fn baseline16_send(
    arrive: u64,
    cache_hit: bool,
    dirty: bool,
    mem_cycles: u64,
    kb_cycles: u64,
    buffered: Option<u64>,
) -> SendTiming {
    let data_ready = if cache_hit { arrive } else { arrive + mem_cycles };
    match (dirty, buffered) {
        (true, Some(ready)) => {
            let send_at = data_ready.max(ready);
            SendTiming { send_at, kb_wait: send_at - data_ready, requestor_kb_after_arrival: false }
        }
        (true, None) => SendTiming {
            send_at: data_ready + kb_cycles,
            kb_wait: kb_cycles,
            requestor_kb_after_arrival: false,
        },
        (false, _) => {
            // a cached clean block still needs its seed from memory
            let send_at = if cache_hit { arrive + mem_cycles } else { data_ready };
            SendTiming { send_at, kb_wait: send_at - data_ready, requestor_kb_after_arrival: true }
        }
    }
}

/// Audit of every (process, seed) pad use.
#[derive(Clone, Debug, Default)]
pub struct PadAudit {
    used: HashMap<(Pid, Seed), u64>,
    reuses: u64,
}

impl PadAudit {
    pub fn record(&mut self, pid: Pid, seed: Seed, va: u64) {
        if seed.is_initial() {
            return;
        }
        if self.used.insert((pid, seed), va).is_some() {
            self.reuses += 1;
        }
    }

    pub fn reuses(&self) -> u64 {
        self.reuses
    }

    pub fn uses(&self) -> usize {
        self.used.len()
    }
}
