use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::vec::Vec;
use core::cmp::Ordering;

use hashbrown::{HashMap, HashSet};

use super::cache::{Cache, CacheLine};
use super::oracle::{store_token, Commit};
use super::{DitMode, MemWrite, RunOptions, RunOutput, SimConfig, StatsReport};
use crate::coherence::{
    home_of, AdversaryAction, ChannelAuth, CoherenceMsg, Directory, LineState, MemImage, MsgKind, Payload, Plan,
    ReqKind, Request, Source, Trust, FLAG_ACCEPT, FLAG_FLUSH, FLAG_FROM_MEMORY, FLAG_LATE_KB,
};
use crate::crypto::{derive_pad, open_block, seal_block, seal_with_pad, Block, Key, Prf, Seed};
use crate::dit::{IvlcsTree, TransferEvent};
use crate::sdsm::{
    allocate_slots, baseline16_send, sdsm_send, Baseline16Buffer, OutstandingKbFifo, PadAudit, PreparedPad,
    ProcessHeat, RequestorKbSlot, Scheme, TcmSeedLedger,
};
use crate::smu::{secure_access, CacheLineMeta, HaltReason, OpKind};
use crate::workload::{TraceInstr, Workload};
use crate::{NodeId, Pid};

/// The one secure process every node runs.
const PID: Pid = 1;
const ZERO: Block = [0; 64];

enum Ev {
    Issue(usize),
    Complete(usize),
    /// A message whose sender finishes preparing it later.
    Depart(CoherenceMsg),
    Deliver(CoherenceMsg),
    Revert { node: usize, va: u64, image: MemImage },
    AckCheck,
}

struct Queued {
    time: u64,
    entity: u32,
    seq: u64,
    ev: Ev,
}

impl Queued {
    fn key(&self) -> (u64, u32, u64) {
        (self.time, self.entity, self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

#[derive(Clone, Copy)]
enum MemSource {
    Local,
    Flush(u64),
    Evict(u64),
}

struct Txn {
    va: u64,
    kind: ReqKind,
    upgrade: bool,
    resolved: bool,
    data: Option<Block>,
    meta: u64,
    remote: bool,
    acks_expected: u32,
    acks: u32,
    exclusive: bool,
    ready_at: u64,
    scheduled: bool,
}

struct Node {
    thread: Vec<TraceInstr>,
    pc: usize,
    issued_at: u64,
    done_at: Option<u64>,
    cache: Cache,
    /// Modified lines waiting for a writeback grant.
    wb: BTreeMap<u64, Block>,
    wb_wait: Option<u64>,
    txn: Option<Txn>,
    fifo: OutstandingKbFifo,
    backlog: VecDeque<Seed>,
    kb_free: u64,
    slot: RequestorKbSlot,
    heat: ProcessHeat,
    b16: Baseline16Buffer,
    mem: HashMap<u64, MemImage>,
    mem_seed: HashMap<u64, Seed>,
    mem_prf: Prf,
    local_seed: u64,
    mem_floor: HashMap<u64, u64>,
    wb_arrivals: HashMap<u64, u64>,
    deferred: Vec<CoherenceMsg>,
    dit: Option<IvlcsTree>,
}

#[derive(Default)]
struct Acc {
    alu: (u64, u64),
    load: (u64, u64),
    store: (u64, u64),
    per_node: Vec<(u64, u64)>,
    evict_delay: u64,
    fetch_delay: u64,
}

pub(super) struct Sim<'a> {
    cfg: &'a SimConfig,
    trust: Trust,
    n: u32,
    dir_id: u32,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Queued>,
    nodes: Vec<Node>,
    dir: Directory,
    ledger: TcmSeedLedger,
    grants: HashMap<u64, u64>,
    auth: ChannelAuth,
    ack_wait: VecDeque<(u64, u32, u64)>,
    acked: HashSet<(u32, u64)>,
    ack_timer: bool,
    prf: Prf,
    audit: PadAudit,
    actions: Vec<(AdversaryAction, bool)>,
    record: bool,
    messages: Vec<CoherenceMsg>,
    mem_writes: Vec<MemWrite>,
    commits: Vec<Commit>,
    st: StatsReport,
    acc: Acc,
    touched: BTreeSet<u64>,
}

fn read_word(b: &Block) -> u64 {
    let mut w = [0u8; 8];
    w.copy_from_slice(&b[..8]);
    u64::from_le_bytes(w)
}

impl<'a> Sim<'a> {
    pub(super) fn new(cfg: &'a SimConfig, workload: &Workload, opts: &RunOptions) -> Self {
        let n = cfg.nodes;
        let prf = Prf::new(Key::from_label(0x5ec0_0000_0000 ^ cfg.rng_seed));
        let nodes = (0..n as usize)
            .map(|i| {
                let mut thread = workload.threads.get(i).cloned().unwrap_or_default();
                for ins in thread.iter_mut() {
                    *ins = match *ins {
                        TraceInstr::Load(va) => TraceInstr::Load(va & !63),
                        TraceInstr::Store(va) => TraceInstr::Store(va & !63),
                        TraceInstr::Alu => TraceInstr::Alu,
                    };
                }
                Node {
                    thread,
                    pc: 0,
                    issued_at: 0,
                    done_at: None,
                    cache: Cache::new(cfg.cache_lines),
                    wb: BTreeMap::new(),
                    wb_wait: None,
                    txn: None,
                    fifo: OutstandingKbFifo::new(cfg.fifo_capacity),
                    backlog: VecDeque::new(),
                    kb_free: 0,
                    slot: RequestorKbSlot::default(),
                    heat: ProcessHeat::new(super::HEAT_WINDOW),
                    b16: Baseline16Buffer::new(cfg.baseline16_buffer),
                    mem: HashMap::new(),
                    mem_seed: HashMap::new(),
                    mem_prf: prf.subkey(0x3e30_0000 + i as u64),
                    local_seed: 0,
                    mem_floor: HashMap::new(),
                    wb_arrivals: HashMap::new(),
                    deferred: Vec::new(),
                    dit: match cfg.dit {
                        DitMode::Off => None,
                        DitMode::Tree(v) => Some(IvlcsTree::new(v, prf.subkey(0xd170_0000 + i as u64))),
                    },
                }
            })
            .collect();
        let touched = workload.threads.iter().flatten().filter_map(|i| i.va()).map(|va| va & !63).collect();
        Sim {
            cfg,
            trust: cfg.trust(),
            n,
            dir_id: crate::coherence::directory_id(n),
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            dir: Directory::new(n),
            ledger: TcmSeedLedger::new(),
            grants: HashMap::new(),
            auth: ChannelAuth::new(prf.subkey(0xc4a7)),
            ack_wait: VecDeque::new(),
            acked: HashSet::new(),
            ack_timer: false,
            prf,
            audit: PadAudit::default(),
            actions: opts.actions.iter().cloned().map(|a| (a, false)).collect(),
            record: opts.record,
            messages: Vec::new(),
            mem_writes: Vec::new(),
            commits: Vec::new(),
            st: StatsReport::default(),
            acc: Acc { per_node: alloc::vec![(0, 0); n as usize], ..Acc::default() },
            touched,
        }
    }

    fn schedule(&mut self, time: u64, entity: u32, ev: Ev) {
        self.seq += 1;
        self.queue.push(Queued { time, entity, seq: self.seq, ev });
    }

    fn halt(&mut self, reason: HaltReason) {
        if self.st.halted.is_none() {
            self.st.halted = Some(reason);
            self.st.halts[reason.code() as usize - 1] += 1;
        }
    }

    fn tamper(&mut self) {
        self.st.tamper_detections += 1;
        self.halt(HaltReason::IntegrityError);
    }

    fn secure(&self) -> bool {
        self.cfg.scheme.is_secure()
    }

    fn home(&self, va: u64) -> usize {
        home_of(va, self.n) as usize
    }

    pub(super) fn run(mut self) -> RunOutput {
        for i in 0..self.nodes.len() {
            if self.nodes[i].thread.is_empty() {
                self.nodes[i].done_at = Some(0);
            } else {
                self.schedule(0, i as u32, Ev::Issue(i));
            }
        }
        if self.cfg.scheme == Scheme::Sdsm {
            // provisioning before the first instruction
            for i in 0..self.nodes.len() {
                let seeds = self.ledger.issue_seeds(PID, i as NodeId, self.cfg.fifo_capacity);
                self.nodes[i].backlog.extend(seeds);
                self.refill(i);
            }
        }
        let actions: Vec<AdversaryAction> = self.actions.iter().map(|(a, _)| a.clone()).collect();
        for a in actions {
            match a {
                AdversaryAction::ReplayMsg { msg, at } => self.schedule(at, msg.dst, Ev::Deliver(msg)),
                AdversaryAction::RevertMemory { node, va, old_state, at } => {
                    self.schedule(at, node, Ev::Revert { node: node as usize, va, image: old_state })
                }
                _ => {}
            }
        }
        while let Some(q) = self.queue.pop() {
            debug_assert!(q.time >= self.now, "event from the past");
            self.now = q.time;
            match q.ev {
                Ev::Issue(i) => self.issue(i),
                Ev::Complete(i) => self.finish_txn(i),
                Ev::Depart(m) => self.send(self.now, m),
                Ev::Deliver(m) => self.deliver(m),
                Ev::Revert { node, va, image } => {
                    if node < self.nodes.len() {
                        self.nodes[node].mem.insert(va, image);
                    }
                }
                Ev::AckCheck => self.ack_check(),
            }
            if self.st.halted.is_some() {
                break;
            }
        }
        self.finish()
    }

    // ---- network ----

    fn account(&mut self, m: &CoherenceMsg) {
        self.st.messages += 1;
        self.st.traffic_bytes += m.wire_bytes();
        if m.src == self.dir_id || m.dst == self.dir_id {
            self.st.directory_messages += 1;
        }
    }

    fn expect_ack(&mut self, at: u64, m: &CoherenceMsg) {
        let deadline = at + 4 * self.cfg.hop_cycles + 1;
        self.ack_wait.push_back((deadline, m.dst, m.seq));
        if !self.ack_timer {
            self.ack_timer = true;
            self.schedule(deadline, self.dir_id, Ev::AckCheck);
        }
    }

    fn ack_check(&mut self) {
        self.ack_timer = false;
        while let Some(&(deadline, dst, seq)) = self.ack_wait.front() {
            if self.acked.remove(&(dst, seq)) {
                self.ack_wait.pop_front();
            } else if deadline <= self.now {
                self.tamper();
                return;
            } else {
                break;
            }
        }
        if let Some(&(deadline, _, _)) = self.ack_wait.front() {
            self.ack_timer = true;
            self.schedule(deadline, self.dir_id, Ev::AckCheck);
        }
    }

    fn send(&mut self, at: u64, mut msg: CoherenceMsg) {
        if at > self.now {
            return self.schedule(at, msg.src, Ev::Depart(msg));
        }
        msg.timestamp = at;
        if msg.kind == MsgKind::Invalidate {
            let hit = self.actions.iter().position(|(a, used)| {
                !used
                    && matches!(a, AdversaryAction::DropInvalidate { va, dst, after }
                        if *va == msg.va && *dst == msg.dst && at >= *after)
            });
            if let Some(i) = hit {
                self.actions[i].1 = true;
                if self.trust == Trust::Tcm {
                    self.auth.stamp(&mut msg);
                    self.expect_ack(at, &msg);
                }
                self.account(&msg);
                if self.record {
                    self.messages.push(msg);
                }
                if self.trust != Trust::Tcm {
                    // the untrusted directory answers for the victim
                    self.dir.keep_phantom(msg.va, msg.dst);
                    let ack = CoherenceMsg::new(MsgKind::InvAck, msg.dst, msg.requestor, msg.va, msg.requestor);
                    self.send(at, ack);
                }
                return;
            }
        }
        if self.trust == Trust::Tcm {
            self.auth.stamp(&mut msg);
            if msg.src == self.dir_id && msg.dst != self.dir_id {
                self.expect_ack(at, &msg);
            }
        }
        if msg.kind.carries_data() && msg.payload != Payload::None {
            let hit = self.actions.iter().position(|(a, used)| {
                !used && matches!(a, AdversaryAction::ForgeData { va, after, .. } if *va == msg.va && at >= *after)
            });
            if let Some(i) = hit {
                self.actions[i].1 = true;
                if let AdversaryAction::ForgeData { bytes, .. } = self.actions[i].0 {
                    msg.payload = match msg.payload {
                        Payload::Clear(_) => Payload::Clear(bytes),
                        Payload::Sealed(mut s) => {
                            s.cipher = bytes;
                            Payload::Sealed(s)
                        }
                        Payload::None => Payload::None,
                    };
                }
            }
        }
        self.account(&msg);
        if self.record {
            self.messages.push(msg);
        }
        let t = if msg.src == msg.dst { at } else { at + self.cfg.hop_cycles };
        self.schedule(t, msg.dst, Ev::Deliver(msg));
    }

    fn deliver(&mut self, msg: CoherenceMsg) {
        if self.trust == Trust::Tcm {
            if self.auth.verify(&msg).is_err() {
                self.tamper();
                return;
            }
            if msg.src == self.dir_id && msg.dst < self.n {
                let mut ack = CoherenceMsg::new(MsgKind::Ack, msg.dst, self.dir_id, msg.va, msg.requestor);
                ack.version = msg.seq;
                self.send(self.now, ack);
            }
        }
        if msg.dst == self.dir_id {
            self.dir_receive(msg);
        } else if msg.dst < self.n {
            self.node_receive(msg.dst as usize, msg);
        }
    }

    // ---- directory / coherence manager ----

    fn dir_receive(&mut self, msg: CoherenceMsg) {
        if msg.src >= self.n {
            return;
        }
        let va = msg.va;
        match msg.kind {
            MsgKind::ReadReq | MsgKind::WriteReq => {
                let kind = if msg.kind == MsgKind::ReadReq { ReqKind::Read } else { ReqKind::Write };
                let req = Request { from: msg.src, kind, va, upgrade: msg.upgrade };
                if let Some(p) = self.dir.handle_request(req) {
                    self.dispatch(p, None);
                }
            }
            MsgKind::Unblock => {
                if let Some(p) = self.dir.unblock(va, msg.src) {
                    self.dispatch(p, None);
                }
            }
            MsgKind::Redirect => {
                if let Some(p) = self.dir.redirect(va, msg.src) {
                    self.dispatch(p, Some((msg.acks, msg.exclusive)));
                }
            }
            MsgKind::WbReq => {
                let mut g = CoherenceMsg::new(MsgKind::WbGrant, self.dir_id, msg.src, va, msg.src);
                if self.dir.writeback(va, msg.src) {
                    let c = self.grants.entry(va).or_insert(0);
                    *c += 1;
                    g.version = *c;
                    g.flags = FLAG_ACCEPT;
                    if self.cfg.scheme == Scheme::Sdsm {
                        let r = self.ledger.route_miss(PID, msg.src);
                        g.seed = Some(r.grant);
                        g.replacement = Some(r.replacement);
                    }
                }
                self.send(self.now, g);
            }
            MsgKind::Ack => {
                self.acked.insert((msg.src, msg.version));
            }
            _ => {}
        }
    }

    fn dispatch(&mut self, plan: Plan, carried: Option<(u32, bool)>) {
        let now = self.now;
        let va = plan.req.va;
        let r = plan.req.from;
        let (acks, exclusive) = carried.unwrap_or((plan.acks_expected(), plan.exclusive));
        for &s in &plan.invalidate {
            let m = CoherenceMsg::new(MsgKind::Invalidate, self.dir_id, s, va, r);
            self.send(now, m);
        }
        let Some(src) = plan.source else {
            let mut m = CoherenceMsg::new(MsgKind::Ack, self.dir_id, r, va, r);
            m.acks = acks;
            m.exclusive = true;
            self.send(now, m);
            return;
        };
        let target = src.node();
        let kind = if plan.req.kind == ReqKind::Read { MsgKind::FwdRead } else { MsgKind::FwdWrite };
        let mut m = CoherenceMsg::new(kind, self.dir_id, target, va, r);
        m.req_kind = plan.req.kind;
        m.acks = acks;
        m.exclusive = exclusive;
        m.version = self.grants.get(&va).copied().unwrap_or(0);
        if matches!(src, Source::HomeMemory(_)) {
            m.flags |= FLAG_FROM_MEMORY;
        }
        if target != r {
            self.st.requests_forwarded += 1;
            if self.cfg.scheme == Scheme::Sdsm {
                let g = self.ledger.route_miss(PID, target);
                m.seed = Some(g.grant);
                m.replacement = Some(g.replacement);
                let mut sg = CoherenceMsg::new(MsgKind::SeedGrant, self.dir_id, r, va, r);
                sg.seed = Some(g.grant);
                self.send(now, sg);
            }
        }
        self.send(now, m);
    }

    // ---- keystream ----

    fn kb_job(&mut self, i: usize) -> u64 {
        let node = &mut self.nodes[i];
        let ready = self.now.max(node.kb_free) + self.cfg.kb_cycles;
        node.kb_free = ready;
        ready
    }

    fn refill(&mut self, i: usize) {
        let cap = self.cfg.fifo_capacity;
        let heats = self.nodes[i].heat.heats(self.now);
        let limit = if heats.is_empty() {
            cap
        } else {
            allocate_slots(cap, &heats).iter().find(|(p, _)| *p == PID).map_or(cap, |x| x.1)
        };
        while self.nodes[i].fifo.len() < limit {
            let Some(seed) = self.nodes[i].backlog.pop_front() else { break };
            let ready_at = self.kb_job(i);
            let pad = derive_pad(&self.prf, seed, 0);
            let _ = self.nodes[i].fifo.push(PreparedPad { seed, pad, ready_at });
        }
    }

    /// The pad for a granted seed: prepared if possible, else derived now.
    fn take_pad(&mut self, i: usize, seed: Seed) -> PreparedPad {
        if let Some(p) = self.nodes[i].fifo.take(seed) {
            return p;
        }
        self.nodes[i].backlog.retain(|s| *s != seed);
        let ready_at = self.kb_job(i);
        PreparedPad { seed, pad: derive_pad(&self.prf, seed, 0), ready_at }
    }

    fn b16_modified(&mut self, i: usize, va: u64) {
        if self.cfg.scheme != Scheme::Baseline16 {
            return;
        }
        if self.nodes[i].b16.contains(va) {
            self.nodes[i].b16.on_modify(va, || unreachable!("present entries are refreshed"));
            return;
        }
        let seed = self.ledger.fresh_seed(PID);
        let ready_at = self.kb_job(i);
        let pad = derive_pad(&self.prf, seed, va);
        self.nodes[i].b16.on_modify(va, || PreparedPad { seed, pad, ready_at });
    }

    // ---- home memory ----

    fn mem_read(&mut self, i: usize, va: u64) -> Option<Block> {
        let secure = self.secure();
        let node = &self.nodes[i];
        let expected = node.mem_seed.get(&va).copied().unwrap_or(Seed(0));
        match (node.mem.get(&va), secure) {
            (None, _) if expected == Seed(0) => Some(ZERO),
            (None, _) => None,
            (Some(MemImage::Clear(b)), false) => Some(*b),
            (Some(MemImage::Sealed(s)), true) => open_block(&node.mem_prf, s, expected).ok(),
            _ => None,
        }
    }

    /// Writes a block into home memory. Local writes and read flushes are
    /// always the newest data; an eviction applies only if no write that
    /// already reflects its grant got there first.
    fn mem_store(&mut self, i: usize, va: u64, data: Block, w: MemSource) {
        let secure = self.secure();
        let granted = self.grants.get(&va).copied().unwrap_or(0);
        let node = &mut self.nodes[i];
        let floor = node.mem_floor.entry(va).or_insert(0);
        match w {
            MemSource::Local => *floor = (*floor).max(granted),
            MemSource::Flush(v) => *floor = (*floor).max(v),
            MemSource::Evict(v) if v > *floor => *floor = v,
            MemSource::Evict(_) => return,
        }
        let image = if secure {
            node.local_seed += 1;
            let seed = Seed(node.local_seed);
            node.mem_seed.insert(va, seed);
            MemImage::Sealed(seal_block(&node.mem_prf, seed, va, &data))
        } else {
            MemImage::Clear(data)
        };
        node.mem.insert(va, image);
        if self.record {
            self.mem_writes.push(MemWrite { time: self.now, node: i as NodeId, va, image });
        }
    }

    fn dit_apply(&mut self, i: usize, ev: TransferEvent) {
        if let Some(t) = self.nodes[i].dit.as_mut() {
            if t.apply(ev).is_err() {
                self.tamper();
            }
        }
    }

    // ---- node side ----

    fn node_receive(&mut self, i: usize, msg: CoherenceMsg) {
        match msg.kind {
            MsgKind::FwdRead | MsgKind::FwdWrite => self.serve_forward(i, msg),
            MsgKind::Invalidate => {
                if self.nodes[i].cache.remove(msg.va).is_some() && self.home(msg.va) != i {
                    self.dit_apply(i, TransferEvent::Invalidate { va: msg.va });
                }
                let ack = CoherenceMsg::new(MsgKind::InvAck, i as u32, msg.requestor, msg.va, msg.requestor);
                self.send(self.now, ack);
            }
            MsgKind::InvAck => {
                if let Some(t) = self.nodes[i].txn.as_mut().filter(|t| t.va == msg.va) {
                    t.acks += 1;
                    self.try_complete(i);
                }
            }
            MsgKind::DataResp => self.data_arrival(i, msg),
            MsgKind::SeedGrant => {
                if self.cfg.scheme == Scheme::Sdsm && self.nodes[i].txn.as_ref().is_some_and(|t| t.va == msg.va) {
                    if let Some(seed) = msg.seed {
                        let ready_at = self.now + self.cfg.kb_cycles;
                        let pad = derive_pad(&self.prf, seed, 0);
                        self.nodes[i].slot.start(PreparedPad { seed, pad, ready_at });
                    }
                }
            }
            MsgKind::Ack => {
                let now = self.now;
                if let Some(t) = self.nodes[i].txn.as_mut().filter(|t| t.va == msg.va && !t.resolved) {
                    t.resolved = true;
                    t.acks_expected = msg.acks;
                    t.exclusive = msg.exclusive;
                    t.ready_at = t.ready_at.max(now);
                    self.try_complete(i);
                }
            }
            MsgKind::WbGrant => self.wb_grant(i, msg),
            MsgKind::WbData => self.wb_data(i, msg),
            _ => {}
        }
    }

    fn serve_forward(&mut self, i: usize, msg: CoherenceMsg) {
        let now = self.now;
        let va = msg.va;
        let r = msg.requestor as usize;
        let is_home = self.home(va) == i;
        let cached = self.nodes[i].cache.get(va).map(|l| (l.state, l.data));
        let buffered = self.nodes[i].wb.get(&va).copied();
        let from_memory = cached.is_none() && buffered.is_none() && is_home;
        if from_memory && msg.version > self.nodes[i].wb_arrivals.get(&va).copied().unwrap_or(0) {
            self.nodes[i].deferred.push(msg);
            return;
        }
        let (data, hit, dirty) = if let Some((st, d)) = cached {
            (d, true, st == LineState::Modified)
        } else if let Some(d) = buffered {
            (d, true, true)
        } else if is_home {
            match self.mem_read(i, va) {
                Some(b) => (b, false, false),
                None => return self.tamper(),
            }
        } else {
            self.st.requests_redirected += 1;
            if self.cfg.scheme == Scheme::Sdsm {
                if let Some(s) = msg.seed {
                    // the granted seed is spent either way
                    let _ = self.nodes[i].fifo.take(s);
                    self.nodes[i].backlog.retain(|x| *x != s);
                }
                self.nodes[i].backlog.extend(msg.replacement);
                self.refill(i);
            }
            let mut m = CoherenceMsg::new(MsgKind::Redirect, i as u32, self.dir_id, va, msg.requestor);
            m.acks = msg.acks;
            m.exclusive = msg.exclusive;
            m.req_kind = msg.req_kind;
            return self.send(now, m);
        };

        if r == i {
            // own request served from local memory
            let ready = now + if hit { 0 } else { self.cfg.mem_cycles };
            let secure = self.secure();
            if let Some(t) = self.nodes[i].txn.as_mut().filter(|t| t.va == va && !t.resolved) {
                t.resolved = true;
                t.data = Some(data);
                t.acks_expected = msg.acks;
                t.exclusive = msg.exclusive;
                t.ready_at = ready;
                t.remote = false;
                let _ = secure;
                self.try_complete(i);
            }
            return;
        }

        self.st.requests_served += 1;
        let mem = self.cfg.mem_cycles;
        let (send_at, kb_wait, payload, late) = match self.cfg.scheme {
            Scheme::None => (if hit { now } else { now + mem }, 0, Payload::Clear(data), false),
            Scheme::Sdsm => {
                let seed = match msg.seed {
                    Some(s) => s,
                    None => self.ledger.fresh_seed(PID),
                };
                let pad = self.take_pad(i, seed);
                let t = sdsm_send(now, hit, mem, pad.ready_at);
                self.nodes[i].backlog.extend(msg.replacement);
                self.nodes[i].heat.record(PID, now);
                self.refill(i);
                self.audit.record(PID, seed, va);
                let sealed = seal_with_pad(&self.prf, &pad.pad, seed, va, &data);
                (t.send_at, t.kb_wait, Payload::Sealed(sealed), false)
            }
            Scheme::Baseline16 => {
                let buf = if dirty { self.nodes[i].b16.take(va) } else { None };
                let t = baseline16_send(now, hit, dirty, mem, self.cfg.kb_cycles, buf.map(|p| p.ready_at));
                let seed = match buf {
                    Some(p) => p.seed,
                    None => self.ledger.fresh_seed(PID),
                };
                let pad = buf.map_or_else(|| derive_pad(&self.prf, seed, va), |p| p.pad);
                self.audit.record(PID, seed, va);
                let sealed = seal_with_pad(&self.prf, &pad, seed, va, &data);
                (t.send_at, t.kb_wait, Payload::Sealed(sealed), t.requestor_kb_after_arrival)
            }
        };
        if kb_wait > 0 {
            self.st.evict_kb_waits += 1;
            self.acc.evict_delay += kb_wait;
        }
        if send_at == now {
            self.st.served_immediately += 1;
        }

        if let Some((st, _)) = cached {
            if msg.kind == MsgKind::FwdRead {
                if st != LineState::Shared {
                    if let Some(l) = self.nodes[i].cache.get_mut(va) {
                        l.state = LineState::Shared;
                    }
                    if !is_home {
                        self.dit_apply(i, TransferEvent::RevokeWrite { va });
                    }
                }
                if st == LineState::Modified {
                    // memory takes the same block the requestor gets
                    if is_home {
                        self.mem_store(i, va, data, MemSource::Flush(msg.version));
                    } else {
                        let mut wb = CoherenceMsg::new(MsgKind::WbData, i as u32, self.home(va) as u32, va, i as u32);
                        wb.payload = payload;
                        wb.version = msg.version;
                        wb.flags = FLAG_FLUSH;
                        self.send(send_at, wb);
                    }
                }
            } else {
                self.nodes[i].cache.remove(va);
                if !is_home {
                    self.dit_apply(i, TransferEvent::Invalidate { va });
                }
            }
        }
        let mut d = CoherenceMsg::new(MsgKind::DataResp, i as u32, r as u32, va, msg.requestor);
        d.req_kind = msg.req_kind;
        d.acks = msg.acks;
        d.exclusive = msg.exclusive;
        d.payload = payload;
        if late {
            d.flags |= FLAG_LATE_KB;
        }
        self.send(send_at, d);
    }

    fn data_arrival(&mut self, i: usize, msg: CoherenceMsg) {
        let now = self.now;
        if !self.nodes[i].txn.as_ref().is_some_and(|t| t.va == msg.va && !t.resolved) {
            return;
        }
        let (data, stall, meta) = match (msg.payload, self.cfg.scheme) {
            (Payload::Clear(b), Scheme::None) => (b, 0, 0),
            (Payload::Sealed(s), Scheme::Sdsm) => match self.nodes[i].slot.complete(&self.prf, &s, now) {
                Ok((b, stall)) => (b, stall, s.seed.0),
                Err(_) => return self.tamper(),
            },
            (Payload::Sealed(s), Scheme::Baseline16) => match open_block(&self.prf, &s, s.seed) {
                Ok(b) => {
                    let stall = if msg.flags & FLAG_LATE_KB != 0 { self.cfg.kb_cycles } else { 0 };
                    (b, stall, s.seed.0)
                }
                Err(_) => return self.tamper(),
            },
            (Payload::None, _) => return,
            _ => return self.tamper(),
        };
        if stall > 0 {
            self.st.fetch_kb_waits += 1;
            self.acc.fetch_delay += stall;
        }
        let t = self.nodes[i].txn.as_mut().expect("checked above");
        t.resolved = true;
        t.data = Some(data);
        t.meta = meta;
        t.acks_expected = msg.acks;
        t.exclusive = msg.exclusive;
        t.remote = msg.src != i as u32;
        t.ready_at = now + stall;
        self.try_complete(i);
    }

    fn try_complete(&mut self, i: usize) {
        let now = self.now;
        let Some(t) = self.nodes[i].txn.as_mut() else { return };
        if !t.resolved || t.acks < t.acks_expected || t.scheduled {
            return;
        }
        if t.ready_at > now {
            t.scheduled = true;
            let at = t.ready_at;
            self.schedule(at, i as u32, Ev::Complete(i));
            return;
        }
        self.finish_txn(i);
    }

    fn finish_txn(&mut self, i: usize) {
        let now = self.now;
        let ok = self.nodes[i]
            .txn
            .as_ref()
            .is_some_and(|t| t.resolved && t.acks >= t.acks_expected && t.ready_at <= now);
        if !ok {
            return;
        }
        let t = self.nodes[i].txn.take().expect("checked");
        let va = t.va;
        let is_home = self.home(va) == i;
        let state = match t.kind {
            ReqKind::Read if t.exclusive => LineState::Exclusive,
            ReqKind::Read => LineState::Shared,
            ReqKind::Write => LineState::Modified,
        };
        let upgrade_only = t.data.is_none();
        let data = match t.data {
            Some(d) => d,
            None => self.nodes[i].cache.get(va).map_or(ZERO, |l| l.data),
        };
        let was_modified = self.nodes[i].cache.get(va).is_some_and(|l| l.state == LineState::Modified);
        self.install(i, va, state, data);
        if t.remote {
            self.st.node_misses += 1;
        }
        if !is_home {
            let ev = if upgrade_only {
                TransferEvent::GrantWrite { va }
            } else {
                TransferEvent::Arrival { va, write: state == LineState::Modified, meta: t.meta }
            };
            self.dit_apply(i, ev);
        }
        if state == LineState::Modified && !was_modified {
            self.b16_modified(i, va);
        }
        let unblock = CoherenceMsg::new(MsgKind::Unblock, i as u32, self.dir_id, va, i as u32);
        self.send(now, unblock);
        let _ = t.upgrade;
        if self.effect(i, va, t.kind == ReqKind::Write) {
            self.retire(i, now);
        }
    }

    fn install(&mut self, i: usize, va: u64, state: LineState, data: Block) {
        let auth = self.secure();
        if let Some((vva, line)) = self.nodes[i].cache.insert(va, state, data, auth) {
            self.evict(i, vva, line);
        }
    }

    fn evict(&mut self, i: usize, va: u64, line: CacheLine) {
        if self.home(va) == i {
            if line.state == LineState::Modified {
                self.mem_store(i, va, line.data, MemSource::Local);
                let meta = self.nodes[i].mem_seed.get(&va).map_or(0, |s| s.0);
                self.dit_apply(i, TransferEvent::EvictDirty { va, meta });
            }
            self.dir.local_evict(i as NodeId, va);
            return;
        }
        self.dit_apply(i, TransferEvent::Invalidate { va });
        if line.state == LineState::Modified {
            self.nodes[i].wb.insert(va, line.data);
            let m = CoherenceMsg::new(MsgKind::WbReq, i as u32, self.dir_id, va, i as u32);
            self.send(self.now, m);
        }
    }

    fn wb_grant(&mut self, i: usize, msg: CoherenceMsg) {
        let va = msg.va;
        let Some(data) = self.nodes[i].wb.remove(&va) else { return };
        if msg.flags & FLAG_ACCEPT != 0 {
            let mut send_at = self.now;
            let payload = match self.cfg.scheme {
                Scheme::None => Payload::Clear(data),
                Scheme::Sdsm => {
                    let seed = match msg.seed {
                        Some(s) => s,
                        None => self.ledger.fresh_seed(PID),
                    };
                    let pad = self.take_pad(i, seed);
                    send_at = send_at.max(pad.ready_at);
                    self.nodes[i].backlog.extend(msg.replacement);
                    self.refill(i);
                    self.audit.record(PID, seed, va);
                    Payload::Sealed(seal_with_pad(&self.prf, &pad.pad, seed, va, &data))
                }
                Scheme::Baseline16 => {
                    let (seed, pad) = match self.nodes[i].b16.take(va) {
                        Some(p) => {
                            send_at = send_at.max(p.ready_at);
                            (p.seed, p.pad)
                        }
                        None => {
                            let s = self.ledger.fresh_seed(PID);
                            (s, derive_pad(&self.prf, s, va))
                        }
                    };
                    self.audit.record(PID, seed, va);
                    Payload::Sealed(seal_with_pad(&self.prf, &pad, seed, va, &data))
                }
            };
            let mut wb = CoherenceMsg::new(MsgKind::WbData, i as u32, self.home(va) as u32, va, i as u32);
            wb.payload = payload;
            wb.version = msg.version;
            self.send(send_at, wb);
        }
        if self.nodes[i].wb_wait == Some(va) {
            self.nodes[i].wb_wait = None;
            self.schedule(self.now, i as u32, Ev::Issue(i));
        }
    }

    fn wb_data(&mut self, i: usize, msg: CoherenceMsg) {
        let va = msg.va;
        let flush = msg.flags & FLAG_FLUSH != 0;
        if !flush {
            *self.nodes[i].wb_arrivals.entry(va).or_insert(0) += 1;
        }
        let data = match (msg.payload, self.secure()) {
            (Payload::Clear(b), false) => Some(b),
            (Payload::Sealed(s), true) => match open_block(&self.prf, &s, s.seed) {
                Ok(b) => Some(b),
                Err(_) => return self.tamper(),
            },
            (Payload::None, _) => None,
            _ => return self.tamper(),
        };
        if let Some(d) = data {
            let src = if flush { MemSource::Flush(msg.version) } else { MemSource::Evict(msg.version) };
            self.mem_store(i, va, d, src);
        }
        if !flush {
            let arrived = self.nodes[i].wb_arrivals[&va];
            let (ready, wait): (Vec<CoherenceMsg>, Vec<CoherenceMsg>) =
                self.nodes[i].deferred.drain(..).partition(|m| m.va == va && m.version <= arrived);
            self.nodes[i].deferred = wait;
            for m in ready {
                self.serve_forward(i, m);
            }
        }
    }

    /// Performs the load or store on the cached line. False when the run halted.
    fn effect(&mut self, i: usize, va: u64, store: bool) -> bool {
        let secure = self.secure();
        let idx = self.nodes[i].pc;
        let Some(line) = self.nodes[i].cache.get_mut(va) else {
            self.halt(HaltReason::SecureAccessViolation);
            return false;
        };
        let mut meta = CacheLineMeta {
            va,
            owner_pid: if line.auth { Some(PID) } else { None },
            auth: line.auth,
            dirty: line.state == LineState::Modified,
        };
        let op = if store { OpKind::Store } else { OpKind::Load };
        if let Err(r) = secure_access(&mut meta, secure, Some(PID), op) {
            self.halt(r);
            return false;
        }
        let value = if store {
            let v = store_token(i as NodeId, idx);
            line.data[..8].copy_from_slice(&v.to_le_bytes());
            v
        } else {
            read_word(&line.data)
        };
        self.commits.push(Commit { time: self.now, node: i as NodeId, idx, va, store, value });
        true
    }

    /// The memory instruction at `pc` completes at `at`.
    fn retire(&mut self, i: usize, at: u64) {
        let node = &mut self.nodes[i];
        let lat = at - node.issued_at;
        let slot = match node.thread[node.pc] {
            TraceInstr::Store(_) => &mut self.acc.store,
            _ => &mut self.acc.load,
        };
        slot.0 += 1;
        slot.1 += lat;
        self.acc.per_node[i].0 += 1;
        self.acc.per_node[i].1 += lat;
        node.pc += 1;
        self.schedule(at, i as u32, Ev::Issue(i));
    }

    fn issue(&mut self, i: usize) {
        let now = self.now;
        let alu = self.cfg.alu_cycles;
        let node = &mut self.nodes[i];
        if node.txn.is_some() || node.wb_wait.is_some() || node.done_at.is_some() {
            return;
        }
        let mut t = now;
        while node.pc < node.thread.len() && node.thread[node.pc] == TraceInstr::Alu {
            t += alu;
            node.pc += 1;
            self.acc.alu.0 += 1;
            self.acc.alu.1 += alu;
            self.acc.per_node[i].0 += 1;
            self.acc.per_node[i].1 += alu;
        }
        if node.pc == node.thread.len() {
            node.done_at = Some(t);
            return;
        }
        if t > now {
            self.schedule(t, i as u32, Ev::Issue(i));
            return;
        }
        node.issued_at = now;
        let (va, store) = match node.thread[node.pc] {
            TraceInstr::Load(va) => (va, false),
            TraceInstr::Store(va) => (va, true),
            TraceInstr::Alu => unreachable!("skipped above"),
        };
        let mut upgrade = false;
        if let Some(line) = node.cache.touch(va) {
            match (store, line.state) {
                (false, _) | (true, LineState::Modified) => {
                    if self.effect(i, va, store) {
                        self.retire(i, now + alu);
                    }
                    return;
                }
                (true, LineState::Exclusive) => {
                    line.state = LineState::Modified;
                    self.b16_modified(i, va);
                    if self.effect(i, va, store) {
                        self.retire(i, now + alu);
                    }
                    return;
                }
                (true, _) => {
                    self.st.wrong_state_hits += 1;
                    upgrade = true;
                }
            }
        }
        self.miss(i, va, store, upgrade);
    }

    fn miss(&mut self, i: usize, va: u64, store: bool, upgrade: bool) {
        let now = self.now;
        if self.nodes[i].wb.contains_key(&va) {
            self.nodes[i].wb_wait = Some(va);
            return;
        }
        let kind = if store { ReqKind::Write } else { ReqKind::Read };
        let granted = self.grants.get(&va).copied().unwrap_or(0);
        let arrived = self.nodes[i].wb_arrivals.get(&va).copied().unwrap_or(0);
        if self.home(va) == i && granted <= arrived {
            if let Some(state) = self.dir.local_access(i as NodeId, va, kind) {
                if upgrade {
                    if let Some(l) = self.nodes[i].cache.get_mut(va) {
                        l.state = state;
                    }
                    self.b16_modified(i, va);
                    if self.effect(i, va, store) {
                        self.retire(i, now + self.cfg.alu_cycles);
                    }
                    return;
                }
                let Some(data) = self.mem_read(i, va) else { return self.tamper() };
                self.install(i, va, state, data);
                if state == LineState::Modified {
                    self.b16_modified(i, va);
                }
                if self.effect(i, va, store) {
                    self.retire(i, now + self.cfg.mem_cycles);
                }
                return;
            }
        }
        self.nodes[i].txn = Some(Txn {
            va,
            kind,
            upgrade,
            resolved: false,
            data: None,
            meta: 0,
            remote: false,
            acks_expected: 0,
            acks: 0,
            exclusive: false,
            ready_at: now,
            scheduled: false,
        });
        let mk = if store { MsgKind::WriteReq } else { MsgKind::ReadReq };
        let mut m = CoherenceMsg::new(mk, i as u32, self.dir_id, va, i as u32);
        m.req_kind = kind;
        m.upgrade = upgrade;
        self.send(now, m);
    }

    // ---- wrap-up ----

    fn final_value(&mut self, va: u64) -> Option<u64> {
        let mut shared = None;
        for node in &self.nodes {
            if let Some(l) = node.cache.get(va) {
                match l.state {
                    LineState::Modified | LineState::Exclusive => return Some(read_word(&l.data)),
                    _ => shared = Some(read_word(&l.data)),
                }
            }
            if let Some(d) = node.wb.get(&va) {
                return Some(read_word(d));
            }
        }
        if shared.is_some() {
            return shared;
        }
        let h = self.home(va);
        self.mem_read(h, va).map(|b| read_word(&b))
    }

    fn finish(mut self) -> RunOutput {
        let halted_in_run = self.st.halted.is_some();
        let mut finals = BTreeMap::new();
        if !halted_in_run {
            let vas: Vec<u64> = self.touched.iter().copied().collect();
            for va in vas {
                match self.final_value(va) {
                    Some(v) => {
                        finals.insert(va, v);
                    }
                    // a tampered image surfaces when memory is audited
                    None => self.tamper(),
                }
            }
        }
        let mut st = core::mem::take(&mut self.st);
        let done = self.nodes.iter().all(|n| n.done_at.is_some());
        st.stalled = !halted_in_run && !done;
        st.total_cycles = if halted_in_run || !done {
            self.now
        } else {
            self.nodes.iter().filter_map(|n| n.done_at).max().unwrap_or(0)
        };
        let avg = |(c, s): (u64, u64)| if c == 0 { 0.0 } else { s as f64 / c as f64 };
        st.alu_instr_avg = avg(self.acc.alu);
        st.load_instr_avg = avg(self.acc.load);
        st.store_instr_avg = avg(self.acc.store);
        st.instructions = self.acc.alu.0 + self.acc.load.0 + self.acc.store.0;
        st.memory_accesses = self.acc.load.0 + self.acc.store.0;
        let cores: Vec<f64> = self.acc.per_node.iter().filter(|p| p.0 > 0).map(|p| avg(*p)).collect();
        st.per_core_instr_avg = if cores.is_empty() { 0.0 } else { cores.iter().sum::<f64>() / cores.len() as f64 };
        st.avg_evict_kb_delay = avg((st.evict_kb_waits, self.acc.evict_delay));
        st.avg_fetch_kb_delay = avg((st.fetch_kb_waits, self.acc.fetch_delay));
        st.dit_updates = self.nodes.iter().filter_map(|n| n.dit.as_ref()).map(|t| t.updates()).sum();
        st.pad_reuses = self.audit.reuses();
        RunOutput {
            stats: st,
            commits: self.commits,
            final_values: finals,
            messages: self.messages,
            mem_writes: self.mem_writes,
        }
    }
}
