//! Directory-based MESI over distributed memory.
//!
//! Every block has a home node whose local memory backs it. The directory
//! (a separate logical entity, one hop from every node) serializes requests
//! per block, forwards them to a current holder, and collects nothing
//! itself: invalidation acks go to the requestor, which unblocks the
//! directory when its transaction completes.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::crypto::{Block, Prf, SealedBlock, Seed};
use crate::NodeId;

/// Home node of a block: address bits above 4 GiB select it.
pub fn home_of(va: u64, nodes: u32) -> NodeId {
    ((va >> 32) % nodes.max(1) as u64) as NodeId
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LineState {
    Modified,
    Exclusive,
    Shared,
    Invalid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReqKind {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Request {
    pub from: NodeId,
    pub kind: ReqKind,
    pub va: u64,
    /// Requestor held a shared copy when it asked.
    pub upgrade: bool,
}

/// Where the data for a transaction comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// A node's cache (falling back to its memory when it is the home).
    Node(NodeId),
    /// The home node's memory.
    HomeMemory(NodeId),
}

impl Source {
    pub fn node(self) -> NodeId {
        match self {
            Source::Node(n) | Source::HomeMemory(n) => n,
        }
    }
}

/// What the directory does for one request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub req: Request,
    /// None for an upgrade: the requestor already has the data.
    pub source: Option<Source>,
    pub invalidate: Vec<NodeId>,
    /// Requestor may install the line Exclusive on a read.
    pub exclusive: bool,
}

impl Plan {
    pub fn acks_expected(&self) -> u32 {
        self.invalidate.len() as u32
    }
}

#[derive(Clone, Debug, Default)]
pub struct DirectoryEntry {
    owner: Option<NodeId>,
    sharers: BTreeSet<NodeId>,
    busy: Option<Request>,
    /// Owner at plan time when it was chosen as the source; its writeback
    /// still carries the latest data.
    source_owner: Option<NodeId>,
    queue: VecDeque<Request>,
    /// Holders a compromised directory pretends still have the block.
    phantom: BTreeSet<NodeId>,
}

impl DirectoryEntry {
    /// Directory view: no cached copies means the home holds it exclusively.
    pub fn state(&self, home: NodeId) -> (LineState, Vec<NodeId>) {
        if let Some(o) = self.owner {
            (LineState::Modified, alloc::vec![o])
        } else if !self.sharers.is_empty() {
            (LineState::Shared, self.sharers.iter().copied().collect())
        } else {
            (LineState::Exclusive, alloc::vec![home])
        }
    }

    pub fn owner(&self) -> Option<NodeId> {
        self.owner
    }

    pub fn sharers(&self) -> &BTreeSet<NodeId> {
        &self.sharers
    }

    pub fn is_busy(&self) -> bool {
        self.busy.is_some()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Clone, Debug)]
pub struct Directory {
    nodes: u32,
    entries: HashMap<u64, DirectoryEntry>,
}

impl Directory {
    pub fn new(nodes: u32) -> Self {
        Directory { nodes, entries: HashMap::new() }
    }

    pub fn nodes(&self) -> u32 {
        self.nodes
    }

    pub fn entry(&self, va: u64) -> Option<&DirectoryEntry> {
        self.entries.get(&va)
    }

    fn entry_mut(&mut self, va: u64) -> &mut DirectoryEntry {
        self.entries.entry(va).or_default()
    }

    /// Apply a request, or queue it while the block is busy.
    pub fn handle_request(&mut self, req: Request) -> Option<Plan> {
        let home = home_of(req.va, self.nodes);
        let e = self.entry_mut(req.va);
        if e.busy.is_some() {
            e.queue.push_back(req);
            return None;
        }
        e.busy = Some(req);
        e.source_owner = None;
        let r = req.from;
        let plan = match req.kind {
            ReqKind::Read => {
                e.sharers.remove(&r);
                let mut candidates: BTreeSet<NodeId> = e.sharers.clone();
                candidates.extend(e.owner);
                candidates.extend(e.phantom.iter().copied());
                candidates.remove(&r);
                if let Some(o) = e.owner.filter(|o| *o != r) {
                    // a compromised directory may route to a phantom first
                    let chosen = *candidates.iter().next().unwrap_or(&o);
                    e.source_owner = Some(o);
                    e.owner = None;
                    e.sharers.insert(o);
                    e.sharers.insert(r);
                    Plan { req, source: Some(Source::Node(chosen)), invalidate: Vec::new(), exclusive: false }
                } else if let Some(&l) = candidates.iter().next() {
                    e.owner = None;
                    e.sharers.insert(r);
                    Plan { req, source: Some(Source::Node(l)), invalidate: Vec::new(), exclusive: false }
                } else {
                    e.owner = Some(r);
                    e.sharers.clear();
                    Plan { req, source: Some(Source::HomeMemory(home)), invalidate: Vec::new(), exclusive: true }
                }
            }
            ReqKind::Write => {
                let upgrade = req.upgrade && e.sharers.contains(&r) && e.owner.is_none();
                let mut others: BTreeSet<NodeId> = e.sharers.clone();
                others.remove(&r);
                let source = if upgrade {
                    None
                } else if let Some(o) = e.owner.filter(|o| *o != r) {
                    e.source_owner = Some(o);
                    others.remove(&o);
                    Some(Source::Node(o))
                } else if let Some(&l) = others.iter().next() {
                    others.remove(&l);
                    Some(Source::Node(l))
                } else {
                    Some(Source::HomeMemory(home))
                };
                e.owner = Some(r);
                e.sharers.clear();
                Plan { req, source, invalidate: others.into_iter().collect(), exclusive: true }
            }
        };
        Some(plan)
    }

    /// The requestor finished; start the next queued request, if any.
    pub fn unblock(&mut self, va: u64, from: NodeId) -> Option<Plan> {
        let e = self.entries.get_mut(&va)?;
        match e.busy {
            Some(r) if r.from == from => {}
            _ => return None,
        }
        e.busy = None;
        e.source_owner = None;
        let next = e.queue.pop_front()?;
        self.handle_request(next)
    }

    /// A forwarded request found no copy at `from`; re-serve from home memory.
    pub fn redirect(&mut self, va: u64, from: NodeId) -> Option<Plan> {
        let home = home_of(va, self.nodes);
        let e = self.entries.get_mut(&va)?;
        let req = e.busy?;
        e.sharers.remove(&from);
        e.phantom.remove(&from);
        if req.kind == ReqKind::Read {
            e.sharers.insert(req.from);
        }
        Some(Plan {
            req,
            source: Some(Source::HomeMemory(home)),
            invalidate: Vec::new(),
            exclusive: req.kind == ReqKind::Write,
        })
    }

    /// A writeback from `from` arrived. True when its data is current and
    /// belongs in home memory.
    pub fn writeback(&mut self, va: u64, from: NodeId) -> bool {
        let Some(e) = self.entries.get_mut(&va) else { return false };
        if e.owner == Some(from) {
            e.owner = None;
            return true;
        }
        // the old owner of a write transfer holds nothing memory still needs
        e.source_owner == Some(from) && e.busy.is_some_and(|r| r.kind == ReqKind::Read)
    }

    /// Home-node access that needs no request: returns the state it may
    /// install, after updating the directory.
    pub fn local_access(&mut self, node: NodeId, va: u64, kind: ReqKind) -> Option<LineState> {
        if home_of(va, self.nodes) != node {
            return None;
        }
        let e = self.entry_mut(va);
        if e.busy.is_some() && e.owner != Some(node) {
            return None;
        }
        match kind {
            ReqKind::Read => match e.owner {
                Some(o) if o == node => Some(LineState::Exclusive),
                Some(_) => None,
                None if e.sharers.iter().all(|s| *s == node) => {
                    e.owner = Some(node);
                    e.sharers.clear();
                    Some(LineState::Exclusive)
                }
                None => {
                    e.sharers.insert(node);
                    Some(LineState::Shared)
                }
            },
            ReqKind::Write => match e.owner {
                Some(o) if o == node => Some(LineState::Modified),
                Some(_) => None,
                None if e.sharers.iter().all(|s| *s == node) => {
                    e.owner = Some(node);
                    e.sharers.clear();
                    Some(LineState::Modified)
                }
                None => None,
            },
        }
    }

    /// The home node dropped its own line (memory is updated locally).
    pub fn local_evict(&mut self, node: NodeId, va: u64) {
        if let Some(e) = self.entries.get_mut(&va) {
            if e.owner == Some(node) {
                e.owner = None;
            }
            e.sharers.remove(&node);
        }
    }

    /// Adversary: make the directory keep `node` listed as a holder.
    pub fn keep_phantom(&mut self, va: u64, node: NodeId) {
        self.entry_mut(va).phantom.insert(node);
    }
}

/// Entity id of the directory in message addressing and tie-breaking.
pub fn directory_id(nodes: u32) -> u32 {
    nodes
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgKind {
    ReadReq,
    WriteReq,
    FwdRead,
    FwdWrite,
    Invalidate,
    InvAck,
    DataResp,
    SeedGrant,
    SeedBatch,
    Ack,
    Unblock,
    Redirect,
    WbReq,
    WbGrant,
    WbData,
}

impl MsgKind {
    pub const ALL: [MsgKind; 15] = [
        MsgKind::ReadReq,
        MsgKind::WriteReq,
        MsgKind::FwdRead,
        MsgKind::FwdWrite,
        MsgKind::Invalidate,
        MsgKind::InvAck,
        MsgKind::DataResp,
        MsgKind::SeedGrant,
        MsgKind::SeedBatch,
        MsgKind::Ack,
        MsgKind::Unblock,
        MsgKind::Redirect,
        MsgKind::WbReq,
        MsgKind::WbGrant,
        MsgKind::WbData,
    ];

    fn code(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::ReadReq => "ReadReq",
            MsgKind::WriteReq => "WriteReq",
            MsgKind::FwdRead => "FwdRead",
            MsgKind::FwdWrite => "FwdWrite",
            MsgKind::Invalidate => "Invalidate",
            MsgKind::InvAck => "InvAck",
            MsgKind::DataResp => "DataResp",
            MsgKind::SeedGrant => "SeedGrant",
            MsgKind::SeedBatch => "SeedBatch",
            MsgKind::Ack => "Ack",
            MsgKind::Unblock => "Unblock",
            MsgKind::Redirect => "Redirect",
            MsgKind::WbReq => "WbReq",
            MsgKind::WbGrant => "WbGrant",
            MsgKind::WbData => "WbData",
        }
    }

    pub fn carries_data(self) -> bool {
        matches!(self, MsgKind::DataResp | MsgKind::WbData)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Payload {
    None,
    Clear(Block),
    Sealed(SealedBlock),
}

impl Payload {
    fn digest(&self) -> [u64; 3] {
        match self {
            Payload::None => [0, 0, 0],
            Payload::Clear(b) => [1, crate::crypto::crc16(b) as u64, block_word(b)],
            Payload::Sealed(s) => [2, crate::crypto::crc16(&s.cipher) as u64 | (s.mac as u64) << 16, s.seed.0],
        }
    }
}

fn block_word(b: &Block) -> u64 {
    let mut w = [0u8; 8];
    w.copy_from_slice(&b[..8]);
    u64::from_le_bytes(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoherenceMsg {
    pub kind: MsgKind,
    pub src: u32,
    pub dst: u32,
    pub va: u64,
    /// Node whose transaction this message belongs to.
    pub requestor: NodeId,
    pub req_kind: ReqKind,
    pub seed: Option<Seed>,
    pub replacement: Option<Seed>,
    pub acks: u32,
    pub exclusive: bool,
    pub upgrade: bool,
    pub payload: Payload,
    pub seq: u64,
    pub mac: Option<u16>,
    pub timestamp: u64,
    /// Writeback ordering at the home node.
    pub version: u64,
    pub flags: u8,
}

/// Data comes from the home node's memory rather than its cache.
pub const FLAG_FROM_MEMORY: u8 = 1;
/// The requestor derives its pad only after the data arrives.
pub const FLAG_LATE_KB: u8 = 2;
/// Writeback accepted by the directory.
pub const FLAG_ACCEPT: u8 = 4;
/// Writeback caused by a read forward of a modified line.
pub const FLAG_FLUSH: u8 = 8;

impl CoherenceMsg {
    pub fn new(kind: MsgKind, src: u32, dst: u32, va: u64, requestor: NodeId) -> Self {
        CoherenceMsg {
            kind,
            src,
            dst,
            va,
            requestor,
            req_kind: ReqKind::Read,
            seed: None,
            replacement: None,
            acks: 0,
            exclusive: false,
            upgrade: false,
            payload: Payload::None,
            seq: 0,
            mac: None,
            timestamp: 0,
            version: 0,
            flags: 0,
        }
    }

    /// Wire size: fixed header, block payload, seeds and tag.
    pub fn wire_bytes(&self) -> u64 {
        let mut n = 16;
        n += match self.payload {
            Payload::None => 0,
            Payload::Clear(_) => 64,
            Payload::Sealed(_) => 64 + 2 + 8,
        };
        n += 8 * (self.seed.is_some() as u64 + self.replacement.is_some() as u64);
        n += 2 * self.mac.is_some() as u64;
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuthFailure {
    BadMac,
    OutOfOrder,
}

/// Per-channel sequence numbers and message tags: every message carries
/// the sender's next sequence number and a keyed tag over its contents.
#[derive(Clone, Debug)]
pub struct ChannelAuth {
    prf: Prf,
    next_send: HashMap<(u32, u32), u64>,
    next_recv: HashMap<(u32, u32), u64>,
}

const CHANNEL_DOMAIN: u8 = 0x43;

impl ChannelAuth {
    pub fn new(prf: Prf) -> Self {
        ChannelAuth { prf, next_send: HashMap::new(), next_recv: HashMap::new() }
    }

    fn tag(&self, m: &CoherenceMsg) -> u16 {
        let d = m.payload.digest();
        self.prf.tag(
            CHANNEL_DOMAIN,
            &[
                m.src as u64,
                m.dst as u64,
                m.seq,
                m.kind.code(),
                m.va,
                m.requestor as u64,
                m.seed.map_or(0, |s| s.0),
                m.replacement.map_or(0, |s| s.0),
                m.acks as u64 | (m.exclusive as u64) << 32 | (m.upgrade as u64) << 33 | (m.req_kind as u64) << 34,
                m.timestamp,
                m.version,
                m.flags as u64,
                d[0],
                d[1],
                d[2],
            ],
        ) as u16
    }

    pub fn stamp(&mut self, m: &mut CoherenceMsg) {
        let c = self.next_send.entry((m.src, m.dst)).or_insert(0);
        m.seq = *c;
        *c += 1;
        m.mac = Some(self.tag(m));
    }

    pub fn verify(&mut self, m: &CoherenceMsg) -> Result<(), AuthFailure> {
        if m.mac != Some(self.tag(m)) {
            return Err(AuthFailure::BadMac);
        }
        let c = self.next_recv.entry((m.src, m.dst)).or_insert(0);
        if m.seq != *c {
            return Err(AuthFailure::OutOfOrder);
        }
        *c += 1;
        Ok(())
    }
}

/// Who the directory is and what protects its traffic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trust {
    /// Adversary-controllable directory, unprotected messages.
    Plain,
    /// Block data carries MACs; control traffic is unprotected.
    DataMac,
    /// Trusted manager: every message tagged, sequenced and acknowledged.
    Tcm,
}

/// Off-chip tampering injected into a run.
#[derive(Clone, Debug, PartialEq)]
pub enum AdversaryAction {
    /// Drop the first invalidation of `va` to `dst` sent at or after `after`.
    /// An untrusted directory also forges the ack and keeps `dst` listed.
    DropInvalidate { va: u64, dst: NodeId, after: u64 },
    /// Deliver a copy of a recorded message at time `at`.
    ReplayMsg { msg: CoherenceMsg, at: u64 },
    /// Replace the block carried by the first data message for `va` sent at
    /// or after `after`.
    ForgeData { va: u64, bytes: Block, after: u64 },
    /// Put a previously stored memory image back at time `at`.
    RevertMemory { node: NodeId, va: u64, old_state: MemImage, at: u64 },
}

/// A block as stored in a node's local memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemImage {
    Clear(Block),
    Sealed(SealedBlock),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Key;

    const A: NodeId = 0;
    const B: NodeId = 1;
    const C: NodeId = 2;
    const VA: u64 = 3 << 32 | 0x40; // homed at node 3 of 4

    fn read(from: NodeId) -> Request {
        Request { from, kind: ReqKind::Read, va: VA, upgrade: false }
    }

    fn write(from: NodeId, upgrade: bool) -> Request {
        Request { from, kind: ReqKind::Write, va: VA, upgrade }
    }

    fn shared_ab() -> Directory {
        let mut d = Directory::new(4);
        d.handle_request(read(A)).unwrap();
        d.unblock(VA, A);
        d.handle_request(read(B)).unwrap();
        d.unblock(VA, B);
        d
    }

    #[test]
    fn initial_state_is_exclusive_at_home() {
        let mut d = Directory::new(4);
        let p = d.handle_request(read(A)).unwrap();
        assert_eq!(p.source, Some(Source::HomeMemory(3)));
        assert!(p.exclusive);
        assert_eq!(d.entry(VA).unwrap().state(3), (LineState::Modified, alloc::vec![A]));
    }

    #[test]
    fn shared_read_forwards_to_lowest_holder() {
        let mut d = shared_ab();
        assert_eq!(d.entry(VA).unwrap().state(3).0, LineState::Shared);
        let p = d.handle_request(read(C)).unwrap();
        assert_eq!(p.source, Some(Source::Node(A)));
        let e = d.entry(VA).unwrap();
        assert_eq!(e.state(3), (LineState::Shared, alloc::vec![A, B, C]));
    }

    #[test]
    fn upgrade_invalidates_other_sharers() {
        let mut d = shared_ab();
        let p = d.handle_request(write(A, true)).unwrap();
        assert_eq!(p.source, None);
        assert_eq!(p.invalidate, [B]);
        assert_eq!(d.entry(VA).unwrap().state(3), (LineState::Modified, alloc::vec![A]));
    }

    #[test]
    fn busy_block_queues_until_unblock() {
        let mut d = shared_ab();
        d.handle_request(write(A, true)).unwrap();
        assert_eq!(d.handle_request(read(C)), None);
        let next = d.unblock(VA, A).unwrap();
        assert_eq!(next.req.from, C);
        assert_eq!(next.source, Some(Source::Node(A)));
    }

    #[test]
    fn redirect_serves_from_home_memory() {
        let mut d = shared_ab();
        let p = d.handle_request(read(C)).unwrap();
        assert_eq!(p.source, Some(Source::Node(A)));
        // A had silently dropped its copy
        let r = d.redirect(VA, A).unwrap();
        assert_eq!(r.source, Some(Source::HomeMemory(3)));
        assert!(!d.entry(VA).unwrap().sharers().contains(&A));
    }

    #[test]
    fn writeback_from_owner_clears_ownership() {
        let mut d = Directory::new(4);
        d.handle_request(write(A, false)).unwrap();
        d.unblock(VA, A);
        assert!(!d.writeback(VA, B));
        assert!(d.writeback(VA, A));
        assert_eq!(d.entry(VA).unwrap().state(3).0, LineState::Exclusive);
    }

    #[test]
    fn writeback_racing_a_forward() {
        let mut d = Directory::new(4);
        d.handle_request(write(A, false)).unwrap();
        d.unblock(VA, A);
        d.handle_request(read(B)).unwrap();
        assert!(d.writeback(VA, A));
        d.unblock(VA, B);
        let mut d = Directory::new(4);
        d.handle_request(write(A, false)).unwrap();
        d.unblock(VA, A);
        d.handle_request(write(B, false)).unwrap();
        assert!(!d.writeback(VA, A));
    }

    #[test]
    fn home_local_access_rules() {
        let mut d = Directory::new(4);
        assert_eq!(d.local_access(3, VA, ReqKind::Write), Some(LineState::Modified));
        assert_eq!(d.local_access(A, VA, ReqKind::Read), None);
        d.local_evict(3, VA);
        d.handle_request(read(A)).unwrap();
        d.unblock(VA, A);
        // A holds it exclusively now
        assert_eq!(d.local_access(3, VA, ReqKind::Read), None);
    }

    #[test]
    fn phantom_holder_attracts_reads() {
        let mut d = shared_ab();
        d.handle_request(write(C, false)).unwrap();
        d.keep_phantom(VA, A);
        d.unblock(VA, C);
        let p = d.handle_request(read(B)).unwrap();
        assert_eq!(p.source, Some(Source::Node(A)));
    }

    #[test]
    fn channel_auth_detects_tamper_and_replay() {
        let mut tx = ChannelAuth::new(Prf::new(Key::from_label(9)));
        let mut rx = tx.clone();
        let mut m = CoherenceMsg::new(MsgKind::SeedGrant, 4, 1, 0x40, 1);
        m.seed = Some(Seed(4));
        tx.stamp(&mut m);
        assert_eq!(rx.verify(&m), Ok(()));
        assert_eq!(rx.verify(&m), Err(AuthFailure::OutOfOrder));
        let mut m2 = CoherenceMsg::new(MsgKind::SeedGrant, 4, 1, 0x40, 1);
        m2.seed = Some(Seed(5));
        tx.stamp(&mut m2);
        let mut forged = m2;
        forged.seed = Some(Seed(6));
        assert_eq!(rx.verify(&forged), Err(AuthFailure::BadMac));
    }

    #[test]
    fn wire_sizes() {
        let mut m = CoherenceMsg::new(MsgKind::DataResp, 0, 1, 0, 1);
        assert_eq!(m.wire_bytes(), 16);
        m.payload = Payload::Clear([0; 64]);
        assert_eq!(m.wire_bytes(), 80);
        m.seed = Some(Seed(1));
        m.mac = Some(0);
        assert_eq!(m.wire_bytes(), 90);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mesi_owner_invariants(ops in proptest::collection::vec((0u32..4, any::<bool>(), any::<bool>()), 1..80)) {
                let mut d = Directory::new(4);
                for (from, is_write, up) in ops {
                    let req = Request { from, kind: if is_write { ReqKind::Write } else { ReqKind::Read }, va: VA, upgrade: up };
                    if let Some(p) = d.handle_request(req) {
                        prop_assert!(!p.invalidate.contains(&from));
                        if let Some(s) = p.source { prop_assert!(s.node() != from || matches!(s, Source::HomeMemory(_))); }
                        let mut next = d.unblock(VA, from);
                        while let Some(p) = next { next = d.unblock(VA, p.req.from); }
                    }
                    let e = d.entry(VA).unwrap();
                    if e.owner().is_some() {
                        prop_assert!(e.sharers().is_empty());
                    }
                }
            }
        }
    }
}
