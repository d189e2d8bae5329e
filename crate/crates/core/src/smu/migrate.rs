//! SMU-to-SMU transfer of table entries and not-yet-started thread contexts.

use alloc::vec::Vec;

use super::{Addr, HaltReason, Preserve, RegisterFile, Reg, SmuError, SmuState, SmuTableEntry, Tsc};
use crate::crypto::{derive_pad, Key, Prf, Seed, BLOCK_BYTES};
use crate::Pid;

const SIG_DOMAIN_LO: u8 = 0x51;
const SIG_DOMAIN_HI: u8 = 0x52;
const STREAM_VA_BASE: u64 = 0x6d69_6700_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThreadRef {
    Tid(u32),
    Lep(Addr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MigrateWhat {
    Entry { process_hash: u64 },
    Thread { pid: Pid, at: ThreadRef },
}

/// Session state of an authenticated channel between two SMUs.
#[derive(Clone, Debug)]
pub struct MigrationChannel {
    prf: Prf,
    next_nonce: u64,
    last_accepted: u64,
}

impl MigrationChannel {
    pub fn new(key: Key) -> Self {
        MigrationChannel { prf: Prf::new(key), next_nonce: 1, last_accepted: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MigrationMsg {
    pub nonce: u64,
    pub body: Vec<u8>,
    pub sig: [u8; 16],
}

fn keystream_xor(prf: &Prf, nonce: u64, data: &mut [u8]) {
    for (i, chunk) in data.chunks_mut(BLOCK_BYTES).enumerate() {
        let pad = derive_pad(prf, Seed(nonce), STREAM_VA_BASE + (i as u64) * BLOCK_BYTES as u64);
        for (b, p) in chunk.iter_mut().zip(pad.iter()) {
            *b ^= p;
        }
    }
}

fn sign(prf: &Prf, nonce: u64, body: &[u8]) -> [u8; 16] {
    let mut buf = Vec::with_capacity(body.len() + 8);
    buf.extend_from_slice(&nonce.to_le_bytes());
    buf.extend_from_slice(body);
    let mut sig = [0u8; 16];
    sig[..8].copy_from_slice(&prf.tag_bytes(SIG_DOMAIN_LO, &buf).to_le_bytes());
    sig[8..].copy_from_slice(&prf.tag_bytes(SIG_DOMAIN_HI, &buf).to_le_bytes());
    sig
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        self.u8(v.is_some() as u8);
        self.u64(v.unwrap_or(0));
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.0.len() < n {
            return None;
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Some(a)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn opt_u64(&mut self) -> Option<Option<u64>> {
        let f = self.u8()?;
        let v = self.u64()?;
        match f {
            0 => Some(None),
            1 => Some(Some(v)),
            _ => None,
        }
    }
}

fn encode_entry(w: &mut Writer, e: &SmuTableEntry, with_root: bool) {
    w.opt_u64(e.pid.map(u64::from));
    w.0.extend_from_slice(&e.skey.0);
    w.0.extend_from_slice(&e.mkey.0);
    w.u8(with_root as u8);
    w.u16(if with_root { e.root_hash } else { 0 });
    w.u64(e.process_hash);
    w.u64(e.first_lep);
    w.opt_u64(e.sig_lep);
    w.u32(e.error_status);
}

fn decode_entry(r: &mut Reader) -> Option<(SmuTableEntry, bool)> {
    let pid = r.opt_u64()?.map(|p| p as Pid);
    let skey = Key(r.take(32)?.try_into().ok()?);
    let mkey = Key(r.take(32)?.try_into().ok()?);
    let with_root = r.u8()? != 0;
    let root_hash = r.u16()?;
    let process_hash = r.u64()?;
    let first_lep = r.u64()?;
    let sig_lep = r.opt_u64()?;
    let error_status = r.u32()?;
    Some((
        SmuTableEntry { pid, skey, mkey, root_hash, process_hash, first_lep, sig_lep, error_status },
        with_root,
    ))
}

impl SmuState {
    /// Builds the encrypted, signed message for `what`. Nothing is discarded yet.
    pub fn migrate_out(&self, what: MigrateWhat, channel: &mut MigrationChannel) -> Result<MigrationMsg, SmuError> {
        let mut w = Writer(Vec::new());
        match what {
            MigrateWhat::Entry { process_hash } => {
                let e = self.entry_by_hash(process_hash).ok_or(SmuError::UnknownProcessHash)?;
                w.u8(0);
                encode_entry(&mut w, e, true);
            }
            MigrateWhat::Thread { pid, at: ThreadRef::Lep(addr) } => {
                let e = self.entry(pid).ok_or(SmuError::UnknownProcessHash)?;
                let t = self
                    .tscs()
                    .iter()
                    .find(|t| !t.active && t.pid == pid && t.lep == addr)
                    .ok_or(SmuError::Halt(HaltReason::MissingTsc))?;
                w.u8(1);
                encode_entry(&mut w, e, true);
                for v in t.regs.words() {
                    w.u64(v);
                }
                w.u64(t.lep);
                w.opt_u64(t.parent_tid.map(u64::from));
            }
            MigrateWhat::Thread { pid, at: ThreadRef::Tid(_) } => {
                let e = self.entry(pid).ok_or(SmuError::UnknownProcessHash)?;
                w.u8(2);
                encode_entry(&mut w, e, false);
            }
        }
        let nonce = channel.next_nonce;
        channel.next_nonce += 1;
        let mut body = w.0;
        keystream_xor(&channel.prf, nonce, &mut body);
        let sig = sign(&channel.prf, nonce, &body);
        Ok(MigrationMsg { nonce, body, sig })
    }

    /// Verifies and installs a migration message at the receiving SMU. A bad
    /// signature, replayed nonce or malformed body halts the receiver.
    pub fn migrate_in(&mut self, msg: &MigrationMsg, channel: &mut MigrationChannel) -> Result<(), SmuError> {
        let r = self.accept_migration(msg, channel);
        if r == Err(SmuError::Halt(HaltReason::MigrationTamper)) {
            return Err(self.halt(HaltReason::MigrationTamper));
        }
        r
    }

    fn accept_migration(&mut self, msg: &MigrationMsg, channel: &mut MigrationChannel) -> Result<(), SmuError> {
        let tamper = SmuError::Halt(HaltReason::MigrationTamper);
        if sign(&channel.prf, msg.nonce, &msg.body) != msg.sig || msg.nonce <= channel.last_accepted {
            return Err(tamper);
        }
        let mut clear = msg.body.clone();
        keystream_xor(&channel.prf, msg.nonce, &mut clear);
        let mut r = Reader(&clear);
        let kind = r.u8().ok_or(tamper)?;
        let (entry, with_root) = decode_entry(&mut r).ok_or(tamper)?;
        let tsc = if kind == 1 {
            let mut words = [0u64; Reg::COUNT];
            for w in words.iter_mut() {
                *w = r.u64().ok_or(tamper)?;
            }
            let lep = r.u64().ok_or(tamper)?;
            let parent = r.opt_u64().ok_or(tamper)?.map(|v| v as u32);
            Some((RegisterFile::from_words(&words), lep, parent))
        } else {
            None
        };
        if kind > 2 || !r.0.is_empty() {
            return Err(tamper);
        }
        channel.last_accepted = msg.nonce;

        if tsc.is_some() && self.tscs().len() >= self.tsc_capacity() {
            return Err(SmuError::SealedStorageFull);
        }
        let pid = entry.pid;
        let existing = pid.and_then(|p| self.table_mut().iter().position(|e| e.pid == Some(p)));
        if existing.is_none() {
            if self.entries().len() >= self.table_capacity() {
                return Err(SmuError::TableFull);
            }
            let mut e = entry;
            if !with_root {
                e.root_hash = self.fresh_root(pid.unwrap_or(0));
            }
            self.table_mut().push(e);
        }
        if let Some((regs, lep, parent_tid)) = tsc {
            let scid = self.alloc_scid();
            self.tscs_mut().push(Tsc {
                scid,
                pid: pid.unwrap_or(0),
                regs,
                lep,
                parent_tid,
                tid: None,
                active: false,
                pending: Preserve::Nothing,
            });
        }
        Ok(())
    }

    /// Source-side cleanup once the receiver accepted the message.
    pub fn migrate_commit(&mut self, what: MigrateWhat) {
        match what {
            MigrateWhat::Entry { process_hash } => {
                self.table_mut().retain(|e| e.process_hash != process_hash);
            }
            MigrateWhat::Thread { pid, at: ThreadRef::Lep(addr) } => {
                if let Some(i) = self.tscs().iter().position(|t| !t.active && t.pid == pid && t.lep == addr) {
                    self.tscs_mut().remove(i);
                }
            }
            MigrateWhat::Thread { at: ThreadRef::Tid(_), .. } => {}
        }
    }
}

/// Full transfer; the source discards only when the receiver accepted.
pub fn migrate(
    src: &mut SmuState,
    what: MigrateWhat,
    dst: &mut SmuState,
    channel: &mut MigrationChannel,
) -> Result<(), SmuError> {
    let msg = src.migrate_out(what, channel)?;
    dst.migrate_in(&msg, channel)?;
    src.migrate_commit(what);
    Ok(())
}
