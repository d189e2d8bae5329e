//! Per-node security management unit.
//!
//! Tracks the trusted/untrusted mode of the hardware thread, the sealed
//! storage that hides registers while untrusted code runs, the process
//! table, thread secret contexts and the cache-line gating rule.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::crypto::{open_block, seal_block, Block, Key, Prf, SealedBlock, Seed, BLOCK_BYTES};
use crate::Pid;

pub mod isa;
pub mod machine;
mod migrate;

pub use isa::{Addr, ProgramError, SmuOp, ToyInstr, ToyProgram};
pub use machine::{Event, EventKind, Machine, RunOutcome};
pub use migrate::{migrate, MigrateWhat, MigrationChannel, MigrationMsg, ThreadRef};

pub const NSS_TOP: u64 = 0x7fff_f000;
pub const SS_TOP: u64 = 0x7ffe_f000;
pub const SIG_STACK_TOP: u64 = 0x7ffd_f000;
/// Distance from a thread-creation instruction to the new thread's entry.
pub const CLONE_LEP_OFFSET: u64 = 2;
pub const MAX_REG_ARGS: u8 = 6;

const CTX_VA_BASE: u64 = 0xffff_0000_0000;
const DOMAIN_ROOT: u64 = 0x726f_6f74;
const DOMAIN_CTX: u64 = 0x63_7478;
const DOMAIN_RESULTS: u64 = 0x72_6573;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Trusted,
    Untrusted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reg {
    Arg(u8),
    RetAddr,
    RetVal,
    SpSecure,
    SpNonsecure,
    Gp(u8),
}

impl Reg {
    pub const COUNT: usize = 18;

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..Self::COUNT).map(Reg::from_index)
    }

    pub fn index(self) -> usize {
        match self {
            Reg::Arg(i) => i as usize,
            Reg::RetAddr => 6,
            Reg::RetVal => 7,
            Reg::SpSecure => 8,
            Reg::SpNonsecure => 9,
            Reg::Gp(i) => 10 + i as usize,
        }
    }

    pub fn from_index(i: usize) -> Reg {
        match i {
            0..=5 => Reg::Arg(i as u8),
            6 => Reg::RetAddr,
            7 => Reg::RetVal,
            8 => Reg::SpSecure,
            9 => Reg::SpNonsecure,
            _ => Reg::Gp((i - 10) as u8),
        }
    }

    pub fn parse(s: &str) -> Option<Reg> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "retaddr" => return Some(Reg::RetAddr),
            "retval" => return Some(Reg::RetVal),
            "sps" => return Some(Reg::SpSecure),
            "spn" => return Some(Reg::SpNonsecure),
            _ => {}
        }
        if let Some(n) = s.strip_prefix("arg") {
            let n: u8 = n.parse().ok()?;
            return (n < 6).then_some(Reg::Arg(n));
        }
        if let Some(n) = s.strip_prefix("gp") {
            let n: u8 = n.parse().ok()?;
            return (n < 8).then_some(Reg::Gp(n));
        }
        None
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::Arg(i) => write!(f, "arg{i}"),
            Reg::RetAddr => f.write_str("retaddr"),
            Reg::RetVal => f.write_str("retval"),
            Reg::SpSecure => f.write_str("sps"),
            Reg::SpNonsecure => f.write_str("spn"),
            Reg::Gp(i) => write!(f, "gp{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegisterFile {
    pub arg: [u64; 6],
    pub retaddr: u64,
    pub retval: u64,
    pub sp_secure: u64,
    pub sp_nonsecure: u64,
    pub gp: [u64; 8],
}

impl RegisterFile {
    pub fn get(&self, r: Reg) -> u64 {
        match r {
            Reg::Arg(i) => self.arg[i as usize],
            Reg::RetAddr => self.retaddr,
            Reg::RetVal => self.retval,
            Reg::SpSecure => self.sp_secure,
            Reg::SpNonsecure => self.sp_nonsecure,
            Reg::Gp(i) => self.gp[i as usize],
        }
    }

    pub fn set(&mut self, r: Reg, v: u64) {
        match r {
            Reg::Arg(i) => self.arg[i as usize] = v,
            Reg::RetAddr => self.retaddr = v,
            Reg::RetVal => self.retval = v,
            Reg::SpSecure => self.sp_secure = v,
            Reg::SpNonsecure => self.sp_nonsecure = v,
            Reg::Gp(i) => self.gp[i as usize] = v,
        }
    }

    pub fn words(&self) -> [u64; Reg::COUNT] {
        let mut w = [0; Reg::COUNT];
        for r in Reg::all() {
            w[r.index()] = self.get(r);
        }
        w
    }

    pub fn from_words(w: &[u64]) -> Self {
        let mut f = RegisterFile::default();
        for r in Reg::all() {
            f.set(r, w.get(r.index()).copied().unwrap_or(0));
        }
        f
    }

    /// Registers other than the non-secure stack pointer that hold a nonzero value.
    pub fn live(&self) -> Vec<Reg> {
        Reg::all().filter(|&r| r != Reg::SpNonsecure && self.get(r) != 0).collect()
    }
}

/// What the next exit to untrusted code leaves visible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Preserve {
    #[default]
    Nothing,
    Syscall(u8),
    NoSec(u8),
}

impl Preserve {
    pub fn keeps(self, r: Reg) -> bool {
        match (self, r) {
            (_, Reg::SpNonsecure) => true,
            (Preserve::Syscall(_), Reg::RetAddr) => true,
            (Preserve::Syscall(n) | Preserve::NoSec(n), Reg::Arg(i)) => i < n,
            _ => false,
        }
    }

    pub fn is_pending(self) -> bool {
        self != Preserve::Nothing
    }

    fn encode(self) -> (u64, u64) {
        match self {
            Preserve::Nothing => (0, 0),
            Preserve::Syscall(n) => (1, n as u64),
            Preserve::NoSec(n) => (2, n as u64),
        }
    }

    fn decode(tag: u64, n: u64) -> Self {
        match tag {
            1 => Preserve::Syscall(n as u8),
            2 => Preserve::NoSec(n as u8),
            _ => Preserve::Nothing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmuTableEntry {
    pub pid: Option<Pid>,
    pub skey: Key,
    pub mkey: Key,
    pub root_hash: u16,
    pub process_hash: u64,
    pub first_lep: Addr,
    pub sig_lep: Option<Addr>,
    pub error_status: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SealedContext {
    pub regs: RegisterFile,
    pub lep: Addr,
    pub pid: Pid,
    pub valid: bool,
    pub pending: Preserve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tsc {
    pub scid: u32,
    pub pid: Pid,
    pub regs: RegisterFile,
    pub lep: Addr,
    pub parent_tid: Option<u32>,
    pub tid: Option<u32>,
    pub active: bool,
    pub pending: Preserve,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheLineMeta {
    pub va: u64,
    pub owner_pid: Option<Pid>,
    pub auth: bool,
    pub dirty: bool,
}

impl CacheLineMeta {
    pub fn untrusted(va: u64) -> Self {
        CacheLineMeta { va, owner_pid: None, auth: false, dirty: false }
    }

    pub fn authentic(va: u64, pid: Pid) -> Self {
        CacheLineMeta { va, owner_pid: Some(pid), auth: true, dirty: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Load,
    Store,
    NaLoad,
    NaStore,
    InitA,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HaltReason {
    IllegalEntry,
    SecureAccessViolation,
    MissingTsc,
    BadAttach,
    IntegrityError,
    MigrationTamper,
}

impl HaltReason {
    pub const ALL: [HaltReason; 6] = [
        HaltReason::IllegalEntry,
        HaltReason::SecureAccessViolation,
        HaltReason::MissingTsc,
        HaltReason::BadAttach,
        HaltReason::IntegrityError,
        HaltReason::MigrationTamper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HaltReason::IllegalEntry => "IllegalEntry",
            HaltReason::SecureAccessViolation => "SecureAccessViolation",
            HaltReason::MissingTsc => "MissingTsc",
            HaltReason::BadAttach => "BadAttach",
            HaltReason::IntegrityError => "IntegrityError",
            HaltReason::MigrationTamper => "MigrationTamper",
        }
    }

    pub fn code(self) -> u32 {
        self as u32 + 1
    }
}

impl fmt::Display for HaltReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmuError {
    TableFull,
    UnknownProcessHash,
    ArgnumTooLarge,
    SealedStorageFull,
    WrongMode,
    Halt(HaltReason),
}

impl fmt::Display for SmuError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmuError::TableFull => f.write_str("SMU table full"),
            SmuError::UnknownProcessHash => f.write_str("unknown process hash"),
            SmuError::ArgnumTooLarge => f.write_str("argument count above 6"),
            SmuError::SealedStorageFull => f.write_str("sealed storage full"),
            SmuError::WrongMode => f.write_str("operation not valid in the current mode"),
            SmuError::Halt(r) => write!(f, "halt: {r}"),
        }
    }
}

impl From<HaltReason> for SmuError {
    fn from(r: HaltReason) -> Self {
        SmuError::Halt(r)
    }
}

/// Cache gating: authentic lines are reachable only by authentic code of the
/// owning process. The NA operations are the explicit escape hatch.
pub fn secure_access(
    line: &mut CacheLineMeta,
    instr_auth: bool,
    cur_pid: Option<Pid>,
    op: OpKind,
) -> Result<(), HaltReason> {
    let owner_ok = line.owner_pid.is_some() && line.owner_pid == cur_pid;
    match op {
        OpKind::Load | OpKind::Store => {
            let ok = if line.auth { instr_auth && owner_ok } else { !instr_auth };
            if !ok {
                return Err(HaltReason::SecureAccessViolation);
            }
            if op == OpKind::Store {
                line.dirty = true;
            }
        }
        OpKind::NaLoad => {
            if !instr_auth || line.auth {
                return Err(HaltReason::SecureAccessViolation);
            }
        }
        OpKind::NaStore => {
            if !instr_auth || (line.auth && !owner_ok) {
                return Err(HaltReason::SecureAccessViolation);
            }
            line.auth = false;
            line.owner_pid = None;
            line.dirty = true;
        }
        OpKind::InitA => {
            if !instr_auth || cur_pid.is_none() || (line.auth && !owner_ok) {
                return Err(HaltReason::SecureAccessViolation);
            }
            line.auth = true;
            line.owner_pid = cur_pid;
            line.dirty = true;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    First,
    Lep { retval_kept: bool },
    Signal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Normal,
    Signal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discard {
    Scid(u32),
    Tid(u32),
}

/// A sealed context as it sits in process memory between an evict and a restore.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredContext {
    pub pid: Pid,
    pub blocks: Vec<SealedBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Line {
    meta: CacheLineMeta,
    value: u64,
}

#[derive(Clone, Debug)]
pub struct SmuState {
    node_prf: Prf,
    table: Vec<SmuTableEntry>,
    table_capacity: usize,
    mode: Mode,
    pid: Option<Pid>,
    pub regs: RegisterFile,
    sss: SealedContext,
    pending: Preserve,
    entered: BTreeSet<Pid>,
    signal_stash: Option<SealedContext>,
    tscs: Vec<Tsc>,
    tsc_capacity: usize,
    next_scid: u32,
    current_tid: Option<u32>,
    deleted_tids: BTreeSet<u32>,
    lines: BTreeMap<u64, Line>,
    evict_counters: BTreeMap<Pid, u64>,
    halted: Option<HaltReason>,
}

impl SmuState {
    pub fn new(node_label: u64, table_capacity: usize, tsc_capacity: usize) -> Self {
        SmuState {
            node_prf: Prf::new(Key::from_label(node_label)),
            table: Vec::new(),
            table_capacity,
            mode: Mode::Untrusted,
            pid: None,
            regs: RegisterFile::default(),
            sss: SealedContext::default(),
            pending: Preserve::Nothing,
            entered: BTreeSet::new(),
            signal_stash: None,
            tscs: Vec::new(),
            tsc_capacity,
            next_scid: 1,
            current_tid: None,
            deleted_tids: BTreeSet::new(),
            lines: BTreeMap::new(),
            evict_counters: BTreeMap::new(),
            halted: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn halted(&self) -> Option<HaltReason> {
        self.halted
    }

    pub fn sss(&self) -> &SealedContext {
        &self.sss
    }

    pub fn pending(&self) -> Preserve {
        self.pending
    }

    pub fn current_pid(&self) -> Option<Pid> {
        self.pid
    }

    pub fn current_tid(&self) -> Option<u32> {
        self.current_tid
    }

    pub fn in_signal(&self) -> bool {
        self.signal_stash.is_some()
    }

    pub fn tscs(&self) -> &[Tsc] {
        &self.tscs
    }

    pub fn pending_tscs(&self) -> usize {
        self.tscs.iter().filter(|t| !t.active).count()
    }

    pub fn entries(&self) -> &[SmuTableEntry] {
        &self.table
    }

    pub fn entry(&self, pid: Pid) -> Option<&SmuTableEntry> {
        self.table.iter().find(|e| e.pid == Some(pid))
    }

    pub fn entry_by_hash(&self, process_hash: u64) -> Option<&SmuTableEntry> {
        self.table.iter().find(|e| e.process_hash == process_hash)
    }

    fn halt(&mut self, reason: HaltReason) -> SmuError {
        if self.halted.is_none() {
            self.halted = Some(reason);
            if let Some(p) = self.pid {
                if let Some(e) = self.table.iter_mut().find(|e| e.pid == Some(p)) {
                    e.error_status = reason.code();
                }
            }
        }
        SmuError::Halt(reason)
    }

    fn require_trusted(&mut self) -> Result<(), SmuError> {
        if self.mode == Mode::Trusted {
            Ok(())
        } else {
            Err(self.halt(HaltReason::SecureAccessViolation))
        }
    }

    pub(crate) fn fresh_root(&self, pid: Pid) -> u16 {
        self.node_prf.tag(0, &[DOMAIN_ROOT, pid as u64]) as u16
    }

    pub fn install_entry(
        &mut self,
        keys: (Key, Key),
        process_hash: u64,
        first_lep: Addr,
        sig_lep: Option<Addr>,
    ) -> Result<usize, SmuError> {
        if self.table.len() >= self.table_capacity {
            return Err(SmuError::TableFull);
        }
        self.table.push(SmuTableEntry {
            pid: None,
            skey: keys.0,
            mkey: keys.1,
            root_hash: 0,
            process_hash,
            first_lep,
            sig_lep,
            error_status: 0,
        });
        Ok(self.table.len() - 1)
    }

    /// Binds the unbound entry for `process_hash` to `pid`. Returns whether an
    /// older entry with the same pid was erased, which also purges its lines.
    pub fn set_pid(&mut self, process_hash: u64, pid: Pid) -> Result<bool, SmuError> {
        let idx = self
            .table
            .iter()
            .position(|e| e.process_hash == process_hash && e.pid.is_none())
            .or_else(|| self.table.iter().position(|e| e.process_hash == process_hash))
            .ok_or(SmuError::UnknownProcessHash)?;
        let old = self.table.iter().enumerate().position(|(i, e)| i != idx && e.pid == Some(pid));
        let purged = old.is_some();
        if let Some(o) = old {
            self.table.remove(o);
            self.lines.retain(|_, l| !(l.meta.auth && l.meta.owner_pid == Some(pid)));
            self.entered.remove(&pid);
        }
        let idx = if matches!(old, Some(o) if o < idx) { idx - 1 } else { idx };
        let root = self.fresh_root(pid);
        let e = &mut self.table[idx];
        e.pid = Some(pid);
        e.root_hash = root;
        Ok(purged)
    }

    /// The OS makes `pid` (thread `tid`) current without touching sealed storage.
    pub fn set_current(&mut self, pid: Option<Pid>, tid: Option<u32>) {
        self.pid = pid;
        self.current_tid = tid;
    }

    pub fn switch_to_untrusted(&mut self, next_lep: Addr) -> Result<ExitKind, SmuError> {
        if self.mode != Mode::Trusted {
            return Err(SmuError::WrongMode);
        }
        let spn = self.regs.sp_nonsecure;
        if let Some(stashed) = self.signal_stash.take() {
            self.sss = stashed;
            self.regs = RegisterFile { sp_nonsecure: spn, ..RegisterFile::default() };
            self.pending = Preserve::Nothing;
            self.mode = Mode::Untrusted;
            return Ok(ExitKind::Signal);
        }
        self.sss = SealedContext {
            regs: self.regs,
            lep: next_lep,
            pid: self.pid.unwrap_or(0),
            valid: true,
            pending: self.pending,
        };
        let mut visible = RegisterFile::default();
        for r in Reg::all() {
            if self.pending.keeps(r) {
                visible.set(r, self.regs.get(r));
            }
        }
        self.regs = visible;
        self.pending = Preserve::Nothing;
        self.mode = Mode::Untrusted;
        Ok(ExitKind::Normal)
    }

    pub fn switch_to_trusted(&mut self, inst_addr: Addr) -> Result<EntryKind, SmuError> {
        if self.mode != Mode::Untrusted {
            return Err(SmuError::WrongMode);
        }
        let Some(pid) = self.pid else {
            self.sss.valid = false;
            return Err(self.halt(HaltReason::IllegalEntry));
        };
        let Some(entry) = self.entry(pid) else {
            self.sss.valid = false;
            return Err(self.halt(HaltReason::IllegalEntry));
        };
        let (first_lep, sig_lep) = (entry.first_lep, entry.sig_lep);

        if sig_lep == Some(inst_addr) && self.signal_stash.is_none() {
            self.signal_stash = Some(self.sss);
            self.sss.valid = false;
            self.regs.sp_secure = SIG_STACK_TOP;
            self.mode = Mode::Trusted;
            return Ok(EntryKind::Signal);
        }

        let sss = self.sss;
        self.sss.valid = false;
        if sss.valid && sss.lep == inst_addr && sss.pid == pid {
            let spn = self.regs.sp_nonsecure;
            let incoming_retval = self.regs.retval;
            self.regs = sss.regs;
            self.regs.sp_nonsecure = spn;
            let retval_kept = sss.pending.is_pending();
            if retval_kept {
                self.regs.retval = incoming_retval;
            }
            self.mode = Mode::Trusted;
            return Ok(EntryKind::Lep { retval_kept });
        }
        if !self.entered.contains(&pid) && inst_addr == first_lep {
            self.entered.insert(pid);
            self.mode = Mode::Trusted;
            return Ok(EntryKind::First);
        }
        Err(self.halt(HaltReason::IllegalEntry))
    }

    pub fn mark_syscall(&mut self, argnum: u8) -> Result<(), SmuError> {
        self.require_trusted()?;
        if argnum > MAX_REG_ARGS {
            return Err(SmuError::ArgnumTooLarge);
        }
        self.pending = Preserve::Syscall(argnum);
        Ok(())
    }

    pub fn call_nosec(&mut self, i: u8) -> Result<(), SmuError> {
        self.require_trusted()?;
        if i == 0 || i > MAX_REG_ARGS {
            return Err(SmuError::ArgnumTooLarge);
        }
        self.pending = Preserve::NoSec(i);
        Ok(())
    }

    /// Pushes onto the non-secure stack regardless of the active one.
    pub fn na_push(&mut self, nss: &mut Vec<u64>, value: u64) -> Result<(), SmuError> {
        self.require_trusted()?;
        nss.push(value);
        self.regs.sp_nonsecure = NSS_TOP - 8 * nss.len() as u64;
        Ok(())
    }

    pub fn na_pop(&mut self, nss: &mut Vec<u64>) -> Result<Option<u64>, SmuError> {
        self.require_trusted()?;
        let v = nss.pop();
        self.regs.sp_nonsecure = NSS_TOP - 8 * nss.len() as u64;
        Ok(v)
    }

    pub fn line(&self, va: u64) -> CacheLineMeta {
        self.lines.get(&va).map(|l| l.meta).unwrap_or(CacheLineMeta::untrusted(va))
    }

    pub fn peek(&self, va: u64) -> u64 {
        self.lines.get(&va).map(|l| l.value).unwrap_or(0)
    }

    /// Untrusted writes that bypass the cache gate, e.g. the OS filling a buffer.
    pub fn poke_untrusted(&mut self, va: u64, value: u64) {
        let va = va & !63;
        self.lines.insert(va, Line { meta: CacheLineMeta::untrusted(va), value });
    }

    /// One gated data access; returns the value read (or the value stored).
    pub fn access(&mut self, va: u64, op: OpKind, value: u64) -> Result<u64, SmuError> {
        let va = va & !63;
        let instr_auth = self.mode == Mode::Trusted;
        let mut line = self.lines.get(&va).copied().unwrap_or(Line { meta: CacheLineMeta::untrusted(va), value: 0 });
        if let Err(r) = secure_access(&mut line.meta, instr_auth, self.pid, op) {
            return Err(self.halt(r));
        }
        let out = match op {
            OpKind::Load | OpKind::NaLoad => line.value,
            OpKind::Store | OpKind::NaStore => {
                line.value = value;
                value
            }
            OpKind::InitA => {
                line.value = 0;
                0
            }
        };
        self.lines.insert(va, line);
        Ok(out)
    }

    pub fn init_a(&mut self, va: u64, blocks: u32) -> Result<(), SmuError> {
        for i in 0..blocks as u64 {
            self.access(va + i * 64, OpKind::InitA, 0)?;
        }
        Ok(())
    }

    pub fn thread_create(&mut self, pc: Addr) -> Result<u32, SmuError> {
        self.require_trusted()?;
        if self.tscs.len() >= self.tsc_capacity {
            return Err(SmuError::SealedStorageFull);
        }
        let scid = self.next_scid;
        self.next_scid += 1;
        let mut regs = self.regs;
        regs.retval = 0;
        self.tscs.push(Tsc {
            scid,
            pid: self.pid.unwrap_or(0),
            regs,
            lep: pc + CLONE_LEP_OFFSET,
            parent_tid: self.current_tid,
            tid: None,
            active: false,
            pending: Preserve::Nothing,
        });
        Ok(scid)
    }

    pub fn thread_attach(&mut self, tid: u32, addr: Addr) -> Result<(), SmuError> {
        let pid = self.pid.unwrap_or(0);
        match self.tscs.iter_mut().find(|t| !t.active && t.lep == addr && t.pid == pid) {
            Some(t) => {
                t.active = true;
                t.tid = Some(tid);
                self.deleted_tids.remove(&tid);
                Ok(())
            }
            None => Err(self.halt(HaltReason::BadAttach)),
        }
    }

    pub fn thread_discard(&mut self, by: Discard) -> Result<(), SmuError> {
        match by {
            Discard::Scid(scid) => {
                self.require_trusted()?;
                match self.tscs.iter().position(|t| t.scid == scid) {
                    Some(i) if !self.tscs[i].active => {
                        self.tscs.remove(i);
                        Ok(())
                    }
                    _ => Err(self.halt(HaltReason::BadAttach)),
                }
            }
            Discard::Tid(tid) => {
                self.tscs.retain(|t| t.tid != Some(tid));
                self.deleted_tids.insert(tid);
                if self.current_tid == Some(tid) {
                    self.sss.valid = false;
                }
                Ok(())
            }
        }
    }

    /// The OS switches the hardware thread to `tid` of the current process.
    pub fn schedule(&mut self, tid: u32) -> Result<(), SmuError> {
        if let Some(cur) = self.current_tid {
            if cur != tid && self.sss.valid && !self.deleted_tids.contains(&cur) {
                let scid = self.alloc_scid();
                let saved = Tsc {
                    scid,
                    pid: self.sss.pid,
                    regs: self.sss.regs,
                    lep: self.sss.lep,
                    parent_tid: None,
                    tid: Some(cur),
                    active: true,
                    pending: self.sss.pending,
                };
                match self.tscs.iter_mut().find(|t| t.tid == Some(cur)) {
                    Some(t) => {
                        t.regs = saved.regs;
                        t.lep = saved.lep;
                        t.pending = saved.pending;
                    }
                    None => self.tscs.push(saved),
                }
                self.sss.valid = false;
            }
        }
        self.current_tid = Some(tid);
        if self.deleted_tids.contains(&tid) {
            return Err(self.halt(HaltReason::MissingTsc));
        }
        if let Some(i) = self.tscs.iter().position(|t| t.active && t.tid == Some(tid)) {
            let t = self.tscs.remove(i);
            self.sss = SealedContext { regs: t.regs, lep: t.lep, pid: t.pid, valid: true, pending: t.pending };
        } else if self.sss.valid && self.sss.pid == self.pid.unwrap_or(0) {
            // still the same thread's context
        } else {
            self.sss.valid = false;
        }
        Ok(())
    }

    fn ctx_prf(&self, pid: Pid) -> Option<Prf> {
        self.entry(pid).map(|e| Prf::new(e.skey).subkey(DOMAIN_CTX))
    }

    /// Moves the sealed storage of the current secure process out to memory.
    pub fn context_evict(&mut self) -> Option<StoredContext> {
        let pid = self.pid?;
        let prf = self.ctx_prf(pid)?;
        let counter = self.evict_counters.entry(pid).or_insert(0);
        *counter += 1;
        let seed = Seed(*counter);
        let mut words: Vec<u64> = self.sss.regs.words().to_vec();
        let (tag, n) = self.sss.pending.encode();
        words.extend([self.sss.lep, self.sss.pid as u64, self.sss.valid as u64, tag, n]);
        let blocks = words
            .chunks(BLOCK_BYTES / 8)
            .enumerate()
            .map(|(i, chunk)| {
                let mut b: Block = [0; BLOCK_BYTES];
                for (j, w) in chunk.iter().enumerate() {
                    b[j * 8..j * 8 + 8].copy_from_slice(&w.to_le_bytes());
                }
                seal_block(&prf, seed, ctx_va(pid, i), &b)
            })
            .collect();
        self.sss.valid = false;
        Some(StoredContext { pid, blocks })
    }

    /// Makes `pid` current and reloads its sealed storage, re-verifying it.
    pub fn context_restore(&mut self, pid: Pid, stored: Option<&StoredContext>) -> Result<(), SmuError> {
        self.pid = Some(pid);
        let Some(prf) = self.ctx_prf(pid) else {
            return Ok(());
        };
        let Some(stored) = stored else {
            self.sss.valid = false;
            return Ok(());
        };
        let seed = Seed(self.evict_counters.get(&pid).copied().unwrap_or(0));
        let expected_blocks = (Reg::COUNT + 5).div_ceil(BLOCK_BYTES / 8);
        if stored.pid != pid || stored.blocks.len() != expected_blocks {
            self.sss.valid = false;
            return Err(self.halt(HaltReason::IntegrityError));
        }
        let mut words = Vec::new();
        for (i, sb) in stored.blocks.iter().enumerate() {
            if sb.va != ctx_va(pid, i) {
                self.sss.valid = false;
                return Err(self.halt(HaltReason::IntegrityError));
            }
            match open_block(&prf, sb, seed) {
                Ok(b) => words.extend(b.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()))),
                Err(_) => {
                    self.sss.valid = false;
                    return Err(self.halt(HaltReason::IntegrityError));
                }
            }
        }
        let r = Reg::COUNT;
        self.sss = SealedContext {
            regs: RegisterFile::from_words(&words[..r]),
            lep: words[r],
            pid: words[r + 1] as Pid,
            valid: words[r + 2] != 0,
            pending: Preserve::decode(words[r + 3], words[r + 4]),
        };
        Ok(())
    }

    /// Error status of `pid` sealed under its own key; `nonce` comes from the caller's RNG.
    pub fn get_results(&self, pid: Pid, nonce: u64) -> Option<SealedBlock> {
        let e = self.entry(pid)?;
        let prf = Prf::new(e.skey).subkey(DOMAIN_RESULTS);
        let mut b: Block = [0; BLOCK_BYTES];
        b[..4].copy_from_slice(&e.error_status.to_le_bytes());
        Some(seal_block(&prf, Seed(nonce), 0, &b))
    }

    pub(crate) fn table_mut(&mut self) -> &mut Vec<SmuTableEntry> {
        &mut self.table
    }

    pub(crate) fn table_capacity(&self) -> usize {
        self.table_capacity
    }

    pub(crate) fn tscs_mut(&mut self) -> &mut Vec<Tsc> {
        &mut self.tscs
    }

    pub(crate) fn tsc_capacity(&self) -> usize {
        self.tsc_capacity
    }

    pub(crate) fn alloc_scid(&mut self) -> u32 {
        let s = self.next_scid;
        self.next_scid += 1;
        s
    }
}

fn ctx_va(pid: Pid, i: usize) -> u64 {
    CTX_VA_BASE + ((pid as u64) << 12) + (i as u64) * 64
}

/// Reads the error status out of a `get_results` block.
pub fn open_results(skey: Key, sealed: &SealedBlock) -> Option<u32> {
    let prf = Prf::new(skey).subkey(DOMAIN_RESULTS);
    let b = open_block(&prf, sealed, sealed.seed).ok()?;
    Some(u32::from_le_bytes(b[..4].try_into().unwrap()))
}

#[cfg(test)]
mod tests;
