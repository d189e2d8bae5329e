//! Step interpreter for toy programs on one SMU-equipped hardware thread.
//!
//! Fetching an instruction whose region mark differs from the current mode
//! performs the mode switch first. Software threads are switched only by
//! the untrusted `YIELD`, which goes through the SMU scheduler hook.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use super::{
    Addr, Discard, EntryKind, ExitKind, HaltReason, Key, Mode, OpKind, Reg, RegisterFile, SmuError, SmuOp,
    SmuState, ToyInstr, ToyProgram, NSS_TOP, SIG_STACK_TOP, SS_TOP,
};
use crate::Pid;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    Enter(EntryKind),
    Exit { lep: Option<Addr>, visible: RegisterFile },
    Load { va: u64, value: u64 },
    Store { va: u64, value: u64 },
    NaLoad { va: u64, value: u64 },
    NaStore { va: u64, value: u64 },
    InitA { va: u64, blocks: u32 },
    Pop { value: u64 },
    PushNa { value: u64 },
    PopNa { value: u64 },
    Syscall { argnum: u8 },
    CallNoSec { i: u8 },
    NewThread { scid: u32 },
    NewThreadDelete { scid: u32 },
    Attach { tid: u32, addr: Addr },
    ThreadDelete { tid: u32 },
    Spawn { tid: u32, addr: Addr },
    Schedule { tid: u32 },
    Error(SmuError),
    Halt(HaltReason),
    Done { pending_tscs: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub tid: u32,
    pub pc: Addr,
    /// Region mark of the instruction at `pc`.
    pub trusted: bool,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{} {} ", self.tid, self.pc)?;
        match &self.kind {
            EventKind::Enter(EntryKind::First) => f.write_str("enter first"),
            EventKind::Enter(EntryKind::Lep { retval_kept: false }) => f.write_str("enter lep"),
            EventKind::Enter(EntryKind::Lep { retval_kept: true }) => f.write_str("enter lep keep-retval"),
            EventKind::Enter(EntryKind::Signal) => f.write_str("enter signal"),
            EventKind::Exit { lep, visible } => {
                match lep {
                    Some(l) => write!(f, "exit lep={l} live=")?,
                    None => f.write_str("exit signal live=")?,
                }
                let live = visible.live();
                if live.is_empty() {
                    f.write_str("-")
                } else {
                    for (i, r) in live.iter().enumerate() {
                        if i > 0 {
                            f.write_str(",")?;
                        }
                        write!(f, "{r}")?;
                    }
                    Ok(())
                }
            }
            EventKind::Load { va, value } => write!(f, "ld {va:#x} = {value}"),
            EventKind::Store { va, value } => write!(f, "st {va:#x} = {value}"),
            EventKind::NaLoad { va, value } => write!(f, "naload {va:#x} = {value}"),
            EventKind::NaStore { va, value } => write!(f, "nastore {va:#x} = {value}"),
            EventKind::InitA { va, blocks } => write!(f, "inita {va:#x} x{blocks}"),
            EventKind::Pop { value } => write!(f, "pop {value}"),
            EventKind::PushNa { value } => write!(f, "pushna {value}"),
            EventKind::PopNa { value } => write!(f, "popna {value}"),
            EventKind::Syscall { argnum } => write!(f, "syscall {argnum}"),
            EventKind::CallNoSec { i } => write!(f, "callnosec {i}"),
            EventKind::NewThread { scid } => write!(f, "newthread scid={scid}"),
            EventKind::NewThreadDelete { scid } => write!(f, "newthreaddelete scid={scid}"),
            EventKind::Attach { tid, addr } => write!(f, "attach tid={tid} at={addr}"),
            EventKind::ThreadDelete { tid } => write!(f, "threaddelete tid={tid}"),
            EventKind::Spawn { tid, addr } => write!(f, "spawn tid={tid} at={addr}"),
            EventKind::Schedule { tid } => write!(f, "schedule tid={tid}"),
            EventKind::Error(e) => write!(f, "error {e}"),
            EventKind::Halt(r) => write!(f, "halt {r}"),
            EventKind::Done { pending_tscs } => write!(f, "done pending={pending_tscs}"),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct OsThread {
    pc: Addr,
    ss: Vec<u64>,
    nss: Vec<u64>,
    saved_ss: Option<Vec<u64>>,
    user_regs: RegisterFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepState {
    Running,
    Done,
    Halted(HaltReason),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    pub events: Vec<Event>,
    pub halted: Option<HaltReason>,
    pub finished: bool,
    pub steps: usize,
}

impl RunOutcome {
    pub fn lines(&self) -> Vec<alloc::string::String> {
        self.events.iter().map(|e| alloc::format!("{e}")).collect()
    }
}

pub struct Machine<'p> {
    prog: &'p ToyProgram,
    pub smu: SmuState,
    threads: BTreeMap<u32, OsThread>,
    cur: u32,
    last_trusted_pc: Option<Addr>,
    via_call: bool,
    state: StepState,
    events: Vec<Event>,
    steps: usize,
}

impl<'p> Machine<'p> {
    /// Loads `prog` as secure process `pid` with thread 0 at the start label.
    pub fn new(prog: &'p ToyProgram, pid: Pid) -> Self {
        let mut smu = SmuState::new(0x5e_0000 + pid as u64, 8, 16);
        let keys = (Key::from_label(pid as u64 * 2 + 1), Key::from_label(pid as u64 * 2 + 2));
        smu.install_entry(keys, pid as u64, prog.first_lep, prog.sig_lep)
            .expect("fresh table has room");
        smu.set_pid(pid as u64, pid).expect("entry just installed");
        smu.set_current(Some(pid), Some(0));
        smu.regs.sp_nonsecure = NSS_TOP;
        let mut threads = BTreeMap::new();
        threads.insert(0, OsThread { pc: prog.start, ..OsThread::default() });
        Machine {
            prog,
            smu,
            threads,
            cur: 0,
            last_trusted_pc: None,
            via_call: false,
            state: StepState::Running,
            events: Vec::new(),
            steps: 0,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn state(&self) -> StepState {
        self.state
    }

    fn th(&mut self) -> &mut OsThread {
        self.threads.get_mut(&self.cur).expect("current thread exists")
    }

    fn emit(&mut self, pc: Addr, kind: EventKind) {
        let trusted = self.prog.is_trusted(pc);
        self.events.push(Event { tid: self.cur, pc, trusted, kind });
    }

    fn sync_sp(&mut self) {
        let (ss, nss) = {
            let t = self.th();
            (t.ss.len() as u64, t.nss.len() as u64)
        };
        self.smu.regs.sp_nonsecure = NSS_TOP - 8 * nss;
        if self.smu.mode() == Mode::Trusted {
            let top = if self.smu.in_signal() { SIG_STACK_TOP } else { SS_TOP };
            self.smu.regs.sp_secure = top - 8 * ss;
        }
    }

    fn fail(&mut self, pc: Addr, e: SmuError) -> StepState {
        match e {
            SmuError::Halt(r) => {
                self.emit(pc, EventKind::Halt(r));
                self.state = StepState::Halted(r);
            }
            other => {
                self.emit(pc, EventKind::Error(other));
                self.smu.regs.retval = u64::MAX;
                self.th().pc = pc + 1;
            }
        }
        self.state
    }

    fn finish(&mut self, pc: Addr) -> StepState {
        let pending = self.smu.pending_tscs();
        self.emit(pc, EventKind::Done { pending_tscs: pending });
        self.state = StepState::Done;
        self.state
    }

    pub fn step(&mut self) -> StepState {
        if self.state != StepState::Running {
            return self.state;
        }
        self.steps += 1;
        let pc = self.th().pc;
        let Some((instr, auth)) = self.prog.fetch(pc) else {
            return self.finish(pc);
        };

        if auth && self.smu.mode() == Mode::Untrusted {
            match self.smu.switch_to_trusted(pc) {
                Ok(kind) => {
                    let via_call = self.via_call;
                    let t = self.th();
                    if kind == EntryKind::Signal {
                        t.saved_ss = Some(core::mem::take(&mut t.ss));
                    }
                    if via_call && matches!(kind, EntryKind::First | EntryKind::Signal) {
                        if let Some(ra) = t.nss.pop() {
                            t.ss.push(ra);
                        }
                    }
                    self.sync_sp();
                    self.emit(pc, EventKind::Enter(kind));
                }
                Err(e) => return self.fail(pc, e),
            }
        } else if !auth && self.smu.mode() == Mode::Trusted {
            let lep = self.last_trusted_pc.map(|p| p + 1).unwrap_or(pc);
            match self.smu.switch_to_untrusted(lep) {
                Ok(kind) => {
                    let t = self.th();
                    if kind == ExitKind::Signal {
                        if let Some(ss) = t.saved_ss.take() {
                            t.ss = ss;
                        }
                    }
                    self.sync_sp();
                    let lep = (kind == ExitKind::Normal).then_some(lep);
                    self.emit(pc, EventKind::Exit { lep, visible: self.smu.regs });
                }
                Err(e) => return self.fail(pc, e),
            }
        }
        self.via_call = false;
        if auth {
            self.last_trusted_pc = Some(pc);
        }

        let trusted = self.smu.mode() == Mode::Trusted;
        let mut next = pc + 1;
        match instr {
            ToyInstr::Alu => {}
            ToyInstr::Set(r, v) => self.smu.regs.set(r, v),
            ToyInstr::Load(va, r) => match self.smu.access(va, OpKind::Load, 0) {
                Ok(v) => {
                    self.smu.regs.set(r, v);
                    self.emit(pc, EventKind::Load { va: va & !63, value: v });
                }
                Err(e) => return self.fail(pc, e),
            },
            ToyInstr::Store(va, r) => {
                let v = self.smu.regs.get(r);
                match self.smu.access(va, OpKind::Store, v) {
                    Ok(_) => self.emit(pc, EventKind::Store { va: va & !63, value: v }),
                    Err(e) => return self.fail(pc, e),
                }
            }
            ToyInstr::Call(t) => {
                let th = self.th();
                if trusted {
                    th.ss.push(pc + 1);
                } else {
                    th.nss.push(pc + 1);
                }
                if !trusted && self.prog.is_trusted(t) {
                    self.via_call = true;
                }
                next = t;
            }
            ToyInstr::Ret => {
                let th = self.th();
                let popped = if trusted { th.ss.pop() } else { th.nss.pop() };
                match popped {
                    Some(a) => next = a,
                    None => return self.finish(pc),
                }
            }
            ToyInstr::Jmp(t) => next = t,
            ToyInstr::Jz(r, t) => {
                if self.smu.regs.get(r) == 0 {
                    next = t;
                }
            }
            ToyInstr::Beq(r, v, t) => {
                if self.smu.regs.get(r) == v {
                    next = t;
                }
            }
            ToyInstr::Push(r) => {
                let v = self.smu.regs.get(r);
                let th = self.th();
                if trusted {
                    th.ss.push(v);
                } else {
                    th.nss.push(v);
                }
            }
            ToyInstr::Pop(r) => {
                let th = self.th();
                let v = if trusted { th.ss.pop() } else { th.nss.pop() }.unwrap_or(0);
                self.smu.regs.set(r, v);
                self.emit(pc, EventKind::Pop { value: v });
            }
            ToyInstr::Sysret => next = self.smu.regs.retaddr,
            ToyInstr::Spawn { tid, addr } => {
                self.threads.insert(tid, OsThread { pc: addr, ..OsThread::default() });
                self.emit(pc, EventKind::Spawn { tid, addr });
            }
            ToyInstr::Yield(tid) => {
                if !self.threads.contains_key(&tid) || tid == self.cur {
                    // nothing to switch to
                } else {
                    let regs = self.smu.regs;
                    let th = self.th();
                    th.pc = pc + 1;
                    th.user_regs = regs;
                    self.emit(pc, EventKind::Schedule { tid });
                    self.cur = tid;
                    if let Err(e) = self.smu.schedule(tid) {
                        return self.fail(pc, e);
                    }
                    self.smu.regs = self.th().user_regs;
                    self.last_trusted_pc = None;
                    self.sync_sp();
                    return self.state;
                }
            }
            ToyInstr::End => return self.finish(pc),
            ToyInstr::Smu(op) => {
                if let Err(e) = self.smu_op(pc, op, &mut next) {
                    return self.fail(pc, e);
                }
            }
        }
        self.sync_sp();
        self.th().pc = next;
        self.state
    }

    fn smu_op(&mut self, pc: Addr, op: SmuOp, next: &mut Addr) -> Result<(), SmuError> {
        match op {
            SmuOp::Syscall { argnum, target } => {
                self.smu.mark_syscall(argnum)?;
                self.smu.regs.retaddr = pc + 1;
                self.emit(pc, EventKind::Syscall { argnum });
                *next = target;
            }
            SmuOp::CallNoSec { i, target } => {
                self.smu.call_nosec(i)?;
                self.th().nss.push(pc + 1);
                self.emit(pc, EventKind::CallNoSec { i });
                *next = target;
            }
            SmuOp::PushNa(r) => {
                let v = self.smu.regs.get(r);
                let mut nss = core::mem::take(&mut self.th().nss);
                let res = self.smu.na_push(&mut nss, v);
                self.th().nss = nss;
                res?;
                self.emit(pc, EventKind::PushNa { value: v });
            }
            SmuOp::PopNa(r) => {
                let mut nss = core::mem::take(&mut self.th().nss);
                let res = self.smu.na_pop(&mut nss);
                self.th().nss = nss;
                let v = res?.unwrap_or(0);
                self.smu.regs.set(r, v);
                self.emit(pc, EventKind::PopNa { value: v });
            }
            SmuOp::NaLoad(va, r) => {
                let v = self.smu.access(va, OpKind::NaLoad, 0)?;
                self.smu.regs.set(r, v);
                self.emit(pc, EventKind::NaLoad { va: va & !63, value: v });
            }
            SmuOp::NaStore(va, r) => {
                let v = self.smu.regs.get(r);
                self.smu.access(va, OpKind::NaStore, v)?;
                self.emit(pc, EventKind::NaStore { va: va & !63, value: v });
            }
            SmuOp::InitA { va, blocks } => {
                self.smu.init_a(va, blocks)?;
                self.emit(pc, EventKind::InitA { va: va & !63, blocks });
            }
            SmuOp::NewThread => {
                let scid = self.smu.thread_create(pc)?;
                self.smu.regs.set(Reg::Gp(7), scid as u64);
                self.emit(pc, EventKind::NewThread { scid });
            }
            SmuOp::NewThreadDelete => {
                let scid = self.smu.regs.get(Reg::Gp(7)) as u32;
                self.smu.thread_discard(Discard::Scid(scid))?;
                self.emit(pc, EventKind::NewThreadDelete { scid });
            }
            SmuOp::Attach { tid, addr } => {
                self.smu.thread_attach(tid, addr)?;
                self.emit(pc, EventKind::Attach { tid, addr });
            }
            SmuOp::ThreadDelete(tid) => {
                self.smu.thread_discard(Discard::Tid(tid))?;
                self.emit(pc, EventKind::ThreadDelete { tid });
            }
        }
        Ok(())
    }

    pub fn run(mut self, max_steps: usize) -> RunOutcome {
        while self.state == StepState::Running && self.steps < max_steps {
            self.step();
        }
        RunOutcome {
            halted: match self.state {
                StepState::Halted(r) => Some(r),
                _ => None,
            },
            finished: self.state == StepState::Done,
            steps: self.steps,
            events: self.events,
        }
    }
}

/// Parses and runs a toy program as process 1.
pub fn run_program(prog: &ToyProgram, max_steps: usize) -> RunOutcome {
    Machine::new(prog, 1).run(max_steps)
}
