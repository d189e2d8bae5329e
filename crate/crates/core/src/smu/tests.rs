use super::machine::{run_program, StepState};
use super::*;
use crate::workload::{gen_smu_program, SmuScenario};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

fn keys(n: u64) -> (Key, Key) {
    (Key::from_label(n), Key::from_label(n + 1000))
}

/// One process (pid 7, first LEP 100, signal LEP 200) already bound.
fn bound() -> SmuState {
    let mut s = SmuState::new(1, 4, 4);
    s.install_entry(keys(1), 0xabc, 100, Some(200)).unwrap();
    s.set_pid(0xabc, 7).unwrap();
    s.set_current(Some(7), Some(0));
    s
}

fn entered() -> SmuState {
    let mut s = bound();
    assert_eq!(s.switch_to_trusted(100), Ok(EntryKind::First));
    s
}

fn fill_regs(s: &mut SmuState) {
    for r in Reg::all() {
        s.regs.set(r, 0x100 + r.index() as u64);
    }
}

fn run(src: &str) -> machine::RunOutcome {
    run_program(&ToyProgram::parse(src).unwrap(), 10_000)
}

#[test]
fn every_scenario_matches_its_golden_trace() {
    for s in SmuScenario::ALL {
        let sp = gen_smu_program(s);
        let prog = ToyProgram::parse(sp.source).unwrap();
        let got = run_program(&prog, 10_000).lines();
        let want: Vec<&str> = sp.golden_lines().collect();
        assert_eq!(got, want, "{s}");
    }
}

#[test]
fn set_pid_binds_and_rejects_unknown() {
    let mut s = SmuState::new(1, 4, 4);
    s.install_entry(keys(1), 0xabc, 100, None).unwrap();
    assert_eq!(s.set_pid(0xabc, 7), Ok(false));
    assert_eq!(s.entry(7).unwrap().process_hash, 0xabc);
    let before = s.entries().to_vec();
    assert_eq!(s.set_pid(0xdead, 9), Err(SmuError::UnknownProcessHash));
    assert_eq!(s.entries(), &before[..]);
}

#[test]
fn table_capacity_is_enforced() {
    let mut s = SmuState::new(1, 2, 4);
    s.install_entry(keys(1), 1, 0, None).unwrap();
    s.install_entry(keys(2), 2, 0, None).unwrap();
    assert_eq!(s.install_entry(keys(3), 3, 0, None), Err(SmuError::TableFull));
}

#[test]
fn reused_pid_erases_old_entry_and_purges_its_lines() {
    let mut s = entered();
    s.init_a(0x1000, 1).unwrap();
    s.access(0x1000, OpKind::Store, 5).unwrap();
    assert!(s.line(0x1000).auth);
    s.install_entry(keys(2), 0xdef, 300, None).unwrap();
    assert_eq!(s.set_pid(0xdef, 7), Ok(true));
    assert_eq!(s.entries().len(), 1);
    assert_eq!(s.entry(7).unwrap().process_hash, 0xdef);
    assert!(!s.line(0x1000).auth);
    assert_eq!(s.peek(0x1000), 0);
}

#[test]
fn exit_without_pending_clears_everything_but_the_open_stack() {
    let mut s = entered();
    fill_regs(&mut s);
    let snapshot = s.regs;
    assert_eq!(s.switch_to_untrusted(150), Ok(ExitKind::Normal));
    assert_eq!(s.regs.live(), Vec::<Reg>::new());
    assert_eq!(s.regs.sp_nonsecure, snapshot.sp_nonsecure);
    assert!(s.sss().valid);
    assert_eq!(s.sss().lep, 150);
    assert_eq!(s.sss().regs, snapshot);
    assert_eq!(s.mode(), Mode::Untrusted);
}

#[test]
fn syscall_preservation_sets() {
    for n in 0..=6u8 {
        let mut s = entered();
        fill_regs(&mut s);
        let snap = s.regs;
        s.mark_syscall(n).unwrap();
        s.switch_to_untrusted(150).unwrap();
        for r in Reg::all() {
            let kept = matches!(r, Reg::Arg(i) if i < n) || r == Reg::RetAddr || r == Reg::SpNonsecure;
            let want = if kept { snap.get(r) } else { 0 };
            assert_eq!(s.regs.get(r), want, "argnum {n} reg {r}");
        }
    }
    let mut s = entered();
    assert_eq!(s.mark_syscall(7), Err(SmuError::ArgnumTooLarge));
}

#[test]
fn latest_mark_wins() {
    let mut s = entered();
    fill_regs(&mut s);
    s.mark_syscall(5).unwrap();
    s.mark_syscall(1).unwrap();
    assert_eq!(s.pending(), Preserve::Syscall(1));
    s.switch_to_untrusted(150).unwrap();
    assert_eq!(s.regs.live(), vec![Reg::Arg(0), Reg::RetAddr]);

    let mut s = entered();
    s.mark_syscall(3).unwrap();
    s.call_nosec(2).unwrap();
    assert_eq!(s.pending(), Preserve::NoSec(2));
}

#[test]
fn lep_reentry_restores_registers_and_syscall_return_keeps_retval() {
    let mut s = entered();
    fill_regs(&mut s);
    let snap = s.regs;
    s.mark_syscall(2).unwrap();
    s.switch_to_untrusted(150).unwrap();
    s.regs.retval = 77;
    s.regs.gp[3] = 0xbad;
    assert_eq!(s.switch_to_trusted(150), Ok(EntryKind::Lep { retval_kept: true }));
    let mut want = snap;
    want.retval = 77;
    assert_eq!(s.regs, want);
    assert!(!s.sss().valid);

    let mut s = entered();
    fill_regs(&mut s);
    let snap = s.regs;
    s.switch_to_untrusted(150).unwrap();
    s.regs.retval = 77;
    assert_eq!(s.switch_to_trusted(150), Ok(EntryKind::Lep { retval_kept: false }));
    assert_eq!(s.regs, snap);
}

#[test]
fn wrong_entry_halts_and_consumes_sss() {
    let mut s = entered();
    s.switch_to_untrusted(150).unwrap();
    assert_eq!(s.switch_to_trusted(151), Err(SmuError::Halt(HaltReason::IllegalEntry)));
    assert!(!s.sss().valid);
    assert_eq!(s.halted(), Some(HaltReason::IllegalEntry));
    assert_eq!(s.entry(7).unwrap().error_status, HaltReason::IllegalEntry.code());
}

#[test]
fn sss_is_single_use() {
    let mut s = entered();
    s.switch_to_untrusted(150).unwrap();
    s.switch_to_trusted(150).unwrap();
    s.mode = Mode::Untrusted;
    assert_eq!(s.switch_to_trusted(150), Err(SmuError::Halt(HaltReason::IllegalEntry)));
}

#[test]
fn first_lep_only_once() {
    let mut s = bound();
    assert_eq!(s.switch_to_trusted(101), Err(SmuError::Halt(HaltReason::IllegalEntry)));
    let mut s = bound();
    s.regs.arg[0] = 3;
    s.switch_to_trusted(100).unwrap();
    assert_eq!(s.regs.arg[0], 3);
    s.switch_to_untrusted(120).unwrap();
    assert_eq!(s.switch_to_trusted(100), Err(SmuError::Halt(HaltReason::IllegalEntry)));
}

#[test]
fn signal_entry_skips_restore_and_returns_the_interrupted_context() {
    let mut s = entered();
    fill_regs(&mut s);
    let snap = s.regs;
    s.switch_to_untrusted(150).unwrap();
    s.regs.arg[0] = 11;
    assert_eq!(s.switch_to_trusted(200), Ok(EntryKind::Signal));
    assert_eq!(s.regs.arg[0], 11);
    assert_eq!(s.regs.gp[0], 0);
    assert_eq!(s.regs.sp_secure, SIG_STACK_TOP);
    s.regs.gp[1] = 0x5ec;
    assert_eq!(s.switch_to_untrusted(999), Ok(ExitKind::Signal));
    assert!(s.regs.live().is_empty());
    assert_eq!(s.switch_to_trusted(150), Ok(EntryKind::Lep { retval_kept: false }));
    assert_eq!(s.regs, snap);
}

#[test]
fn secure_access_table() {
    use OpKind::*;
    let auth = CacheLineMeta::authentic(0x40, 7);
    let plain = CacheLineMeta::untrusted(0x40);
    let cases = [
        (auth, false, Load, false),
        (auth, false, Store, false),
        (auth, true, Load, true),
        (auth, true, Store, true),
        (CacheLineMeta::authentic(0x40, 8), true, Load, false),
        (plain, false, Load, true),
        (plain, false, Store, true),
        (plain, true, Load, false),
        (plain, true, NaLoad, true),
        (auth, true, NaLoad, false),
        (plain, false, NaLoad, false),
        (auth, true, NaStore, true),
        (auth, false, NaStore, false),
        (plain, true, InitA, true),
        (plain, false, InitA, false),
    ];
    for (line, instr_auth, op, ok) in cases {
        let mut l = line;
        let r = secure_access(&mut l, instr_auth, Some(7), op);
        assert_eq!(r.is_ok(), ok, "{line:?} auth={instr_auth} {op:?}");
        if !ok {
            assert_eq!(r, Err(HaltReason::SecureAccessViolation));
        }
    }
    let mut l = auth;
    secure_access(&mut l, true, Some(7), NaStore).unwrap();
    assert!(!l.auth);
    let mut l = plain;
    secure_access(&mut l, true, Some(7), InitA).unwrap();
    assert!(l.auth && l.owner_pid == Some(7));
}

#[test]
fn na_stack_round_trip_and_untrusted_rejection() {
    let mut s = entered();
    let mut nss = Vec::new();
    s.na_push(&mut nss, 7).unwrap();
    assert_eq!(s.regs.sp_nonsecure, NSS_TOP - 8);
    assert_eq!(s.na_pop(&mut nss), Ok(Some(7)));
    assert_eq!(s.regs.sp_nonsecure, NSS_TOP);
    s.switch_to_untrusted(150).unwrap();
    assert_eq!(s.na_push(&mut nss, 1), Err(SmuError::Halt(HaltReason::SecureAccessViolation)));
}

#[test]
fn trusted_push_is_visible_to_untrusted_pop() {
    let out = run(".untrusted\nboot:\nCALL main\nEND\nreader:\nPOP gp0\nST 0x9000 gp0\nEND\n.trusted\nmain:\nALU gp2 7\nSMU pushna gp2\nJMP reader\n");
    assert!(out.lines().iter().any(|l| l.ends_with("pop 7")), "{:?}", out.lines());
    assert!(out.lines().iter().any(|l| l.ends_with("st 0x9000 = 7")));
}

#[test]
fn callnosec_return_keeps_retval_and_stack_holds_return_address() {
    let src = ".untrusted\nboot:\nCALL main\nEND\nf:\nALU retval 9\nRET\n.trusted\nmain:\nSMU inita 0x1000 1\nALU arg0 1\nALU arg1 2\nALU arg2 3\nSMU callnosec 2 f\nST 0x1000 retval\nRET\n";
    let prog = ToyProgram::parse(src).unwrap();
    let mut m = Machine::new(&prog, 1);
    while m.events().iter().all(|e| !matches!(e.kind, EventKind::CallNoSec { .. })) {
        m.step();
    }
    let call_pc = prog.label("main").unwrap() + 4;
    assert_eq!(m.smu.regs.sp_nonsecure, NSS_TOP - 8);
    let out = m.run(1000);
    let lines = out.lines();
    assert!(lines.contains(&format!("t0 {} exit lep={} live=arg0,arg1", prog.label("f").unwrap(), call_pc + 1)));
    assert!(lines.contains(&format!("t0 {} enter lep keep-retval", call_pc + 1)));
    assert!(lines.contains(&format!("t0 {} st 0x1000 = 9", call_pc + 1)));
    assert!(out.finished);
}

#[test]
fn first_call_moves_return_address_to_secure_stack() {
    let prog = ToyProgram::parse(".untrusted\nboot:\nCALL main\nEND\n.trusted\nmain:\nALU\nRET\n").unwrap();
    let mut m = Machine::new(&prog, 1);
    m.step();
    assert_eq!(m.smu.regs.sp_nonsecure, NSS_TOP - 8);
    m.step();
    assert_eq!(m.smu.mode(), Mode::Trusted);
    assert_eq!(m.smu.regs.sp_nonsecure, NSS_TOP);
    assert_eq!(m.smu.regs.sp_secure, SS_TOP - 8);
    let out = m.run(100);
    assert!(out.finished);
    assert_eq!(out.lines().last().unwrap(), "t0 1 done pending=0");
}

#[test]
fn fully_trusted_body_never_exits() {
    let out = run(".trusted\nmain:\nSMU inita 0x40 1\nALU gp0 3\nST 0x40 gp0\nLD 0x40 gp1\nALU\nEND\n");
    assert!(out.finished);
    let switches = out.events.iter().filter(|e| matches!(e.kind, EventKind::Exit { .. } | EventKind::Enter(_))).count();
    assert_eq!(switches, 1);
}

#[test]
fn round_trip_at_correct_lep_preserves_registers() {
    let src = ".untrusted\nboot:\nCALL main\nEND\nos:\nALU gp0 1\nSYSRET\n.trusted\nmain:\nSMU inita 0x40 1\nALU gp5 4242\nSMU syscall 0 os\nST 0x40 gp5\nRET\n";
    let out = run(src);
    let lines = out.lines();
    let sw = out.events.iter().filter(|e| matches!(e.kind, EventKind::Exit { .. } | EventKind::Enter(EntryKind::Lep { .. }))).count();
    assert_eq!(sw, 3, "{lines:?}");
    assert!(lines.iter().any(|l| l.ends_with("st 0x40 = 4242")));
}

#[test]
fn thread_create_records_parent_context() {
    let mut s = entered();
    fill_regs(&mut s);
    let scid = s.thread_create(40).unwrap();
    let t = s.tscs()[0];
    assert_eq!(t.scid, scid);
    assert_eq!(t.lep, 42);
    assert!(!t.active && t.tid.is_none());
    assert_eq!(t.regs.retval, 0);
    assert_eq!(t.regs.gp, s.regs.gp);
    assert_eq!(t.parent_tid, Some(0));
    s.switch_to_untrusted(41).unwrap();
    assert_eq!(s.thread_create(50), Err(SmuError::Halt(HaltReason::SecureAccessViolation)));
}

#[test]
fn sealed_storage_capacity() {
    let mut s = entered();
    for i in 0..4 {
        s.thread_create(i * 10).unwrap();
    }
    assert_eq!(s.thread_create(99), Err(SmuError::SealedStorageFull));
}

#[test]
fn attach_then_schedule_enters_with_parent_registers() {
    let mut s = entered();
    fill_regs(&mut s);
    let parent = s.regs;
    s.thread_create(40).unwrap();
    s.mark_syscall(0).unwrap();
    s.switch_to_untrusted(42).unwrap();
    s.thread_attach(12, 42).unwrap();
    s.schedule(12).unwrap();
    assert_eq!(s.switch_to_trusted(42), Ok(EntryKind::Lep { retval_kept: false }));
    let mut want = parent;
    want.retval = 0;
    want.sp_nonsecure = s.regs.sp_nonsecure;
    assert_eq!(s.regs, want);
}

#[test]
fn bad_attach_cases() {
    let mut s = entered();
    s.thread_create(40).unwrap();
    s.switch_to_untrusted(41).unwrap();
    assert_eq!(s.thread_attach(12, 43), Err(SmuError::Halt(HaltReason::BadAttach)));

    let mut s = entered();
    s.thread_create(40).unwrap();
    s.switch_to_untrusted(41).unwrap();
    s.thread_attach(12, 42).unwrap();
    assert_eq!(s.thread_attach(13, 42), Err(SmuError::Halt(HaltReason::BadAttach)));
}

#[test]
fn discard_paths() {
    // clone failure: pending context removed
    let mut s = entered();
    let scid = s.thread_create(40).unwrap();
    s.thread_discard(Discard::Scid(scid)).unwrap();
    assert!(s.tscs().is_empty());

    // attach before delete
    let mut s = entered();
    let scid = s.thread_create(40).unwrap();
    s.switch_to_untrusted(41).unwrap();
    s.thread_attach(5, 42).unwrap();
    s.switch_to_trusted(41).unwrap();
    assert_eq!(s.thread_discard(Discard::Scid(scid)), Err(SmuError::Halt(HaltReason::BadAttach)));

    // delete by tid, then rescheduling halts
    let mut s = entered();
    s.thread_create(40).unwrap();
    s.switch_to_untrusted(41).unwrap();
    s.thread_attach(5, 42).unwrap();
    s.thread_discard(Discard::Tid(5)).unwrap();
    assert_eq!(s.schedule(5), Err(SmuError::Halt(HaltReason::MissingTsc)));

    // scid deletion needs trusted mode; tid deletion does not
    let mut s = entered();
    let scid = s.thread_create(40).unwrap();
    s.switch_to_untrusted(41).unwrap();
    assert_eq!(s.thread_discard(Discard::Scid(scid)), Err(SmuError::Halt(HaltReason::SecureAccessViolation)));
}

#[test]
fn unattached_thread_fails_at_entry() {
    let mut s = entered();
    s.thread_create(40).unwrap();
    s.mark_syscall(0).unwrap();
    s.switch_to_untrusted(42).unwrap();
    s.schedule(9).unwrap();
    assert_eq!(s.switch_to_trusted(42), Err(SmuError::Halt(HaltReason::IllegalEntry)));
}

#[test]
fn context_evict_restore_round_trip() {
    let mut s = entered();
    fill_regs(&mut s);
    let snap = s.regs;
    s.switch_to_untrusted(150).unwrap();
    let stored = s.context_evict().unwrap();
    assert!(!s.sss().valid);
    s.set_current(None, None);
    assert!(s.context_evict().is_none());
    s.context_restore(7, Some(&stored)).unwrap();
    assert_eq!(s.switch_to_trusted(150), Ok(EntryKind::Lep { retval_kept: false }));
    assert_eq!(s.regs, snap);
}

#[test]
fn tampered_or_replayed_context_is_rejected() {
    let mut s = entered();
    s.switch_to_untrusted(150).unwrap();
    let mut stored = s.context_evict().unwrap();
    stored.blocks[1].cipher[3] ^= 1;
    assert_eq!(s.context_restore(7, Some(&stored)), Err(SmuError::Halt(HaltReason::IntegrityError)));

    let mut s = entered();
    s.switch_to_untrusted(150).unwrap();
    let old = s.context_evict().unwrap();
    s.context_restore(7, Some(&old)).unwrap();
    s.switch_to_trusted(150).unwrap();
    s.switch_to_untrusted(160).unwrap();
    let _new = s.context_evict().unwrap();
    assert_eq!(s.context_restore(7, Some(&old)), Err(SmuError::Halt(HaltReason::IntegrityError)));
}

#[test]
fn skipping_evict_between_two_secure_processes_halts() {
    let mut s = SmuState::new(1, 4, 4);
    s.install_entry(keys(1), 0xa, 100, None).unwrap();
    s.install_entry(keys(2), 0xb, 500, None).unwrap();
    s.set_pid(0xa, 1).unwrap();
    s.set_pid(0xb, 2).unwrap();
    s.set_current(Some(1), Some(0));
    s.switch_to_trusted(100).unwrap();
    s.switch_to_untrusted(150).unwrap();
    s.set_current(Some(2), Some(0));
    s.switch_to_trusted(500).unwrap();
    s.switch_to_untrusted(550).unwrap();
    s.set_current(Some(1), Some(0));
    assert_eq!(s.switch_to_trusted(150), Err(SmuError::Halt(HaltReason::IllegalEntry)));
}

#[test]
fn evict_restore_with_two_processes_works() {
    let mut s = SmuState::new(1, 4, 4);
    s.install_entry(keys(1), 0xa, 100, None).unwrap();
    s.install_entry(keys(2), 0xb, 500, None).unwrap();
    s.set_pid(0xa, 1).unwrap();
    s.set_pid(0xb, 2).unwrap();
    s.set_current(Some(1), Some(0));
    s.switch_to_trusted(100).unwrap();
    s.regs.gp[0] = 5;
    s.switch_to_untrusted(150).unwrap();
    let a = s.context_evict();
    s.context_restore(2, None).unwrap();
    s.switch_to_trusted(500).unwrap();
    s.switch_to_untrusted(550).unwrap();
    let _b = s.context_evict();
    s.context_restore(1, a.as_ref()).unwrap();
    s.switch_to_trusted(150).unwrap();
    assert_eq!(s.regs.gp[0], 5);
}

#[test]
fn non_secure_pid_context_ops_are_noops() {
    let mut s = bound();
    s.set_current(Some(99), None);
    assert!(s.context_evict().is_none());
    assert_eq!(s.context_restore(99, None), Ok(()));
}

#[test]
fn results_are_sealed_with_the_process_key() {
    let mut s = entered();
    s.switch_to_untrusted(150).unwrap();
    let _ = s.switch_to_trusted(151);
    let sealed = s.get_results(7, 12345).unwrap();
    assert_eq!(open_results(keys(1).0, &sealed), Some(HaltReason::IllegalEntry.code()));
    assert_eq!(open_results(keys(2).0, &sealed), None);
}

fn pair() -> (SmuState, SmuState, MigrationChannel) {
    let mut a = SmuState::new(1, 4, 4);
    a.install_entry(keys(1), 0xabc, 100, None).unwrap();
    a.set_pid(0xabc, 7).unwrap();
    a.set_current(Some(7), Some(0));
    let b = SmuState::new(2, 4, 4);
    (a, b, MigrationChannel::new(Key::from_label(77)))
}

#[test]
fn entry_migration_moves_exactly_one_copy() {
    let (mut a, mut b, mut ch) = pair();
    let what = MigrateWhat::Entry { process_hash: 0xabc };
    migrate(&mut a, what, &mut b, &mut ch).unwrap();
    assert!(a.entry(7).is_none());
    let e = b.entry(7).unwrap();
    assert_eq!(e.skey, keys(1).0);
    assert_eq!(e.process_hash, 0xabc);
}

#[test]
fn tampered_migration_halts_receiver_and_source_keeps_entry() {
    for bit in [0usize, 7, 100, 300] {
        let (a, mut b, mut ch) = pair();
        let what = MigrateWhat::Entry { process_hash: 0xabc };
        let mut msg = a.migrate_out(what, &mut ch).unwrap();
        let i = (bit / 8) % msg.body.len();
        msg.body[i] ^= 1 << (bit % 8);
        assert_eq!(b.migrate_in(&msg, &mut ch), Err(SmuError::Halt(HaltReason::MigrationTamper)));
        assert_eq!(b.halted(), Some(HaltReason::MigrationTamper));
        assert!(b.entry(7).is_none());
        assert!(a.entry(7).is_some());
    }
    let (a, mut b, mut ch) = pair();
    let mut msg = a.migrate_out(MigrateWhat::Entry { process_hash: 0xabc }, &mut ch).unwrap();
    msg.sig[15] ^= 0x80;
    assert_eq!(b.migrate_in(&msg, &mut ch), Err(SmuError::Halt(HaltReason::MigrationTamper)));
}

#[test]
fn replayed_migration_is_rejected() {
    let (a, mut b, mut ch) = pair();
    let msg = a.migrate_out(MigrateWhat::Entry { process_hash: 0xabc }, &mut ch).unwrap();
    b.migrate_in(&msg, &mut ch).unwrap();
    assert_eq!(b.migrate_in(&msg, &mut ch), Err(SmuError::Halt(HaltReason::MigrationTamper)));
}

#[test]
fn pending_thread_migration_ships_the_context() {
    let (mut a, mut b, mut ch) = pair();
    a.switch_to_trusted(100).unwrap();
    a.regs.gp[2] = 31;
    a.thread_create(40).unwrap();
    a.switch_to_untrusted(41).unwrap();
    let what = MigrateWhat::Thread { pid: 7, at: ThreadRef::Lep(42) };
    migrate(&mut a, what, &mut b, &mut ch).unwrap();
    assert!(a.tscs().is_empty());
    assert_eq!(b.tscs().len(), 1);
    assert_eq!(b.tscs()[0].regs.gp[2], 31);
    b.set_current(Some(7), Some(0));
    b.thread_attach(3, 42).unwrap();
    b.schedule(3).unwrap();
    assert!(b.switch_to_trusted(42).is_ok());
}

#[test]
fn active_thread_migration_gets_a_local_root() {
    let (mut a, mut b, mut ch) = pair();
    let src_root = a.entry(7).unwrap().root_hash;
    migrate(&mut a, MigrateWhat::Thread { pid: 7, at: ThreadRef::Tid(0) }, &mut b, &mut ch).unwrap();
    assert!(a.entry(7).is_some());
    let dst_root = b.entry(7).unwrap().root_hash;
    assert_ne!(dst_root, src_root);
    assert_eq!(dst_root, b.fresh_root(7));
}

#[test]
fn machine_halts_stop_execution() {
    let out = run(".untrusted\nboot:\nJMP inside\n.trusted\nmain:\nALU\ninside:\nALU\n");
    assert_eq!(out.halted, Some(HaltReason::IllegalEntry));
    assert_eq!(out.events.len(), 1);
    let prog = ToyProgram::parse(".untrusted\nboot:\nJMP inside\n.trusted\nmain:\nALU\ninside:\nALU\n").unwrap();
    let mut m = Machine::new(&prog, 1);
    m.step();
    m.step();
    let n = m.events().len();
    assert_eq!(m.step(), StepState::Halted(HaltReason::IllegalEntry));
    assert_eq!(m.events().len(), n);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    const VAS: [u64; 4] = [0x1000, 0x1040, 0x1080, 0x10c0];

    fn reg() -> impl Strategy<Value = Reg> {
        (0usize..Reg::COUNT).prop_filter_map("no stack pointers", |i| {
            let r = Reg::from_index(i);
            (!matches!(r, Reg::SpSecure | Reg::SpNonsecure)).then_some(r)
        })
    }

    fn rname(r: Reg) -> String {
        format!("{r}")
    }

    /// Random straight-line programs split into trusted and untrusted halves
    /// with jumps between them.
    fn program() -> impl Strategy<Value = String> {
        let line = prop_oneof![
            (reg(), 1u64..1000).prop_map(|(r, v)| format!("ALU {} {v}", rname(r))),
            (0usize..4, reg()).prop_map(|(a, r)| format!("LD {:#x} {}", VAS[a], rname(r))),
            (0usize..4, reg()).prop_map(|(a, r)| format!("ST {:#x} {}", VAS[a], rname(r))),
            (0usize..4, reg()).prop_map(|(a, r)| format!("SMU naload {:#x} {}", VAS[a], rname(r))),
            (0usize..4, reg()).prop_map(|(a, r)| format!("SMU nastore {:#x} {}", VAS[a], rname(r))),
            (0usize..4).prop_map(|a| format!("SMU inita {:#x} 1", VAS[a])),
            (0u8..=6).prop_map(|n| format!("SMU syscall {n} u0")),
            (1u8..=6).prop_map(|n| format!("SMU callnosec {n} u0")),
            (0usize..6).prop_map(|k| format!("JMP t{k}")),
            (0usize..6).prop_map(|k| format!("JMP u{k}")),
            Just("SYSRET".to_string()),
            Just("RET".to_string()),
        ];
        (proptest::collection::vec(line.clone(), 6..12), proptest::collection::vec(line, 6..12)).prop_map(
            |(tr, un)| {
                let mut s = String::from(".untrusted\nboot:\nCALL t0\nEND\n");
                for (i, l) in un.iter().enumerate() {
                    if i < 6 {
                        s += &format!("u{i}:\n");
                    }
                    if l.starts_with("SMU") || l == "RET" && i == 0 {
                        s += "ALU\n";
                    } else {
                        s += l;
                        s += "\n";
                    }
                }
                s += ".trusted\n";
                for (i, l) in tr.iter().enumerate() {
                    if i < 6 {
                        s += &format!("t{i}:\n");
                    }
                    if l == "SYSRET" {
                        s += "ALU\n";
                    } else {
                        s += l;
                        s += "\n";
                    }
                }
                s += "END\n";
                s
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 10_000, ..ProptestConfig::default() })]

        #[test]
        fn untrusted_code_never_touches_authentic_lines(src in program()) {
            let prog = ToyProgram::parse(&src).unwrap();
            let out = run_program(&prog, 300);
            // independent model of the auth bits, driven by the event stream
            let mut auth = [false; 4];
            let idx = |va: u64| VAS.iter().position(|&v| v == va);
            for e in &out.events {
                match e.kind {
                    EventKind::InitA { va, .. } => auth[idx(va).unwrap()] = true,
                    EventKind::NaStore { va, .. } => auth[idx(va).unwrap()] = false,
                    EventKind::Load { va, .. } | EventKind::Store { va, .. } => {
                        let a = auth[idx(va).unwrap()];
                        prop_assert_eq!(a, e.trusted, "{} in\n{}", e, src);
                    }
                    EventKind::NaLoad { va, .. } => {
                        prop_assert!(e.trusted && !auth[idx(va).unwrap()]);
                    }
                    _ => {}
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 2_000, ..ProptestConfig::default() })]

        #[test]
        fn exits_expose_only_the_declared_set(src in program()) {
            let prog = ToyProgram::parse(&src).unwrap();
            let out = run_program(&prog, 300);
            let mut pending = Preserve::Nothing;
            for e in &out.events {
                match e.kind {
                    EventKind::Syscall { argnum } => pending = Preserve::Syscall(argnum),
                    EventKind::CallNoSec { i } => pending = Preserve::NoSec(i),
                    EventKind::Exit { lep: Some(_), visible } => {
                        for r in Reg::all() {
                            if !pending.keeps(r) {
                                prop_assert_eq!(visible.get(r), 0, "{} leaked at {}", r, e);
                            }
                        }
                        pending = Preserve::Nothing;
                    }
                    _ => {}
                }
            }
        }

        #[test]
        fn entries_happen_only_at_legal_points(src in program()) {
            let prog = ToyProgram::parse(&src).unwrap();
            let out = run_program(&prog, 300);
            let mut lep: Option<u64> = None;
            let mut first_done = false;
            for e in &out.events {
                match e.kind {
                    EventKind::Exit { lep: l, .. } => lep = l,
                    EventKind::Enter(EntryKind::First) => {
                        prop_assert!(!first_done);
                        prop_assert_eq!(e.pc, prog.first_lep);
                        first_done = true;
                    }
                    EventKind::Enter(EntryKind::Lep { .. }) => {
                        prop_assert_eq!(Some(e.pc), lep);
                        lep = None;
                    }
                    EventKind::Halt(HaltReason::IllegalEntry) => {
                        prop_assert!(Some(e.pc) != lep || lep.is_none());
                    }
                    _ => {}
                }
            }
        }

        #[test]
        fn tsc_linearity(ops in proptest::collection::vec((0u8..5, 0u32..3, 0u64..3), 1..40)) {
            // 0 create, 1 attach, 2 discard scid, 3 discard tid, 4 schedule
            let mut s = entered();
            let mut attached_once = alloc::collections::BTreeSet::new();
            for (op, a, b) in ops {
                if s.halted().is_some() {
                    break;
                }
                let lep = 40 + b * 10 + 2;
                let r = match op {
                    0 => {
                        if s.mode() == Mode::Untrusted { let _ = s.switch_to_trusted(s.sss().lep); }
                        if s.mode() == Mode::Trusted { s.thread_create(40 + b * 10).map(|_| ()) } else { Ok(()) }
                    }
                    1 => {
                        let before: Vec<Tsc> = s.tscs().to_vec();
                        let r = s.thread_attach(a + 10, lep);
                        if r.is_ok() {
                            let newly: Vec<&Tsc> = s
                                .tscs()
                                .iter()
                                .filter(|t| t.active && before.iter().any(|x| x.scid == t.scid && !x.active))
                                .collect();
                            prop_assert_eq!(newly.len(), 1);
                            prop_assert_eq!(newly[0].tid, Some(a + 10));
                            prop_assert!(attached_once.insert(newly[0].scid), "scid attached twice");
                        }
                        r
                    }
                    2 => {
                        if s.mode() == Mode::Trusted {
                            let target = s.tscs().first().map(|t| (t.scid, t.active));
                            let r = s.thread_discard(Discard::Scid(target.map(|t| t.0).unwrap_or(999)));
                            if let Some((_, true)) = target {
                                prop_assert_eq!(r, Err(SmuError::Halt(HaltReason::BadAttach)));
                            }
                            r
                        } else { Ok(()) }
                    }
                    3 => s.thread_discard(Discard::Tid(a + 10)),
                    _ => {
                        if s.mode() == Mode::Trusted { s.switch_to_untrusted(41).unwrap(); }
                        s.schedule(a + 10)
                    }
                };
                let _ = r;
            }
        }
    }
}
