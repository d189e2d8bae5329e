//! Canned toy programs exercising the SMU, each with its expected event trace.

use core::fmt;
use core::str::FromStr;

use alloc::string::String;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SmuScenario {
    SyscallRoundtrip,
    MallocInitA,
    CloneHappy,
    CloneCase1,
    CloneCase2a,
    CloneCase2b,
    SignalEntry,
    CallNoSecStackArgs,
    RopProbe,
}

impl SmuScenario {
    pub const ALL: [SmuScenario; 9] = [
        SmuScenario::SyscallRoundtrip,
        SmuScenario::MallocInitA,
        SmuScenario::CloneHappy,
        SmuScenario::CloneCase1,
        SmuScenario::CloneCase2a,
        SmuScenario::CloneCase2b,
        SmuScenario::SignalEntry,
        SmuScenario::CallNoSecStackArgs,
        SmuScenario::RopProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SmuScenario::SyscallRoundtrip => "syscall_roundtrip",
            SmuScenario::MallocInitA => "malloc_inita",
            SmuScenario::CloneHappy => "clone_happy",
            SmuScenario::CloneCase1 => "clone_case1",
            SmuScenario::CloneCase2a => "clone_case2a",
            SmuScenario::CloneCase2b => "clone_case2b",
            SmuScenario::SignalEntry => "signal_entry",
            SmuScenario::CallNoSecStackArgs => "callnosec_stackargs",
            SmuScenario::RopProbe => "rop_probe",
        }
    }
}

impl fmt::Display for SmuScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SmuScenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        SmuScenario::ALL
            .into_iter()
            .find(|c| c.name() == s.replace('-', "_"))
            .ok_or_else(|| alloc::format!("unknown scenario '{s}'"))
    }
}

/// Program text plus the trace the interpreter must produce for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioProgram {
    pub scenario: SmuScenario,
    pub source: &'static str,
    pub golden: &'static str,
}

impl ScenarioProgram {
    pub fn golden_lines(&self) -> impl Iterator<Item = &'static str> {
        self.golden.lines().map(str::trim).filter(|l| !l.is_empty())
    }
}

pub fn gen_smu_program(scenario: SmuScenario) -> ScenarioProgram {
    let (source, golden) = match scenario {
        SmuScenario::SyscallRoundtrip => (SYSCALL_ROUNDTRIP, SYSCALL_ROUNDTRIP_GOLDEN),
        SmuScenario::MallocInitA => (MALLOC_INITA, MALLOC_INITA_GOLDEN),
        SmuScenario::CloneHappy => (CLONE_HAPPY, CLONE_HAPPY_GOLDEN),
        SmuScenario::CloneCase1 => (CLONE_CASE1, CLONE_CASE1_GOLDEN),
        SmuScenario::CloneCase2a => (CLONE_CASE2A, CLONE_CASE2A_GOLDEN),
        SmuScenario::CloneCase2b => (CLONE_CASE2B, CLONE_CASE2B_GOLDEN),
        SmuScenario::SignalEntry => (SIGNAL_ENTRY, SIGNAL_ENTRY_GOLDEN),
        SmuScenario::CallNoSecStackArgs => (CALLNOSEC_STACKARGS, CALLNOSEC_STACKARGS_GOLDEN),
        SmuScenario::RopProbe => (ROP_PROBE, ROP_PROBE_GOLDEN),
    };
    ScenarioProgram { scenario, source, golden }
}

const SYSCALL_ROUNDTRIP: &str = "
.untrusted
boot:
    CALL main
    END
os_write:
    ST 0x9000 arg0
    ALU retval 42
    SYSRET
.trusted
main:
    SMU inita 0x10000 2
    ALU arg0 11
    ALU arg1 12
    ALU arg2 13
    ALU gp1 99
    ALU retval 7
    SMU syscall 2 os_write
    ST 0x10000 retval
    ST 0x10040 gp1
    LD 0x10000 gp2
    RET
";

const SYSCALL_ROUNDTRIP_GOLDEN: &str = "
t0 5 enter first
t0 5 inita 0x10000 x2
t0 11 syscall 2
t0 2 exit lep=12 live=arg0,arg1,retaddr
t0 2 st 0x9000 = 11
t0 12 enter lep keep-retval
t0 12 st 0x10000 = 42
t0 13 st 0x10040 = 99
t0 14 ld 0x10000 = 42
t0 1 exit lep=16 live=-
t0 1 done pending=0
";

const MALLOC_INITA: &str = "
.untrusted
boot:
    CALL main
    END
os_malloc:
    ALU retval 0x20000
    SYSRET
probe:
    LD 0x20000 gp0
    RET
.trusted
main:
    ALU arg0 128
    SMU syscall 1 os_malloc
    SMU inita 0x20000 2
    ALU gp3 5
    ST 0x20000 gp3
    ST 0x20040 gp3
    LD 0x20040 gp4
    CALL probe
    RET
";

const MALLOC_INITA_GOLDEN: &str = "
t0 6 enter first
t0 7 syscall 1
t0 2 exit lep=8 live=arg0,retaddr
t0 8 enter lep keep-retval
t0 8 inita 0x20000 x2
t0 10 st 0x20000 = 5
t0 11 st 0x20040 = 5
t0 12 ld 0x20040 = 5
t0 4 exit lep=14 live=-
t0 4 halt SecureAccessViolation
";

const CLONE_HAPPY: &str = "
.untrusted
boot:
    CALL main
    END
os_clone:
    SMU attach 5 after
    SPAWN 5 after
    ALU retval 5
    SYSRET
os_yield:
    YIELD 5
    SYSRET
os_exit:
    SMU threaddelete 5
    YIELD 0
    END
.trusted
main:
    SMU inita 0x30000 1
    ALU gp1 77
    SMU newthread
    SMU syscall 0 os_clone
after:
    JZ retval child
    SMU syscall 0 os_yield
    LD 0x30000 gp2
    RET
child:
    ST 0x30000 gp1
    SMU syscall 0 os_exit
";

const CLONE_HAPPY_GOLDEN: &str = "
t0 11 enter first
t0 11 inita 0x30000 x1
t0 13 newthread scid=1
t0 14 syscall 0
t0 2 exit lep=15 live=retaddr
t0 2 attach tid=5 at=15
t0 3 spawn tid=5 at=15
t0 15 enter lep keep-retval
t0 16 syscall 0
t0 6 exit lep=17 live=retaddr
t0 6 schedule tid=5
t5 15 enter lep
t5 19 st 0x30000 = 77
t5 20 syscall 0
t5 8 exit lep=21 live=retaddr
t5 8 threaddelete tid=5
t5 9 schedule tid=0
t0 17 enter lep keep-retval
t0 17 ld 0x30000 = 77
t0 1 exit lep=19 live=-
t0 1 done pending=0
";

const CLONE_CASE1: &str = "
.untrusted
boot:
    CALL main
    END
os_clone:
    ALU retval 5
    SYSRET
.trusted
main:
    SMU newthread
    SMU syscall 0 os_clone
after:
    JZ retval child
    RET
child:
    RET
";

const CLONE_CASE1_GOLDEN: &str = "
t0 4 enter first
t0 4 newthread scid=1
t0 5 syscall 0
t0 2 exit lep=6 live=retaddr
t0 6 enter lep keep-retval
t0 1 exit lep=8 live=-
t0 1 done pending=1
";

const CLONE_CASE2A: &str = "
.untrusted
boot:
    CALL main
    END
os_clone:
    ALU retval 0xffffffffffffffff
    SYSRET
os_late_attach:
    SMU attach 5 after
    SPAWN 5 after
    YIELD 5
    SYSRET
.trusted
main:
    SMU newthread
    SMU syscall 0 os_clone
after:
    JZ retval child
    BEQ retval 0xffffffffffffffff failed
    RET
failed:
    SMU newthreaddelete
    SMU syscall 0 os_late_attach
    RET
child:
    RET
";

const CLONE_CASE2A_GOLDEN: &str = "
t0 8 enter first
t0 8 newthread scid=1
t0 9 syscall 0
t0 2 exit lep=10 live=retaddr
t0 10 enter lep keep-retval
t0 13 newthreaddelete scid=1
t0 14 syscall 0
t0 4 exit lep=15 live=retaddr
t0 4 halt BadAttach
";

const CLONE_CASE2B: &str = "
.untrusted
boot:
    CALL main
    END
os_clone:
    SMU attach 5 after
    SPAWN 5 after
    ALU retval 0xffffffffffffffff
    SYSRET
.trusted
main:
    SMU newthread
    SMU syscall 0 os_clone
after:
    JZ retval child
    BEQ retval 0xffffffffffffffff failed
    RET
failed:
    SMU newthreaddelete
    RET
child:
    RET
";

const CLONE_CASE2B_GOLDEN: &str = "
t0 6 enter first
t0 6 newthread scid=1
t0 7 syscall 0
t0 2 exit lep=8 live=retaddr
t0 2 attach tid=5 at=8
t0 3 spawn tid=5 at=8
t0 8 enter lep keep-retval
t0 11 halt BadAttach
";

const SIGNAL_ENTRY: &str = "
.untrusted
boot:
    CALL main
    END
os_sig:
    PUSH retaddr
    ALU arg0 10
    CALL shef
    POP retaddr
    SYSRET
.trusted
main:
    SMU inita 0x40000 1
    ALU gp1 33
    SMU syscall 0 os_sig
    LD 0x40000 gp2
    ST 0x40000 gp1
    RET
shef:
    ST 0x40000 arg0
    RET
.first_lep main
.sig_lep shef
";

const SIGNAL_ENTRY_GOLDEN: &str = "
t0 7 enter first
t0 7 inita 0x40000 x1
t0 9 syscall 0
t0 2 exit lep=10 live=retaddr
t0 13 enter signal
t0 13 st 0x40000 = 10
t0 5 exit signal live=-
t0 5 pop 10
t0 10 enter lep keep-retval
t0 10 ld 0x40000 = 10
t0 11 st 0x40000 = 33
t0 1 exit lep=13 live=-
t0 1 done pending=0
";

const CALLNOSEC_STACKARGS: &str = "
.untrusted
boot:
    CALL main
    END
ext_fn:
    POP gp1
    POP gp2
    PUSH gp1
    ST 0x9000 arg5
    ALU retval 28
    RET
.trusted
main:
    SMU inita 0x50000 1
    ALU arg0 1
    ALU arg1 2
    ALU arg2 3
    ALU arg3 4
    ALU arg4 5
    ALU arg5 6
    ALU gp0 7
    SMU pushna gp0
    SMU callnosec 6 ext_fn
    ST 0x50000 retval
    RET
";

const CALLNOSEC_STACKARGS_GOLDEN: &str = "
t0 8 enter first
t0 8 inita 0x50000 x1
t0 16 pushna 7
t0 17 callnosec 6
t0 2 exit lep=18 live=arg0,arg1,arg2,arg3,arg4,arg5
t0 2 pop 18
t0 3 pop 7
t0 5 st 0x9000 = 6
t0 18 enter lep keep-retval
t0 18 st 0x50000 = 28
t0 1 exit lep=20 live=-
t0 1 done pending=0
";

const ROP_PROBE: &str = "
.untrusted
boot:
    CALL main
    END
gadget:
    ST 0x9000 gp3
    ST 0x9040 arg0
    JMP mid
.trusted
main:
    ALU gp3 1234
    ALU arg0 55
    JMP gadget
    ALU
mid:
    RET
";

const ROP_PROBE_GOLDEN: &str = "
t0 5 enter first
t0 2 exit lep=8 live=-
t0 2 st 0x9000 = 0
t0 3 st 0x9040 = 0
t0 9 halt IllegalEntry
";
