//! Toy instruction set and its text format.
//!
//! One instruction per line. `.trusted` and `.untrusted` switch the region
//! the following instructions are placed in; `name:` defines a label at the
//! next instruction address. `.start`, `.first_lep` and `.sig_lep` name the
//! loader entry, the first legal entry point and the signal entry point.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use super::Reg;

pub type Addr = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmuOp {
    /// Preserve `argnum` argument registers and jump to the untrusted handler.
    Syscall { argnum: u8, target: Addr },
    CallNoSec { i: u8, target: Addr },
    PushNa(Reg),
    PopNa(Reg),
    NaLoad(u64, Reg),
    NaStore(u64, Reg),
    InitA { va: u64, blocks: u32 },
    /// Writes the new context id into GP7.
    NewThread,
    /// Deletes the inactive context whose id is in GP7.
    NewThreadDelete,
    Attach { tid: u32, addr: Addr },
    ThreadDelete(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyInstr {
    Alu,
    Set(Reg, u64),
    Load(u64, Reg),
    Store(u64, Reg),
    Call(Addr),
    Ret,
    Jmp(Addr),
    Jz(Reg, Addr),
    Beq(Reg, u64, Addr),
    Push(Reg),
    Pop(Reg),
    Sysret,
    Spawn { tid: u32, addr: Addr },
    Yield(u32),
    End,
    Smu(SmuOp),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyProgram {
    pub instrs: Vec<(ToyInstr, bool)>,
    pub labels: BTreeMap<String, Addr>,
    pub start: Addr,
    pub first_lep: Addr,
    pub sig_lep: Option<Addr>,
}

impl ToyProgram {
    pub fn fetch(&self, pc: Addr) -> Option<(ToyInstr, bool)> {
        self.instrs.get(usize::try_from(pc).ok()?).copied()
    }

    pub fn is_trusted(&self, pc: Addr) -> bool {
        self.fetch(pc).map(|(_, a)| a).unwrap_or(false)
    }

    pub fn label(&self, name: &str) -> Option<Addr> {
        self.labels.get(name).copied()
    }

    pub fn parse(text: &str) -> Result<Self, ProgramError> {
        parse_program(text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ProgramError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn parse_num(tok: &str) -> Option<u64> {
    let t = tok.trim();
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else {
        u64::from_str_radix(t, 16).ok()
    }
}

fn parse_dec(tok: &str) -> Option<u64> {
    if tok.starts_with("0x") {
        parse_num(tok)
    } else {
        tok.parse().ok()
    }
}

fn parse_program(text: &str) -> Result<ToyProgram, ProgramError> {
    let mut trusted = false;
    let mut labels: BTreeMap<String, Addr> = BTreeMap::new();
    let mut raw: Vec<(usize, Vec<String>, bool)> = Vec::new();
    let mut directives: Vec<(usize, String, String)> = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.split(';').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(d) = line.strip_prefix('.') {
            let mut parts = d.split_whitespace();
            let name = parts.next().unwrap_or("");
            match name {
                "trusted" => trusted = true,
                "untrusted" => trusted = false,
                "start" | "first_lep" | "sig_lep" => {
                    let Some(label) = parts.next() else {
                        return Err(ProgramError { line: lineno, message: format!(".{name} needs a label") });
                    };
                    directives.push((lineno, name.to_string(), label.to_string()));
                }
                other => {
                    return Err(ProgramError { line: lineno, message: format!("unknown directive .{other}") });
                }
            }
            continue;
        }
        if let Some(label) = line.strip_suffix(':') {
            let label = label.trim().to_ascii_lowercase();
            if label.is_empty() || label.contains(char::is_whitespace) {
                return Err(ProgramError { line: lineno, message: "bad label".into() });
            }
            if labels.insert(label.clone(), raw.len() as Addr).is_some() {
                return Err(ProgramError { line: lineno, message: format!("duplicate label {label}") });
            }
            continue;
        }
        let toks: Vec<String> = line.split_whitespace().map(|s| s.to_ascii_lowercase()).collect();
        raw.push((lineno, toks, trusted));
    }

    let resolve = |lineno: usize, name: &str| -> Result<Addr, ProgramError> {
        labels
            .get(name)
            .copied()
            .ok_or_else(|| ProgramError { line: lineno, message: format!("unknown label {name}") })
    };

    let mut instrs = Vec::with_capacity(raw.len());
    for (lineno, toks, auth) in &raw {
        let lineno = *lineno;
        let instr = decode(lineno, toks, &resolve)?;
        if *auth && matches!(instr, ToyInstr::Spawn { .. } | ToyInstr::Yield(_) | ToyInstr::Sysret) {
            return Err(ProgramError { line: lineno, message: "scheduler instructions belong in untrusted code".into() });
        }
        instrs.push((instr, *auth));
    }

    let mut start = 0;
    let mut first_lep = None;
    let mut sig_lep = None;
    for (lineno, name, label) in &directives {
        let a = resolve(*lineno, &label.to_ascii_lowercase())?;
        match name.as_str() {
            "start" => start = a,
            "first_lep" => first_lep = Some(a),
            _ => sig_lep = Some(a),
        }
    }
    let first_lep = match first_lep {
        Some(a) => a,
        None => instrs
            .iter()
            .position(|(_, a)| *a)
            .map(|p| p as Addr)
            .unwrap_or(0),
    };
    Ok(ToyProgram { instrs, labels, start, first_lep, sig_lep })
}

fn decode(
    lineno: usize,
    toks: &[String],
    resolve: &dyn Fn(usize, &str) -> Result<Addr, ProgramError>,
) -> Result<ToyInstr, ProgramError> {
    let err = |m: &str| ProgramError { line: lineno, message: format!("{m}: {}", toks.join(" ")) };
    let reg = |i: usize| -> Result<Reg, ProgramError> {
        toks.get(i).and_then(|t| Reg::parse(t)).ok_or_else(|| err("bad register"))
    };
    let reg_or_gp0 = |i: usize| -> Result<Reg, ProgramError> {
        match toks.get(i) {
            None => Ok(Reg::Gp(0)),
            Some(_) => reg(i),
        }
    };
    let hex = |i: usize| -> Result<u64, ProgramError> {
        toks.get(i).and_then(|t| parse_num(t)).ok_or_else(|| err("bad address"))
    };
    let dec = |i: usize| -> Result<u64, ProgramError> {
        toks.get(i).and_then(|t| parse_dec(t)).ok_or_else(|| err("bad number"))
    };
    let label = |i: usize| -> Result<Addr, ProgramError> {
        let name = toks.get(i).ok_or_else(|| err("missing label"))?;
        resolve(lineno, name)
    };
    let arity = |n: usize| -> Result<(), ProgramError> {
        if toks.len() > n {
            Err(err("trailing tokens"))
        } else {
            Ok(())
        }
    };

    let op = toks[0].as_str();
    let instr = match op {
        "alu" => {
            if toks.len() == 1 {
                ToyInstr::Alu
            } else {
                arity(3)?;
                ToyInstr::Set(reg(1)?, dec(2)?)
            }
        }
        "ld" => {
            arity(3)?;
            ToyInstr::Load(hex(1)?, reg_or_gp0(2)?)
        }
        "st" => {
            arity(3)?;
            ToyInstr::Store(hex(1)?, reg_or_gp0(2)?)
        }
        "call" => {
            arity(2)?;
            ToyInstr::Call(label(1)?)
        }
        "ret" => {
            arity(1)?;
            ToyInstr::Ret
        }
        "jmp" => {
            arity(2)?;
            ToyInstr::Jmp(label(1)?)
        }
        "jz" => {
            arity(3)?;
            ToyInstr::Jz(reg(1)?, label(2)?)
        }
        "beq" => {
            arity(4)?;
            ToyInstr::Beq(reg(1)?, dec(2)?, label(3)?)
        }
        "push" => {
            arity(2)?;
            ToyInstr::Push(reg(1)?)
        }
        "pop" => {
            arity(2)?;
            ToyInstr::Pop(reg(1)?)
        }
        "sysret" => {
            arity(1)?;
            ToyInstr::Sysret
        }
        "spawn" => {
            arity(3)?;
            ToyInstr::Spawn { tid: dec(1)? as u32, addr: label(2)? }
        }
        "yield" => {
            arity(2)?;
            ToyInstr::Yield(dec(1)? as u32)
        }
        "end" => {
            arity(1)?;
            ToyInstr::End
        }
        "smu" => {
            let sub = toks.get(1).ok_or_else(|| err("missing SMU operation"))?.as_str();
            let s = |n| arity(n);
            ToyInstr::Smu(match sub {
                "syscall" => {
                    s(4)?;
                    let argnum = dec(2)?;
                    if argnum > 6 {
                        return Err(err("argnum above 6"));
                    }
                    SmuOp::Syscall { argnum: argnum as u8, target: label(3)? }
                }
                "callnosec" => {
                    s(4)?;
                    let i = dec(2)?;
                    if !(1..=6).contains(&i) {
                        return Err(err("callnosec count outside 1..6"));
                    }
                    SmuOp::CallNoSec { i: i as u8, target: label(3)? }
                }
                "pushna" => {
                    s(3)?;
                    SmuOp::PushNa(reg(2)?)
                }
                "popna" => {
                    s(3)?;
                    SmuOp::PopNa(reg(2)?)
                }
                "naload" => {
                    s(4)?;
                    SmuOp::NaLoad(hex(2)?, reg_or_gp0(3)?)
                }
                "nastore" => {
                    s(4)?;
                    SmuOp::NaStore(hex(2)?, reg_or_gp0(3)?)
                }
                "inita" => {
                    s(4)?;
                    SmuOp::InitA { va: hex(2)?, blocks: dec(3)? as u32 }
                }
                "newthread" => {
                    s(2)?;
                    SmuOp::NewThread
                }
                "newthreaddelete" => {
                    s(2)?;
                    SmuOp::NewThreadDelete
                }
                "attach" => {
                    s(4)?;
                    SmuOp::Attach { tid: dec(2)? as u32, addr: label(3)? }
                }
                "threaddelete" => {
                    s(3)?;
                    SmuOp::ThreadDelete(dec(2)? as u32)
                }
                _ => return Err(err("unknown SMU operation")),
            })
        }
        _ => return Err(err("unknown instruction")),
    };
    Ok(instr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_regions() {
        let p = ToyProgram::parse(
            ".untrusted\nboot:\n  CALL main\n  END\n.trusted\nmain:\n  ALU gp1 5\n  ST 0x1000 gp1\n  RET\n.start boot\n",
        )
        .unwrap();
        assert_eq!(p.start, 0);
        assert_eq!(p.first_lep, 2);
        assert_eq!(p.fetch(0), Some((ToyInstr::Call(2), false)));
        assert_eq!(p.fetch(3), Some((ToyInstr::Store(0x1000, Reg::Gp(1)), true)));
        assert!(p.is_trusted(4));
        assert!(!p.is_trusted(1));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = ToyProgram::parse("ALU\nFOO\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = ToyProgram::parse(".trusted\nJMP nowhere\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = ToyProgram::parse(".trusted\nSMU syscall 7 x\nx:\nRET\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = ToyProgram::parse(".trusted\nYIELD 1\n").unwrap_err();
        assert_eq!(e.line, 2);
    }
}
