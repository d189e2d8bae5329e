//! Replays the simulator's commit order against one flat map.

use alloc::collections::BTreeMap;
use alloc::vec;

use crate::workload::{TraceInstr, Workload};
use crate::NodeId;

/// Value a store by `node` at trace index `idx` writes into bytes 0..8.
pub fn store_token(node: NodeId, idx: usize) -> u64 {
    (node as u64) << 40 | (idx as u64 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Commit {
    pub time: u64,
    pub node: NodeId,
    /// Index of the instruction in its thread.
    pub idx: usize,
    pub va: u64,
    pub store: bool,
    pub value: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleReport {
    pub checked: usize,
    pub wrong_reads: usize,
    /// Commits that do not match the next memory instruction of their thread.
    pub order_errors: usize,
    pub final_mismatches: usize,
    /// Threads whose memory instructions did not all commit.
    pub incomplete_threads: usize,
}

impl OracleReport {
    pub fn clean(&self) -> bool {
        self.wrong_reads == 0 && self.order_errors == 0 && self.final_mismatches == 0
    }
}

/// Checks that every load returned the latest store in commit order and
/// that `finals` (when given) equals the replayed memory.
pub fn check_commits(
    workload: &Workload,
    commits: &[Commit],
    finals: Option<&BTreeMap<u64, u64>>,
) -> OracleReport {
    let mut rep = OracleReport::default();
    let mut mem: BTreeMap<u64, u64> = BTreeMap::new();
    let mut next = vec![0usize; workload.threads.len()];
    for c in commits {
        rep.checked += 1;
        let Some(thread) = workload.threads.get(c.node as usize) else {
            rep.order_errors += 1;
            continue;
        };
        let n = &mut next[c.node as usize];
        while *n < thread.len() && thread[*n] == TraceInstr::Alu {
            *n += 1;
        }
        let expect = thread.get(*n).copied();
        let ok = match expect {
            Some(TraceInstr::Load(va)) => !c.store && va == c.va && *n == c.idx,
            Some(TraceInstr::Store(va)) => c.store && va == c.va && *n == c.idx,
            _ => false,
        };
        if !ok {
            rep.order_errors += 1;
            continue;
        }
        *n += 1;
        if c.store {
            if c.value != store_token(c.node, c.idx) {
                rep.order_errors += 1;
            }
            mem.insert(c.va, c.value);
        } else if mem.get(&c.va).copied().unwrap_or(0) != c.value {
            rep.wrong_reads += 1;
        }
    }
    for (t, thread) in workload.threads.iter().enumerate() {
        if thread[next[t]..].iter().any(|i| i.va().is_some()) {
            rep.incomplete_threads += 1;
        }
    }
    if let Some(f) = finals {
        for (va, v) in &mem {
            if f.get(va).copied().unwrap_or(0) != *v {
                rep.final_mismatches += 1;
            }
        }
        rep.final_mismatches += f.iter().filter(|(va, v)| **v != 0 && !mem.contains_key(va)).count();
    }
    rep
}
