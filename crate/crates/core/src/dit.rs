//! Distributed integrity trees.
//!
//! Each node keeps an integrity-verified record of which shared blocks are
//! locally resident (and writable). A block that lives elsewhere has the
//! reserved leaf value NR, so a local lookup either returns the true local
//! coherence state or fails verification. Roots are never exchanged.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use hashbrown::HashMap;

use crate::crypto::{IntegrityError, Prf};

const LEAF_DOMAIN: u8 = 0x4c;
const NODE_DOMAIN: u8 = 0x4e;
const DMT_NR_FLAG: u8 = 0x80;
const DMT_SENTINEL: u64 = 0xffff;
const INDEX_BITS: u32 = 58;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DitVariant {
    /// Merkle tree over 16-bit block hashes.
    Dmt,
    /// Bonsai tree over 64-bit encryption counters.
    Dbmt,
    /// MEE-style tree over 64-bit versions.
    Dmee,
}

impl DitVariant {
    pub fn name(self) -> &'static str {
        match self {
            DitVariant::Dmt => "dmt",
            DitVariant::Dbmt => "dbmt",
            DitVariant::Dmee => "dmee",
        }
    }

    /// Children per tree node (entries that fit in one 64-byte block).
    pub fn arity_bits(self) -> u32 {
        match self {
            DitVariant::Dmt => 5,
            DitVariant::Dbmt | DitVariant::Dmee => 3,
        }
    }

    pub fn levels(self) -> u32 {
        INDEX_BITS.div_ceil(self.arity_bits())
    }

    fn meta_mask(self) -> u64 {
        match self {
            DitVariant::Dmt => 0xffff,
            DitVariant::Dbmt | DitVariant::Dmee => u64::MAX,
        }
    }
}

impl core::str::FromStr for DitVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dmt" => Ok(DitVariant::Dmt),
            "dbmt" => Ok(DitVariant::Dbmt),
            "dmee" => Ok(DitVariant::Dmee),
            other => Err(alloc::format!("unknown tree variant '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IvlcsLeaf {
    Nr,
    Resident { meta: u64, write_perm: bool },
}

/// A leaf as stored in untrusted memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RawLeaf {
    pub meta: u64,
    pub flags: u8,
}

impl RawLeaf {
    pub fn encode(variant: DitVariant, leaf: IvlcsLeaf) -> RawLeaf {
        match (variant, leaf) {
            (DitVariant::Dmt, IvlcsLeaf::Nr) => RawLeaf { meta: DMT_SENTINEL, flags: DMT_NR_FLAG },
            (_, IvlcsLeaf::Nr) => RawLeaf { meta: u64::MAX, flags: 0 },
            (v, IvlcsLeaf::Resident { meta, write_perm }) => {
                let mut meta = meta & v.meta_mask();
                if v != DitVariant::Dmt && meta == u64::MAX {
                    // all-ones is reserved
                    meta -= 1;
                }
                RawLeaf { meta, flags: write_perm as u8 }
            }
        }
    }

    pub fn decode(self, variant: DitVariant) -> IvlcsLeaf {
        let nr = match variant {
            DitVariant::Dmt => self.flags & DMT_NR_FLAG != 0,
            _ => self.meta == u64::MAX,
        };
        if nr {
            IvlcsLeaf::Nr
        } else {
            IvlcsLeaf::Resident { meta: self.meta, write_perm: self.flags & 1 != 0 }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferEvent {
    /// Block arrived from another node; `meta` is the metadata it carries.
    Arrival { va: u64, write: bool, meta: u64 },
    Invalidate { va: u64 },
    RevokeWrite { va: u64 },
    /// Write permission granted to a block that is already resident.
    GrantWrite { va: u64 },
    EvictDirty { va: u64, meta: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteCheck {
    Allowed,
    /// Resident read-only: ask the transfer layer for permission.
    NeedPermission,
    NotResident,
}

/// Per-node sparse integrity tree over block indices (`va >> 6`).
///
/// Untrusted storage holds leaves and interior hashes; absent entries take
/// the per-level "empty subtree" value. Only the root is trusted.
#[derive(Clone, Debug)]
pub struct IvlcsTree {
    variant: DitVariant,
    prf: Prf,
    leaves: HashMap<u64, RawLeaf>,
    nodes: HashMap<(u32, u64), u64>,
    empty: Vec<u64>,
    root: u64,
    updates: u64,
}

impl IvlcsTree {
    pub fn new(variant: DitVariant, prf: Prf) -> Self {
        let levels = variant.levels();
        let mut empty = Vec::with_capacity(levels as usize + 1);
        let nr = RawLeaf::encode(variant, IvlcsLeaf::Nr);
        empty.push(leaf_hash(&prf, nr));
        for level in 0..levels {
            let child = empty[level as usize];
            let children: Vec<u64> = (0..1u64 << variant.arity_bits()).map(|_| child).collect();
            empty.push(node_hash(&prf, level + 1, &children));
        }
        let root = empty[levels as usize];
        IvlcsTree { variant, prf, leaves: HashMap::new(), nodes: HashMap::new(), empty, root, updates: 0 }
    }

    pub fn variant(&self) -> DitVariant {
        self.variant
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn raw_leaf(&self, va: u64) -> RawLeaf {
        self.stored_leaf(va >> 6)
    }

    /// Adversary hook: overwrite a leaf in untrusted memory.
    pub fn tamper_leaf(&mut self, va: u64, raw: RawLeaf) {
        self.leaves.insert(va >> 6, raw);
    }

    /// Adversary hook: overwrite an interior hash in untrusted memory.
    pub fn tamper_node(&mut self, level: u32, index: u64, hash: u64) {
        self.nodes.insert((level, index), hash);
    }

    fn stored_leaf(&self, idx: u64) -> RawLeaf {
        self.leaves.get(&idx).copied().unwrap_or_else(|| RawLeaf::encode(self.variant, IvlcsLeaf::Nr))
    }

    fn stored_hash(&self, level: u32, index: u64) -> u64 {
        if level == 0 {
            return leaf_hash(&self.prf, self.stored_leaf(index));
        }
        self.nodes.get(&(level, index)).copied().unwrap_or(self.empty[level as usize])
    }

    /// Recompute the path from leaf `idx` (with leaf hash `h`) to the root,
    /// reading siblings from untrusted storage. Returns the per-level hashes.
    fn path(&self, idx: u64, mut h: u64) -> Vec<u64> {
        let bits = self.variant.arity_bits();
        let fan = 1u64 << bits;
        let mut out = Vec::with_capacity(self.variant.levels() as usize);
        let mut child = idx;
        for level in 0..self.variant.levels() {
            let parent = child >> bits;
            let first = parent << bits;
            let children: Vec<u64> = (0..fan)
                .map(|k| if first + k == child { h } else { self.stored_hash(level, first + k) })
                .collect();
            h = node_hash(&self.prf, level + 1, &children);
            out.push(h);
            child = parent;
        }
        out
    }

    fn verified_leaf(&self, idx: u64) -> Result<RawLeaf, IntegrityError> {
        let raw = self.stored_leaf(idx);
        let path = self.path(idx, leaf_hash(&self.prf, raw));
        if path.last().copied() != Some(self.root) {
            return Err(IntegrityError::TreeMismatch);
        }
        Ok(raw)
    }

    pub fn lookup(&self, va: u64) -> Result<IvlcsLeaf, IntegrityError> {
        Ok(self.verified_leaf(va >> 6)?.decode(self.variant))
    }

    fn store(&mut self, idx: u64, leaf: IvlcsLeaf) -> Result<(), IntegrityError> {
        self.verified_leaf(idx)?;
        let raw = RawLeaf::encode(self.variant, leaf);
        let path = self.path(idx, leaf_hash(&self.prf, raw));
        let bits = self.variant.arity_bits();
        if leaf == IvlcsLeaf::Nr {
            self.leaves.remove(&idx);
        } else {
            self.leaves.insert(idx, raw);
        }
        let mut node = idx;
        for (level, h) in path.iter().enumerate() {
            node >>= bits;
            let level = level as u32 + 1;
            if *h == self.empty[level as usize] {
                self.nodes.remove(&(level, node));
            } else {
                self.nodes.insert((level, node), *h);
            }
        }
        self.root = *path.last().expect("tree has at least one level");
        self.updates += 1;
        Ok(())
    }

    pub fn apply(&mut self, event: TransferEvent) -> Result<(), IntegrityError> {
        match event {
            TransferEvent::Arrival { va, write, meta } => {
                self.store(va >> 6, IvlcsLeaf::Resident { meta, write_perm: write })
            }
            TransferEvent::Invalidate { va } => self.store(va >> 6, IvlcsLeaf::Nr),
            TransferEvent::RevokeWrite { va } | TransferEvent::GrantWrite { va } => {
                let write = matches!(event, TransferEvent::GrantWrite { .. });
                match self.lookup(va)? {
                    IvlcsLeaf::Nr => Ok(()),
                    IvlcsLeaf::Resident { meta, write_perm } if write_perm != write => {
                        self.store(va >> 6, IvlcsLeaf::Resident { meta, write_perm: write })
                    }
                    IvlcsLeaf::Resident { .. } => Ok(()),
                }
            }
            TransferEvent::EvictDirty { va, meta } => {
                let write_perm = match self.lookup(va)? {
                    IvlcsLeaf::Resident { write_perm, .. } => write_perm,
                    IvlcsLeaf::Nr => true,
                };
                self.store(va >> 6, IvlcsLeaf::Resident { meta, write_perm })
            }
        }
    }

    /// What a local write to `va` requires. Never changes the tree.
    pub fn check_write(&self, va: u64) -> Result<WriteCheck, IntegrityError> {
        Ok(match self.lookup(va)? {
            IvlcsLeaf::Nr => WriteCheck::NotResident,
            IvlcsLeaf::Resident { write_perm: true, .. } => WriteCheck::Allowed,
            IvlcsLeaf::Resident { write_perm: false, .. } => WriteCheck::NeedPermission,
        })
    }
}

fn leaf_hash(prf: &Prf, raw: RawLeaf) -> u64 {
    prf.tag(LEAF_DOMAIN, &[raw.meta, raw.flags as u64])
}

fn node_hash(prf: &Prf, level: u32, children: &[u64]) -> u64 {
    let mut words = Vec::with_capacity(children.len() + 1);
    words.push(level as u64);
    words.extend_from_slice(children);
    prf.tag(NODE_DOMAIN, &words)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmatParams {
    pub h: f64,
    pub t_c: f64,
    pub t_coh: f64,
    pub t_fetch: f64,
    pub t_int: f64,
    pub t_rem: f64,
    pub le: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmatModel {
    Baseline,
    Dit,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AmatError {
    OutOfRange(&'static str),
    EmptyGrid,
}

impl fmt::Display for AmatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AmatError::OutOfRange(what) => write!(f, "parameter {what} out of range"),
            AmatError::EmptyGrid => f.write_str("sweep grid is empty"),
        }
    }
}

impl AmatParams {
    pub fn validate(&self) -> Result<(), AmatError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.h) {
            return Err(AmatError::OutOfRange("H"));
        }
        if !unit(self.le) {
            return Err(AmatError::OutOfRange("LE"));
        }
        for (name, v) in [
            ("t_c", self.t_c),
            ("t_coh", self.t_coh),
            ("t_fetch", self.t_fetch),
            ("t_int", self.t_int),
            ("t_rem", self.t_rem),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(AmatError::OutOfRange(name));
            }
        }
        Ok(())
    }
}

/// Average memory access time in cycles.
pub fn amat(p: &AmatParams, which: AmatModel) -> f64 {
    let miss = 1.0 - p.h;
    match which {
        AmatModel::Baseline => {
            p.t_c + miss * (p.t_coh + p.t_fetch + p.le * p.t_int + (1.0 - p.le) * p.t_rem)
        }
        AmatModel::Dit => p.t_c + miss * (p.t_int + p.t_fetch + (1.0 - p.le) * p.t_rem),
    }
}

/// dit − baseline in closed form.
pub fn amat_delta(p: &AmatParams) -> f64 {
    (1.0 - p.h) * (-p.t_coh + (1.0 - p.le) * p.t_int)
}

/// Sweep grid. `t_int = t_fetch · integrity_miss`, `t_rem = t_fetch · t_rem_mult`,
/// `t_coh = t_fetch · coh_miss`, `LE = 1 − node_miss`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmatGrid {
    pub variant: DitVariant,
    pub h: f64,
    pub t_c: f64,
    pub t_fetch: f64,
    pub node_miss: Vec<f64>,
    pub integrity_miss: Vec<f64>,
    pub t_rem_mult: Vec<f64>,
    pub coh_miss: Vec<f64>,
}

fn steps(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl AmatGrid {
    /// Costless baseline coherence, several integrity miss rates, remote
    /// hop of `t_rem_mult` memory accesses.
    pub fn costless_baseline(t_rem_mult: f64) -> Self {
        AmatGrid {
            variant: DitVariant::Dbmt,
            h: 0.99,
            t_c: 1.0,
            t_fetch: 100.0,
            node_miss: steps(0.0, 1.0, 21),
            integrity_miss: steps(0.0, 0.04, 5),
            t_rem_mult: alloc::vec![t_rem_mult],
            coh_miss: alloc::vec![0.0],
        }
    }

    /// Baseline coherence check costs one memory access at 0–4% miss;
    /// tree miss fixed at 2%.
    pub fn coherence_cost() -> Self {
        AmatGrid {
            integrity_miss: alloc::vec![0.02],
            coh_miss: steps(0.0, 0.04, 5),
            ..AmatGrid::costless_baseline(5.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmatRow {
    pub variant: DitVariant,
    pub params: AmatParams,
    pub t_int_miss: f64,
    pub t_rem_mult: f64,
    pub node_miss: f64,
    pub amat_baseline: f64,
    pub amat_dit: f64,
    pub overhead_pct: f64,
}

pub fn amat_sweep(grid: &AmatGrid) -> Result<Vec<AmatRow>, AmatError> {
    if grid.node_miss.is_empty()
        || grid.integrity_miss.is_empty()
        || grid.t_rem_mult.is_empty()
        || grid.coh_miss.is_empty()
    {
        return Err(AmatError::EmptyGrid);
    }
    let mut rows = Vec::new();
    for &coh in &grid.coh_miss {
        for &rem in &grid.t_rem_mult {
            for &im in &grid.integrity_miss {
                for &nm in &grid.node_miss {
                    let params = AmatParams {
                        h: grid.h,
                        t_c: grid.t_c,
                        t_coh: grid.t_fetch * coh,
                        t_fetch: grid.t_fetch,
                        t_int: grid.t_fetch * im,
                        t_rem: grid.t_fetch * rem,
                        le: 1.0 - nm,
                    };
                    params.validate()?;
                    let b = amat(&params, AmatModel::Baseline);
                    let d = amat(&params, AmatModel::Dit);
                    rows.push(AmatRow {
                        variant: grid.variant,
                        params,
                        t_int_miss: im,
                        t_rem_mult: rem,
                        node_miss: nm,
                        amat_baseline: b,
                        amat_dit: d,
                        overhead_pct: (d / b - 1.0) * 100.0,
                    });
                }
            }
        }
    }
    Ok(rows)
}
