//! Fixed-capacity LRU cache of 64-byte lines.

use alloc::collections::BTreeMap;

use hashbrown::HashMap;

use crate::coherence::LineState;
use crate::crypto::Block;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheLine {
    pub state: LineState,
    pub data: Block,
    /// Installed from a verified secure transfer or sealed memory.
    pub auth: bool,
    tick: u64,
}

#[derive(Clone, Debug)]
pub struct Cache {
    capacity: usize,
    lines: HashMap<u64, CacheLine>,
    lru: BTreeMap<u64, u64>,
    tick: u64,
}

impl Cache {
    pub fn new(capacity: usize) -> Self {
        Cache { capacity: capacity.max(1), lines: HashMap::new(), lru: BTreeMap::new(), tick: 0 }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn get(&self, va: u64) -> Option<&CacheLine> {
        self.lines.get(&va)
    }

    /// Lookup that also refreshes recency.
    pub fn touch(&mut self, va: u64) -> Option<&mut CacheLine> {
        let line = self.lines.get_mut(&va)?;
        self.lru.remove(&line.tick);
        self.tick += 1;
        line.tick = self.tick;
        self.lru.insert(self.tick, va);
        Some(line)
    }

    pub fn get_mut(&mut self, va: u64) -> Option<&mut CacheLine> {
        self.lines.get_mut(&va)
    }

    /// Install or overwrite `va` as most recent. Returns the evicted victim.
    pub fn insert(&mut self, va: u64, state: LineState, data: Block, auth: bool) -> Option<(u64, CacheLine)> {
        if let Some(line) = self.touch(va) {
            line.state = state;
            line.data = data;
            line.auth = auth;
            return None;
        }
        let victim = if self.lines.len() >= self.capacity {
            let (_, v) = self.lru.pop_first().expect("full cache has an lru entry");
            self.lines.remove(&v).map(|l| (v, l))
        } else {
            None
        };
        self.tick += 1;
        self.lines.insert(va, CacheLine { state, data, auth, tick: self.tick });
        self.lru.insert(self.tick, va);
        victim
    }

    pub fn remove(&mut self, va: u64) -> Option<CacheLine> {
        let line = self.lines.remove(&va)?;
        self.lru.remove(&line.tick);
        Some(line)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &CacheLine)> {
        self.lru.values().map(move |va| (*va, &self.lines[va]))
    }
}
