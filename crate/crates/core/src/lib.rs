#![no_std]

extern crate alloc;

pub mod coherence;
pub mod crypto;
pub mod dit;
pub mod engine;
pub mod sdsm;
pub mod smu;
pub mod workload;

pub type NodeId = u32;
pub type Pid = u32;
