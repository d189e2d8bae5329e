//! Trace and toy-program files.

use std::path::Path;

use anyhow::{anyhow, Context, Result};

use semsim_core::smu::ToyProgram;
use semsim_core::workload::{parse_trace, render_trace, Workload};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_trace(path: &Path) -> Result<Workload> {
    parse_trace(&read(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn save_trace(path: &Path, w: &Workload) -> Result<()> {
    std::fs::write(path, render_trace(w)).with_context(|| format!("writing {}", path.display()))
}

pub fn load_program(path: &Path) -> Result<ToyProgram> {
    ToyProgram::parse(&read(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))
}
