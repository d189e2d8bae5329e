//! TOML run configuration. Keys are exactly the `SimConfig` field names;
//! anything absent keeps its default.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::Deserialize;

use semsim_core::engine::SimConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub nodes: Option<u32>,
    pub scheme: Option<String>,
    pub dit: Option<String>,
    pub alu_cycles: Option<u64>,
    pub mem_cycles: Option<u64>,
    pub hop_cycles: Option<u64>,
    pub kb_cycles: Option<u64>,
    pub cache_lines: Option<usize>,
    pub fifo_capacity: Option<usize>,
    pub baseline16_buffer: Option<usize>,
    pub tcm: Option<bool>,
    pub rng_seed: Option<u64>,
    pub adversary: Option<String>,
}

impl ConfigFile {
    pub fn apply(&self, base: SimConfig) -> Result<SimConfig> {
        let mut c = base;
        macro_rules! copy {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        copy!(nodes, alu_cycles, mem_cycles, hop_cycles, kb_cycles, cache_lines, fifo_capacity, baseline16_buffer, tcm, rng_seed);
        if let Some(s) = &self.scheme {
            c.scheme = s.parse().map_err(|e: String| anyhow!("scheme: {e}"))?;
        }
        if let Some(s) = &self.dit {
            c.dit = s.parse().map_err(|e: String| anyhow!("dit: {e}"))?;
        }
        if let Some(s) = &self.adversary {
            c.adversary = match s.as_str() {
                "" | "none" => None,
                other => Some(other.parse().map_err(|e: String| anyhow!("adversary: {e}"))?),
            };
        }
        Ok(c)
    }
}

pub fn parse_config(text: &str) -> Result<SimConfig> {
    let file: ConfigFile = toml::from_str(text)?;
    let c = file.apply(SimConfig::default())?;
    c.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use semsim_core::engine::{AdversaryScenario, DitMode};
    use semsim_core::sdsm::Scheme;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(parse_config("").unwrap(), SimConfig::default());
    }

    #[test]
    fn keys_override_defaults() {
        let c = parse_config("nodes = 64\nscheme = \"baseline16\"\ndit = \"dbmt\"\ntcm = false\nadversary = \"stale-read\"\n").unwrap();
        assert_eq!(c.nodes, 64);
        assert_eq!(c.scheme, Scheme::Baseline16);
        assert_eq!(c.dit, DitMode::Tree(semsim_core::dit::DitVariant::Dbmt));
        assert!(!c.tcm);
        assert_eq!(c.adversary, Some(AdversaryScenario::StaleRead));
        assert_eq!(c.hop_cycles, 100);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let e = parse_config("nodez = 3").unwrap_err();
        assert!(format!("{e:#}").contains("nodez"));
        assert!(parse_config("scheme = \"aes\"").is_err());
        assert!(parse_config("nodes = 0").is_err());
        assert!(parse_config("nodes = -1").is_err());
    }
}
