//! Named presets for microarchitectures, DRAM configurations and DRAM modules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mob::MicroArchParams;

const BUILTIN: &str = include_str!("../presets/presets.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("failed to parse configuration: {0}")]
    Parse(String),
    #[error("unknown microarchitecture `{0}`")]
    UnknownArch(String),
    #[error("unknown DRAM configuration `{0}`")]
    UnknownDram(String),
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramPreset {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub system: String,
    #[serde(default)]
    pub configuration: String,
    /// Physical address bits that feed bank, rank and channel selection.
    pub bits: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramModule {
    pub flippy: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Presets {
    #[serde(default)]
    pub microarch: BTreeMap<String, MicroArchParams>,
    #[serde(default)]
    pub dram: BTreeMap<String, DramPreset>,
    #[serde(default)]
    pub dram_module: BTreeMap<String, DramModule>,
}

impl Presets {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN).expect("built-in presets are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut presets: Presets = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (name, arch) in presets.microarch.iter_mut() {
            arch.name = name.clone();
            arch.validate().map_err(ConfigError::Invalid)?;
        }
        for (name, dram) in presets.dram.iter_mut() {
            dram.name = name.clone();
            if dram.bits == 0 || dram.bits > 40 {
                return Err(ConfigError::Invalid(format!("{name}: DRAM bit count {} out of range", dram.bits)));
            }
        }
        Ok(presets)
    }

    /// Built-in presets with entries from `text` added or replaced.
    pub fn builtin_with(text: &str) -> Result<Self, ConfigError> {
        let mut base = Self::builtin();
        let extra = Self::from_toml_str(text)?;
        base.microarch.extend(extra.microarch);
        base.dram.extend(extra.dram);
        base.dram_module.extend(extra.dram_module);
        Ok(base)
    }

    pub fn microarch(&self, name: &str) -> Result<&MicroArchParams, ConfigError> {
        self.microarch.get(name).ok_or_else(|| ConfigError::UnknownArch(name.to_string()))
    }

    pub fn dram(&self, name: &str) -> Result<&DramPreset, ConfigError> {
        self.dram.get(name).ok_or_else(|| ConfigError::UnknownDram(name.to_string()))
    }

    /// Microarchitectures that show 1 MB aliasing.
    pub fn leaky_archs(&self) -> impl Iterator<Item = &MicroArchParams> {
        self.microarch.values().filter(|a| a.steps > 0)
    }

    pub fn module_is_flippy(&self, model: &str) -> Option<bool> {
        self.dram_module.get(model).map(|m| m.flippy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_table() {
        let p = Presets::builtin();
        let expect = [
            ("kabylake-r", 56, 22),
            ("kabylake", 56, 22),
            ("skylake", 56, 22),
            ("haswell-ep", 42, 17),
            ("ivybridge-ep", 36, 14),
            ("ivybridge", 36, 12),
            ("sandybridge-2670qm", 36, 12),
            ("sandybridge-2400", 36, 12),
            ("nehalem", 32, 11),
            ("core2", 20, 0),
        ];
        for (name, sb, steps) in expect {
            let a = p.microarch(name).unwrap();
            assert_eq!((a.store_buffer_size, a.steps), (sb, steps), "{name}");
        }
        assert_eq!(p.leaky_archs().count(), 9);
        let bits: Vec<u32> = ["a", "b", "c", "d", "e"].iter().map(|n| p.dram(n).unwrap().bits).collect();
        assert_eq!(bits, [19, 21, 22, 23, 21]);
        assert_eq!(p.dram.len(), 9);
        assert_eq!(p.dram_module.len(), 9);
        assert_eq!(p.dram_module.values().filter(|m| m.flippy).count(), 4);
    }

    #[test]
    fn unknown_names() {
        let p = Presets::builtin();
        assert_eq!(p.microarch("pentium").unwrap_err(), ConfigError::UnknownArch("pentium".into()));
        assert!(matches!(p.dram("zz"), Err(ConfigError::UnknownDram(_))));
    }

    #[test]
    fn rejects_bad_latency_order() {
        let text = r#"
[microarch.bad]
store_buffer_size = 10
steps = 4
base_load_cycles = 30
store_4k_class_cycles = 20
load_4k_class_cycles = 200
plateau_cycles = 300
peak_cycles = 400
drain = { add = [10, 1000], leal = [10, 2000], nop = [10, 4000] }
"#;
        assert!(matches!(Presets::from_toml_str(text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn rejects_too_many_steps() {
        let text = r#"
[microarch.bad]
store_buffer_size = 4
steps = 5
base_load_cycles = 30
store_4k_class_cycles = 100
load_4k_class_cycles = 200
plateau_cycles = 300
peak_cycles = 400
drain = { add = [4, 1000], leal = [4, 2000], nop = [4, 4000] }
"#;
        assert!(matches!(Presets::from_toml_str(text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn overlay_adds_entries() {
        let p = Presets::builtin_with("[dram.custom]\nbits = 24\n").unwrap();
        assert_eq!(p.dram("custom").unwrap().bits, 24);
        assert!(p.microarch("kabylake-r").is_ok());
        assert!(matches!(Presets::builtin_with("[dram"), Err(ConfigError::Parse(_))));
    }
}
