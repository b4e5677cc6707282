use super::config::{IncludeResolver, ScenarioConfig};
use crate::error::{Error, Result};

const DEVICE: &str = include_str!("../../presets/device.toml");

/// Built-in scenarios as (name, TOML text).
pub const PRESETS: &[(&str, &str)] = &[
    ("fig3b_response", include_str!("../../presets/fig3b_response.toml")),
    ("fig3c_open_psd", include_str!("../../presets/fig3c_open_psd.toml")),
    ("fig3d_charge_fit", include_str!("../../presets/fig3d_charge_fit.toml")),
    ("fig4a_sweep", include_str!("../../presets/fig4a_sweep.toml")),
    ("fig4b_sweep", include_str!("../../presets/fig4b_sweep.toml")),
    ("fig4c_n10", include_str!("../../presets/fig4c_n10.toml")),
    ("fig4d_jump", include_str!("../../presets/fig4d_jump.toml")),
    ("fig4e_jump", include_str!("../../presets/fig4e_jump.toml")),
    ("fig4f_n10", include_str!("../../presets/fig4f_n10.toml")),
    ("fig4f_n5", include_str!("../../presets/fig4f_n5.toml")),
    ("fig4f_n1", include_str!("../../presets/fig4f_n1.toml")),
];

/// Resolves includes against the embedded files.
pub struct EmbeddedResolver;

impl IncludeResolver for EmbeddedResolver {
    fn load(&self, name: &str) -> Result<String> {
        match name {
            "device.toml" => Ok(DEVICE.to_string()),
            _ => PRESETS
                .iter()
                .find(|(n, _)| format!("{n}.toml") == name)
                .map(|(_, t)| t.to_string())
                .ok_or_else(|| Error::Config(format!("no embedded file {name:?}"))),
        }
    }
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::Config(format!("unknown preset {name:?}; available: {}", preset_names().join(", ")))
    })?;
    ScenarioConfig::from_toml(text, &EmbeddedResolver)
}
