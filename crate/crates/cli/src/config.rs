use std::collections::BTreeSet;
use std::path::Path;

use kamir_core::pipeline::PipelineConfig;
use kamir_core::KamirError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Reads a sectioned TOML config. Keys the pipeline does not know are
/// rejected so that typos cannot silently fall back to defaults.
pub fn load(path: Option<&Path>) -> Result<PipelineConfig, KamirError> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| KamirError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse(&text).map_err(|m| KamirError::Config(format!("{}: {m}", path.display())))
}

pub fn parse(text: &str) -> Result<PipelineConfig, String> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
    let cfg: PipelineConfig = toml::Table::try_into(raw.clone()).map_err(|e| e.to_string())?;
    let known = keys(&toml::Table::try_from(&cfg).map_err(|e| e.to_string())?, "");
    if let Some(bad) = keys(&raw, "").difference(&known).next() {
        return Err(format!("unknown key `{bad}`"));
    }
    Ok(cfg)
}

fn keys(t: &toml::Table, prefix: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (k, v) in t {
        let name = format!("{prefix}{k}");
        match v {
            toml::Value::Table(inner) => out.extend(keys(inner, &format!("{name}."))),
            _ => {
                out.insert(name);
            }
        }
    }
    out
}

/// The resolved configuration as TOML, with every seed spelled out.
pub fn render(cfg: &PipelineConfig) -> Result<String, KamirError> {
    toml::to_string(cfg).map_err(|e| KamirError::Config(format!("cannot render config: {e}")))
}
