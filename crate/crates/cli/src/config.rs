use std::path::Path;

use anyhow::{anyhow, bail, Context};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use widesearch::curate::CurationConfig;
use widesearch::env::EnvConfig;
use widesearch::reward::TraceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Training,
    Evaluation,
}

impl Profile {
    pub fn env(self) -> EnvConfig {
        match self {
            Profile::Training => EnvConfig::training(),
            Profile::Evaluation => EnvConfig::evaluation(),
        }
    }
}

/// Effective configuration after layering defaults, the config file and
/// flags. Recorded verbatim in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Effective {
    pub env: EnvConfig,
    pub reward: TraceConfig,
    pub curation: CurationConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    env: toml::Table,
    reward: Option<TraceConfig>,
    curation: Option<CurationConfig>,
}

/// Env keys in the file override the chosen profile key by key.
fn overlay_env(base: EnvConfig, table: &toml::Table) -> anyhow::Result<EnvConfig> {
    let mut value = serde_json::to_value(&base)?;
    let map = value.as_object_mut().expect("config serializes to an object");
    for (k, v) in table {
        if !map.contains_key(k) {
            bail!("unknown [env] key `{k}`");
        }
        map.insert(k.clone(), serde_json::to_value(v)?);
    }
    serde_json::from_value(value).context("[env] table")
}

pub fn load(path: Option<&Path>, profile: Profile) -> anyhow::Result<Effective> {
    let file: FileConfig = match path {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
    };
    Ok(Effective {
        env: overlay_env(profile.env(), &file.env)?,
        reward: file.reward.unwrap_or_default(),
        curation: file.curation.unwrap_or_default(),
    })
}

impl Effective {
    /// Returns warnings for legal but degenerate settings.
    pub fn validate(&self) -> anyhow::Result<Vec<String>> {
        self.env.validate().map_err(|e| anyhow!("env: {}", e.0))?;
        self.curation.validate().map_err(|e| anyhow!("curation: {e}"))?;
        self.reward.validate().map_err(|e| anyhow!("reward: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_profile_key_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[env]\nmax_turns = 5\n\n[reward]\ngamma = 2.0\n").unwrap();
        let e = load(Some(&p), Profile::Evaluation).unwrap();
        assert_eq!(e.env.max_turns, 5);
        assert_eq!(e.env.max_tool_calls, 18);
        assert_eq!(e.reward.gamma, 2.0);
        assert_eq!(e.reward.group_size, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[env]\nmax_turn = 5\n").unwrap();
        assert!(load(Some(&p), Profile::Training).is_err());
        std::fs::write(&p, "[envv]\n").unwrap();
        assert!(load(Some(&p), Profile::Training).is_err());
    }
}
