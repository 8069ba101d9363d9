//! Builtin scenario catalogue.

use std::sync::OnceLock;

use crate::config::{ConfigFile, ScenarioConfig};

const BUILTIN_TOML: &str = include_str!("builtin.toml");

fn catalogue() -> &'static ConfigFile {
    static CAT: OnceLock<ConfigFile> = OnceLock::new();
    CAT.get_or_init(|| {
        let raw: ConfigFile = toml::from_str(BUILTIN_TOML).expect("builtin catalogue parses");
        // flatten `base` chains inside the catalogue itself
        let mut out = ConfigFile { seed: raw.seed, scenarios: Vec::new() };
        for s in &raw.scenarios {
            let flat = match &s.base {
                Some(b) => {
                    let parent = out.scenarios.iter().find(|p| &p.name == b).expect("base defined earlier").clone();
                    merge(s.clone(), parent)
                }
                None => s.clone(),
            };
            out.scenarios.push(flat);
        }
        out
    })
}

fn merge(top: ScenarioConfig, base: ScenarioConfig) -> ScenarioConfig {
    let mut s = top.overlay(&base);
    s.base = None;
    s
}

pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    catalogue().scenarios.iter().find(|s| s.name == name).cloned()
}

pub fn builtin_names() -> Vec<&'static str> {
    catalogue().scenarios.iter().map(|s| s.name.as_str()).collect()
}

/// The whole catalogue as a config file.
pub fn builtin_file() -> ConfigFile {
    catalogue().clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve_all;
    use std::path::Path;

    #[test]
    fn every_builtin_resolves() {
        let all = resolve_all(&builtin_file(), Path::new("."), None).unwrap();
        assert_eq!(all.len(), builtin_names().len());
        assert!(builtin_names().contains(&"annulus_vortex"));
    }

    #[test]
    fn variants_inherit_from_their_base() {
        let v = builtin("mu_elliptic_2d_mu3").unwrap();
        assert_eq!(v.integrand.as_deref(), Some("mu_elliptic:3"));
        assert_eq!(v.cells, Some(vec![48, 48]));
        assert!(v.base.is_none());
    }
}
