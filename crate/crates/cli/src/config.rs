use std::path::{Path, PathBuf};

use serde::Deserialize;

use cxrlab_core::harness::RunConfig;

use crate::failure::Failure;

pub const DEFAULT_WORKDIR: &str = "cxrlab-out";

/// Contents of a `--config` TOML file. Every key is optional.
///
/// ```toml
/// workdir = "out"
/// seed = 7
/// max_rounds = 5
///
/// [run]
/// max_failure_fraction = 0.05
///
/// [run.backend]
/// kind = "http"
/// endpoint = "http://localhost:8000/v1/chat/completions"
/// model = "qwen3-14b"
/// max_parallel = 8
///
/// [run.thresholds]
/// accuracy = 0.9
/// kappa = 0.9
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_rounds: Option<u32>,
    pub run: RunConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(crate::failure::IO, format!("{}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }
}

/// Effective settings after flags are laid over the config file.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub workdir: PathBuf,
    pub seed: u64,
    pub max_rounds: u32,
    pub run: RunConfig,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub workdir: Option<PathBuf>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
    pub accuracy_threshold: Option<f64>,
    pub kappa_threshold: Option<f64>,
    pub max_failure_fraction: Option<f64>,
}

impl CliConfig {
    pub fn resolve(file: FileConfig, flags: Overrides) -> Self {
        let mut run = file.run;
        if let Some(kind) = flags.backend {
            run.backend.kind = kind;
        }
        if flags.endpoint.is_some() {
            run.backend.endpoint = flags.endpoint;
        }
        if flags.model.is_some() {
            run.backend.model = flags.model;
        }
        if let Some(n) = flags.parallelism {
            run.backend.max_parallel = n;
        }
        if let Some(a) = flags.accuracy_threshold {
            run.thresholds.accuracy = a;
        }
        if let Some(k) = flags.kappa_threshold {
            run.thresholds.kappa = k;
        }
        if let Some(f) = flags.max_failure_fraction {
            run.max_failure_fraction = f;
        }
        Self {
            workdir: flags.workdir.or(file.workdir).unwrap_or_else(|| DEFAULT_WORKDIR.into()),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            max_rounds: file.max_rounds.unwrap_or(5),
            run,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: FileConfig = toml::from_str(
            "workdir = \"a\"\nseed = 3\n[run.backend]\nkind = \"http\"\nmax_parallel = 2\n[run.thresholds]\nkappa = 0.8\n",
        )
        .unwrap();
        let flags = Overrides {
            workdir: Some("b".into()),
            parallelism: Some(9),
            ..Overrides::default()
        };
        let cfg = CliConfig::resolve(file, flags);
        assert_eq!(cfg.workdir, PathBuf::from("b"));
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.run.backend.kind, "http");
        assert_eq!(cfg.run.backend.max_parallel, 9);
        assert_eq!(cfg.run.thresholds.kappa, 0.8);
        assert_eq!(cfg.run.thresholds.accuracy, 0.9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("wrokdir = \"a\"").is_err());
    }
}
