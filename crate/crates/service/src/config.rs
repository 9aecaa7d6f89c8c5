use std::fs;
use std::path::{Path, PathBuf};

use esa_core::checks::{DEFAULT_CHECK_RATE, DEFAULT_PHRASES};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const DEFAULT_TOKEN_ENV: &str = "ESA_QE_API_KEY";
pub const DEFAULT_ANNOTATOR_TOKEN_ENV: &str = "ESA_ANNOTATOR_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub name: String,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    /// Segment input file, relative to the config file.
    pub segments_file: PathBuf,
    pub systems: Vec<String>,
    pub segments_per_annotator: usize,
    #[serde(default = "default_check_rate")]
    pub check_rate: f64,
    /// Replacement phrases for attention checks, one per line.
    #[serde(default)]
    pub phrases_file: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub source_lang: String,
    pub target_lang: String,
    #[serde(default)]
    pub provider: ProviderConfig,
}

fn default_run_id() -> String {
    "run1".to_string()
}

fn default_check_rate() -> f64 {
    DEFAULT_CHECK_RATE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Canned responses from `mock_dir`; unknown requests get no pre-fill.
    #[default]
    Mock,
    /// OpenAI-compatible chat completion endpoint.
    Http,
    /// No pre-fill at all.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub mock_dir: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.to_string()
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            base_url: None,
            model: None,
            token_env: default_token_env(),
            cache_dir: None,
            mock_dir: None,
            timeout_secs: default_timeout(),
            retries: default_retries(),
        }
    }
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: CampaignConfig = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.segments_file);
        if let Some(p) = self.phrases_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.mock_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.systems.is_empty() {
            return Err(ServiceError::Config("systems list is empty".into()));
        }
        if self.segments_per_annotator == 0 {
            return Err(ServiceError::Config("segments_per_annotator must be at least 1".into()));
        }
        if !(self.check_rate >= 0.0 && self.check_rate < 100.0) {
            return Err(ServiceError::Config(format!(
                "check_rate {} outside [0, 100)",
                self.check_rate
            )));
        }
        if self.provider.kind == ProviderKind::Http && self.provider.base_url.is_none() {
            return Err(ServiceError::Config("http provider needs base_url".into()));
        }
        Ok(())
    }

    pub fn phrases(&self) -> Result<Vec<String>, ServiceError> {
        match &self.phrases_file {
            None => Ok(DEFAULT_PHRASES.iter().map(|s| s.to_string()).collect()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| ServiceError::io(p, e))?;
                Ok(text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect())
            }
        }
    }
}
