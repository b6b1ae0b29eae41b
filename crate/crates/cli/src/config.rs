use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use medtrust_core::forge::{BalancePolicy, DEFAULT_DELTA};
use medtrust_core::gateway::AgentEndpoint;
use medtrust_core::pipeline::PipelineConfig;
use medtrust_core::retrieval::{DEFAULT_CANDIDATE_DEPTH, DEFAULT_DEPTH, DEFAULT_K_RRF};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Document store and sparse index directory.
    pub data_dir: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub endpoints: EndpointsConfig,
    pub retrieval: RetrievalConfig,
    pub pipeline: PipelineConfig,
    pub forge: ForgeConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointsConfig {
    /// Scripted mock file; when set, every role is served from it.
    pub mock_script: Option<PathBuf>,
    /// Dense-search models registered alongside the mock.
    pub dense_models: Vec<String>,
    /// Live endpoints, used when no mock script is configured.
    pub agents: Vec<AgentEndpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_rrf: f64,
    pub depth: usize,
    pub candidate_depth: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_rrf: DEFAULT_K_RRF,
            depth: DEFAULT_DEPTH,
            candidate_depth: DEFAULT_CANDIDATE_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    pub delta: f64,
    /// Self-assessment rounds per question.
    pub rounds: usize,
    pub policy: BalancePolicy,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            rounds: 4,
            policy: BalancePolicy::PerQuestion,
        }
    }
}

impl Config {
    /// Reads `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        resolve(&mut cfg.data_dir);
        resolve(&mut cfg.benchmark);
        resolve(&mut cfg.endpoints.mock_script);
        Ok(cfg)
    }
}
