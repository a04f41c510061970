//! Engine defaults loaded from a flat TOML file.
//!
//! ```toml
//! k = 1.0
//! epsilon = 1e-6
//! tau = 1.0
//! scales = [2, 3]
//! sigma = 4.0
//! pro_fpr = 0.3
//! grammar = "grammar.json"
//! class_aliases = "class_aliases.json"
//! llm_count = 0
//! ```
//!
//! Relative paths are resolved against the file's directory and must exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use alfa_core::prompts::{LlmConfig, TemplateGrammar};
use alfa_core::rtp::RtpConfig;
use alfa_core::scoring::ScoringConfig;
use alfa_core::PipelineConfig;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub k: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub scales: Vec<usize>,
    pub sigma: f64,
    pub pro_fpr: f64,
    pub memory_weight: f64,
    pub adapt: bool,
    pub grammar: Option<PathBuf>,
    pub class_aliases: Option<PathBuf>,
    pub llm_endpoint: String,
    pub llm_model: String,
    pub llm_max_tokens: u32,
    pub llm_temperature: f64,
    pub llm_count: usize,
    pub llm_cache: Option<PathBuf>,
    pub llm_api_key_env: String,
    pub llm_delay_ms: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let rtp = RtpConfig::default();
        let scoring = ScoringConfig::default();
        let llm = LlmConfig::default();
        Self {
            k: rtp.k,
            epsilon: rtp.epsilon,
            tau: scoring.tau,
            scales: scoring.scales,
            sigma: scoring.sigma,
            pro_fpr: alfa_core::metrics::DEFAULT_PRO_FPR,
            memory_weight: scoring.memory_weight,
            adapt: true,
            grammar: None,
            class_aliases: None,
            llm_endpoint: llm.endpoint,
            llm_model: llm.model,
            llm_max_tokens: llm.max_tokens,
            llm_temperature: llm.temperature,
            llm_count: llm.count,
            llm_cache: None,
            llm_api_key_env: llm.api_key_env,
            llm_delay_ms: llm.delay_ms,
        }
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.grammar, &mut cfg.class_aliases]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(CliError::Usage(format!(
                    "{}: referenced path {} does not exist",
                    path.display(),
                    p.display()
                )));
            }
        }
        if let Some(cache) = cfg.llm_cache.as_mut().filter(|c| c.is_relative()) {
            *cache = base.join(&*cache);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: alfa_core::Error| CliError::Usage(e.to_string());
        self.pipeline().validate().map_err(usage)?;
        self.llm().validate().map_err(|e| usage(e.into()))?;
        if !(self.pro_fpr > 0.0 && self.pro_fpr <= 1.0) {
            return Err(CliError::Usage(format!(
                "pro_fpr must be in (0, 1], got {}",
                self.pro_fpr
            )));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            rtp: RtpConfig {
                k: self.k,
                epsilon: self.epsilon,
            },
            adapt: self.adapt,
            scoring: ScoringConfig {
                tau: self.tau,
                scales: self.scales.clone(),
                sigma: self.sigma,
                memory_weight: self.memory_weight,
            },
        }
    }

    pub fn llm(&self) -> LlmConfig {
        LlmConfig {
            endpoint: self.llm_endpoint.clone(),
            model: self.llm_model.clone(),
            max_tokens: self.llm_max_tokens,
            temperature: self.llm_temperature,
            count: self.llm_count,
            cache_path: self.llm_cache.clone(),
            api_key_env: self.llm_api_key_env.clone(),
            delay_ms: self.llm_delay_ms,
        }
    }

    /// The configured grammar with the alias file merged over its aliases.
    pub fn grammar(&self) -> Result<TemplateGrammar, CliError> {
        let mut grammar = match &self.grammar {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                TemplateGrammar::from_json(&text).map_err(|e| CliError::data(p, e))?
            }
            None => TemplateGrammar::default(),
        };
        if let Some(p) = &self.class_aliases {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let aliases: BTreeMap<String, String> =
                serde_json::from_str(&text).map_err(|e| CliError::data(p, e))?;
            grammar.class_aliases.extend(aliases);
        }
        grammar
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(grammar)
    }
}
