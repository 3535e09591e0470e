//! Run configuration: one JSON document carrying every knob of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::data::SplitSpec;
use crate::encoders::{CollabConfig, TextConfig};
use crate::error::{CtrlError, Result};
use crate::finetune::{EndToEndConfig, FinetuneConfig};
use crate::prompt::{PromptTemplate, TokenizerConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Raw CSV consumed by `prepare`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Unfitted schema matching `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub prompt_variant: PromptTemplate,
    pub tokenizer: TokenizerConfig,
    pub split: SplitSpec,
    pub collab: CollabConfig,
    pub text: TextConfig,
    pub align: AlignConfig,
    pub finetune: FinetuneConfig,
    pub end_to_end: EndToEndConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: None,
            schema: None,
            out_dir: None,
            prompt_variant: PromptTemplate::Descriptive,
            tokenizer: TokenizerConfig::default(),
            split: SplitSpec::default(),
            collab: CollabConfig::default(),
            text: TextConfig::default(),
            align: AlignConfig::default(),
            finetune: FinetuneConfig::default(),
            end_to_end: EndToEndConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates. The `version` key is mandatory.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CtrlError::Config(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CONFIG_VERSION) => {}
            Some(v) => return Err(CtrlError::Config(format!("config version {v} unsupported (expected {CONFIG_VERSION})"))),
            None => return Err(CtrlError::Config("config lacks an integer `version`".into())),
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CtrlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CtrlError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| CtrlError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CtrlError::Config(format!("config version {} unsupported", self.version)));
        }
        self.collab.validate()?;
        self.text.validate()?;
        self.align.validate()?;
        self.finetune.validate()?;
        self.end_to_end.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::Similarity;
    use crate::encoders::Backbone;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.align.temperature, 0.7);
        assert_eq!(cfg.finetune.lr, 1e-3);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"version": 1, "seed": 7, "prompt_variant": 3,
                "collab": {"backbone": "dcn"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.prompt_variant, PromptTemplate::ValuesOnly);
        assert_eq!(cfg.collab.backbone, Backbone::Dcn);
        assert_eq!(cfg.collab.hidden, vec![256, 128, 64]);
        assert_eq!(cfg.align.similarity, Similarity::MaxSim);
    }

    #[test]
    fn bad_documents_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 1, "sede": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 1, "prompt_variant": 6}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 1, "end_to_end": {"lambda": -1}}"#).is_err());
        assert!(RunConfig::from_json("not json").is_err());
    }
}
