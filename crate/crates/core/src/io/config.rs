//! Run configuration: a sectioned TOML file, parsed strictly.
//!
//! ```toml
//! [model]
//! stage_widths = [16, 32, 64]
//! blocks_per_stage = [2, 2, 2]
//! mode = "dgconv"            # dense | group:<G> | dgconv
//!
//! [train]
//! epochs = 20
//! batch_size = 64
//! base_lr = 0.05
//! seed = 0
//!
//! [budget]
//! b = 2.0
//!
//! [data]
//! kind = "synthetic"         # synthetic | cifar10 | raw
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{DgError, Result};
use crate::model::{ConvMode, ModelConfig, StemKind};
use crate::train::{BudgetConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub mode: ConvMode,
    #[serde(default = "d_expansion")]
    pub expansion: usize,
    #[serde(default = "d_stem_width")]
    pub stem_width: usize,
    #[serde(default = "d_stem")]
    pub stem: StemKind,
    #[serde(default = "d_input_channels")]
    pub input_channels: usize,
    #[serde(default = "d_input_size")]
    pub input_size: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
}

fn d_expansion() -> usize {
    2
}
fn d_stem_width() -> usize {
    16
}
fn d_stem() -> StemKind {
    StemKind::Cifar
}
fn d_input_channels() -> usize {
    3
}
fn d_input_size() -> usize {
    32
}
fn d_classes() -> usize {
    10
}

impl From<ModelSection> for ModelConfig {
    fn from(s: ModelSection) -> Self {
        ModelConfig {
            input_channels: s.input_channels,
            input_size: s.input_size,
            classes: s.classes,
            stem: s.stem,
            stem_width: s.stem_width,
            stage_widths: s.stage_widths,
            blocks_per_stage: s.blocks_per_stage,
            expansion: s.expansion,
            mode: s.mode,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Uniform group count of the baseline in savings reports.
    #[serde(default)]
    pub uniform_groups: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub budget: BudgetConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let loc = e
                .span()
                .map(|span| {
                    let (line, col) = line_col(text, span.start);
                    format!("line {line}, column {col}: ")
                })
                .unwrap_or_default();
            DgError::Config(format!("{loc}{}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DgError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            DgError::Config(m) => DgError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if !(self.budget.b > 0.0 && self.budget.b.is_finite()) {
            return Err(DgError::Config(format!("budget.b must be positive, got {}", self.budget.b)));
        }
        if !(self.budget.alpha < 0.0) {
            return Err(DgError::Config(format!("budget.alpha must be negative, got {}", self.budget.alpha)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DgError::Value(e.to_string()))
    }
}

/// 1-based line and column of byte `offset`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}
