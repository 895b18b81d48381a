//! Pipeline configuration, loaded from JSON with every field optional.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cmrqc_core::biomarkers::BiomarkerConfig;
use cmrqc_core::otsu::PapillaryConfig;
use cmrqc_core::qc::QcConfig;
use cmrqc_core::stats::EmptyDice;
use cmrqc_core::{Label, LabelMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Source label encoding: a named preset or an explicit code table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMapSpec {
    Identity,
    Acdc,
    /// Source code (as a JSON string key) to canonical label.
    Custom(BTreeMap<String, Label>),
}

impl LabelMapSpec {
    pub fn build(&self) -> Result<LabelMap> {
        Ok(match self {
            LabelMapSpec::Identity => LabelMap::identity(),
            LabelMapSpec::Acdc => LabelMap::acdc(),
            LabelMapSpec::Custom(table) => {
                let mut mapping = BTreeMap::new();
                for (code, &label) in table {
                    let code: i64 = code
                        .trim()
                        .parse()
                        .with_context(|| format!("label map key {code:?} is not an integer"))?;
                    mapping.insert(code, label);
                }
                LabelMap::new(mapping)?
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub label_map: LabelMapSpec,
    /// Reject files holding codes outside the label map instead of
    /// recording them for the unexpected-label rule.
    pub strict_labels: bool,
    pub exclude_papillary: bool,
    pub papillary_targets: Vec<Label>,
    pub papillary: PapillaryConfig,
    pub biomarkers: BiomarkerConfig,
    pub qc: QcConfig,
    /// Dice policy when both masks are empty.
    pub empty_dice: EmptyDice,
    pub formats: Vec<OutputFormat>,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            label_map: LabelMapSpec::Identity,
            strict_labels: false,
            exclude_papillary: false,
            papillary_targets: vec![Label::Lvbp, Label::Rvbp],
            papillary: PapillaryConfig::default(),
            biomarkers: BiomarkerConfig::default(),
            qc: QcConfig::default(),
            empty_dice: EmptyDice::Perfect,
            formats: vec![OutputFormat::Json, OutputFormat::Csv],
            jobs: 0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.qc.validate()?;
        self.label_map.build()?;
        let density = self.biomarkers.myocardial_density;
        if !(density.is_finite() && density > 0.0) {
            bail!("myocardial_density must be positive, got {density}");
        }
        if self.papillary.n_bins < 2 {
            bail!("papillary.n_bins must be at least 2");
        }
        if self.exclude_papillary && self.papillary_targets.is_empty() {
            bail!("papillary exclusion enabled without target labels");
        }
        Ok(())
    }

    pub fn wants(&self, format: OutputFormat) -> bool {
        self.formats.contains(&format)
    }

    /// Hash of every setting that can change a case result. Parallelism and
    /// output formats are left out.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig {
            jobs: 0,
            formats: Vec::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config is always serialisable");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
