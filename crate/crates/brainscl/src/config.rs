//! The run configuration file (TOML).

use std::path::{Path, PathBuf};

use brainscl_core::eval::{VariantName, VariantSpec};
use brainscl_core::contrastive::{ConnectomeEncoderConfig, TrainConfig};
use brainscl_core::pipeline::{EvalConfig, PipelineConfig, PrototypeConfig};
use brainscl_core::snf::SnfConfig;
use brainscl_core::structure::{EncoderConfig, FitOptions};
use brainscl_core::subtype::SubtypeConfig;
use brainscl_core::synth::SynthSpec;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::io::read_to_string;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Cohort manifest. When absent and a `[synth]` section exists, the
    /// pipeline generates the cohort into the workdir first.
    pub manifest: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    /// Optional ROI lookup CSV with columns `index,name,network`.
    pub roi_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderChoice {
    #[default]
    Stub,
    Precomputed,
    External,
    /// No text view; only valid for variants that skip subtype discovery
    /// or use the structure view alone.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub provider: ProviderChoice,
    pub dim: usize,
    pub seed: u64,
    /// External provider name and endpoint; requests are `{"text": ...}`
    /// and responses `{"vector": [...]}`.
    pub name: Option<String>,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    /// Minimum spacing between external requests.
    pub min_interval_ms: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            provider: ProviderChoice::Stub,
            dim: 64,
            seed: 0,
            name: None,
            endpoint: None,
            timeout_secs: 30,
            min_interval_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub variant: VariantName,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { variant: VariantName::Full }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<VariantName>,
    /// Subtype counts for the full variant; empty means `subtype.k` only.
    pub k_sweep: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { variants: VariantName::ALL.to_vec(), k_sweep: Vec::new(), seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub top_n: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { top_n: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub run: RunSection,
    pub text: TextConfig,
    pub structure: EncoderConfig,
    pub fit: FitOptions,
    pub snf: SnfConfig,
    pub subtype: SubtypeConfig,
    pub prototype: PrototypeConfig,
    pub encoder: ConnectomeEncoderConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub report: ReportConfig,
    pub synth: Option<SynthSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> AppResult<Self> {
        let s = read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&s).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            structure: self.structure.clone(),
            fit: self.fit.clone(),
            snf: self.snf.clone(),
            subtype: self.subtype.clone(),
            prototype: self.prototype.clone(),
            encoder: self.encoder.clone(),
            trainer: self.trainer.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> AppResult<()> {
        self.pipeline().validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.text.dim == 0 {
            return Err(AppError::Config("text.dim must be at least 1".into()));
        }
        if self.text.provider == ProviderChoice::External && self.text.endpoint.is_none() {
            return Err(AppError::Config("text.provider = \"external\" needs text.endpoint".into()));
        }
        if self.report.top_n == 0 {
            return Err(AppError::Config("report.top_n must be at least 1".into()));
        }
        self.variant_spec()?;
        if self.ablation.k_sweep.iter().any(|&k| k < 2) {
            return Err(AppError::Config("ablation.k_sweep entries must be at least 2".into()));
        }
        Ok(())
    }

    pub fn spec_for(&self, name: VariantName) -> AppResult<VariantSpec> {
        let k = name.uses_subtypes().then_some(self.subtype.k);
        Ok(VariantSpec::new(name, k)?)
    }

    pub fn variant_spec(&self) -> AppResult<VariantSpec> {
        self.spec_for(self.run.variant)
    }

    /// Variant specs of the ablation grid, in a fixed order.
    pub fn ablation_specs(&self) -> AppResult<Vec<VariantSpec>> {
        if self.ablation.variants.is_empty() {
            return Err(AppError::Usage("ablation.variants is empty".into()));
        }
        let mut out = Vec::new();
        for &v in &self.ablation.variants {
            if v == VariantName::Full && !self.ablation.k_sweep.is_empty() {
                for &k in &self.ablation.k_sweep {
                    out.push(VariantSpec::new(v, Some(k))?);
                }
            } else {
                out.push(self.spec_for(v)?);
            }
        }
        Ok(out)
    }

    pub fn needs_text(&self, spec: VariantSpec) -> bool {
        match spec.name {
            VariantName::S | VariantName::Cl | VariantName::G => false,
            _ => true,
        }
    }
}
