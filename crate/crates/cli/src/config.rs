//! Run configuration: one TOML file covering every subcommand, with
//! dotted-key overrides from the command line. Unknown keys are rejected
//! at every nesting level, and the effective config is echoed into the
//! run directory so any run can be replayed from its artifacts alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hcp_core::action::ActionConfig;
use hcp_core::backbone::BackboneConfig;
use hcp_core::metrics::{ApIntegration, DETECTION_THRESHOLDS, INSTANCE_IOU_THRESHOLDS};
use hcp_core::seg::HhoiConfig;
use hcp_core::synth::SynthConfig;
use hcp_core::types::SemanticTaxonomy;

use crate::CliError;

/// Semantic class list for a run. `classes: None` selects the full
/// daily-life scene taxonomy; a custom list must put the ignore class
/// first and name the person class and every stuff class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaxonomyConfig {
    pub classes: Option<Vec<String>>,
    pub person: String,
    pub stuff: Vec<String>,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        TaxonomyConfig {
            classes: None,
            person: "person".to_string(),
            stuff: vec!["ground".to_string()],
        }
    }
}

impl TaxonomyConfig {
    pub fn build(&self) -> Result<SemanticTaxonomy, CliError> {
        match &self.classes {
            None => Ok(SemanticTaxonomy::default_scene()),
            Some(names) => {
                let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let stuff_refs: Vec<&str> = self.stuff.iter().map(String::as_str).collect();
                SemanticTaxonomy::new(&name_refs, &self.person, &stuff_refs)
                    .map_err(|e| CliError::Config(format!("taxonomy: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Also checkpoint every N steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            learning_rate: 0.05,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub integration: ApIntegration,
    /// Center-distance thresholds for detection and action AP, meters.
    pub detection_thresholds: Vec<f64>,
    /// Point-set IoU thresholds for instance AP.
    pub instance_iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            integration: ApIntegration::Interp101,
            detection_thresholds: DETECTION_THRESHOLDS.to_vec(),
            instance_iou_thresholds: INSTANCE_IOU_THRESHOLDS.to_vec(),
        }
    }
}

/// Everything a run needs. The top-level `seed` drives data generation
/// and model initialization; `synth.seed` is overwritten with it when the
/// synth subcommand runs so the echoed config matches what happened.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for frame-level stages; 1 is fully serial.
    pub jobs: usize,
    /// Frame count for the synth subcommand's train/test split.
    pub frames: usize,
    pub taxonomy: TaxonomyConfig,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub hhoi: HhoiConfig,
    pub action: ActionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            frames: 10,
            taxonomy: TaxonomyConfig::default(),
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            hhoi: HhoiConfig::default(),
            action: ActionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".to_string()));
        }
        self.synth
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.hhoi
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.action
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Loads the TOML file (or starts from defaults), applies dotted-key
/// overrides, then deserializes with unknown-key rejection.
pub fn load_run_config(
    config_path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let mut table = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::MissingInput(format!("config {}: {e}", path.display()))
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets one dotted key. The value is parsed as a TOML literal so numbers,
/// booleans, and arrays keep their types; anything unparsable is a string.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), CliError> {
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key '{key}' is malformed")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!("override '{key}' descends into a non-table value"))
            })?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Echoes the effective config into the run directory. The file carries
/// no timestamps, so replaying a run reproduces it byte for byte.
pub fn write_effective_config(run_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Pipeline(format!("serializing config: {e}")))?;
    fs::write(run_dir.join("config.toml"), text)
        .map_err(|e| CliError::Pipeline(format!("writing config echo: {e}")))
}
