//! Experiment configuration: one TOML file covering trace generation,
//! scenario, agent hyperparameters, and the comparison grid. Every field has
//! a default, so an empty file (or none at all) is a valid experiment.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vmsched::agent::AgentConfig;
use vmsched::trace::{Catalog, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; everything else derives from it.
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub agent: AgentConfig,
    pub trace: TraceSection,
    pub train: TrainSection,
    pub compare: CompareSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scenario: ScenarioConfig::default(),
            agent: AgentConfig::default(),
            trace: TraceSection::default(),
            train: TrainSection::default(),
            compare: CompareSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    /// Create requests per generated trace.
    pub length: usize,
    pub catalog: Catalog,
}

impl Default for TraceSection {
    fn default() -> Self {
        TraceSection {
            length: 200,
            catalog: Catalog::default_catalog(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Checkpoint cadence in epochs; the final state is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub policies: Vec<String>,
    /// Warm-start utilization levels the comparison sweeps over.
    pub warm_start_grid: Vec<f64>,
    /// Evaluation traces per grid cell.
    pub traces: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            policies: vec![
                "first_fit".into(),
                "best_fit".into(),
                "surrogate".into(),
            ],
            warm_start_grid: vec![0.0, 0.3, 0.4, 0.5, 0.6],
            traces: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.scenario
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid scenario: {e}"))?;
        cfg.trace
            .catalog
            .validate()
            .context("invalid vm catalog")?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
        match path {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vmsched::trace::ScenarioMode;

    #[test]
    fn empty_toml_is_the_default_config() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_override_selected_fields() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            seed = 7
            [scenario]
            n_pms_initial = 3
            mode = "expansion"
            [agent]
            epochs = 12
            k = 7
            [trace]
            length = 50
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.scenario.n_pms_initial, 3);
        assert_eq!(cfg.scenario.mode, ScenarioMode::Expansion);
        assert_eq!(cfg.scenario.n_pms_max, 110);
        assert_eq!(cfg.agent.epochs, 12);
        assert_eq!(cfg.agent.k, 7);
        assert_eq!(cfg.trace.length, 50);
        assert_eq!(cfg.train.checkpoint_every, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("nonsense = 1").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
