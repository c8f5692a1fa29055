//! Run configuration: one JSON document with a section per subcommand.
//!
//! Every field has a default, so `{}` is a valid config. Command-line
//! overrides use dotted paths into the same document (`train.steps=100`).

use getzero_core::bench::{DemoConfig, ExpertConfig, SplitConfig, TaskSpec};
use getzero_core::graph::{FilterRules, FingerCatalog, TwoJointRule};
use getzero_core::trainer::Schedule;
use getzero_core::GetConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub embodiments: EmbodimentSection,
    pub task: TaskSpec,
    pub demos: DemoSection,
    pub model: GetConfig,
    pub train: Schedule,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub fk_probe: FkProbeSection,
    pub size_sweep: SizeSweepSection,
}


/// Which structural filter `gen-embodiments` applies before splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterChoice {
    None,
    ExactlyTwo,
    AtLeastTwo,
}

impl FilterChoice {
    pub fn rules(self) -> FilterRules {
        match self {
            FilterChoice::None => FilterRules::none(),
            FilterChoice::ExactlyTwo => FilterRules::hand(TwoJointRule::Exactly),
            FilterChoice::AtLeastTwo => FilterRules::hand(TwoJointRule::AtLeast),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbodimentSection {
    pub catalog: FingerCatalog,
    pub filter: FilterChoice,
    pub splits: SplitConfig,
}

impl Default for EmbodimentSection {
    fn default() -> Self {
        Self { catalog: FingerCatalog::desk_hand(), filter: FilterChoice::AtLeastTwo, splits: SplitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    pub steps_per_embodiment: usize,
    pub history: usize,
    pub seed: u64,
    pub expert: ExpertConfig,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for DemoSection {
    fn default() -> Self {
        let d = DemoConfig::default();
        Self { steps_per_embodiment: d.steps_per_embodiment, history: d.history, seed: d.seed, expert: d.expert, threads: 0 }
    }
}

impl DemoSection {
    pub fn demo_config(&self) -> DemoConfig {
        DemoConfig {
            steps_per_embodiment: self.steps_per_embodiment,
            history: self.history,
            seed: self.seed,
            expert: self.expert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Episodes per embodiment per evaluation seed.
    pub episodes: usize,
    pub seeds: usize,
    /// Added to the evaluation seed index when drawing initial angles.
    pub seed_base: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 10, seeds: 5, seed_base: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Training seeds per grid row.
    pub seeds: usize,
    /// Restrict the grid to these row names; empty runs all seven.
    pub rows: Vec<String>,
    pub threads: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: 5, rows: Vec::new(), threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FkProbeSection {
    pub seeds: usize,
    pub rows: Vec<String>,
    /// Expert steps recorded per held-out embodiment for the probe set.
    pub probe_steps: usize,
    pub probe_seed: u64,
    pub threads: usize,
}

impl Default for FkProbeSection {
    fn default() -> Self {
        Self {
            seeds: 5,
            rows: vec!["ET".into(), "ET+DFS".into(), "ET+PE+SE+SL".into()],
            probe_steps: 160,
            probe_seed: 77,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSweepSection {
    /// Training-set sizes; 0 means every training embodiment.
    pub sizes: Vec<usize>,
    pub seeds: usize,
    pub threads: usize,
}

impl Default for SizeSweepSection {
    fn default() -> Self {
        Self { sizes: vec![5, 10, 20, 0], seeds: 5, threads: 0 }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Applies `path=value` overrides. Values parse as JSON and fall back
    /// to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(format!("override: {e}")))
    }

    /// Pretty JSON with a trailing newline; field order is fixed, so equal
    /// configs give equal bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::default()
            .with_overrides(&["train.steps=100".into(), "model.pe_variant=dfs".into(), "ablate.rows=[\"ET\"]".into()])
            .unwrap();
        assert_eq!(c.train.steps, 100);
        assert_eq!(c.model.pe_variant, getzero_core::PeVariant::Dfs);
        assert_eq!(c.ablate.rows, vec!["ET".to_string()]);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let c = RunConfig::default();
        for o in ["train.nope=1", "train.steps=-4", "steps"] {
            assert!(matches!(c.with_overrides(&[o.into()]), Err(CliError::Config(_))), "{o}");
        }
        assert!(matches!(RunConfig::from_json("{\"trian\": {}}"), Err(CliError::Config(_))));
    }
}
