use std::path::Path;

use repnet::data::SyntheticSpec;
use repnet::network::{FeatureName, RepNetConfig};
use repnet::retrieval::SearchMode;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalParams {
    pub k: usize,
    pub search: SearchMode,
    /// Cut-offs reported by `eval` and `query --with-eval`.
    pub precision_at: Vec<usize>,
    pub bench_repetitions: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: 10,
            search: SearchMode::Linear,
            precision_at: vec![1, 5, 10],
            bench_repetitions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisParams {
    pub ridge: f64,
    pub saliency_feature: FeatureName,
    /// `[height, width]` to treat inputs as an image; a 1-D strip otherwise.
    pub grid: Option<[usize; 2]>,
    pub occluder_size: Option<usize>,
    pub occluder_stride: Option<usize>,
    pub occluder_fill: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            ridge: repnet::linalg::DEFAULT_RIDGE,
            saliency_feature: FeatureName::Sls3,
            grid: None,
            occluder_size: None,
            occluder_stride: None,
            occluder_fill: 0.0,
        }
    }
}

/// Everything a run needs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: RepNetConfig,
    pub data: SyntheticSpec,
    /// Per-identity fraction of samples `gen-data` sends to the test split.
    pub holdout: f64,
    pub train_steps: u64,
    pub retrieval: RetrievalParams,
    pub analysis: AnalysisParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: RepNetConfig::default(),
            data: SyntheticSpec::default(),
            holdout: 0.2,
            train_steps: 2000,
            retrieval: RetrievalParams::default(),
            analysis: AnalysisParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Data(format!("invalid config: {msg}")));
        self.network
            .validate()
            .map_err(|e| CliError::Data(format!("invalid config: {e}")))?;
        self.data
            .validate()
            .map_err(|e| CliError::Data(format!("invalid config: {e}")))?;
        let (n, d) = (&self.network, &self.data);
        if n.input_dim != d.feature_dim {
            return bad(format!(
                "network.input_dim {} differs from data.feature_dim {}",
                n.input_dim, d.feature_dim
            ));
        }
        if n.n_colors != d.n_colors || n.n_models != d.n_models {
            return bad(format!(
                "network classes {}x{} differ from data classes {}x{}",
                n.n_colors, n.n_models, d.n_colors, d.n_models
            ));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout must be in [0, 1), got {}", self.holdout));
        }
        if self.retrieval.k == 0 || self.retrieval.precision_at.contains(&0) {
            return bad("k and precision cut-offs must be at least 1".into());
        }
        if self.retrieval.bench_repetitions == 0 {
            return bad("bench_repetitions must be at least 1".into());
        }
        if !(self.analysis.ridge >= 0.0) {
            return bad(format!("ridge must be non-negative, got {}", self.analysis.ridge));
        }
        if let Some([h, w]) = self.analysis.grid {
            if h * w != n.input_dim {
                return bad(format!("grid {h}x{w} does not cover input_dim {}", n.input_dim));
            }
        }
        Ok(())
    }
}
