//! The JSON document driving `transfer` and `sample`.
//!
//! ```json
//! {
//!   "query_slat": "query.slat",
//!   "velocity": { "kind": "gaussian", "mean": [0, 0, 0, 0], "std": 1.0 },
//!   "sampler": { "steps": 300, "seed": 7 },
//!   "guidance": { "objective": "appearance", "weight": 1.0, "inner_steps": 5 },
//!   "appearance": { "slat": "appearance.slat", "correspondence": "correspondence.json" }
//! }
//! ```
//!
//! Unknown keys anywhere are rejected. Relative paths are taken relative to
//! the config file.

use std::path::{Path, PathBuf};

use flowguide::flow::DEFAULT_STEPS;
use flowguide::guidance::{Denominator, GuidanceMode, GuidanceObjective, GuidanceOrder, GuidanceSpec};
use flowguide::optim::OptimizerConfig;
use flowguide::partition::{CorrespondenceMethod, DEFAULT_K};
use flowguide::toyflows::GaussianFlowSpec;
use flowguide::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub query_slat: PathBuf,
    #[serde(default)]
    pub velocity: VelocityConfig,
    /// Conditioning vector for conditional fields.
    #[serde(default)]
    pub condition: Option<Vec<f64>>,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub appearance: Option<AppearanceSection>,
    /// Output of `flowguide cluster` covering the query shape.
    #[serde(default)]
    pub clusters: Option<PathBuf>,
    /// Compute clusters (and, with appearance features, the correspondence)
    /// in-process instead of reading them from files.
    #[serde(default)]
    pub partition: Option<PartitionSection>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityConfig {
    #[default]
    Zero,
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
    Mixture {
        components: Vec<GaussianFlowSpec>,
    },
    /// Parameters written by `flowguide train-toy`.
    Trained {
        params: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub seed: Option<u64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub objective: GuidanceObjective,
    pub weight: f64,
    pub mode: GuidanceMode,
    pub inner_steps: usize,
    pub apply_every: usize,
    pub order: GuidanceOrder,
    pub reset_optimizer: bool,
    pub denominator: Denominator,
    pub optimizer: OptimizerConfig,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let d = GuidanceSpec::default();
        Self {
            objective: d.objective,
            weight: d.weight,
            mode: d.mode,
            inner_steps: d.inner_steps,
            apply_every: d.apply_every,
            order: d.order,
            reset_optimizer: d.reset_optimizer,
            denominator: d.denominator,
            optimizer: d.optimizer,
        }
    }
}

impl GuidanceSection {
    /// A `GuidanceSpec` with these settings and no data inputs.
    pub fn to_spec(&self) -> GuidanceSpec {
        GuidanceSpec {
            objective: self.objective,
            weight: self.weight,
            mode: self.mode,
            inner_steps: self.inner_steps,
            apply_every: self.apply_every,
            order: self.order,
            reset_optimizer: self.reset_optimizer,
            denominator: self.denominator,
            optimizer: self.optimizer,
            ..GuidanceSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceSection {
    pub slat: PathBuf,
    #[serde(default)]
    pub correspondence: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub query_features: PathBuf,
    #[serde(default)]
    pub appearance_features: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: CorrespondenceMethod,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_method() -> CorrespondenceMethod {
    CorrespondenceMethod::CosegNn
}

impl RunConfig {
    /// Reads and schema-checks a config, resolving its paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: RunConfig = flowguide::io::docs::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.query_slat);
        if let VelocityConfig::Trained { params } = &mut self.velocity {
            fix(params);
        }
        if let Some(a) = &mut self.appearance {
            fix(&mut a.slat);
            if let Some(c) = &mut a.correspondence {
                fix(c);
            }
        }
        if let Some(c) = &mut self.clusters {
            fix(c);
        }
        if let Some(p) = &mut self.partition {
            fix(&mut p.query_features);
            if let Some(a) = &mut p.appearance_features {
                fix(a);
            }
        }
    }
}
