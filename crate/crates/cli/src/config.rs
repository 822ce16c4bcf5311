//! The JSON run configuration. Every block is optional and unknown keys
//! are rejected, so a typo fails loudly instead of silently running with a
//! default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use nonlocal_uq::{FVariant, MlmcOptions, MlsmcOptions, Model, PriorSpec, SolverKind};

/// Physics of the problem: kernel profile, forcing, prior, observations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub f_variant: FVariant,
    pub forcing: f64,
    pub obs_locations: Vec<f64>,
    pub sigma2: f64,
    pub prior: PriorSpec,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let m = Model::default();
        ModelBlock {
            f_variant: m.f_variant,
            forcing: m.forcing,
            obs_locations: m.obs_locations,
            sigma2: m.sigma2,
            prior: m.prior,
        }
    }
}

/// Mesh hierarchy and solver choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationBlock {
    /// Level l uses spacing 2^-(k + l).
    pub k: u32,
    pub max_level: usize,
    pub quad_points: usize,
    pub solver: SolverKind,
    /// Cost-model exponent: one solve at spacing h is charged h^-zeta.
    pub zeta: f64,
}

impl Default for DiscretizationBlock {
    fn default() -> Self {
        let m = Model::default();
        DiscretizationBlock {
            k: m.k,
            max_level: m.max_level,
            quad_points: m.quad_points,
            solver: m.solver,
            zeta: m.zeta,
        }
    }
}

/// Everything one invocation needs besides the subcommand arguments.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; the --out flag takes precedence.
    pub out: Option<String>,
    pub model: ModelBlock,
    pub discretization: DiscretizationBlock,
    pub mlmc: MlmcOptions,
    pub mlsmc: MlsmcOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    /// Assembles the solver model the run operates on.
    pub fn model(&self) -> Model {
        let mut m = Model::default();
        m.f_variant = self.model.f_variant;
        m.forcing = self.model.forcing;
        m.obs_locations = self.model.obs_locations.clone();
        m.sigma2 = self.model.sigma2;
        m.prior = self.model.prior.clone();
        m.k = self.discretization.k;
        m.max_level = self.discretization.max_level;
        m.quad_points = self.discretization.quad_points;
        m.solver = self.discretization.solver;
        m.zeta = self.discretization.zeta;
        m
    }
}
