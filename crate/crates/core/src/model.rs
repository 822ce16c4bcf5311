//! Problem configuration and the forward-model abstraction.
//!
//! A [`Model`] bundles everything that defines one inference problem: the
//! prior over kernel parameters, the constitutive profile variant, the
//! forcing, the observation setup, and discretization controls. Samplers
//! talk to it through the [`ForwardModel`] trait so that tests can swap in
//! stubs with known behavior.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::{FVariant, KernelParams, PriorSpec};

/// Linear solver used for the discrete system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Banded Cholesky on the negated stiffness matrix.
    Banded,
    /// Dense LU, kept as a cross-check and for cost-scaling experiments.
    Dense,
}

/// Full specification of one forward/inverse problem instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Model {
    pub prior: PriorSpec,
    pub f_variant: FVariant,
    /// Constant volumetric forcing on the interior domain.
    pub forcing: f64,
    /// Locations whose point values form the observation operator.
    pub obs_locations: Vec<f64>,
    /// Variance of the iid Gaussian observation noise.
    pub sigma2: f64,
    /// Coarsest resolution exponent: level l uses spacing 2^-(k + l).
    pub k: u32,
    /// Finest level the hierarchy may use.
    pub max_level: usize,
    /// Cost-model exponent: one solve at spacing h is charged h^-zeta.
    pub zeta: f64,
    pub solver: SolverKind,
    /// Nodes per panel in the singular quadrature (and its weighted rules).
    pub quad_points: usize,
}

impl Default for Model {
    fn default() -> Self {
        Model {
            prior: PriorSpec::default(),
            f_variant: FVariant::Literal,
            forcing: 5.0,
            obs_locations: vec![0.25, 0.75],
            sigma2: 0.01,
            k: 3,
            max_level: 8,
            zeta: 3.0,
            solver: SolverKind::Banded,
            quad_points: 8,
        }
    }
}

impl Model {
    /// Mesh spacing at a hierarchy level.
    pub fn spacing(&self, level: usize) -> f64 {
        0.5f64.powi(self.k as i32 + level as i32)
    }

    /// Modeled cost h^-zeta of one solve at a level.
    pub fn level_cost(&self, level: usize) -> f64 {
        self.spacing(level).powf(-self.zeta)
    }
}

/// Output of one forward solve: the quantity of interest, the values at the
/// observation locations, and the modeled cost that was spent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardOutput {
    pub qoi: f64,
    pub obs: Vec<f64>,
    pub cost: f64,
}

/// Interface the Monte Carlo layers use to run the forward map.
pub trait ForwardModel: Sync {
    fn prior(&self) -> &PriorSpec;

    /// Solves the forward problem at one level for one parameter draw.
    fn forward(&self, params: &KernelParams, level: usize) -> Result<ForwardOutput>;

    /// Mesh spacing h of a level; bias and sample allocation are driven by it.
    fn spacing(&self, level: usize) -> f64;

    /// Modeled cost of one solve at a level.
    fn solve_cost(&self, level: usize) -> f64;

    fn max_level(&self) -> usize;
}

impl ForwardModel for Model {
    fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    fn forward(&self, params: &KernelParams, level: usize) -> Result<ForwardOutput> {
        crate::fem::forward(self, params, level)
    }

    fn spacing(&self, level: usize) -> f64 {
        Model::spacing(self, level)
    }

    fn solve_cost(&self, level: usize) -> f64 {
        self.level_cost(level)
    }

    fn max_level(&self) -> usize {
        self.max_level
    }
}
