//! Strict JSON scenario files.

use std::path::Path;

use serde::Deserialize;

use crate::expr::Expr;

/// Bumped whenever the scenario format changes incompatibly.
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Simulate,
    ItoCheck,
    Obstacle,
    Dual,
    Example53,
    DppCheck,
    Audit,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::ItoCheck => "ito-check",
            Self::Obstacle => "obstacle",
            Self::Dual => "dual",
            Self::Example53 => "example53",
            Self::DppCheck => "dpp-check",
            Self::Audit => "audit",
        }
    }

    pub fn needs_seed(self) -> bool {
        !matches!(self, Self::Obstacle | Self::Dual)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Must match the subcommand when present.
    pub kind: Option<Kind>,
    pub seed: Option<u64>,
    pub model: Option<ModelBlock>,
    pub initial: Option<InitialLaw>,
    pub policy: Option<PolicyBlock>,
    #[serde(default)]
    pub numerics: Numerics,
    pub obstacle: Option<ObstacleBlock>,
    pub dual: Option<DualBlock>,
    pub example53: Option<Example53Block>,
    pub ito: Option<ItoBlock>,
    pub output: Option<OutputBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Example53,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    GaussianAlive,
    CosineAlive,
    Survival,
}

/// Coefficients and rewards. Expressions may read `t, x, m1, s1, v0`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub preset: Option<ModelPreset>,
    pub drift: Option<Expr>,
    pub sigma: Option<Expr>,
    /// `f` in `F(t, m) = int f m(dx, 1)`.
    pub running: Option<Expr>,
    /// `g` in `g(m) = int g m(dx, di)` at the horizon.
    pub terminal: Option<Expr>,
    /// Test function reported as `v0`.
    pub statistic: Option<Statistic>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalQuantiles {
    pub mean: f64,
    pub sd: f64,
    pub atoms: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Point mass of surviving particles.
    Dirac(f64),
    /// Equally weighted surviving atoms.
    Atoms(Vec<f64>),
    /// Equally weighted atoms at the mid-quantiles of a normal law.
    Normal(NormalQuantiles),
    /// Ensemble CSV, relative to the scenario file.
    Csv(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    /// Survive with probability `p`.
    Constant(f64),
    Threshold {
        at: f64,
        keep_below: bool,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledStop {
    pub time: f64,
    pub rule: RuleSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyBlock {
    Never {},
    StopAll {
        time: f64,
    },
    Barrier {
        t0: f64,
        c: f64,
    },
    Scheduled {
        stops: Vec<ScheduledStop>,
    },
    /// Continue while the expression is positive.
    Region {
        continue_while: Expr,
    },
    /// Survive each step with the given probability.
    Randomized {
        survive: Expr,
    },
    Composite {
        parts: Vec<PolicyBlock>,
    },
    Example53Optimal {},
    /// The optimal schedule with barrier level `c` on `(1, 2)`.
    Example53Barrier {
        c: f64,
    },
    Example53Pure {},
    /// Pure region policy of the solved obstacle problem.
    ObstacleRegion {},
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    pub particles: Option<usize>,
    pub steps: Option<usize>,
    pub horizon: Option<f64>,
    pub groups: Option<usize>,
    pub nx: Option<usize>,
    pub nt: Option<usize>,
    pub tol: Option<f64>,
    pub paths: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleBlock {
    pub payoff: Option<Expr>,
    /// Two-column `x,phi` CSV, relative to the scenario file.
    pub payoff_csv: Option<String>,
    pub domain: Option<[f64; 2]>,
    /// Intermediate times for `dpp-check`.
    pub s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualPreset {
    MeanVariance,
    MeanVarianceSquaredMean,
}

/// `E[psi(X)] + phi(E[h(X)])`; `psi`, `h` and `phi` read their argument as
/// `x`, and so does the optional closed-form `conjugate`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualBlock {
    pub preset: Option<DualPreset>,
    pub psi: Option<Expr>,
    pub h: Option<Expr>,
    pub phi: Option<Expr>,
    pub conjugate: Option<Expr>,
    /// `[lo, hi, n]`.
    pub alpha_range: Option<(f64, f64, usize)>,
    pub domain: Option<[f64; 2]>,
    /// Simulate the dual policy and report its objective.
    #[serde(default)]
    pub simulate_policy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Optimal,
    Pure,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example53Block {
    #[serde(default)]
    pub variant: Variant,
    /// Points of `a_curve.csv` on `[0, 2]`.
    pub curve_points: Option<usize>,
    pub audit_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoBlock {
    /// `[steps, particles]` per refinement level.
    pub levels: Option<Vec<(usize, usize)>>,
    pub seeds: Option<Vec<u64>>,
    pub residual_tol: Option<f64>,
    pub min_ratio: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ScenarioError> {
        let bytes = std::fs::read(path).map_err(|source| ScenarioError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        Ok((Self::from_json(&text)?, bytes))
    }
}
