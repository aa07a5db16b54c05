//! Experiment configuration, read from TOML. Both dotted keys
//! (`grid.n = 40`) and `[grid]` sections are accepted.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::source::ExampleId;
use crate::cem::{SpaceConfig, WeightRule};
use crate::error::{Error, Result};
use crate::integrators::{NonlinearMode, Physics};
use crate::pod::ModeRule;
use crate::surrogate::TrainConfig;

pub const DEFAULT_SEED: u64 = 20240917;
pub const DEFAULT_ENERGY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub example: ExampleSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub spaces: SpacesSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub samples: SampleSection,
    #[serde(default)]
    pub pod: PodSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub nonlinear: NonlinearSection,
    #[serde(default)]
    pub learned: LearnedSection,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSection {
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Fine cells per side.
    pub n: usize,
    /// Coarse blocks per side.
    #[serde(rename = "Nc")]
    pub nc: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n: 40, nc: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    /// Field file to load; when absent the channel generator is used.
    pub path: Option<PathBuf>,
    pub background: f64,
    pub contrast: f64,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self {
            path: None,
            background: 1.0,
            contrast: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpacesSection {
    #[serde(rename = "L")]
    pub aux: usize,
    #[serde(rename = "J")]
    pub second: usize,
    /// Oversampling layers of coarse blocks.
    pub layers: usize,
    pub kappa_tilde: WeightRule,
}

impl Default for SpacesSection {
    fn default() -> Self {
        Self {
            aux: 3,
            second: 1,
            layers: 3,
            kappa_tilde: WeightRule::default(),
        }
    }
}

impl SpacesSection {
    pub fn space_config(&self) -> SpaceConfig {
        SpaceConfig {
            aux_per_element: self.aux,
            second_per_element: self.second,
            weight_rule: self.kappa_tilde,
        }
    }
}

/// Missing values fall back to the example's published `T` and `N`.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    #[serde(rename = "N")]
    pub steps: Option<usize>,
    #[serde(rename = "T")]
    pub t_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub train: usize,
    pub test: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { train: 200, test: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PodSection {
    pub l: Option<usize>,
    pub energy_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearKind {
    #[default]
    SemiImplicit,
    Picard,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearSection {
    pub mode: NonlinearKind,
    pub tol: f64,
    pub max_iter: usize,
    /// Fixed-point mode of the fine reference solver.
    pub reference: NonlinearKind,
}

impl Default for NonlinearSection {
    fn default() -> Self {
        Self {
            mode: NonlinearKind::SemiImplicit,
            tol: 1e-8,
            max_iter: 50,
            reference: NonlinearKind::Picard,
        }
    }
}

impl NonlinearSection {
    fn to_mode(&self, kind: NonlinearKind) -> NonlinearMode {
        match kind {
            NonlinearKind::SemiImplicit => NonlinearMode::SemiImplicit,
            NonlinearKind::Picard => NonlinearMode::Picard {
                tol: self.tol,
                max_iter: self.max_iter,
            },
        }
    }
}

/// Which `u1` history feeds the explicit update of the learned solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// All `u1` values come from the network.
    #[default]
    Predicted,
    /// `u1^n - u1^{n-1}` comes from the computed solution (diagnostic).
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnedSection {
    pub history: HistoryMode,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `field.path` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (cfg.field.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn example_id(&self) -> ExampleId {
        ExampleId::from_number(self.example.id).expect("validated")
    }

    pub fn steps(&self) -> usize {
        self.time.steps.unwrap_or(self.example_id().default_time().1)
    }

    pub fn t_final(&self) -> f64 {
        self.time.t_final.unwrap_or(self.example_id().default_time().0)
    }

    pub fn dt(&self) -> f64 {
        self.t_final() / self.steps() as f64
    }

    pub fn mode_rule(&self) -> ModeRule {
        match (self.pod.l, self.pod.energy_tol) {
            (Some(l), _) => ModeRule::Count(l),
            (None, tol) => ModeRule::Energy(tol.unwrap_or(DEFAULT_ENERGY_TOL)),
        }
    }

    /// Physics of the coarse runs.
    pub fn physics(&self) -> Physics {
        if self.example_id().is_nonlinear() {
            Physics::Nonlinear(self.nonlinear.to_mode(self.nonlinear.mode))
        } else {
            Physics::Linear
        }
    }

    /// Physics of the fine reference runs.
    pub fn reference_physics(&self) -> Physics {
        if self.example_id().is_nonlinear() {
            Physics::Nonlinear(self.nonlinear.to_mode(self.nonlinear.reference))
        } else {
            Physics::Linear
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        ExampleId::from_number(self.example.id)?;
        if self.grid.n == 0 || self.grid.nc == 0 || !self.grid.n.is_multiple_of(self.grid.nc) {
            return err(format!("grid.Nc = {} must divide grid.n = {}", self.grid.nc, self.grid.n));
        }
        if self.spaces.aux == 0 {
            return err("spaces.L must be positive".into());
        }
        if self.steps() < 2 {
            return err("time.N must be at least 2".into());
        }
        if !(self.t_final() > 0.0) {
            return err("time.T must be positive".into());
        }
        if self.samples.train == 0 || self.samples.test == 0 {
            return err("samples.train and samples.test must be positive".into());
        }
        if self.pod.l.is_some() && self.pod.energy_tol.is_some() {
            return err("set either pod.l or pod.energy_tol, not both".into());
        }
        if self.pod.l == Some(0) {
            return err("pod.l must be positive".into());
        }
        if !(self.field.background > 0.0 && self.field.contrast > 0.0) {
            return err("field.background and field.contrast must be positive".into());
        }
        if !(self.nonlinear.tol > 0.0) || self.nonlinear.max_iter == 0 {
            return err("nonlinear.tol and nonlinear.max_iter must be positive".into());
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
