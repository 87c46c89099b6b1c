//! Experiment configuration: a single TOML file fully determines a run
//! together with the master seed.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    EmptinessIdentity,
    LaplaceBridge,
    GreenAsymptotics,
    TubeCapacity,
    FppScaling,
    LocalUniqueness,
    WalkCapacityTail,
    LaplaceFunctional,
    CoarseFppEvent,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::EmptinessIdentity => "emptiness_identity",
            ExperimentKind::LaplaceBridge => "laplace_bridge",
            ExperimentKind::GreenAsymptotics => "green_asymptotics",
            ExperimentKind::TubeCapacity => "tube_capacity",
            ExperimentKind::FppScaling => "fpp_scaling",
            ExperimentKind::LocalUniqueness => "local_uniqueness",
            ExperimentKind::WalkCapacityTail => "walk_capacity_tail",
            ExperimentKind::LaplaceFunctional => "laplace_functional",
            ExperimentKind::CoarseFppEvent => "coarse_fpp_event",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub d: usize,
    #[serde(default = "default_distance")]
    pub distance: String,
    /// Weights 1/(2d) when true (unit total jump rate), unit weights otherwise.
    #[serde(default = "default_true")]
    pub normalized: bool,
}

fn default_distance() -> String {
    "euclidean".into()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialEntry {
    pub site: Vec<i32>,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub name: String,
    #[serde(default)]
    pub entries: Vec<PotentialEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Level grid.
    #[serde(default)]
    pub u: Vec<f64>,
    /// Radius / window-size grid (interpretation depends on the experiment).
    #[serde(default)]
    pub n: Vec<i64>,
    /// Renormalization scale R.
    #[serde(default = "default_one")]
    pub r: f64,
    /// Local-uniqueness enlargement factor.
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Tube width grid (walk_capacity_tail) or single width p.
    #[serde(default)]
    pub p: Vec<i64>,
    /// Number of tube balls P for constructive lower bounds.
    #[serde(default = "default_big_p")]
    pub big_p: i64,
    /// Cluster-capacity threshold for box_capacity_threshold weights.
    #[serde(default = "default_one")]
    pub kappa: f64,
    /// FPP event threshold fraction: the event is d_u(N) <= s * N.
    #[serde(default)]
    pub s: f64,
    /// Potentials for laplace_functional.
    #[serde(default)]
    pub potential: Vec<PotentialConfig>,
}

fn default_one() -> f64 {
    1.0
}

fn default_xi() -> f64 {
    2.0
}

fn default_big_p() -> i64 {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub replicas: u64,
    pub seed: u64,
    /// Explicit kill radius; 0 selects the per-experiment policy
    /// kill_factor * window radius.
    #[serde(default)]
    pub kill_radius: f64,
    #[serde(default = "default_kill_factor")]
    pub kill_factor: f64,
    /// Probe walks for Monte Carlo capacity estimates.
    #[serde(default = "default_cap_samples")]
    pub capacity_samples: u64,
    #[serde(default = "default_out")]
    pub out: String,
    /// Guard on the number of window sites an experiment may enumerate.
    #[serde(default = "default_max_window")]
    pub max_window_sites: u64,
}

fn default_kill_factor() -> f64 {
    2.5
}

fn default_cap_samples() -> u64 {
    100_000
}

fn default_out() -> String {
    "out".into()
}

fn default_max_window() -> u64 {
    2_000_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub lattice: LatticeConfig,
    pub model: ModelConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| format!("config parse error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.lattice.d < 3 || self.lattice.d > 5 {
            return Err("lattice.d must be in 3..=5 (transience required)".into());
        }
        if !matches!(self.lattice.distance.as_str(), "euclidean" | "graph") {
            return Err("lattice.distance must be 'euclidean' or 'graph'".into());
        }
        if self.run.replicas == 0 {
            return Err("run.replicas must be positive".into());
        }
        if self.run.kill_radius < 0.0 || self.run.kill_factor < 1.5 {
            return Err("run.kill_radius must be >= 0 and run.kill_factor >= 1.5".into());
        }
        if self.model.u.iter().any(|&u| u < 0.0) {
            return Err("model.u entries must be nonnegative".into());
        }
        if self.model.n.iter().any(|&n| n < 1) {
            return Err("model.n entries must be positive".into());
        }
        let needs_u = !matches!(self.kind, ExperimentKind::GreenAsymptotics);
        if needs_u && self.model.u.is_empty() {
            return Err("model.u grid must be nonempty".into());
        }
        match self.kind {
            ExperimentKind::EmptinessIdentity
            | ExperimentKind::FppScaling
            | ExperimentKind::LocalUniqueness
            | ExperimentKind::CoarseFppEvent => {
                if self.model.n.is_empty() {
                    return Err("model.n grid must be nonempty".into());
                }
            }
            ExperimentKind::LaplaceBridge | ExperimentKind::WalkCapacityTail => {
                if self.model.n.len() != 1 {
                    return Err("model.n must hold exactly one window radius".into());
                }
            }
            ExperimentKind::GreenAsymptotics => {
                if self.model.n.is_empty() {
                    return Err("model.n must list the probed distances".into());
                }
            }
            ExperimentKind::TubeCapacity => {
                if self.model.n.len() != 1 || self.model.p.len() != 1 {
                    return Err("tube_capacity needs one n and one p".into());
                }
            }
            ExperimentKind::LaplaceFunctional => {
                if self.model.potential.is_empty() {
                    return Err("laplace_functional needs at least one potential".into());
                }
                for pot in &self.model.potential {
                    if pot.entries.len() > 5 {
                        return Err(format!(
                            "potential '{}' exceeds the 5-site support limit",
                            pot.name
                        ));
                    }
                    for e in &pot.entries {
                        if e.site.len() != self.lattice.d {
                            return Err(format!(
                                "potential '{}' has a site of wrong dimension",
                                pot.name
                            ));
                        }
                    }
                }
            }
        }
        if self.kind == ExperimentKind::WalkCapacityTail {
            if self.model.p.len() < 1 {
                return Err("walk_capacity_tail needs a p grid".into());
            }
            let n = self.model.n[0];
            if self.model.p.iter().any(|&p| p < 1 || p > n) {
                return Err("walk_capacity_tail needs 1 <= p <= n".into());
            }
        }
        if self.kind == ExperimentKind::LocalUniqueness && self.model.xi <= 1.0 {
            return Err("model.xi must exceed 1".into());
        }
        Ok(())
    }
}
