//! Scenario configuration, read from TOML.
//!
//! Every section and key is optional; missing keys take the defaults below.
//!
//! ```toml
//! [unicycle]
//! start = [0.0, -20.0, 1.5707963267948966]
//! target = [0.0, 20.0]
//!
//! [sim]
//! T = 0.05
//!
//! [sup]
//! samples = 8192
//! ```

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sup::SupConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnicycleConfig {
    pub start: [f64; 3],
    pub target: [f64; 2],
    pub obstacle: [f64; 2],
    pub rho: f64,
    pub sigma: f64,
    pub k_v: f64,
    pub k_omega: f64,
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
    /// Absolute finite-difference step of Lipschitz estimates.
    pub lipschitz_step: f64,
    pub duration: f64,
    pub goal_tolerance: f64,
}

impl Default for UnicycleConfig {
    fn default() -> Self {
        Self {
            start: [0.0, -20.0, PI / 2.0],
            target: [0.0, 20.0],
            obstacle: [0.0, 0.0],
            rho: 10.0,
            sigma: 1.0,
            k_v: 0.15,
            k_omega: 1.0,
            domain_lo: vec![-25.0, -25.0, -PI],
            domain_hi: vec![25.0, 25.0, PI],
            lipschitz_step: 2.7e-3,
            duration: 60.0,
            goal_tolerance: 0.5,
        }
    }
}

/// Two obstacles leaving a narrow gap between their `ρ`-discs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorConfig {
    pub centers: Vec<[f64; 2]>,
    pub rho: f64,
    pub sigma: f64,
    pub start: [f64; 3],
    pub target: [f64; 2],
    pub duration: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        Self {
            centers: vec![[-10.15, 0.0], [10.15, 0.0]],
            rho: 10.0,
            sigma: 1.0,
            start: [0.0, -20.0, PI / 2.0],
            target: [0.0, 20.0],
            duration: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpacecraftConfig {
    pub avoid: [f64; 3],
    pub theta: f64,
    pub mu: f64,
    pub u_bound: f64,
    pub omega_max: f64,
    pub start_p: [f64; 3],
    pub start_omega: [f64; 3],
    pub target_p: [f64; 3],
    pub k_p: f64,
    pub k_d: f64,
    pub lipschitz_step: f64,
    pub duration: f64,
    pub goal_tolerance_deg: f64,
}

impl Default for SpacecraftConfig {
    fn default() -> Self {
        let (s, c) = (PI / 3.0).sin_cos();
        Self {
            avoid: [1.0, 0.0, 0.0],
            theta: PI / 5.0,
            mu: 100.0,
            u_bound: 0.01,
            omega_max: 0.2,
            start_p: [c, -s, 0.1],
            start_omega: [0.0; 3],
            target_p: [c, s, 0.1],
            k_p: 0.02,
            k_d: 0.2,
            lipschitz_step: 1e-4,
            duration: 150.0,
            goal_tolerance_deg: 2.0,
        }
    }
}

/// Closed-loop simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub substeps: usize,
    /// `γ` of variant 3.
    pub gamma: f64,
    /// Slope of the linear `α` of variants 0-2.
    pub alpha_slope: f64,
    /// Sample budget of each online (per-step) local supremum.
    pub online_samples: usize,
    /// Refinement starts of each online supremum.
    pub online_top_k: usize,
    /// Coordinate-ascent rounds of each online supremum.
    pub online_refine_rounds: usize,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            horizon: 0.1,
            substeps: 50,
            gamma: 1.0,
            alpha_slope: 1.0,
            online_samples: 512,
            online_top_k: 4,
            online_refine_rounds: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub unicycle: UnicycleConfig,
    pub corridor: CorridorConfig,
    pub spacecraft: SpacecraftConfig,
    pub sim: SimSection,
    pub sup: SupConfig,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sup settings for the per-step local suprema of simulations.
    pub fn online_sup(&self) -> SupConfig {
        let mut sup = self.sup.clone().with_samples(self.sim.online_samples);
        sup.top_k = self.sim.online_top_k;
        sup.refine_rounds = self.sim.online_refine_rounds;
        sup
    }

    pub fn validate(&self) -> Result<()> {
        self.sup.validate()?;
        let sim = &self.sim;
        if !(sim.horizon > 0.0) {
            return Err(Error::Config(format!(
                "sim.T must be positive, got {}",
                sim.horizon
            )));
        }
        if sim.substeps < 10 {
            return Err(Error::Config(format!(
                "sim.substeps must be at least 10, got {}",
                sim.substeps
            )));
        }
        if !(sim.gamma > 0.0 && sim.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "sim.gamma must lie in (0, 1], got {}",
                sim.gamma
            )));
        }
        if !(sim.alpha_slope > 0.0) || sim.online_samples == 0 {
            return Err(Error::Config(
                "sim.alpha_slope and sim.online_samples must be positive".into(),
            ));
        }
        for (name, v) in [
            ("unicycle.lipschitz_step", self.unicycle.lipschitz_step),
            ("spacecraft.lipschitz_step", self.spacecraft.lipschitz_step),
            ("unicycle.duration", self.unicycle.duration),
            ("corridor.duration", self.corridor.duration),
            ("spacecraft.duration", self.spacecraft.duration),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(
            ScenarioConfig::from_toml("").unwrap(),
            ScenarioConfig::default()
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ScenarioConfig::default();
        assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_rejections() {
        let cfg = ScenarioConfig::from_toml("[sim]\nT = 0.05\n[sup]\nsamples = 100\n").unwrap();
        assert_eq!(cfg.sim.horizon, 0.05);
        assert_eq!(cfg.sup.samples, 100);
        assert!(ScenarioConfig::from_toml("[sim]\nbogus = 1\n").is_err());
        assert!(ScenarioConfig::from_toml("[sim]\nsubsteps = 5\n").is_err());
        assert!(ScenarioConfig::from_toml("[sim]\ngamma = 2.0\n").is_err());
    }
}
