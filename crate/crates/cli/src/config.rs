//! Scenario configuration files.
//!
//! Configs are sectioned `key = value` documents (TOML syntax). Unknown
//! keys are rejected.
//!
//! | section        | key               | unit / meaning                                   | default        |
//! |----------------|-------------------|--------------------------------------------------|----------------|
//! | `[model]`      | `kind`            | `"buck-boost"`                                   | required       |
//! |                | `v_in`            | input voltage, V                                 | required       |
//! |                | `inductance`      | H                                                | required       |
//! |                | `capacitance`     | F                                                | required       |
//! |                | `resistance`      | load, ohm                                        | required       |
//! | `[gains]`      | `kp`, `ki`, `kd`  | PID-PBC gains (`kp`, `ki` > 0, `kd` >= 0)        | required       |
//! | `[simulation]` | `mode`            | `dt-midpoint`, `dt-euler` or `emulation`         | required       |
//! |                | `delta`           | sampling time, s                                 | required       |
//! |                | `t_final`         | horizon, s                                       | required       |
//! |                | `x0`              | initial `[flux Wb, charge C]`                    | `[0, 0]`       |
//! |                | `xi0`             | initial integrator state                         | `[0]`          |
//! |                | `start_at_reference` | start at the first reference's `(x*, xi*)`    | `false`        |
//! |                | `record_every`    | keep every n-th step                             | `1`            |
//! |                | `blow_up`         | divergence bound on `|x|`                        | `1e6`          |
//! |                | `clamp_u`         | clamp the duty ratio to `[0, 1]`                 | `false`        |
//! | `[schedule]`   | `times`           | reference switching times, s (first = 0)        | required       |
//! |                | `v_star`          | output-voltage references, V                     | required       |
//! | `[solver]`     | `newton_tol`      | absolute Newton tolerance (scaled by `1+|x|`)    | `1e-12`        |
//! |                | `newton_max_iter` | Newton iteration cap                             | `50`           |
//! |                | `substeps`        | reference-integrator substeps per interval       | `100`          |

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use pidpbc_core::discretize::StepperSettings;
use pidpbc_core::engine::{LoopSettings, Mode, Plant, Scenario, ScheduleEntry, Target};
use pidpbc_core::model::{self, BuckBoostParams};
use pidpbc_core::{controller, Gains};
use serde::Deserialize;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
    Invalid(String),
    Model(pidpbc_core::Error),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse(e) => write!(f, "malformed config: {e}"),
            ConfigError::Invalid(e) => write!(f, "invalid config: {e}"),
            ConfigError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub model: ModelSection,
    pub gains: GainsSection,
    pub simulation: SimulationSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub solver: SolverSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub v_in: f64,
    pub inductance: f64,
    pub capacitance: f64,
    pub resistance: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsSection {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub mode: String,
    pub delta: f64,
    pub t_final: f64,
    pub x0: Option<Vec<f64>>,
    pub xi0: Option<Vec<f64>>,
    #[serde(default)]
    pub start_at_reference: bool,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default = "default_blow_up")]
    pub blow_up: f64,
    #[serde(default)]
    pub clamp_u: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub times: Vec<f64>,
    pub v_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_max_iter")]
    pub newton_max_iter: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            newton_tol: default_tol(),
            newton_max_iter: default_max_iter(),
            substeps: default_substeps(),
        }
    }
}

fn one() -> usize {
    1
}
fn default_blow_up() -> f64 {
    1e6
}
fn default_tol() -> f64 {
    StepperSettings::<f64>::with_delta(1.0).newton_tol
}
fn default_max_iter() -> usize {
    StepperSettings::<f64>::with_delta(1.0).newton_max_iter
}
fn default_substeps() -> usize {
    StepperSettings::<f64>::with_delta(1.0).substeps
}

impl ConfigDocument {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        Self::parse(&text)
    }

    pub fn params(&self) -> Result<BuckBoostParams<f64>, ConfigError> {
        if self.model.kind != "buck-boost" {
            return Err(ConfigError::Invalid(format!(
                "model.kind: unsupported kind `{}`",
                self.model.kind
            )));
        }
        let m = &self.model;
        BuckBoostParams::new(m.v_in, m.inductance, m.capacitance, m.resistance)
            .map_err(ConfigError::Model)
    }

    pub fn gains(&self) -> Result<Gains, ConfigError> {
        Gains::scalar(self.gains.kp, self.gains.ki, self.gains.kd).map_err(ConfigError::Model)
    }

    /// Resolves the document into a scenario, optionally overriding the mode.
    pub fn scenario(&self, mode_override: Option<Mode>) -> Result<Scenario<f64>, ConfigError> {
        let params = self.params()?;
        let gains = self.gains()?;
        let sim = &self.simulation;
        let mode = match mode_override {
            Some(m) => m,
            None => sim
                .mode
                .parse::<Mode>()
                .map_err(|e| ConfigError::Invalid(format!("simulation.mode: {e}")))?,
        };
        let sched = &self.schedule;
        if sched.times.len() != sched.v_star.len() {
            return Err(ConfigError::Invalid(
                "schedule.times and schedule.v_star differ in length".into(),
            ));
        }
        let schedule: Vec<ScheduleEntry<f64>> = sched
            .times
            .iter()
            .zip(&sched.v_star)
            .map(|(&time, &v)| ScheduleEntry {
                time,
                target: Target::Voltage(v),
            })
            .collect();

        let (mut x0, mut xi0) = (DVector::zeros(2), DVector::zeros(1));
        if sim.start_at_reference {
            if sim.x0.is_some() || sim.xi0.is_some() {
                return Err(ConfigError::Invalid(
                    "simulation.start_at_reference excludes x0 and xi0".into(),
                ));
            }
            let v = *sched
                .v_star
                .first()
                .ok_or_else(|| ConfigError::Invalid("schedule is empty".into()))?;
            let eq = model::buck_boost_reference(&params, v).map_err(ConfigError::Model)?;
            xi0 = controller::xi_star(&gains, &eq).map_err(ConfigError::Model)?;
            x0 = eq.x_star;
        }
        if let Some(x) = &sim.x0 {
            x0 = vector(x, 2, "simulation.x0")?;
        }
        if let Some(xi) = &sim.xi0 {
            xi0 = vector(xi, 1, "simulation.xi0")?;
        }

        let solver = &self.solver;
        let stepper = StepperSettings {
            delta: sim.delta,
            newton_tol: solver.newton_tol,
            newton_max_iter: solver.newton_max_iter,
            substeps: solver.substeps,
        };
        let scenario = Scenario {
            plant: Plant::BuckBoost(params),
            gains,
            t_final: sim.t_final,
            x0,
            xi0,
            schedule,
            mode,
            settings: LoopSettings {
                stepper,
                blow_up: sim.blow_up,
                clamp_u: sim.clamp_u,
            },
            record_every: sim.record_every,
            assign_tol: model::default_assignability_tol(),
        };
        scenario.validate().map_err(ConfigError::Model)?;
        Ok(scenario)
    }
}

fn vector(v: &[f64], n: usize, key: &str) -> Result<DVector<f64>, ConfigError> {
    if v.len() != n {
        return Err(ConfigError::Invalid(format!(
            "{key}: expected {n} entries, got {}",
            v.len()
        )));
    }
    Ok(DVector::from_column_slice(v))
}

/// Content hash of a resolved scenario, embedded in trajectory files.
pub fn scenario_hash(s: &Scenario<f64>) -> String {
    let digest = Sha256::digest(format!("{s:?}").as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
[model]
kind = "buck-boost"
v_in = 24.0
inductance = 1e-3
capacitance = 330e-6
resistance = 60.0

[gains]
kp = 0.1
ki = 0.1
kd = 6e-4

[simulation]
mode = "dt-midpoint"
delta = 5e-3
t_final = 1.0

[schedule]
times = [0.0, 0.5]
v_star = [18.0, 35.0]
"#;

    #[test]
    fn parses_with_defaults() {
        let d = ConfigDocument::parse(DOC).unwrap();
        let s = d.scenario(None).unwrap();
        assert_eq!(s.mode, Mode::DtMidpoint);
        assert_eq!(s.schedule.len(), 2);
        assert_eq!(s.record_every, 1);
        assert_eq!(s.settings.stepper.substeps, 100);
        assert_eq!(s.x0, DVector::zeros(2));
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = DOC.replace("kd = 6e-4", "kd = 6e-4\nkf = 1.0");
        let e = ConfigDocument::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("kf"), "{e}");
    }

    #[test]
    fn missing_section_rejected() {
        let bad = DOC.replace("[gains]\nkp = 0.1\nki = 0.1\nkd = 6e-4\n", "");
        assert!(ConfigDocument::parse(&bad).is_err());
    }

    #[test]
    fn mode_override_changes_hash() {
        let d = ConfigDocument::parse(DOC).unwrap();
        let a = scenario_hash(&d.scenario(None).unwrap());
        let b = scenario_hash(&d.scenario(Some(Mode::DtEuler)).unwrap());
        assert_ne!(a, b);
        assert_eq!(
            a,
            scenario_hash(&d.scenario(Some(Mode::DtMidpoint)).unwrap())
        );
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn start_at_reference_sets_equilibrium() {
        let doc = DOC.replace("t_final = 1.0", "t_final = 1.0\nstart_at_reference = true");
        let s = ConfigDocument::parse(&doc).unwrap().scenario(None).unwrap();
        let eq = model::buck_boost_reference(&BuckBoostParams::nominal(), 18.0).unwrap();
        assert_eq!(s.x0, eq.x_star);
        assert!(s.xi0[0] < 0.0);
    }

    #[test]
    fn schedule_lengths_must_match() {
        let doc = DOC.replace("v_star = [18.0, 35.0]", "v_star = [18.0]");
        assert!(matches!(
            ConfigDocument::parse(&doc).unwrap().scenario(None),
            Err(ConfigError::Invalid(_))
        ));
    }
}
