//! The run configuration file: every section has defaults, and unknown keys are
//! reported all at once rather than one per attempt.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{GeneratorConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::experiment::{Algorithm, SweepConfig};
use crate::io::read_file;
use crate::losses::LossWeights;
use crate::selection::{ScheduleConfig, SelectionConfig};
use crate::student::StudentSettings;
use crate::teacher::OracleTeacherConfig;
use crate::theory::TheoryConfig;
use crate::trainer::{OptimizerKind, TrainConfig};

/// Paths whose keys are user-chosen, so they are not checked against the defaults.
const FREE_FORM: [&str; 3] = [
    "sweep.space",
    "theory.mixture.regime",
    "teacher.class_names",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// Held-out domains; empty means all of them.
    pub held_out: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithms: Algorithm::MAIN.to_vec(),
            seeds: (0..5).collect(),
            held_out: Vec::new(),
        }
    }
}

/// The `train` section: everything in [`TrainConfig`] except selection and schedule,
/// which have their own top-level sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub loss: LossWeights,
    pub ma_start_frac: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            optimizer: t.optimizer,
            lr: t.lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            loss: t.loss,
            ma_start_frac: t.ma_start_frac,
            eval_every: t.eval_every,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub split: SplitSpec,
    pub teacher: OracleTeacherConfig,
    pub student: StudentSettings,
    pub train: TrainSection,
    pub selection: SelectionConfig,
    pub schedule: ScheduleConfig,
    pub experiment: ExperimentConfig,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
    pub workers: usize,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: GeneratorConfig::default(),
            split: SplitSpec::default(),
            teacher: OracleTeacherConfig::default(),
            student: StudentSettings::default(),
            train: TrainSection::default(),
            selection: SelectionConfig::default(),
            schedule: ScheduleConfig::default(),
            experiment: ExperimentConfig::default(),
            sweep: SweepConfig::default(),
            theory: TheoryConfig::default(),
            workers: 1,
            output_dir: "out".into(),
        }
    }
}

fn unknown_keys(user: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return;
    };
    for (k, v) in u {
        let p = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match r.get(k) {
            None => out.push(p),
            Some(rv) if !FREE_FORM.contains(&p.as_str()) => unknown_keys(v, rv, &p, out),
            Some(_) => {}
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut unknown = Vec::new();
        unknown_keys(
            &user,
            &serde_json::to_value(RunConfig::default())?,
            "",
            &mut unknown,
        );
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let cfg: RunConfig =
            serde_json::from_value(user).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// The full training configuration assembled from its three sections.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optimizer: t.optimizer,
            lr: t.lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            loss: t.loss.clone(),
            selection: self.selection.clone(),
            schedule: self.schedule.clone(),
            ma_start_frac: t.ma_start_frac,
            eval_every: t.eval_every,
            seed: t.seed,
        }
    }

    /// Writes a full training configuration back into the three sections.
    pub fn set_train_config(&mut self, c: &TrainConfig) {
        self.train = TrainSection {
            optimizer: c.optimizer,
            lr: c.lr,
            weight_decay: c.weight_decay,
            momentum: c.momentum,
            batch_size: c.batch_size,
            total_steps: c.total_steps,
            loss: c.loss.clone(),
            ma_start_frac: c.ma_start_frac,
            eval_every: c.eval_every,
            seed: c.seed,
        };
        self.selection = c.selection.clone();
        self.schedule = c.schedule.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::Config(
                "split.train_fraction must be in (0, 1)".into(),
            ));
        }
        if let Some(d) = self
            .experiment
            .held_out
            .iter()
            .find(|&&d| d >= self.data.domains)
        {
            return Err(Error::Config(format!(
                "held-out domain {d} not in 0..{}",
                self.data.domains
            )));
        }
        Ok(())
    }

    /// Points every seed in the file at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.split.split_seed = seed;
        self.teacher.anchor_seed = seed;
        self.student.init_seed = seed;
        self.train.seed = seed;
        self.sweep.sweep_seed = seed;
        self.theory.seed = seed;
    }

    pub fn held_out_domains(&self) -> Vec<usize> {
        if self.experiment.held_out.is_empty() {
            (0..self.data.domains).collect()
        } else {
            self.experiment.held_out.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train_config(), TrainConfig::default());
        let mut c = RunConfig::default();
        let t = TrainConfig {
            lr: 0.5,
            ..TrainConfig::default()
        };
        c.set_train_config(&t);
        assert_eq!(c.train_config(), t);
    }

    #[test]
    fn defaults_roundtrip() {
        let text = RunConfig::default().to_json().unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let text = r#"{"trian": {}, "train": {"lr": 0.01, "lr_decay": 1, "loss": {"tau": 2}},
                       "sweep": {"space": {"rho": {"choice": [0.2]}}}}"#;
        match RunConfig::from_json(text) {
            Err(Error::UnknownKeys(keys)) => {
                assert_eq!(keys, vec!["train.loss.tau", "train.lr_decay", "trian"]);
            }
            other => panic!("expected unknown keys, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"selection": {"rho": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"workers": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"selection": {}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"experiment": {"held_out": [7]}}"#).is_err());
        assert!(RunConfig::from_json("[1]").is_err());
    }
}
