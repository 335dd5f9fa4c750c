//! Run configuration: one TOML file covering data generation, the model,
//! training, tracking and evaluation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use motpred::compare::ObservationNoise;
use motpred::predictor::PredictorConfig;
use motpred::synth::{ScenarioKind, ScenarioParams};
use motpred::tracker::TrackerConfig;
use motpred::training::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Scenario directory read by `track` and written by `generate`.
    pub scenario: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Tracker output in MOT format.
    pub results: Option<PathBuf>,
    /// Metric report written by `eval` and `compare`.
    pub report: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
    /// Scenario directories to train on; a generated suite is used when empty.
    pub train_data: Vec<PathBuf>,
}

/// Synthetic suites used by `train` and `compare`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub kinds: Vec<ScenarioKind>,
    /// Scenarios per kind for training.
    pub train_count: usize,
    /// Scenarios per kind for comparison, drawn from a disjoint seed stream.
    pub eval_count: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ScenarioKind::Linear, ScenarioKind::Sinusoidal, ScenarioKind::Circular],
            train_count: 10,
            eval_count: 10,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub scenario: ScenarioParams,
    pub suite: SuiteConfig,
    pub model: PredictorConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub noise: ObservationNoise,
}

impl RunConfig {
    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => bail!("no seed: pass --seed or set `seed` in the config"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        if self.train.p != self.model.window {
            bail!(
                "train.p = {} differs from model.window = {}",
                self.train.p,
                self.model.window
            );
        }
        if self.suite.kinds.is_empty() {
            bail!("suite.kinds is empty");
        }
        Ok(())
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.scenario,
            &mut self.checkpoint,
            &mut self.results,
            &mut self.report,
            &mut self.loss_curve,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.train_data.iter_mut().for_each(fix);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert!(cfg.seed.is_none());
        assert!(cfg.seed().is_err());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.tracker, TrackerConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_override_fields() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            [scenario]
            kind = "circular"
            num_frames = 20
            [train]
            beta = 0.0
            epochs = 3
            [tracker]
            motion_model = "learned"
            max_age = 5
            [suite]
            kinds = ["sinusoidal"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.scenario.kind, ScenarioKind::Circular);
        assert_eq!(cfg.scenario.num_frames, 20);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(cfg.tracker.max_age, 5);
        assert_eq!(cfg.suite.kinds, vec![ScenarioKind::Sinusoidal]);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nbetta = 0.1").is_err());
        assert!(toml::from_str::<RunConfig>("[scenario]\nkind = \"zigzag\"").is_err());
        let cfg: RunConfig = toml::from_str("[train]\np = 4").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\ncheckpoint = \"m.ckpt\"\ntrain_data = [\"a\"]").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.checkpoint.unwrap(), dir.path().join("m.ckpt"));
        assert_eq!(cfg.paths.train_data, vec![dir.path().join("a")]);
    }
}
