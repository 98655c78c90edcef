use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{GenConfig, Stage2Config};
use crate::encoder::{HierarchyConfig, Stage1Weights};
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;
use crate::world::WorldSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub world: WorldSpec,
    pub subject: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    /// Load `train_s{id}.mrbd`/`test_s{id}.mrbd` from here instead of generating.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            subject: 0,
            n_train: 4096,
            n_test: 512,
            data_seed: 1,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Held-out evaluation period in steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 32,
            adam: AdamConfig::default(),
            eval_every: 128,
        }
    }
}

impl TrainConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config(format!("{what}: batch must be positive")));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite() && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("{what}: invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct Stage1Section {
    pub train: TrainConfig,
    pub weights: Stage1Weights,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Section {
    pub model: Stage2Config,
    pub train: TrainConfig,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            model: Stage2Config::default(),
            train: TrainConfig {
                steps: 8000,
                eval_every: 500,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    /// Subject whose data the routers are adapted to.
    pub subject: u64,
    pub fraction: f64,
    /// Share of the finetuning subset held out for checkpoint selection.
    pub holdout: f64,
    /// Start U from the source voxel whose fingerprint matches best.
    pub warm_start: bool,
    pub train: TrainConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            subject: 1,
            fraction: 0.25,
            holdout: 0.2,
            warm_start: true,
            train: TrainConfig {
                steps: 1000,
                adam: AdamConfig {
                    lr: 1e-4,
                    ..AdamConfig::default()
                },
                eval_every: 50,
                ..TrainConfig::default()
            },
        }
    }
}

pub const FRACTIONS: [f64; 5] = [0.025, 0.1, 0.25, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub ranks: Vec<usize>,
    pub n_baselines: usize,
    pub n_interp: usize,
    pub random_partitions: usize,
    pub ridge_lambda: f64,
    /// Held-out items used for sampling-based evaluation.
    pub sample_items: usize,
    /// Items traced for routing statistics.
    pub trace_items: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ranks: vec![1, 2, 4, 8, 16, 32],
            n_baselines: 16,
            n_interp: 16,
            random_partitions: 100,
            ridge_lambda: 1.0,
            sample_items: 256,
            trace_items: 64,
        }
    }
}

/// Everything a run depends on besides the code version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: HierarchyConfig,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub finetune: FinetuneSection,
    pub gen: GenConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: HierarchyConfig::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            finetune: FinetuneSection::default(),
            gen: GenConfig {
                guidance: 1.0,
                ..GenConfig::default()
            },
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.world.validate()?;
        self.model.validate(self.data.world.voxels)?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        self.stage1.train.validate("stage1")?;
        self.stage2.train.validate("stage2")?;
        self.finetune.train.validate("finetune")?;
        self.stage2.model.time.validate()?;
        let dz = &self.stage2.model.denoiser;
        if 2 * self.model.d_embed != dz.n_z * dz.d_z {
            return Err(Error::Config(format!(
                "latent {}×{} must hold both {}-wide targets",
                dz.n_z, dz.d_z, self.model.d_embed
            )));
        }
        if self.data.world.target != self.model.d_embed {
            return Err(Error::Config("world target width must equal model d_embed".into()));
        }
        let f = self.finetune.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("finetune fraction {f} outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&self.finetune.holdout) {
            return Err(Error::Config("finetune holdout must lie in [0, 1)".into()));
        }
        if let Some(&r) = self.eval.ranks.iter().find(|&&r| r > self.model.d_embed) {
            return Err(Error::Config(format!("bottleneck rank {r} exceeds D = {}", self.model.d_embed)));
        }
        if self.eval.n_baselines == 0 || self.eval.n_interp == 0 {
            return Err(Error::Config("attribution needs baselines and interpolation points".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        // partial configs fill in defaults
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 5, "stage1": {"train": {"steps": 10}}}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.stage1.train.steps, 10);
        assert_eq!(partial.stage1.train.batch, 32);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.eval.ranks = vec![64];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.finetune.fraction = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.data.world.groups = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
