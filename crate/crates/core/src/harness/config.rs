//! Experiment configuration (TOML). See `docs/config.md` for the grammar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt_init::InitConfig;
use crate::task_synth::TaskSpec;
use crate::trainer::{DiagnosticsConfig, SweepGrid, TrainConfig};
use crate::vit::{PromptMode, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Initializer {
    Xavier,
    SptRand,
    Vipamin,
    VipaminDeep,
}

impl Initializer {
    pub fn name(self) -> &'static str {
        match self {
            Initializer::Xavier => "xavier",
            Initializer::SptRand => "spt-rand",
            Initializer::Vipamin => "vipamin",
            Initializer::VipaminDeep => "vipamin-deep",
        }
    }

    /// Whether `k` and `lambda` mean anything for this initializer.
    pub fn uses_vipamin_params(self) -> bool {
        matches!(self, Initializer::Vipamin | Initializer::VipaminDeep)
    }
}

/// Everything needed to pretrain a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub task: TaskSpec,
    pub vit: VitConfig,
    pub train: TrainConfig,
}

/// Where the frozen backbone comes from: exactly one of the two.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSource {
    pub path: Option<PathBuf>,
    pub pretrain: Option<PretrainSpec>,
}

/// Prompt-initializer settings. `k` and `lambda` are only accepted for the
/// VIPAMIN initializers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub n_p: usize,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    #[serde(default = "default_init_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub include_key_bias: bool,
}

fn default_init_batch() -> usize {
    crate::prompt_init::DEFAULT_INIT_BATCH
}

impl InitSection {
    pub fn to_init_config(&self, seed: u64) -> InitConfig {
        InitConfig {
            n_p: self.n_p,
            k: self.k.unwrap_or(1),
            lambda: self.lambda.unwrap_or(0.0),
            batch_size: self.batch_size,
            seed,
            include_key_bias: self.include_key_bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub k_pool: Vec<usize>,
    pub lambda_pool: Vec<f64>,
    /// Falls back to `train.lr_pool`, then to `train.learning_rate`.
    #[serde(default)]
    pub lr_pool: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Extra tasks (columns of the heat map); `task` is always the first.
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Extra tasks; `task` is always the first.
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

/// One row of a comparison table. A value and a pool of the same
/// hyperparameter are mutually exclusive; with pools, the setting with the
/// best mean validation accuracy over the seeds is reported per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    /// Row label; defaults to the initializer name.
    pub label: Option<String>,
    pub initializer: Initializer,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub k_pool: Vec<usize>,
    #[serde(default)]
    pub lambda_pool: Vec<f64>,
    #[serde(default)]
    pub lr_pool: Vec<f64>,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.initializer.name().to_string())
    }

    /// The method's candidate settings. `k` and `lambda` are placeholders
    /// (1 and 0) for initializers without them.
    pub fn grid(&self, train: &TrainConfig) -> SweepGrid {
        let pool = |v: &[f64], one: Option<f64>, default: f64| {
            if v.is_empty() {
                vec![one.unwrap_or(default)]
            } else {
                v.to_vec()
            }
        };
        SweepGrid {
            k_pool: if self.k_pool.is_empty() {
                vec![self.k.unwrap_or(1)]
            } else {
                self.k_pool.clone()
            },
            lambda_pool: pool(&self.lambda_pool, self.lambda, 0.0),
            lr_pool: pool(&self.lr_pool, self.learning_rate, train.learning_rate),
        }
    }

    fn validate(&self) -> Result<()> {
        let label = self.label();
        let both = |name: &str| Err(Error::Config(format!("{label}: give `{name}` or `{name}_pool`, not both")));
        if self.k.is_some() && !self.k_pool.is_empty() {
            return both("k");
        }
        if self.lambda.is_some() && !self.lambda_pool.is_empty() {
            return both("lambda");
        }
        if self.learning_rate.is_some() && !self.lr_pool.is_empty() {
            return Err(Error::Config(format!("{label}: give `learning_rate` or `lr_pool`, not both")));
        }
        let has_k = self.k.is_some() || !self.k_pool.is_empty();
        let has_lambda = self.lambda.is_some() || !self.lambda_pool.is_empty();
        check_initializer_params(
            self.initializer,
            has_k.then_some(0),
            has_lambda.then_some(0.0),
        )
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_run_id() -> String {
    "run".into()
}

fn default_mode() -> PromptMode {
    PromptMode::Shallow
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: PromptMode,
    pub initializer: Option<Initializer>,
    #[serde(default)]
    pub backbone: BackboneSource,
    /// Downstream task.
    pub task: Option<TaskSpec>,
    /// Keep this many training samples per class.
    pub few_shot: Option<usize>,
    pub init: Option<InitSection>,
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Prompt archive for `train`; when absent, `train` initializes itself.
    pub prompts: Option<PathBuf>,
    pub sweep: Option<SweepSection>,
    pub compare: Option<CompareSection>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config; relative paths inside it resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.backbone.path.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.prompts.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn require_task(&self) -> Result<&TaskSpec> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::Config("a [task] section is required".into()))
    }

    pub fn require_init(&self) -> Result<&InitSection> {
        self.init
            .as_ref()
            .ok_or_else(|| Error::Config("an [init] section is required".into()))
    }

    pub fn require_train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("a [train] section is required".into()))
    }

    pub fn require_initializer(&self) -> Result<Initializer> {
        self.initializer
            .ok_or_else(|| Error::Config("`initializer` is required".into()))
    }

    /// Checks cross-field rules; referenced paths must exist.
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(Error::Config(format!("invalid run id {:?}", self.run_id)));
        }
        match (&self.backbone.path, &self.backbone.pretrain) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "backbone: give either `path` or `pretrain`, not both".into(),
                ))
            }
            (Some(p), None) if !p.exists() => {
                return Err(Error::Config(format!("backbone path {} does not exist", p.display())))
            }
            _ => {}
        }
        if let Some(p) = &self.prompts {
            if !p.exists() {
                return Err(Error::Config(format!("prompts path {} does not exist", p.display())));
            }
        }
        if let Some(t) = &self.task {
            t.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let (Some(i), Some(init)) = (self.initializer, &self.init) {
            // A sweep supplies k and lambda from its pools.
            if self.sweep.is_none() || !i.uses_vipamin_params() {
                check_initializer_params(i, init.k, init.lambda)?;
            }
            if i == Initializer::VipaminDeep && self.mode != PromptMode::Deep {
                return Err(Error::Config("vipamin-deep requires mode = \"deep\"".into()));
            }
        }
        if let Some(c) = &self.compare {
            if c.methods.is_empty() || c.seeds.is_empty() {
                return Err(Error::Config("compare needs methods and seeds".into()));
            }
            for m in &c.methods {
                m.validate()?;
                if m.initializer == Initializer::VipaminDeep && self.mode != PromptMode::Deep {
                    return Err(Error::Config("vipamin-deep requires mode = \"deep\"".into()));
                }
                if m.initializer == Initializer::Vipamin && self.mode == PromptMode::Deep {
                    return Err(Error::Config("use vipamin-deep in deep mode".into()));
                }
            }
        }
        if let Some(s) = &self.sweep {
            for t in &s.tasks {
                t.validate()?;
            }
        }
        Ok(())
    }

    /// The sweep grid with learning rates resolved.
    pub fn sweep_grid(&self) -> Result<SweepGrid> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("a [sweep] section is required".into()))?;
        let train = self.require_train()?;
        let lr_pool = if !s.lr_pool.is_empty() {
            s.lr_pool.clone()
        } else if !train.lr_pool.is_empty() {
            train.lr_pool.clone()
        } else {
            vec![train.learning_rate]
        };
        let grid = SweepGrid {
            k_pool: s.k_pool.clone(),
            lambda_pool: s.lambda_pool.clone(),
            lr_pool,
        };
        grid.validate()?;
        Ok(grid)
    }
}

fn check_initializer_params(i: Initializer, k: Option<usize>, lambda: Option<f64>) -> Result<()> {
    if i.uses_vipamin_params() {
        if k.is_none() || lambda.is_none() {
            return Err(Error::Config(format!("{} needs both k and lambda", i.name())));
        }
    } else if k.is_some() || lambda.is_some() {
        return Err(Error::Config(format!(
            "k / lambda are not parameters of the {} initializer",
            i.name()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
initializer = "vipamin"

[task]
kind = "shape-location"
num_classes = 4
samples_per_class = 8
patch_grid = [2, 2]
patch_dim = 4
noise_sigma = 0.1
seed = 0
subspace_dim = 2

[init]
n_p = 2
k = 1
lambda = 0.5

[train]
learning_rate = 0.1
epochs = 4
"#;

    fn with(extra: &str) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::from_toml_str(&format!("{BASE}\n{extra}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn compare(method: &str) -> Result<ExperimentConfig> {
        with(&format!("[compare]\nseeds = [0]\n\n[[compare.methods]]\n{method}\n"))
    }

    fn shipped(text: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml_str(text).unwrap();
        cfg.backbone.path = None;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn shipped_configs_are_valid() {
        shipped(include_str!("../../../../configs/pretrain.toml"));
        shipped(include_str!("../../../../configs/location.toml"));
        let sweep = shipped(include_str!("../../../../configs/sweep.toml"));
        assert_eq!(sweep.sweep_grid().unwrap().cells().len(), 6);
        let cmp = shipped(include_str!("../../../../configs/compare.toml"));
        let train = cmp.require_train().unwrap();
        let sizes: Vec<usize> = cmp
            .compare
            .as_ref()
            .unwrap()
            .methods
            .iter()
            .map(|m| m.grid(train).cells().len())
            .collect();
        assert_eq!(sizes, vec![1, 1, 6]);
    }

    #[test]
    fn base_config_validates() {
        with("").unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(with("colour = 1"), Err(Error::Config(_))));
        assert!(matches!(compare("initializer = \"xavier\"\nkk = 2"), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_is_not_a_xavier_parameter() {
        let text = BASE.replace("initializer = \"vipamin\"", "initializer = \"xavier\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(compare("initializer = \"xavier\"\nlambda = 0.5").is_err());
        assert!(compare("initializer = \"spt-rand\"\nk_pool = [2]").is_err());
        compare("initializer = \"xavier\"").unwrap();
    }

    #[test]
    fn vipamin_needs_k_and_lambda() {
        assert!(compare("initializer = \"vipamin\"\nk = 2").is_err());
        assert!(compare("initializer = \"vipamin\"\nlambda_pool = [0.0]").is_err());
        compare("initializer = \"vipamin\"\nk = 2\nlambda_pool = [0.0, 1.0]").unwrap();
    }

    #[test]
    fn value_and_pool_are_exclusive() {
        assert!(compare("initializer = \"vipamin\"\nk = 2\nk_pool = [2]\nlambda = 1.0").is_err());
        assert!(compare("initializer = \"vipamin\"\nk = 2\nlambda = 1.0\nlambda_pool = [1.0]").is_err());
        assert!(compare("initializer = \"xavier\"\nlearning_rate = 0.1\nlr_pool = [0.1]").is_err());
    }

    #[test]
    fn method_grid_expands_pools() {
        let cfg = compare(
            "initializer = \"vipamin\"\nk_pool = [1, 2]\nlambda = 0.5\nlr_pool = [0.1, 0.2, 0.3]",
        )
        .unwrap();
        let m = &cfg.compare.as_ref().unwrap().methods[0];
        let grid = m.grid(cfg.require_train().unwrap());
        assert_eq!(grid.k_pool, vec![1, 2]);
        assert_eq!(grid.lambda_pool, vec![0.5]);
        assert_eq!(grid.cells().len(), 6);

        let cfg = compare("initializer = \"xavier\"").unwrap();
        let grid = cfg.compare.as_ref().unwrap().methods[0].grid(cfg.require_train().unwrap());
        assert_eq!(grid.lr_pool, vec![0.1]);
        assert_eq!(grid.cells().len(), 1);
    }

    #[test]
    fn backbone_sources_are_exclusive() {
        let t = "[backbone]\npath = \"x.vpt\"\n\n[backbone.pretrain.task]\nkind = \"gaussian-clusters\"\nnum_classes = 2\nsamples_per_class = 4\npatch_grid = [2, 2]\npatch_dim = 4\nnoise_sigma = 0.1\nseed = 0\nsubspace_dim = 2\n\n[backbone.pretrain.vit]\ndepth = 1\nembed_dim = 4\nnum_heads = 1\nffn_hidden = 4\npatch_grid = [2, 2]\npatch_dim = 4\nnum_classes = 2\n\n[backbone.pretrain.train]\nlearning_rate = 0.1\nepochs = 1\n";
        assert!(matches!(with(t), Err(Error::Config(m)) if m.contains("not both")));
        assert!(matches!(with("[backbone]\npath = \"/nonexistent/b.vpt\""), Err(Error::Config(_))));
    }

    #[test]
    fn vipamin_deep_requires_deep_mode() {
        let text = BASE.replace("initializer = \"vipamin\"", "initializer = \"vipamin-deep\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!(cfg.validate().is_err());
        let deep = ExperimentConfig::from_toml_str(&format!("mode = \"deep\"\n{text}")).unwrap();
        deep.validate().unwrap();
    }

    #[test]
    fn run_ids_cannot_escape_the_output_dir() {
        for id in ["", "..", "a/b"] {
            let cfg = ExperimentConfig::from_toml_str(&format!("run_id = {id:?}\n{BASE}")).unwrap();
            assert!(cfg.validate().is_err(), "{id:?}");
        }
    }
}
