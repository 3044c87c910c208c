//! Experiment configuration: one TOML file, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{FilterMode, TrainConfig};
use crate::dataset::RatingFormat;
use crate::environment::EnvConfig;
use crate::factorization::{FineTune, SgdConfig};
use crate::rng::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub mf: MfConfig,
    pub bpr: BprConfig,
    pub env: EnvSection,
    pub state: StateConfig,
    pub tree: TreeConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    pub rq1: Rq1Config,
    pub rq3: Rq3Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub format: RatingFormat,
    /// k-core thresholds; 0 disables the filter.
    pub min_user: usize,
    pub min_item: usize,
    pub test_fraction: f64,
    pub top_fraction: f64,
    pub retained_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BprConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub fine_tune_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub k: usize,
    pub candidate_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateConfig {
    pub buckets: usize,
    pub r_min: f64,
    /// Upper end of the reward code; unset means the number of users.
    pub r_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Adopters per episode; unset means `⌈0.05·|U|⌉`.
    pub n: Option<usize>,
    pub gamma: f64,
    pub lr: f64,
    pub episodes: usize,
    pub filter_threshold: f64,
    pub filter_mode: FilterMode,
    pub max_retries: usize,
    pub baseline: bool,
    pub train_sru: bool,
    /// Episodes used to score the trained policy and each baseline.
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub relevance_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq1Config {
    pub counts: Vec<usize>,
    /// Repetitions of the fixed-count experiment.
    pub repeat_count: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq3Config {
    pub depths: Vec<usize>,
    pub trials: usize,
    /// Training episodes per depth for the reward column; 0 skips training.
    pub train_episodes: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            mf: MfConfig::default(),
            bpr: BprConfig::default(),
            env: EnvSection::default(),
            state: StateConfig::default(),
            tree: TreeConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            rq1: Rq1Config::default(),
            rq3: Rq3Config::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data/ml-100k/u.data"),
            format: RatingFormat::Tab100k,
            min_user: 0,
            min_item: 0,
            test_fraction: 0.2,
            top_fraction: 0.01,
            retained_fraction: 0.05,
        }
    }
}

impl Default for MfConfig {
    fn default() -> Self {
        let d = SgdConfig::mf_default(0);
        MfConfig {
            dim: d.dim,
            epochs: d.epochs,
            lr: d.lr,
            reg: d.reg,
        }
    }
}

impl Default for BprConfig {
    fn default() -> Self {
        let d = SgdConfig::bpr_default(0);
        let f = FineTune::default();
        BprConfig {
            dim: d.dim,
            epochs: d.epochs,
            lr: d.lr,
            reg: d.reg,
            fine_tune_steps: f.steps,
            fine_tune_lr: f.lr,
            fine_tune_reg: f.reg,
        }
    }
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = EnvConfig::default();
        EnvSection {
            k: d.k,
            candidate_fraction: d.candidate_fraction,
        }
    }
}

impl Default for StateConfig {
    fn default() -> Self {
        StateConfig {
            buckets: 10,
            r_min: 0.0,
            r_max: None,
        }
    }
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { depth: 2 }
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        let d = TrainConfig::for_users(1, 0);
        AgentConfig {
            n: None,
            gamma: d.gamma,
            lr: d.lr,
            episodes: d.episodes,
            filter_threshold: d.filter_threshold,
            filter_mode: d.filter_mode,
            max_retries: d.max_retries,
            baseline: d.baseline,
            train_sru: d.train_sru,
            eval_episodes: 20,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            relevance_threshold: 4.0,
        }
    }
}

impl Default for Rq1Config {
    fn default() -> Self {
        Rq1Config {
            counts: (0..=900).step_by(50).collect(),
            repeat_count: 300,
            repeats: 10,
        }
    }
}

impl Default for Rq3Config {
    fn default() -> Self {
        Rq3Config {
            depths: vec![1, 2, 3, 4],
            trials: 10_000,
            train_episodes: 20,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Effective configuration with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64, lo_open: bool| -> Result<()> {
            let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is out of range")))
            }
        };
        frac("data.test_fraction", self.data.test_fraction, false)?;
        frac("data.top_fraction", self.data.top_fraction, true)?;
        frac("data.retained_fraction", self.data.retained_fraction, true)?;
        if !(0.0..=1.0).contains(&self.env.candidate_fraction) {
            return Err(Error::Config("env.candidate_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.agent.gamma) {
            return Err(Error::Config("agent.gamma must lie in [0, 1]".into()));
        }
        for (name, v) in [("mf.dim", self.mf.dim), ("bpr.dim", self.bpr.dim), ("env.k", self.env.k), ("tree.depth", self.tree.depth), ("state.buckets", self.state.buckets), ("eval.k", self.eval.k)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.agent.n == Some(0) {
            return Err(Error::Config("agent.n must be >= 1".into()));
        }
        if self.rq3.depths.iter().any(|&d| !(1..=4).contains(&d)) {
            return Err(Error::Config("rq3.depths must lie in 1..=4".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("seed-{}", self.seed))
    }

    /// Sub-seed of the run seed for one named stream.
    pub fn stream_seed(&self, label: u64) -> u64 {
        rng::derive(self.seed, label)
    }

    pub fn mf_sgd(&self) -> SgdConfig {
        SgdConfig {
            dim: self.mf.dim,
            epochs: self.mf.epochs,
            lr: self.mf.lr,
            reg: self.mf.reg,
            seed: self.stream_seed(stream::MF),
        }
    }

    pub fn bpr_sgd(&self) -> SgdConfig {
        SgdConfig {
            dim: self.bpr.dim,
            epochs: self.bpr.epochs,
            lr: self.bpr.lr,
            reg: self.bpr.reg,
            seed: self.stream_seed(stream::BPR),
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            k: self.env.k,
            candidate_fraction: self.env.candidate_fraction,
            fine_tune: FineTune {
                steps: self.bpr.fine_tune_steps,
                lr: self.bpr.fine_tune_lr,
                reg: self.bpr.fine_tune_reg,
            },
        }
    }

    pub fn train_config(&self, num_users: usize) -> TrainConfig {
        let a = &self.agent;
        TrainConfig {
            n: a.n.unwrap_or_else(|| crate::agent::default_episode_length(num_users)),
            gamma: a.gamma,
            lr: a.lr,
            episodes: a.episodes,
            filter_threshold: a.filter_threshold,
            filter_mode: a.filter_mode,
            max_retries: a.max_retries,
            baseline: a.baseline,
            train_sru: a.train_sru,
            seed: self.seed,
        }
    }
}
