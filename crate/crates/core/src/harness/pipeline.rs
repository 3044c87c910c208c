//! Run directory layout and load-or-build access to every artifact.
//!
//! ```text
//! {out_dir}/seed-{seed}/
//!   config.toml            effective configuration
//!   data/                  train.csv test.csv bpr_train.csv promoted.json
//!   checkpoints/           mf.bin bpr.bin tree.bin  agent/{tree,policies,sru}.bin
//!   logs/                  train_steps.csv train_episodes.csv baselines.csv rq1.csv ...
//!   metrics.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use super::config::Config;
use crate::action_tree::ClusterTree;
use crate::agent::{Agent, UserFilter};
use crate::dataset::{
    build_promoted_set, k_core_filter, load_ratings, read_table_csv, split_train_test, write_table_csv, CacheHeader,
    PromotedSet, RatingsTable,
};
use crate::environment::Environment;
use crate::factorization::{rmse, train_bpr, train_mf, BprModel, EmbeddingMatrix};
use crate::rng::stream;
use crate::state_tracker::RewardEncoding;
use crate::{Error, Result};

/// Split tables and the promoted set.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Training ratings as loaded (rating model input, baseline statistics).
    pub train: RatingsTable,
    pub test: RatingsTable,
    /// Training ratings with promoted items thinned out (ranker input).
    pub thinned: RatingsTable,
    pub promoted: PromotedSet,
}

pub struct Pipeline {
    pub cfg: Config,
    pub dir: PathBuf,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

impl Pipeline {
    /// Create the run directory and write the effective config. Cached
    /// artifacts built under a different config are discarded.
    pub fn open(cfg: Config) -> Result<Self> {
        let dir = cfg.run_dir();
        mkdir(&dir)?;
        let snapshot = dir.join("config.toml");
        let text = cfg.to_toml();
        if let Ok(old) = fs::read_to_string(&snapshot) {
            if old != text {
                log::warn!("config changed since the last run in {}; rebuilding artifacts", dir.display());
                for sub in ["data", "checkpoints", "logs"] {
                    let p = dir.join(sub);
                    if p.exists() {
                        fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
                let m = dir.join("metrics.json");
                if m.exists() {
                    fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
                }
            }
        }
        fs::write(&snapshot, text).map_err(|e| Error::io(&snapshot, e))?;
        for sub in ["data", "checkpoints", "logs"] {
            mkdir(&dir.join(sub))?;
        }
        Ok(Pipeline { cfg, dir })
    }

    pub fn data_path(&self, name: &str) -> PathBuf {
        self.dir.join("data").join(name)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.dir.join("logs").join(name)
    }

    pub fn prepared(&self) -> Result<Prepared> {
        let paths = ["train.csv", "test.csv", "bpr_train.csv", "promoted.json"].map(|n| self.data_path(n));
        if paths.iter().all(|p| p.exists()) {
            let (train, _) = read_table_csv(&paths[0])?;
            let (test, _) = read_table_csv(&paths[1])?;
            let (thinned, _) = read_table_csv(&paths[2])?;
            let text = fs::read_to_string(&paths[3]).map_err(|e| Error::io(&paths[3], e))?;
            let promoted: PromotedSet = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
                path: paths[3].clone(),
                reason: e.to_string(),
            })?;
            return Ok(Prepared {
                train,
                test,
                thinned,
                promoted,
            });
        }
        let d = &self.cfg.data;
        let mut table = load_ratings(&d.path, d.format)?;
        if d.min_user > 0 || d.min_item > 0 {
            table = k_core_filter(&table, d.min_user, d.min_item)?;
        }
        let split_seed = self.cfg.stream_seed(stream::SPLIT);
        let (train, test) = split_train_test(&table, d.test_fraction, split_seed)?;
        let promo_seed = self.cfg.stream_seed(stream::PROMOTED);
        let (promoted, thinned) = build_promoted_set(&train, d.top_fraction, d.retained_fraction, promo_seed)?;
        let header = |seed| CacheHeader {
            num_users: table.num_users(),
            num_items: table.num_items(),
            seed,
            fractions: vec![
                ("test_fraction".into(), d.test_fraction),
                ("top_fraction".into(), d.top_fraction),
                ("retained_fraction".into(), d.retained_fraction),
            ],
        };
        write_table_csv(&paths[0], &train, &header(split_seed))?;
        write_table_csv(&paths[1], &test, &header(split_seed))?;
        write_table_csv(&paths[2], &thinned, &header(promo_seed))?;
        let json = serde_json::to_string_pretty(&promoted).expect("promoted set serializes");
        fs::write(&paths[3], json).map_err(|e| Error::io(&paths[3], e))?;
        log::info!(
            "prepared {} users, {} items: {} train, {} test, {} ranker rows, {} promoted",
            table.num_users(),
            table.num_items(),
            train.len(),
            test.len(),
            thinned.len(),
            promoted.len()
        );
        Ok(Prepared {
            train,
            test,
            thinned,
            promoted,
        })
    }

    /// Rating model trained on the full training split.
    pub fn mf(&self, prep: &Prepared) -> Result<EmbeddingMatrix> {
        let path = self.checkpoint_path("mf.bin");
        if path.exists() {
            return EmbeddingMatrix::load(&path);
        }
        let (emb, report) = train_mf(&prep.train, &self.cfg.mf_sgd())?;
        let test_rmse = rmse(&emb, &prep.test, true);
        log::info!(
            "mf: train rmse {:.4}, test rmse {test_rmse:.4}",
            report.train_rmse.last().copied().unwrap_or(f64::NAN)
        );
        emb.save(&path)?;
        self.record("mf", serde_json::json!({ "test_rmse": test_rmse, "train_rmse": report.train_rmse }))?;
        Ok(emb)
    }

    /// Ranker trained on the thinned table.
    pub fn bpr(&self, prep: &Prepared) -> Result<BprModel> {
        let path = self.checkpoint_path("bpr.bin");
        if path.exists() {
            return BprModel::load(&path);
        }
        let (model, report) = train_bpr(&prep.thinned, &self.cfg.bpr_sgd())?;
        log::info!("bpr: sampled train auc {:.4}", report.sampled_auc.last().copied().unwrap_or(f64::NAN));
        model.save(&path)?;
        self.record("bpr", serde_json::json!({ "sampled_auc": report.sampled_auc }))?;
        Ok(model)
    }

    pub fn tree(&self, mf: &EmbeddingMatrix) -> Result<ClusterTree> {
        let path = self.checkpoint_path("tree.bin");
        if path.exists() {
            return ClusterTree::load(&path);
        }
        let tree = ClusterTree::build(&mf.users, self.cfg.tree.depth, self.cfg.stream_seed(stream::TREE))?;
        tree.audit().map_err(|e| Error::invalid(format!("tree audit failed: {e}")))?;
        tree.save(&path)?;
        Ok(tree)
    }

    pub fn encoding(&self, num_users: usize) -> Result<RewardEncoding> {
        let s = &self.cfg.state;
        RewardEncoding::new(s.buckets, s.r_min, s.r_max.unwrap_or(num_users as f64))
    }

    pub fn environment(&self, prep: &Prepared, bpr: BprModel) -> Result<Environment> {
        Environment::new(
            prep.thinned.clone(),
            bpr,
            prep.promoted.clone(),
            self.cfg.env_config(),
            crate::agent::episode_seed(self.cfg.seed, 0),
        )
    }

    pub fn filter(&self, prep: &Prepared, mf: &EmbeddingMatrix) -> UserFilter {
        UserFilter::new(mf, &prep.promoted, self.cfg.agent.filter_threshold, self.cfg.agent.filter_mode)
    }

    pub fn agent_dir(&self) -> PathBuf {
        self.checkpoint_path("agent")
    }

    /// Untrained agent over the cached tree.
    pub fn fresh_agent(&self, prep: &Prepared, mf: &EmbeddingMatrix) -> Result<Agent> {
        let tree = self.tree(mf)?;
        let enc = self.encoding(prep.train.num_users())?;
        Ok(Agent::new(tree, mf.dim(), enc, self.cfg.seed))
    }

    /// Trained agent, if `train-agent` has completed in this run directory.
    pub fn trained_agent(&self, prep: &Prepared) -> Result<Option<Agent>> {
        let dir = self.agent_dir();
        if !dir.join("policies.bin").exists() {
            return Ok(None);
        }
        Agent::load(&dir, self.encoding(prep.train.num_users())?).map(Some)
    }

    pub fn metrics(&self) -> Result<Map<String, Value>> {
        let path = self.dir.join("metrics.json");
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
                path,
                reason: e.to_string(),
            }),
            Err(_) => Ok(Map::new()),
        }
    }

    /// Insert or replace one top-level section of `metrics.json`.
    pub fn record(&self, section: &str, value: Value) -> Result<()> {
        let mut m = self.metrics()?;
        m.insert(section.to_string(), value);
        let path = self.dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&Value::Object(m)).expect("json serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
