//! Static adopter-selection policies ranked by original-table statistics.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::agent::{episode_seed, UserFilter};
use crate::dataset::{RatingsTable, UserId};
use crate::environment::Environment;
use crate::factorization::EmbeddingMatrix;
use crate::rng::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Activity,
    Inactivity,
    HighRating,
    LowRating,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Random,
        BaselineKind::Activity,
        BaselineKind::Inactivity,
        BaselineKind::HighRating,
        BaselineKind::LowRating,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Activity => "activity",
            BaselineKind::Inactivity => "inactivity",
            BaselineKind::HighRating => "high_rating",
            BaselineKind::LowRating => "low_rating",
        }
    }

    /// Published ML-100K (Avg_reward, Max_reward), kept for side-by-side
    /// printing only.
    pub fn reference_ml100k(self) -> (f64, f64) {
        match self {
            BaselineKind::Random => (4.72, 36.0),
            BaselineKind::Activity => (0.14, 7.0),
            BaselineKind::Inactivity => (11.57, 54.0),
            BaselineKind::HighRating => (8.54, 55.0),
            BaselineKind::LowRating => (3.93, 24.0),
        }
    }
}

/// Published ML-100K (Avg_reward, Max_reward) of the learned policy.
pub const REFERENCE_SMILE_ML100K: (f64, f64) = (138.3, 213.0);

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline {s:?}")))
    }
}

fn mean_rating(table: &RatingsTable, u: UserId) -> Option<f64> {
    let rows = table.user_rows(u);
    if rows.is_empty() {
        return None;
    }
    Some(rows.iter().map(|&r| table.row(r).rating).sum::<f64>() / rows.len() as f64)
}

/// Every user in the baseline's preference order. Deterministic orders
/// break ties by ascending user id; users without ratings sort last for the
/// rating-based policies.
pub fn baseline_order(table: &RatingsTable, kind: BaselineKind, seed: u64) -> Vec<UserId> {
    let mut users: Vec<UserId> = (0..table.num_users() as UserId).collect();
    match kind {
        BaselineKind::Random => users.shuffle(&mut rng::seeded(seed)),
        BaselineKind::Activity => users.sort_by_key(|&u| (std::cmp::Reverse(table.user_degree(u)), u)),
        BaselineKind::Inactivity => users.sort_by_key(|&u| (table.user_degree(u), u)),
        BaselineKind::HighRating | BaselineKind::LowRating => {
            let high = kind == BaselineKind::HighRating;
            users.sort_by(|&a, &b| {
                let (ma, mb) = (mean_rating(table, a), mean_rating(table, b));
                let ord = match (ma, mb) {
                    (Some(x), Some(y)) if high => y.total_cmp(&x),
                    (Some(x), Some(y)) => x.total_cmp(&y),
                    (Some(_), None) => std::cmp::Ordering::Less,
                    (None, Some(_)) => std::cmp::Ordering::Greater,
                    (None, None) => std::cmp::Ordering::Equal,
                };
                ord.then(a.cmp(&b))
            });
        }
    }
    users
}

/// First `n` users of the baseline order that pass `filter`. Returns fewer
/// (with a warning) when the population runs out.
pub fn rank_baseline_users(
    table: &RatingsTable,
    kind: BaselineKind,
    n: usize,
    seed: u64,
    filter: &UserFilter,
) -> Vec<UserId> {
    let picked: Vec<UserId> = baseline_order(table, kind, seed)
        .into_iter()
        .filter(|&u| filter.passes(u))
        .take(n)
        .collect();
    if picked.len() < n {
        log::warn!("{kind}: only {} of {n} requested adopters pass the filter", picked.len());
    }
    picked
}

/// Per-step rewards of every episode.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    pub episode_rewards: Vec<Vec<f64>>,
    pub adopters: Vec<Vec<UserId>>,
}

/// Play `episodes` episodes, feeding the baseline's adopters one per step.
/// Episode `e` uses the same environment seed as the agent's episode `e`.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    env: &mut Environment,
    table: &RatingsTable,
    mf: &EmbeddingMatrix,
    filter: &UserFilter,
    kind: BaselineKind,
    n: usize,
    episodes: usize,
    seed: u64,
) -> Result<(MetricsReport, BaselineRun)> {
    let mut run = BaselineRun {
        kind,
        episode_rewards: Vec::with_capacity(episodes),
        adopters: Vec::with_capacity(episodes),
    };
    let base = rng::derive(seed, stream::BASELINE);
    for ep in 0..episodes {
        env.reset_episode(episode_seed(seed, ep))?;
        let users = rank_baseline_users(table, kind, n, rng::derive(base, ep as u64), filter);
        let mut rewards = Vec::with_capacity(users.len());
        if users.is_empty() {
            rewards.push(env.compute_reward()?);
        }
        for &u in &users {
            env.apply_trial(u, mf)?;
            rewards.push(env.compute_reward()?);
        }
        log::info!("{kind} episode {ep}: avg {:.3}", rewards.iter().sum::<f64>() / rewards.len() as f64);
        run.episode_rewards.push(rewards);
        run.adopters.push(users);
    }
    let report = MetricsReport::from_rewards(kind.name(), &run.episode_rewards, Some(kind.reference_ml100k()));
    Ok((report, run))
}
