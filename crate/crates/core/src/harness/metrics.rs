//! Reward summaries and top-k ranking quality.

use serde::Serialize;

use crate::dataset::{ItemId, RatingsTable, UserId};
use crate::factorization::BprModel;
use crate::{Error, Result};

/// Reward summary of one policy, optionally with ranking quality.
///
/// `avg_reward` is the mean per-step page-view reward over every step of
/// every episode; `max_reward` is the largest single-step value seen.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub name: String,
    pub avg_reward: f64,
    pub max_reward: f64,
    pub episodes: usize,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Published (avg, max) for the same policy, for side-by-side display.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<(f64, f64)>,
}

impl MetricsReport {
    pub fn from_rewards(name: &str, episodes: &[Vec<f64>], reference: Option<(f64, f64)>) -> Self {
        let all: Vec<f64> = episodes.iter().flatten().copied().collect();
        let avg = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
        MetricsReport {
            name: name.to_string(),
            avg_reward: avg,
            max_reward: all.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(avg),
            episodes: episodes.len(),
            steps: all.len(),
            precision_at_k: None,
            recall_at_k: None,
            k: None,
            reference,
        }
    }
}

/// Mean Precision@k and Recall@k over users with at least one relevant
/// test item. Each user's ranking covers the whole catalog except the
/// items they have in `exclude`; recall divides by `min(|relevant|, k)`.
pub fn eval_ranking(
    model: &BprModel,
    exclude: &RatingsTable,
    test: &RatingsTable,
    k: usize,
    relevance_threshold: f64,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let num_items = model.items.rows();
    let mut seen = vec![false; num_items];
    let (mut p_sum, mut r_sum, mut users) = (0.0, 0.0, 0usize);
    for u in 0..test.num_users() as UserId {
        let relevant: Vec<ItemId> = test
            .user_rows(u)
            .iter()
            .map(|&r| test.row(r))
            .filter(|row| row.rating >= relevance_threshold)
            .map(|row| row.item)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        for i in exclude.user_items(u) {
            seen[i as usize] = true;
        }
        let mut scored: Vec<(f64, ItemId)> = (0..num_items as ItemId)
            .filter(|&i| !seen[i as usize])
            .map(|i| (model.score(u, i), i))
            .collect();
        for i in exclude.user_items(u) {
            seen[i as usize] = false;
        }
        let kk = k.min(scored.len());
        let order = |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if kk > 0 && kk < scored.len() {
            scored.select_nth_unstable_by(kk - 1, order);
        }
        let hits = scored[..kk].iter().filter(|(_, i)| relevant.contains(i)).count() as f64;
        p_sum += hits / k as f64;
        r_sum += hits / relevant.len().min(k) as f64;
        users += 1;
    }
    if users == 0 {
        return Err(Error::EmptyResult("no test user has a relevant item".into()));
    }
    Ok((p_sum / users as f64, r_sum / users as f64))
}
