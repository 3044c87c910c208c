//! Offline reward calculator: the live ratings log, the BPR ranker that
//! serves top-K lists from per-user candidate sets, trial application and
//! the page-view reward.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rand::seq::index;

use crate::dataset::{Interaction, ItemId, PromotedSet, RatingsTable, UserId};
use crate::factorization::{predict_rating, BprModel, EmbeddingMatrix, FineTune};
use crate::rng::{self, stream};
use crate::{Error, Result};

/// Per-user candidate pools `C_u`: the promoted items followed by a random
/// sample of the rest of the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSets {
    pub per_user: Vec<Vec<ItemId>>,
    pub seed: u64,
}

impl CandidateSets {
    pub fn get(&self, user: UserId) -> &[ItemId] {
        &self.per_user[user as usize]
    }
}

/// Static knobs of the environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    pub k: usize,
    pub candidate_fraction: f64,
    pub fine_tune: FineTune,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            k: 10,
            candidate_fraction: 0.10,
            fine_tune: FineTune::default(),
        }
    }
}

/// Rows added and duplicates skipped by one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrialOutcome {
    pub appended: usize,
    pub skipped: usize,
}

/// Sample `C_u` for every user. Deterministic in `seed`.
pub fn build_candidates(
    num_users: usize,
    num_items: usize,
    promoted: &PromotedSet,
    fraction: f64,
    seed: u64,
) -> Result<CandidateSets> {
    if promoted.is_empty() {
        return Err(Error::invalid("promoted set is empty"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("candidate fraction {fraction} not in [0, 1]")));
    }
    let others: Vec<ItemId> = (0..num_items as ItemId).filter(|&i| !promoted.contains(i)).collect();
    let take = ((fraction * others.len() as f64).round() as usize).min(others.len());
    let mut rng = rng::seeded(seed);
    let per_user = (0..num_users)
        .map(|_| {
            let mut c = promoted.items().to_vec();
            c.extend(index::sample(&mut rng, others.len(), take).iter().map(|j| others[j]));
            c
        })
        .collect();
    Ok(CandidateSets { per_user, seed })
}

/// Higher score first, then lower item id.
#[inline]
fn rank_order(a: &(f64, ItemId), b: &(f64, ItemId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-`k` of `candidates` under `ranker` for `user`, best first.
pub fn top_k(ranker: &BprModel, user: UserId, candidates: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
    if k > candidates.len() {
        return Err(Error::invalid(format!("K={k} exceeds candidate set size {}", candidates.len())));
    }
    let mut scored: Vec<(f64, ItemId)> = candidates.iter().map(|&i| (ranker.score(user, i), i)).collect();
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored.truncate(k);
    Ok(scored.into_iter().map(|s| s.1).collect())
}

/// `Σ_u |L_u ∩ I_p| / |I_p|` under the given ranker and candidates.
pub fn page_view_reward(ranker: &BprModel, candidates: &CandidateSets, promoted: &PromotedSet, k: usize) -> Result<f64> {
    let mut hits = 0usize;
    for (u, c) in candidates.per_user.iter().enumerate() {
        hits += top_k(ranker, u as UserId, c, k)?
            .iter()
            .filter(|&&i| promoted.contains(i))
            .count();
    }
    Ok(hits as f64 / promoted.len() as f64)
}

pub struct Environment {
    table: RatingsTable,
    pristine: BprModel,
    ranker: BprModel,
    promoted: PromotedSet,
    candidates: CandidateSets,
    config: EnvConfig,
    episode_seed: u64,
    trials: u64,
    skipped_total: usize,
    pristine_reward: f64,
}

impl Environment {
    /// Take ownership of the ranking log and a trained ranker; the current
    /// table contents become the pristine snapshot.
    pub fn new(
        mut table: RatingsTable,
        ranker: BprModel,
        promoted: PromotedSet,
        config: EnvConfig,
        episode_seed: u64,
    ) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        if ranker.users.rows() != table.num_users() || ranker.items.rows() != table.num_items() {
            return Err(Error::invalid("ranker shape does not match the table"));
        }
        table.snapshot();
        let candidates = build_candidates(
            table.num_users(),
            table.num_items(),
            &promoted,
            config.candidate_fraction,
            episode_seed,
        )?;
        let mut env = Environment {
            table,
            pristine: ranker.clone(),
            ranker,
            promoted,
            candidates,
            config,
            episode_seed,
            trials: 0,
            skipped_total: 0,
            pristine_reward: 0.0,
        };
        env.pristine_reward = env.compute_reward()?;
        Ok(env)
    }

    pub fn table(&self) -> &RatingsTable {
        &self.table
    }

    pub fn ranker(&self) -> &BprModel {
        &self.ranker
    }

    pub fn pristine_ranker(&self) -> &BprModel {
        &self.pristine
    }

    pub fn promoted(&self) -> &PromotedSet {
        &self.promoted
    }

    pub fn candidates(&self) -> &CandidateSets {
        &self.candidates
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn num_users(&self) -> usize {
        self.table.num_users()
    }

    /// Duplicates skipped since the last reset.
    pub fn skipped_total(&self) -> usize {
        self.skipped_total
    }

    /// Reward of the pristine ranker on the current episode's candidates.
    pub fn pristine_reward(&self) -> f64 {
        self.pristine_reward
    }

    pub fn recommend_topk(&self, user: UserId) -> Result<Vec<ItemId>> {
        top_k(&self.ranker, user, self.candidates.get(user), self.config.k)
    }

    pub fn compute_reward(&self) -> Result<f64> {
        page_view_reward(&self.ranker, &self.candidates, &self.promoted, self.config.k)
    }

    /// Give `adopter` every promoted item with its predicted rating, then
    /// refresh the ranker on exactly the appended rows.
    pub fn apply_trial(&mut self, adopter: UserId, mf: &EmbeddingMatrix) -> Result<TrialOutcome> {
        if adopter as usize >= self.table.num_users() {
            return Err(Error::invalid(format!("adopter {adopter} out of range")));
        }
        let start = self.table.len();
        let mut out = TrialOutcome::default();
        for &p in self.promoted.items() {
            if self.table.contains(adopter, p) {
                out.skipped += 1;
                continue;
            }
            let y = predict_rating(mf, adopter, p);
            self.table.append(Interaction::new(adopter, p, y))?;
            out.appended += 1;
        }
        self.skipped_total += out.skipped;
        if out.appended > 0 {
            let seed = rng::derive(rng::derive(self.episode_seed, stream::FINE_TUNE), self.trials);
            self.ranker
                .fine_tune(&self.table, start..self.table.len(), &self.config.fine_tune, seed);
            if !self.ranker.users.is_finite() || !self.ranker.items.is_finite() {
                return Err(Error::Divergence(format!("ranker diverged after trial by user {adopter}")));
            }
        }
        self.trials += 1;
        Ok(out)
    }

    /// Roll back the log, restore the pristine ranker and draw fresh
    /// candidates for the next episode.
    pub fn reset_episode(&mut self, seed: u64) -> Result<()> {
        self.table.rollback();
        self.ranker.clone_from(&self.pristine);
        self.candidates = build_candidates(
            self.table.num_users(),
            self.table.num_items(),
            &self.promoted,
            self.config.candidate_fraction,
            seed,
        )?;
        self.episode_seed = seed;
        self.trials = 0;
        self.skipped_total = 0;
        self.pristine_reward = self.compute_reward()?;
        Ok(())
    }

    /// Extra promoted-item appearances across all top-K lists relative to
    /// the pristine ranker: `|I_p| · (reward_now − reward_pristine)`.
    pub fn increased_exposure(&self) -> Result<f64> {
        Ok(self.promoted.len() as f64 * (self.compute_reward()? - self.pristine_reward))
    }
}

/// One row of the per-step episode log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLogRow {
    pub episode: usize,
    pub step: usize,
    pub adopter: UserId,
    pub reward: f64,
    pub appended: usize,
    pub skipped: usize,
}

pub fn write_episode_log(path: &Path, rows: &[EpisodeLogRow]) -> Result<()> {
    let mut out = String::from("episode,step,adopter_id,reward,appended,skipped\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.episode, r.step, r.adopter, r.reward, r.appended, r.skipped
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
