//! Experiment runners: agent training and scoring, baselines, ranking
//! quality before and after trials, adopter-count sweeps and tree-depth
//! timing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use super::baselines::{run_baseline, BaselineKind, REFERENCE_SMILE_ML100K};
use super::metrics::{eval_ranking, MetricsReport};
use super::pipeline::{Pipeline, Prepared};
use crate::action_tree::ClusterTree;
use crate::agent::{evaluate_policy, train, Agent, EpisodeSummary, PolicyStore, TrainConfig, TrainLogWriter, POLICY_INIT_SCALE};
use crate::dataset::UserId;
use crate::environment::Environment;
use crate::factorization::EmbeddingMatrix;
use crate::linalg::Matrix;
use crate::rng::{self, stream, SeededRng};
use crate::{Error, Result};

/// Published ML-100K Precision@10 / Recall@10 before and after trials.
pub const REFERENCE_RANKING_ML100K: [(f64, f64); 2] = [(0.2194, 0.0505), (0.2364, 0.0538)];

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train the agent from scratch and checkpoint it.
pub fn train_agent(p: &Pipeline) -> Result<(Agent, Vec<EpisodeSummary>)> {
    let prep = p.prepared()?;
    let mf = p.mf(&prep)?;
    let bpr = p.bpr(&prep)?;
    let mut env = p.environment(&prep, bpr)?;
    let mut agent = p.fresh_agent(&prep, &mf)?;
    let cfg = p.cfg.train_config(prep.train.num_users());
    let mut log = TrainLogWriter::create(&p.dir.join("logs"))?;
    let start = Instant::now();
    let summaries = train(&mut agent, &mut env, &mf, &cfg, Some(&mut log))?;
    let dir = p.agent_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    agent.save(&dir)?;
    let tail = summaries.len().saturating_sub(10);
    let tail_avg = summaries[tail..].iter().map(|s| s.avg_reward).sum::<f64>() / (summaries.len() - tail).max(1) as f64;
    p.record(
        "train",
        json!({
            "episodes": summaries.len(),
            "episode_length": cfg.n,
            "first_avg_reward": summaries.first().map(|s| s.avg_reward),
            "last10_avg_reward": tail_avg,
            "max_reward": summaries.last().map(|s| s.running_max_reward),
            "seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    Ok((agent, summaries))
}

/// Load the trained agent, training it first when no checkpoint exists.
pub fn load_or_train_agent(p: &Pipeline, prep: &Prepared) -> Result<Agent> {
    match p.trained_agent(prep)? {
        Some(a) => Ok(a),
        None => train_agent(p).map(|(a, _)| a),
    }
}

/// Score the frozen policy on the shared evaluation episodes.
pub fn evaluate_agent(p: &Pipeline, agent: &mut Agent) -> Result<MetricsReport> {
    let prep = p.prepared()?;
    let mf = p.mf(&prep)?;
    let mut env = p.environment(&prep, p.bpr(&prep)?)?;
    let cfg = p.cfg.train_config(prep.train.num_users());
    let traces = evaluate_policy(agent, &mut env, &mf, &cfg, p.cfg.agent.eval_episodes)?;
    let rewards: Vec<Vec<f64>> = traces.iter().map(|t| t.rewards()).collect();
    let report = MetricsReport::from_rewards("smile", &rewards, Some(REFERENCE_SMILE_ML100K));
    p.record("smile", serde_json::to_value(&report).expect("report serializes"))?;
    Ok(report)
}

/// Every baseline under the evaluation episodes; writes `baselines.csv`.
pub fn run_baselines(p: &Pipeline, kinds: &[BaselineKind]) -> Result<Vec<MetricsReport>> {
    let prep = p.prepared()?;
    let mf = p.mf(&prep)?;
    let mut env = p.environment(&prep, p.bpr(&prep)?)?;
    let filter = p.filter(&prep, &mf);
    let n = p.cfg.train_config(prep.train.num_users()).n;
    let mut csv = String::from("baseline,episode,step,adopter,reward\n");
    let mut reports = Vec::new();
    for &kind in kinds {
        let (report, run) = run_baseline(&mut env, &prep.train, &mf, &filter, kind, n, p.cfg.agent.eval_episodes, p.cfg.seed)?;
        for (ep, (rewards, users)) in run.episode_rewards.iter().zip(&run.adopters).enumerate() {
            for (t, (r, u)) in rewards.iter().zip(users).enumerate() {
                writeln!(csv, "{kind},{ep},{t},{u},{r}").unwrap();
            }
        }
        reports.push(report);
    }
    write_text(&p.log_path("baselines.csv"), &csv)?;
    p.record("baselines", serde_json::to_value(&reports).expect("reports serialize"))?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankingQuality {
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub k: usize,
}

/// Ranking quality of the pristine ranker.
pub fn ranking_before(p: &Pipeline) -> Result<RankingQuality> {
    let prep = p.prepared()?;
    let bpr = p.bpr(&prep)?;
    let k = p.cfg.eval.k;
    let (precision_at_k, recall_at_k) = eval_ranking(&bpr, &prep.train, &prep.test, k, p.cfg.eval.relevance_threshold)?;
    Ok(RankingQuality {
        precision_at_k,
        recall_at_k,
        k,
    })
}

/// Ranking quality of the ranker refreshed by one episode of the trained
/// policy (evaluation episode 0). Exclusions are the original training
/// items, as for [`ranking_before`].
pub fn ranking_after(p: &Pipeline, agent: &mut Agent) -> Result<RankingQuality> {
    let prep = p.prepared()?;
    let mf = p.mf(&prep)?;
    let mut env = p.environment(&prep, p.bpr(&prep)?)?;
    let cfg = p.cfg.train_config(prep.train.num_users());
    evaluate_policy(agent, &mut env, &mf, &cfg, 1)?;
    let k = p.cfg.eval.k;
    let (precision_at_k, recall_at_k) = eval_ranking(env.ranker(), &prep.train, &prep.test, k, p.cfg.eval.relevance_threshold)?;
    Ok(RankingQuality {
        precision_at_k,
        recall_at_k,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rq1Row {
    pub adopters: usize,
    pub increased_exposure: f64,
}

fn random_adopters(num_users: usize, count: usize, rng: &mut SeededRng) -> Vec<UserId> {
    index::sample(rng, num_users, count.min(num_users))
        .iter()
        .map(|u| u as UserId)
        .collect()
}

/// Increased exposure after `count` uniformly random adopters, each count
/// starting from the pristine environment of episode 0.
pub fn rq1_sweep(env: &mut Environment, mf: &EmbeddingMatrix, counts: &[usize], seed: u64) -> Result<Vec<Rq1Row>> {
    let base = rng::derive(seed, stream::BASELINE);
    counts
        .iter()
        .map(|&count| {
            env.reset_episode(crate::agent::episode_seed(seed, 0))?;
            let mut r = rng::seeded(rng::derive(base, (1 << 32) + count as u64));
            for u in random_adopters(env.num_users(), count, &mut r) {
                env.apply_trial(u, mf)?;
            }
            Ok(Rq1Row {
                adopters: count,
                increased_exposure: env.increased_exposure()?,
            })
        })
        .collect()
}

/// Same adopter count, different random draws.
pub fn rq1_repeat(env: &mut Environment, mf: &EmbeddingMatrix, count: usize, repeats: usize, seed: u64) -> Result<Vec<Rq1Row>> {
    let base = rng::derive(seed, stream::BASELINE);
    (0..repeats)
        .map(|run| {
            env.reset_episode(crate::agent::episode_seed(seed, 0))?;
            let mut r = rng::seeded(rng::derive(base, (2 << 32) + run as u64));
            for u in random_adopters(env.num_users(), count, &mut r) {
                env.apply_trial(u, mf)?;
            }
            Ok(Rq1Row {
                adopters: count,
                increased_exposure: env.increased_exposure()?,
            })
        })
        .collect()
}

pub fn rq1_csv(rows: &[Rq1Row]) -> String {
    let mut s = String::from("adopters,increased_exposure\n");
    for r in rows {
        writeln!(s, "{},{}", r.adopters, r.increased_exposure).unwrap();
    }
    s
}

/// Mean wall time of one root-to-leaf sample in seconds.
pub fn mean_sample_time(tree: &ClusterTree, policies: &PolicyStore, state: &[f64], trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let start = Instant::now();
    let mut sink = 0u64;
    for _ in 0..trials {
        sink = sink.wrapping_add(u64::from(tree.sample_path(policies, state, &mut r)?.0.leaf));
    }
    let elapsed = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    Ok(elapsed / trials.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rq3Row {
    pub depth: usize,
    pub arity: usize,
    pub internal_nodes: usize,
    pub mean_sample_seconds: f64,
    pub avg_reward: Option<f64>,
}

/// Build a tree per depth over `user_embs` and time `trials` samples under
/// random policies of width `state_dim`.
pub fn rq3_depth_sweep(user_embs: &Matrix, state_dim: usize, depths: &[usize], trials: usize, seed: u64) -> Result<Vec<Rq3Row>> {
    let mut r = rng::seeded(rng::derive(seed, stream::EVAL));
    let state: Vec<f64> = (0..state_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    depths
        .iter()
        .map(|&depth| {
            let tree = ClusterTree::build(user_embs, depth, rng::derive(seed, stream::TREE))?;
            let policies = PolicyStore::random(&tree, state_dim, POLICY_INIT_SCALE, rng::derive(seed, stream::POLICY));
            let t = mean_sample_time(&tree, &policies, &state, trials, seed)?;
            Ok(Rq3Row {
                depth,
                arity: tree.arity(),
                internal_nodes: tree.num_internal(),
                mean_sample_seconds: t,
                avg_reward: None,
            })
        })
        .collect()
}

/// Depth sweep on the run's rating model, with a short training run per
/// depth when `rq3.train_episodes > 0`.
pub fn rq3_for_run(p: &Pipeline) -> Result<Vec<Rq3Row>> {
    let prep = p.prepared()?;
    let mf = p.mf(&prep)?;
    let enc = p.encoding(prep.train.num_users())?;
    let state_dim = mf.dim() + enc.buckets;
    let mut rows = rq3_depth_sweep(&mf.users, state_dim, &p.cfg.rq3.depths, p.cfg.rq3.trials, p.cfg.seed)?;
    if p.cfg.rq3.train_episodes > 0 {
        let mut env = p.environment(&prep, p.bpr(&prep)?)?;
        for row in &mut rows {
            let tree = ClusterTree::build(&mf.users, row.depth, p.cfg.stream_seed(stream::TREE))?;
            let mut agent = Agent::new(tree, mf.dim(), enc, p.cfg.seed);
            let cfg = TrainConfig {
                episodes: p.cfg.rq3.train_episodes,
                ..p.cfg.train_config(prep.train.num_users())
            };
            train(&mut agent, &mut env, &mf, &cfg, None)?;
            let traces = evaluate_policy(&mut agent, &mut env, &mf, &cfg, p.cfg.agent.eval_episodes)?;
            let rewards: Vec<Vec<f64>> = traces.iter().map(|t| t.rewards()).collect();
            row.avg_reward = Some(MetricsReport::from_rewards("rq3", &rewards, None).avg_reward);
        }
    }
    let mut csv = String::from("depth,arity,internal_nodes,mean_sample_seconds,avg_reward\n");
    for r in &rows {
        let reward = r.avg_reward.map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{},{},{reward}", r.depth, r.arity, r.internal_nodes, r.mean_sample_seconds).unwrap();
    }
    write_text(&p.log_path("rq3.csv"), &csv)?;
    p.record("rq3", serde_json::to_value(&rows).expect("rows serialize"))?;
    Ok(rows)
}

/// Run both adopter-count experiments and write `rq1.csv` and
/// `rq1_repeat.csv`.
pub fn rq1_for_run(p: &Pipeline) -> Result<(Vec<Rq1Row>, Vec<Rq1Row>)> {
    let prep = p.prepared()?;
    let mf = p.mf(&prep)?;
    let mut env = p.environment(&prep, p.bpr(&prep)?)?;
    let sweep = rq1_sweep(&mut env, &mf, &p.cfg.rq1.counts, p.cfg.seed)?;
    let repeat = rq1_repeat(&mut env, &mf, p.cfg.rq1.repeat_count, p.cfg.rq1.repeats, p.cfg.seed)?;
    write_text(&p.log_path("rq1.csv"), &rq1_csv(&sweep))?;
    write_text(&p.log_path("rq1_repeat.csv"), &rq1_csv(&repeat))?;
    p.record("rq1", json!({ "sweep": sweep, "repeat": repeat }))?;
    Ok((sweep, repeat))
}

/// Everything needed for the overall comparison: trained policy score,
/// all baselines, and ranking quality before and after.
pub struct Comparison {
    pub smile: MetricsReport,
    pub baselines: Vec<MetricsReport>,
    pub before: RankingQuality,
    pub after: RankingQuality,
}

pub fn compare(p: &Pipeline) -> Result<Comparison> {
    let prep = p.prepared()?;
    let mut agent = load_or_train_agent(p, &prep)?;
    let smile = evaluate_agent(p, &mut agent)?;
    let baselines = run_baselines(p, &BaselineKind::ALL)?;
    let before = ranking_before(p)?;
    let after = ranking_after(p, &mut agent)?;
    p.record("ranking", json!({ "before": before, "after": after, "reference": REFERENCE_RANKING_ML100K }))?;
    Ok(Comparison {
        smile,
        baselines,
        before,
        after,
    })
}

/// Plain-text table of a comparison.
pub fn format_comparison(c: &Comparison) -> String {
    let mut s = String::new();
    writeln!(s, "{:<12} {:>10} {:>10}   {:>10} {:>10}", "policy", "avg", "max", "ref avg", "ref max").unwrap();
    for r in std::iter::once(&c.smile).chain(&c.baselines) {
        let (ra, rm) = r.reference.unwrap_or((f64::NAN, f64::NAN));
        writeln!(s, "{:<12} {:>10.3} {:>10.3}   {:>10} {:>10}", r.name, r.avg_reward, r.max_reward, ra, rm).unwrap();
    }
    let change = |a: f64, b: f64| 100.0 * (b - a) / a;
    writeln!(
        s,
        "precision@{}: {:.4} -> {:.4} ({:+.2}%)   recall@{}: {:.4} -> {:.4} ({:+.2}%)",
        c.before.k,
        c.before.precision_at_k,
        c.after.precision_at_k,
        change(c.before.precision_at_k, c.after.precision_at_k),
        c.before.k,
        c.before.recall_at_k,
        c.after.recall_at_k,
        change(c.before.recall_at_k, c.after.recall_at_k)
    )
    .unwrap();
    s
}
