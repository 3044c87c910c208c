//! The selection agent: per-node softmax policies, the user filter,
//! discounted returns, REINFORCE updates and the episode/training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path as FsPath;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action_tree::{renormalize, ClusterTree, Path};
use crate::binio::{Reader, Writer};
use crate::dataset::{PromotedSet, UserId};
use crate::environment::Environment;
use crate::factorization::{predict_rating, EmbeddingMatrix};
use crate::linalg::Matrix;
use crate::rng::{self, stream, SeededRng};
use crate::state_tracker::{init_state, make_input, sru_backward, sru_forward, RewardEncoding, SruGrad, SruParams, SruState, SruTrace};
use crate::{Error, Result};

/// Half-width of the uniform initialization of policy weights.
pub const POLICY_INIT_SCALE: f64 = 0.05;

/// Softmax head of one internal tree node: `W` is `d_s × c_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePolicy {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl NodePolicy {
    pub fn zeros(state_dim: usize, children: usize) -> Self {
        NodePolicy {
            weights: Matrix::zeros(state_dim, children),
            bias: vec![0.0; children],
        }
    }

    pub fn random<R: Rng>(state_dim: usize, children: usize, scale: f64, rng: &mut R) -> Self {
        NodePolicy {
            weights: Matrix::uniform(state_dim, children, scale, rng),
            bias: (0..children).map(|_| rng.gen_range(-scale..=scale)).collect(),
        }
    }

    pub fn children(&self) -> usize {
        self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Post-activation logits `tanh(Wᵀs + b)`.
pub fn policy_logits(p: &NodePolicy, s: &[f64]) -> Vec<f64> {
    let z = p.weights.matvec_t(s);
    z.iter().zip(&p.bias).map(|(z, b)| (z + b).tanh()).collect()
}

/// `Softmax(tanh(Wᵀs + b))`.
pub fn policy_forward(p: &NodePolicy, s: &[f64]) -> Vec<f64> {
    crate::linalg::softmax(&policy_logits(p, s))
}

/// All node policies of a tree, indexed by the nodes' policy ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStore {
    pub nodes: Vec<NodePolicy>,
    pub state_dim: usize,
}

impl PolicyStore {
    pub fn zeros(tree: &ClusterTree, state_dim: usize) -> Self {
        PolicyStore {
            nodes: tree.policy_shapes().into_iter().map(|c| NodePolicy::zeros(state_dim, c)).collect(),
            state_dim,
        }
    }

    pub fn random(tree: &ClusterTree, state_dim: usize, scale: f64, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        PolicyStore {
            nodes: tree
                .policy_shapes()
                .into_iter()
                .map(|c| NodePolicy::random(state_dim, c, scale, &mut r))
                .collect(),
            state_dim,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nodes.iter().all(NodePolicy::is_finite)
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let mut w = Writer::new(b"FTPS");
        w.u64(self.state_dim as u64);
        w.u64(self.nodes.len() as u64);
        for n in &self.nodes {
            w.matrix(&n.weights);
            w.f64s(&n.bias);
        }
        w.save(path)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let mut r = Reader::open(path, b"FTPS")?;
        let state_dim = r.usize()?;
        let count = r.usize()?;
        let mut nodes = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let weights = r.matrix()?;
            let bias = r.f64s()?;
            if weights.rows() != state_dim || weights.cols() != bias.len() {
                return Err(r.err("policy shape mismatch"));
            }
            nodes.push(NodePolicy { weights, bias });
        }
        r.finish()?;
        Ok(PolicyStore { nodes, state_dim })
    }
}

/// How the per-item predictions over `I_p` are aggregated by the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Mean predicted rating above the threshold.
    #[default]
    Mean,
    /// Every predicted rating above the threshold.
    All,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FilterMode::Mean),
            "all" => Ok(FilterMode::All),
            _ => Err(Error::Config(format!("unknown filter mode {s:?} (mean | all)"))),
        }
    }
}

/// Does `user` favor the promoted items? Strictly greater than `threshold`.
pub fn filter_user(mf: &EmbeddingMatrix, user: UserId, promoted: &PromotedSet, threshold: f64) -> bool {
    filter_user_with(mf, user, promoted, threshold, FilterMode::Mean)
}

pub fn filter_user_with(
    mf: &EmbeddingMatrix,
    user: UserId,
    promoted: &PromotedSet,
    threshold: f64,
    mode: FilterMode,
) -> bool {
    let mut preds = promoted.items().iter().map(|&p| predict_rating(mf, user, p));
    match mode {
        FilterMode::Mean => preds.sum::<f64>() / promoted.len() as f64 > threshold,
        FilterMode::All => preds.all(|y| y > threshold),
    }
}

/// Filter verdicts for every user, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct UserFilter {
    pass: Vec<bool>,
}

impl UserFilter {
    pub fn new(mf: &EmbeddingMatrix, promoted: &PromotedSet, threshold: f64, mode: FilterMode) -> Self {
        UserFilter {
            pass: (0..mf.users.rows() as UserId)
                .map(|u| filter_user_with(mf, u, promoted, threshold, mode))
                .collect(),
        }
    }

    /// Admit everyone.
    pub fn open(num_users: usize) -> Self {
        UserFilter {
            pass: vec![true; num_users],
        }
    }

    pub fn from_flags(pass: Vec<bool>) -> Self {
        UserFilter { pass }
    }

    pub fn passes(&self, user: UserId) -> bool {
        self.pass[user as usize]
    }

    pub fn pass_count(&self) -> usize {
        self.pass.iter().filter(|p| **p).count()
    }
}

/// An accepted adopter together with the path that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub adopter: UserId,
    pub path: Path,
    pub log_prob: f64,
    pub rejections: usize,
}

/// Sample users until one passes the filter. Rejected users and the
/// accepted one become unavailable for the rest of the episode.
pub fn select_adopter(
    tree: &mut ClusterTree,
    policies: &PolicyStore,
    filter: &UserFilter,
    state: &[f64],
    rng: &mut SeededRng,
    max_retries: usize,
) -> Result<Selection> {
    let mut rejections = 0;
    loop {
        let (path, log_prob) = tree.sample_path(policies, state, rng)?;
        let user = path.leaf;
        tree.set_available(user, false);
        if filter.passes(user) {
            return Ok(Selection {
                adopter: user,
                path,
                log_prob,
                rejections,
            });
        }
        rejections += 1;
        if rejections > max_retries {
            return Err(Error::RetriesExhausted(max_retries));
        }
    }
}

/// Recompute a path's log-probability from its stored masks.
pub fn path_log_prob(tree: &ClusterTree, policies: &PolicyStore, path: &Path, state: &[f64]) -> f64 {
    path.decisions
        .iter()
        .map(|d| {
            let p = &policies.nodes[tree.nodes()[d.node].policy.expect("internal node")];
            renormalize(&policy_forward(p, state), &d.mask)[d.choice].ln()
        })
        .sum()
}

/// `Q_t = r_t + γ·Q_{t+1}`, accumulated from the end.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Gradient of `ln q_choice` for one node, where `q` is the masked softmax
/// of `tanh(Wᵀs + b)`. Returns `(∂W, ∂b, ∂s)`.
pub fn log_prob_gradient(p: &NodePolicy, s: &[f64], choice: usize, mask: &[bool]) -> (Matrix, Vec<f64>, Vec<f64>) {
    let a = policy_logits(p, s);
    let q = renormalize(&crate::linalg::softmax(&a), mask);
    let dz: Vec<f64> = (0..a.len())
        .map(|j| {
            let da = f64::from(u8::from(j == choice)) - q[j];
            da * (1.0 - a[j] * a[j])
        })
        .collect();
    let mut dw = Matrix::zeros(s.len(), a.len());
    for (r, &sr) in s.iter().enumerate() {
        for (w, &d) in dw.row_mut(r).iter_mut().zip(&dz) {
            *w = sr * d;
        }
    }
    let ds = p.weights.matvec(&dz);
    (dw, dz, ds)
}

/// One step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub path: Path,
    pub log_prob: f64,
    pub adopter: UserId,
    pub reward: f64,
    pub appended: usize,
    pub skipped: usize,
    pub rejections: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub steps: Vec<StepRecord>,
    /// SRU transitions; `sru[t]` produced the state of step `t + 1`.
    pub sru: Vec<SruTrace>,
    /// Why the episode stopped early, if it did.
    pub aborted: Option<String>,
}

impl EpisodeTrace {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn avg_reward(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.reward).sum::<f64>() / self.steps.len() as f64
    }

    pub fn max_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn rejections(&self) -> usize {
        self.steps.iter().map(|s| s.rejections).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adopters per episode.
    pub n: usize,
    pub gamma: f64,
    pub lr: f64,
    pub episodes: usize,
    pub filter_threshold: f64,
    pub filter_mode: FilterMode,
    pub max_retries: usize,
    /// Subtract the episode's mean return from every `Q_t`.
    pub baseline: bool,
    /// Backpropagate into the SRU as well as the node policies.
    pub train_sru: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for a population of `num_users`: `n = ⌈0.05·|U|⌉`.
    pub fn for_users(num_users: usize, seed: u64) -> Self {
        TrainConfig {
            n: default_episode_length(num_users),
            gamma: 0.9,
            lr: 0.001,
            episodes: 500,
            filter_threshold: 3.5,
            filter_mode: FilterMode::Mean,
            max_retries: 50,
            baseline: false,
            train_sru: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("episode length n must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite"));
        }
        Ok(())
    }
}

pub fn default_episode_length(num_users: usize) -> usize {
    (num_users as f64 * 0.05).ceil() as usize
}

/// Candidate-set seed of episode `episode`; shared with the baselines so
/// that every policy sees the same environments.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    rng::derive(rng::derive(seed, stream::EPISODE), episode as u64)
}

/// Sampling stream for the agent's choices in one episode.
pub fn agent_rng(seed: u64, episode: usize, label: u64) -> SeededRng {
    rng::seeded(rng::derive(rng::derive(seed, label), episode as u64))
}

/// Apply REINFORCE to every node on every traversed path, one step at a
/// time: `θ ← θ + η · Q_t · ∇θ ln π(a_t | s_t)`. With `train_sru` the
/// state gradients are backpropagated through the recorded SRU transitions
/// (using the parameters in force before the policy updates).
pub fn reinforce_update(
    tree: &ClusterTree,
    policies: &mut PolicyStore,
    sru: &mut SruParams,
    trace: &EpisodeTrace,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut returns = compute_returns(&trace.rewards(), cfg.gamma);
    if cfg.baseline && !returns.is_empty() {
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        returns.iter_mut().for_each(|q| *q -= mean);
    }
    let mut state_grads: Vec<Vec<f64>> = Vec::new();
    if cfg.train_sru {
        for (step, &q) in trace.steps.iter().zip(&returns) {
            let mut ds = vec![0.0; step.state.len()];
            for d in &step.path.decisions {
                let p = &policies.nodes[tree.nodes()[d.node].policy.expect("internal node")];
                let (_, _, g) = log_prob_gradient(p, &step.state, d.choice, &d.mask);
                for (a, b) in ds.iter_mut().zip(g) {
                    *a += q * b;
                }
            }
            state_grads.push(ds);
        }
    }
    for (t, (step, &q)) in trace.steps.iter().zip(&returns).enumerate() {
        if q == 0.0 {
            continue;
        }
        for d in &step.path.decisions {
            let id = tree.nodes()[d.node].policy.expect("internal node");
            let p = &mut policies.nodes[id];
            let (dw, db, _) = log_prob_gradient(p, &step.state, d.choice, &d.mask);
            let scale = cfg.lr * q;
            for (w, g) in p.weights.as_mut_slice().iter_mut().zip(dw.as_slice()) {
                *w += scale * g;
            }
            for (b, g) in p.bias.iter_mut().zip(&db) {
                *b += scale * g;
            }
            if !p.is_finite() {
                return Err(Error::Divergence(format!(
                    "policy of node {} became non-finite at step {t} (Q = {q}, log_prob = {})",
                    d.node, step.log_prob
                )));
            }
        }
    }
    if cfg.train_sru && trace.steps.len() > 1 {
        let dim = sru.dim();
        let mut grad = SruGrad::zeros(dim);
        let mut dc = vec![0.0; dim];
        // state of step t (t >= 1) is the output of transition t - 1
        for t in (1..trace.steps.len()).rev() {
            dc = sru_backward(sru, &trace.sru[t - 1], &state_grads[t], &dc, &mut grad);
        }
        sru.add_scaled(cfg.lr, &grad);
        if !sru.is_finite() {
            return Err(Error::Divergence("SRU parameters became non-finite".into()));
        }
    }
    Ok(())
}

/// Tree, node policies, recurrent state tracker and reward code.
#[derive(Debug, Clone)]
pub struct Agent {
    pub tree: ClusterTree,
    pub policies: PolicyStore,
    pub sru: SruParams,
    pub encoding: RewardEncoding,
}

impl Agent {
    /// Fresh agent whose state width is `user_dim + buckets`.
    pub fn new(tree: ClusterTree, user_dim: usize, encoding: RewardEncoding, seed: u64) -> Self {
        let state_dim = user_dim + encoding.buckets;
        Agent {
            policies: PolicyStore::random(&tree, state_dim, POLICY_INIT_SCALE, rng::derive(seed, stream::POLICY)),
            sru: SruParams::random(state_dim, POLICY_INIT_SCALE, rng::derive(seed, stream::SRU)),
            tree,
            encoding,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.policies.state_dim
    }

    /// Play one episode against `env` (which is reset first). Errors in
    /// adopter selection end the episode early; they are recorded in
    /// [`EpisodeTrace::aborted`].
    pub fn run_episode(
        &mut self,
        env: &mut Environment,
        mf: &EmbeddingMatrix,
        filter: &UserFilter,
        cfg: &TrainConfig,
        env_seed: u64,
        rng: &mut SeededRng,
    ) -> Result<EpisodeTrace> {
        env.reset_episode(env_seed)?;
        self.tree.reset_availability();
        let promoted: Vec<&[f64]> = env.promoted().items().iter().map(|&p| mf.item(p)).collect();
        let mut state: SruState = init_state(&promoted, self.state_dim())?;
        let mut trace = EpisodeTrace {
            steps: Vec::with_capacity(cfg.n),
            sru: Vec::with_capacity(cfg.n),
            aborted: None,
        };
        for t in 0..cfg.n {
            let sel = match select_adopter(&mut self.tree, &self.policies, filter, &state.h, rng, cfg.max_retries) {
                Ok(sel) => sel,
                Err(e @ (Error::ActionSpaceExhausted | Error::RetriesExhausted(_))) => {
                    log::warn!("episode stopped at step {t}: {e}");
                    trace.aborted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            };
            let outcome = env.apply_trial(sel.adopter, mf)?;
            let reward = env.compute_reward()?;
            let x = make_input(mf.user(sel.adopter), &self.encoding.encode(reward));
            let (next, tr) = sru_forward(&self.sru, &state, &x)?;
            trace.steps.push(StepRecord {
                state: std::mem::replace(&mut state, next).h,
                path: sel.path,
                log_prob: sel.log_prob,
                adopter: sel.adopter,
                reward,
                appended: outcome.appended,
                skipped: outcome.skipped,
                rejections: sel.rejections,
            });
            trace.sru.push(tr);
        }
        Ok(trace)
    }

    pub fn save(&self, dir: &FsPath) -> Result<()> {
        self.tree.save(&dir.join("tree.bin"))?;
        self.policies.save(&dir.join("policies.bin"))?;
        self.sru.save(&dir.join("sru.bin"))
    }

    pub fn load(dir: &FsPath, encoding: RewardEncoding) -> Result<Self> {
        let tree = ClusterTree::load(&dir.join("tree.bin"))?;
        let policies = PolicyStore::load(&dir.join("policies.bin"))?;
        let sru = SruParams::load(&dir.join("sru.bin"))?;
        if policies.nodes.len() != tree.num_internal() || sru.dim() != policies.state_dim {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: "policies, tree and SRU checkpoints do not match".into(),
            });
        }
        Ok(Agent {
            tree,
            policies,
            sru,
            encoding,
        })
    }
}

/// Per-episode summary line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub steps: usize,
    pub avg_reward: f64,
    pub max_reward: f64,
    pub running_max_reward: f64,
    pub filter_rejections: usize,
}

/// CSV writers for the step log and the episode summary; flushed after
/// every episode so an aborted run keeps what it finished.
pub struct TrainLogWriter {
    steps: BufWriter<File>,
    summary: BufWriter<File>,
}

impl TrainLogWriter {
    pub fn create(dir: &FsPath) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        };
        let mut w = TrainLogWriter {
            steps: open("train_steps.csv")?,
            summary: open("train_episodes.csv")?,
        };
        w.put(false, "episode,step,adopter,reward,return,log_prob\n")?;
        w.put(true, "episode,steps,avg_reward,max_reward,running_max_reward,filter_rejections\n")?;
        Ok(w)
    }

    fn put(&mut self, summary: bool, s: &str) -> Result<()> {
        let f = if summary { &mut self.summary } else { &mut self.steps };
        f.write_all(s.as_bytes())
            .map_err(|e| Error::io(FsPath::new("training log"), e))
    }

    pub fn episode(&mut self, ep: usize, trace: &EpisodeTrace, returns: &[f64], summary: &EpisodeSummary) -> Result<()> {
        let mut block = String::new();
        for (t, (s, q)) in trace.steps.iter().zip(returns).enumerate() {
            block.push_str(&format!("{ep},{t},{},{},{},{}\n", s.adopter, s.reward, q, s.log_prob));
        }
        self.put(false, &block)?;
        let line = format!(
            "{},{},{},{},{},{}\n",
            summary.episode,
            summary.steps,
            summary.avg_reward,
            summary.max_reward,
            summary.running_max_reward,
            summary.filter_rejections
        );
        self.put(true, &line)?;
        self.steps
            .flush()
            .and_then(|_| self.summary.flush())
            .map_err(|e| Error::io(FsPath::new("training log"), e))
    }
}

/// Run `cfg.episodes` episodes, updating the agent after each one.
pub fn train(
    agent: &mut Agent,
    env: &mut Environment,
    mf: &EmbeddingMatrix,
    cfg: &TrainConfig,
    mut log: Option<&mut TrainLogWriter>,
) -> Result<Vec<EpisodeSummary>> {
    cfg.validate()?;
    let filter = UserFilter::new(mf, env.promoted(), cfg.filter_threshold, cfg.filter_mode);
    let mut summaries = Vec::with_capacity(cfg.episodes);
    let mut running_max = f64::NEG_INFINITY;
    for ep in 0..cfg.episodes {
        let mut rng = agent_rng(cfg.seed, ep, stream::AGENT);
        let trace = agent.run_episode(env, mf, &filter, cfg, episode_seed(cfg.seed, ep), &mut rng)?;
        if trace.steps.is_empty() {
            return Err(Error::EmptyResult(format!("episode {ep} selected no adopter")));
        }
        let returns = compute_returns(&trace.rewards(), cfg.gamma);
        running_max = running_max.max(trace.max_reward());
        let summary = EpisodeSummary {
            episode: ep,
            steps: trace.steps.len(),
            avg_reward: trace.avg_reward(),
            max_reward: trace.max_reward(),
            running_max_reward: running_max,
            filter_rejections: trace.rejections(),
        };
        if let Some(w) = log.as_deref_mut() {
            w.episode(ep, &trace, &returns, &summary)?;
        }
        log::info!(
            "episode {ep}: avg {:.3} max {:.3} rejections {}",
            summary.avg_reward,
            summary.max_reward,
            summary.filter_rejections
        );
        reinforce_update(&agent.tree, &mut agent.policies, &mut agent.sru, &trace, cfg)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Roll out the current (frozen) policy for `episodes` episodes on the
/// shared episode seeds.
pub fn evaluate_policy(
    agent: &mut Agent,
    env: &mut Environment,
    mf: &EmbeddingMatrix,
    cfg: &TrainConfig,
    episodes: usize,
) -> Result<Vec<EpisodeTrace>> {
    let filter = UserFilter::new(mf, env.promoted(), cfg.filter_threshold, cfg.filter_mode);
    (0..episodes)
        .map(|ep| {
            let mut rng = agent_rng(cfg.seed, ep, stream::EVAL);
            agent.run_episode(env, mf, &filter, cfg, episode_seed(cfg.seed, ep), &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Interaction, RatingsTable};
    use crate::environment::EnvConfig;
    use crate::factorization::{BprModel, FineTune, SgdConfig};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn uniform_when_zero() {
        let p = NodePolicy::zeros(3, 4);
        for q in policy_forward(&p, &[1.0, -2.0, 0.5]) {
            assert!((q - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_caps_two_way_probability() {
        let mut p = NodePolicy::zeros(1, 2);
        p.bias = vec![50.0, -50.0];
        let q = policy_forward(&p, &[0.0]);
        let e2 = 2f64.exp();
        assert!((q[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((q[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn softmax_shift_identity() {
        let v = [0.3, -0.9, 0.1];
        let a = crate::linalg::softmax(&v);
        let b = crate::linalg::softmax(&v.map(|x| x + 7.5));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn mf_with(user: Vec<f64>, items: Vec<Vec<f64>>) -> EmbeddingMatrix {
        EmbeddingMatrix {
            users: Matrix::from_rows(&[user]),
            items: Matrix::from_rows(&items),
            config: SgdConfig::mf_default(0),
        }
    }

    #[test]
    fn filter_examples() {
        let promoted = PromotedSet::new(vec![0, 1], 2, 0.05).unwrap();
        assert!(filter_user(&mf_with(vec![1.0], vec![vec![5.0], vec![5.0]]), 0, &promoted, 3.5));
        assert!(!filter_user(&mf_with(vec![1.0], vec![vec![1.0], vec![1.0]]), 0, &promoted, 3.5));
        assert!(!filter_user(&mf_with(vec![1.0], vec![vec![3.5], vec![3.5]]), 0, &promoted, 3.5));
        let split = mf_with(vec![1.0], vec![vec![5.0], vec![3.0]]);
        assert!(filter_user_with(&split, 0, &promoted, 3.5, FilterMode::Mean));
        assert!(!filter_user_with(&split, 0, &promoted, 3.5, FilterMode::All));
    }

    #[test]
    fn returns_examples() {
        let r = compute_returns(&[1.0, 2.0], 0.9);
        assert!((r[0] - 2.8).abs() < 1e-12 && r[1] == 2.0);
        assert_eq!(compute_returns(&[3.0, 1.0, 4.0], 0.0), vec![3.0, 1.0, 4.0]);
        assert_eq!(compute_returns(&[1.0; 5], 1.0), vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        assert!(compute_returns(&[], 0.9).is_empty());
    }

    fn toy_tree(n: usize, depth: usize) -> ClusterTree {
        ClusterTree::build(&Matrix::uniform(n, 2, 1.0, &mut rng::seeded(n as u64)), depth, 3).unwrap()
    }

    #[test]
    fn selection_retries_then_accepts() {
        let mut tree = toy_tree(4, 2);
        let store = PolicyStore::zeros(&tree, 2);
        // find the first sampled user under this rng, then reject it
        let first = tree.sample_path(&store, &[0.0, 0.0], &mut rng::seeded(4)).unwrap().0.leaf;
        let mut pass = vec![true; 4];
        pass[first as usize] = false;
        let sel = select_adopter(&mut tree, &store, &UserFilter::from_flags(pass), &[0.0, 0.0], &mut rng::seeded(4), 50).unwrap();
        assert_eq!(sel.rejections, 1);
        assert_ne!(sel.adopter, first);
        assert!(!tree.is_available(first) && !tree.is_available(sel.adopter));
        let recomputed = path_log_prob(&tree, &store, &sel.path, &[0.0, 0.0]);
        assert!((recomputed - sel.log_prob).abs() < 1e-12);
        // with one of three available leaves masked under the first node,
        // the accepted path is no longer uniform
        assert!((sel.log_prob - 0.25f64.ln()).abs() > 1e-6);
    }

    #[test]
    fn selection_matches_sampling_when_all_pass() {
        let mut a = toy_tree(10, 2);
        let b = a.clone();
        let store = PolicyStore::random(&a, 2, 0.8, 1);
        let sel = select_adopter(&mut a, &store, &UserFilter::open(10), &[0.3, 0.1], &mut rng::seeded(9), 50).unwrap();
        let (path, lp) = b.sample_path(&store, &[0.3, 0.1], &mut rng::seeded(9)).unwrap();
        assert_eq!((sel.path, sel.log_prob, sel.rejections), (path, lp, 0));
    }

    #[test]
    fn retries_exhaust() {
        let mut tree = toy_tree(10, 2);
        let store = PolicyStore::zeros(&tree, 2);
        let err = select_adopter(&mut tree, &store, &UserFilter::from_flags(vec![false; 10]), &[0.0; 2], &mut rng::seeded(1), 3);
        assert!(matches!(err, Err(Error::RetriesExhausted(3))));
        assert_eq!(tree.available_count(), 6);
        let err = select_adopter(&mut tree, &store, &UserFilter::from_flags(vec![false; 10]), &[0.0; 2], &mut rng::seeded(1), 50);
        assert!(matches!(err, Err(Error::ActionSpaceExhausted)));
    }

    /// Independent log-probability: plain loops, no shared helpers.
    fn oracle_log_prob(p: &NodePolicy, s: &[f64], choice: usize, mask: &[bool]) -> f64 {
        let c = p.bias.len();
        let mut a = vec![0.0; c];
        for j in 0..c {
            let mut z = p.bias[j];
            for (r, sr) in s.iter().enumerate() {
                z += p.weights.get(r, j) * sr;
            }
            a[j] = z.tanh();
        }
        let mut denom = 0.0;
        for j in 0..c {
            if mask[j] {
                denom += a[j].exp();
            }
        }
        a[choice] - denom.ln()
    }

    fn check_gradient(p: &NodePolicy, s: &[f64], choice: usize, mask: &[bool]) -> f64 {
        let (dw, db, ds) = log_prob_gradient(p, s, choice, mask);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut compare = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            // gradients that vanish exactly (a lone available child) are
            // compared on an absolute floor instead of blowing up the ratio
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        };
        for i in 0..p.weights.as_slice().len() {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi.weights.as_mut_slice()[i] += h;
            lo.weights.as_mut_slice()[i] -= h;
            compare(dw.as_slice()[i], oracle_log_prob(&hi, s, choice, mask), oracle_log_prob(&lo, s, choice, mask));
        }
        for j in 0..p.bias.len() {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi.bias[j] += h;
            lo.bias[j] -= h;
            compare(db[j], oracle_log_prob(&hi, s, choice, mask), oracle_log_prob(&lo, s, choice, mask));
        }
        for r in 0..s.len() {
            let (mut hi, mut lo) = (s.to_vec(), s.to_vec());
            hi[r] += h;
            lo[r] -= h;
            compare(ds[r], oracle_log_prob(p, &hi, choice, mask), oracle_log_prob(p, &lo, choice, mask));
        }
        worst
    }

    #[test]
    fn two_child_logit_gradient_is_one_minus_p() {
        let mut p = NodePolicy::zeros(1, 2);
        p.bias = vec![0.4, -0.3];
        let q = policy_forward(&p, &[0.0]);
        let (_, db, _) = log_prob_gradient(&p, &[0.0], 0, &[true, true]);
        let a0 = 0.4f64.tanh();
        assert!((db[0] / (1.0 - a0 * a0) - (1.0 - q[0])).abs() < 1e-12);
        assert!(check_gradient(&p, &[0.0], 0, &[true, true]) < 1e-4);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..10_000, c in 2usize..7, ds in 1usize..6) {
            let mut r = rng::seeded(seed);
            let p = NodePolicy::random(ds, c, 1.0, &mut r);
            let s: Vec<f64> = (0..ds).map(|_| r.gen_range(-1.5..1.5)).collect();
            let mut mask: Vec<bool> = (0..c).map(|_| r.gen_bool(0.7)).collect();
            let choice = r.gen_range(0..c);
            mask[choice] = true;
            prop_assert!(check_gradient(&p, &s, choice, &mask) < 1e-4);
        }

        #[test]
        fn return_recurrence(rewards in proptest::collection::vec(-5.0f64..5.0, 1..30), gamma in 0.0f64..=1.0) {
            let q = compute_returns(&rewards, gamma);
            for t in 0..rewards.len() - 1 {
                prop_assert_eq!(q[t], rewards[t] + gamma * q[t + 1]);
            }
            prop_assert_eq!(q[rewards.len() - 1], rewards[rewards.len() - 1]);
        }
    }

    fn synthetic_trace(tree: &mut ClusterTree, store: &PolicyStore, s: &[f64], rng: &mut SeededRng, reward_of: impl Fn(UserId) -> f64) -> EpisodeTrace {
        tree.reset_availability();
        let (path, log_prob) = tree.sample_path(store, s, rng).unwrap();
        EpisodeTrace {
            steps: vec![StepRecord {
                state: s.to_vec(),
                reward: reward_of(path.leaf),
                adopter: path.leaf,
                path,
                log_prob,
                appended: 0,
                skipped: 0,
                rejections: 0,
            }],
            sru: Vec::new(),
            aborted: None,
        }
    }

    fn bandit_cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            n: 1,
            ..TrainConfig::for_users(4, 0)
        }
    }

    #[test]
    fn zero_returns_leave_parameters() {
        let mut tree = toy_tree(4, 2);
        let mut store = PolicyStore::random(&tree, 2, 0.3, 2);
        let mut sru = SruParams::random(2, 0.05, 1);
        let before = store.clone();
        let trace = synthetic_trace(&mut tree, &store, &[0.5, 0.5], &mut rng::seeded(1), |_| 0.0);
        reinforce_update(&tree, &mut store, &mut sru, &trace, &bandit_cfg(0.5)).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn bandit_moves_toward_rewarding_user() {
        let mut tree = toy_tree(4, 2);
        let mut store = PolicyStore::zeros(&tree, 2);
        let mut sru = SruParams::zeros(2);
        let s = [1.0, 0.0];
        let mut r = rng::seeded(5);
        for _ in 0..200 {
            let trace = synthetic_trace(&mut tree, &store, &s, &mut r, |u| f64::from(u8::from(u == 2)));
            reinforce_update(&tree, &mut store, &mut sru, &trace, &bandit_cfg(0.5)).unwrap();
        }
        tree.reset_availability();
        let p = tree.leaf_probabilities(&store, &s)[2];
        let cap = (2f64.exp() / (2f64.exp() + 1.0)).powi(2);
        assert!(p > 0.7 && p <= cap + 1e-12, "p = {p}, cap = {cap}");
    }

    fn sru_trace_fixture(steps: usize) -> (ClusterTree, PolicyStore, SruParams, EpisodeTrace) {
        let d = 3;
        let tree = toy_tree(9, 2);
        let store = PolicyStore::random(&tree, d, 0.7, 3);
        let sru = SruParams::random(d, 0.4, 8);
        let mut r = rng::seeded(12);
        let mut state = SruState {
            c: vec![0.0; d],
            h: vec![0.2, -0.1, 0.3],
        };
        let mut t = tree.clone();
        let mut trace = EpisodeTrace {
            steps: Vec::new(),
            sru: Vec::new(),
            aborted: None,
        };
        for k in 0..steps {
            let (path, log_prob) = t.sample_path(&store, &state.h, &mut r).unwrap();
            t.set_available(path.leaf, false);
            let x: Vec<f64> = (0..d).map(|j| ((k * 3 + j) as f64 * 0.7).sin()).collect();
            let (next, tr) = sru_forward(&sru, &state, &x).unwrap();
            trace.steps.push(StepRecord {
                state: std::mem::replace(&mut state, next).h,
                adopter: path.leaf,
                path,
                log_prob,
                reward: 1.0 + k as f64,
                appended: 0,
                skipped: 0,
                rejections: 0,
            });
            trace.sru.push(tr);
        }
        (tree, store, sru, trace)
    }

    /// Objective `Σ_t Q_t ln π(a_t | s_t)` with states re-unrolled from
    /// the recorded inputs under `sru`.
    fn surrogate(tree: &ClusterTree, store: &PolicyStore, sru: &SruParams, trace: &EpisodeTrace, gamma: f64) -> f64 {
        let q = compute_returns(&trace.rewards(), gamma);
        let mut state = SruState {
            c: trace.sru[0].c_prev.clone(),
            h: trace.steps[0].state.clone(),
        };
        let mut total = 0.0;
        for (t, step) in trace.steps.iter().enumerate() {
            for d in &step.path.decisions {
                let p = &store.nodes[tree.nodes()[d.node].policy.unwrap()];
                total += q[t] * oracle_log_prob(p, &state.h, d.choice, &d.mask);
            }
            state = sru_forward(sru, &state, &trace.sru[t].x).unwrap().0;
        }
        total
    }

    #[test]
    fn sru_update_follows_surrogate_gradient() {
        let (tree, store, sru, trace) = sru_trace_fixture(4);
        let cfg = TrainConfig {
            lr: 1e-6,
            train_sru: true,
            ..TrainConfig::for_users(9, 0)
        };
        let mut store2 = store.clone();
        let mut sru2 = sru.clone();
        reinforce_update(&tree, &mut store2, &mut sru2, &trace, &cfg).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..sru.w_f.as_slice().len()).step_by(2) {
            let analytic = (sru2.w_f.as_slice()[i] - sru.w_f.as_slice()[i]) / cfg.lr;
            let (mut hi, mut lo) = (sru.clone(), sru.clone());
            hi.w_f.as_mut_slice()[i] += h;
            lo.w_f.as_mut_slice()[i] -= h;
            let numeric = (surrogate(&tree, &store, &hi, &trace, cfg.gamma) - surrogate(&tree, &store, &lo, &trace, cfg.gamma)) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0), "{i}: {analytic} vs {numeric}");
            checked += 1;
        }
        assert!(checked > 0);
        for i in 0..sru.w.as_slice().len() {
            let analytic = (sru2.w.as_slice()[i] - sru.w.as_slice()[i]) / cfg.lr;
            let (mut hi, mut lo) = (sru.clone(), sru.clone());
            hi.w.as_mut_slice()[i] += h;
            lo.w.as_mut_slice()[i] -= h;
            let numeric = (surrogate(&tree, &store, &hi, &trace, cfg.gamma) - surrogate(&tree, &store, &lo, &trace, cfg.gamma)) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0), "{i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn frozen_sru_by_default() {
        let (tree, store, sru, trace) = sru_trace_fixture(3);
        let mut store2 = store.clone();
        let mut sru2 = sru.clone();
        reinforce_update(&tree, &mut store2, &mut sru2, &trace, &TrainConfig::for_users(9, 0)).unwrap();
        assert_eq!(sru2, sru);
        assert_ne!(store2, store);
    }

    fn small_env() -> (Environment, EmbeddingMatrix) {
        let (nu, ni, d) = (30usize, 40usize, 4usize);
        let mut r = rng::seeded(21);
        let rows = (0..nu as u32).flat_map(|u| (0..5u32).map(move |j| Interaction::new(u, (u * 7 + j * 3) % 40, 3.0)));
        let table = RatingsTable::from_interactions(nu, ni, rows).unwrap();
        let ranker = BprModel {
            users: Matrix::uniform(nu, d, 0.3, &mut r),
            items: Matrix::uniform(ni, d, 0.3, &mut r),
            config: SgdConfig::bpr_default(0),
            trained_on_rows: table.len(),
        };
        let positive = |m: Matrix| Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|x| x.abs()).collect());
        let mf = EmbeddingMatrix {
            users: positive(Matrix::uniform(nu, d, 1.2, &mut r)),
            items: positive(Matrix::uniform(ni, d, 1.2, &mut r)),
            config: SgdConfig::mf_default(0),
        };
        let promoted = PromotedSet::new(vec![3, 11], ni, 0.05).unwrap();
        let cfg = EnvConfig {
            k: 5,
            candidate_fraction: 0.5,
            fine_tune: FineTune {
                steps: 30,
                ..FineTune::default()
            },
        };
        (Environment::new(table, ranker, promoted, cfg, 0).unwrap(), mf)
    }

    fn small_agent(mf: &EmbeddingMatrix) -> Agent {
        let tree = ClusterTree::build(&mf.users, 2, 4).unwrap();
        Agent::new(tree, 4, RewardEncoding::new(5, 0.0, 30.0).unwrap(), 6)
    }

    #[test]
    fn training_is_deterministic_and_traces_are_valid() {
        let run = |dir: &FsPath| {
            let (mut env, mf) = small_env();
            let mut agent = small_agent(&mf);
            let cfg = TrainConfig {
                n: 3,
                episodes: 4,
                filter_threshold: 1.2,
                lr: 0.05,
                ..TrainConfig::for_users(30, 17)
            };
            let mut w = TrainLogWriter::create(dir).unwrap();
            let s = train(&mut agent, &mut env, &mf, &cfg, Some(&mut w)).unwrap();
            drop(w);
            let traces = evaluate_policy(&mut agent, &mut env, &mf, &cfg, 2).unwrap();
            let filter = UserFilter::new(&mf, env.promoted(), cfg.filter_threshold, cfg.filter_mode);
            for tr in &traces {
                let mut seen = std::collections::HashSet::new();
                for st in &tr.steps {
                    assert!(seen.insert(st.adopter));
                    assert!(filter.passes(st.adopter));
                    assert!(st.reward.is_finite());
                }
            }
            (s, std::fs::read(dir.join("train_steps.csv")).unwrap(), std::fs::read(dir.join("train_episodes.csv")).unwrap())
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run(a.path());
        assert_eq!(ra, run(b.path()));
        assert_eq!(ra.0.len(), 4);
        let lines = String::from_utf8(ra.1).unwrap();
        assert_eq!(lines.lines().count(), 1 + 4 * 3);
    }

    #[test]
    fn zero_learning_rate_leaves_policies() {
        let (mut env, mf) = small_env();
        let mut agent = small_agent(&mf);
        let before = agent.policies.clone();
        let cfg = TrainConfig {
            n: 3,
            episodes: 1,
            lr: 0.0,
            filter_threshold: 1.0,
            ..TrainConfig::for_users(30, 2)
        };
        let s = train(&mut agent, &mut env, &mf, &cfg, None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(agent.policies, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, mf) = small_env();
        let agent = small_agent(&mf);
        let dir = tempfile::tempdir().unwrap();
        agent.save(dir.path()).unwrap();
        let back = Agent::load(dir.path(), agent.encoding).unwrap();
        assert_eq!(back.policies, agent.policies);
        assert_eq!(back.tree, agent.tree);
        assert_eq!(back.sru, agent.sru);
    }

    #[test]
    fn stored_masks_reproduce_log_prob() {
        let (tree, store, _, trace) = sru_trace_fixture(6);
        for st in &trace.steps {
            let lp = path_log_prob(&tree, &store, &st.path, &st.state);
            assert!((lp - st.log_prob).abs() < 1e-12);
        }
    }
}
