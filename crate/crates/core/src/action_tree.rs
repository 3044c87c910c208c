//! Balanced c-ary clustering tree over users.
//!
//! Leaves are users; each internal node owns a policy over its children.
//! Selecting a user is a root-to-leaf walk, so one decision costs `depth`
//! policy evaluations of at most `arity` outputs instead of one over |U|.

use std::collections::VecDeque;
use std::path::Path as FsPath;

use rand::Rng;

use crate::agent::{policy_forward, PolicyStore};
use crate::binio::{Reader, Writer};
use crate::dataset::UserId;
use crate::linalg::{dot, Matrix};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

/// Power-iteration steps used for every split.
pub const PCA_ITERATIONS: usize = 100;

/// Smallest `c` with `c^depth >= num_users`, i.e. `⌈|U|^(1/d)⌉` without
/// floating-point boundary errors.
pub fn compute_arity(num_users: usize, depth: usize) -> usize {
    assert!(depth >= 1 && num_users >= 1, "arity needs depth >= 1 and users >= 1");
    let covers = |c: usize| -> bool {
        let mut acc: u128 = 1;
        for _ in 0..depth {
            acc = acc.saturating_mul(c as u128);
            if acc >= num_users as u128 {
                return true;
            }
        }
        acc >= num_users as u128
    };
    let guess = (num_users as f64).powf(1.0 / depth as f64).floor() as usize;
    let mut c = guess.saturating_sub(1).max(1);
    while !covers(c) {
        c += 1;
    }
    while c > 1 && covers(c - 1) {
        c -= 1;
    }
    c
}

/// Upper bound `(c^d − 1)/(c − 1)` on internal nodes; `d` for a unary chain.
pub fn count_nonleaf(arity: usize, depth: usize) -> usize {
    if arity <= 1 {
        return depth;
    }
    let mut total = 0usize;
    let mut layer = 1usize;
    for _ in 0..depth {
        total += layer;
        layer *= arity;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub leaf_user: Option<UserId>,
    /// Index into the [`PolicyStore`] for internal nodes.
    pub policy: Option<usize>,
    /// Available leaves in this subtree.
    pub avail: usize,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.leaf_user.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    nodes: Vec<Node>,
    depth: usize,
    arity: usize,
    seed: u64,
    leaf_of_user: Vec<usize>,
}

/// One choice made at an internal node, with the child availability mask in
/// force when it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub node: usize,
    pub choice: usize,
    pub mask: Vec<bool>,
}

/// Root-to-leaf walk. `choices()` are 0-based child positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub decisions: Vec<Decision>,
    pub leaf: UserId,
}

impl Path {
    pub fn choices(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.choice).collect()
    }
}

/// First principal direction of the rows in `idx` (centered), by power
/// iteration from a seeded start, with its first nonzero entry made positive.
fn principal_direction(points: &Matrix, idx: &[usize], rng: &mut SeededRng) -> Vec<f64> {
    let d = points.cols();
    let mut mean = vec![0.0; d];
    for &i in idx {
        for (m, x) in mean.iter_mut().zip(points.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= idx.len() as f64;
    }
    let centered: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| points.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n0 = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..PCA_ITERATIONS {
        let mut w = vec![0.0; d];
        for row in &centered {
            let p = dot(row, &v);
            for (wk, rk) in w.iter_mut().zip(row) {
                *wk += p * rk;
            }
        }
        let n = dot(&w, &w).sqrt();
        if n == 0.0 || !n.is_finite() {
            break;
        }
        v = w.into_iter().map(|x| x / n).collect();
    }
    if let Some(&first) = v.iter().find(|x| **x != 0.0) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Split `len` items into `parts` contiguous blocks whose sizes differ by at
/// most one (larger blocks first); empty blocks are dropped.
fn block_sizes(len: usize, parts: usize) -> Vec<usize> {
    let base = len / parts;
    let extra = len % parts;
    (0..parts)
        .map(|b| base + usize::from(b < extra))
        .filter(|&s| s > 0)
        .collect()
}

impl ClusterTree {
    /// Divisive construction: project each node's users on their first
    /// principal component, sort, cut into `c` near-equal contiguous blocks
    /// and recurse until every block is a single user.
    pub fn build(user_embs: &Matrix, depth: usize, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("tree depth must be >= 1"));
        }
        let n = user_embs.rows();
        if n == 0 {
            return Err(Error::invalid("cannot build a tree over zero users"));
        }
        let arity = compute_arity(n, depth);
        let mut rng = rng::seeded(seed);
        let mut nodes: Vec<Node> = Vec::new();
        let mut leaf_of_user = vec![usize::MAX; n];
        let mut next_policy = 0usize;
        let mut queue: VecDeque<(usize, Vec<usize>)> = VecDeque::new();
        nodes.push(Node {
            children: Vec::new(),
            parent: None,
            leaf_user: None,
            policy: None,
            avail: n,
        });
        queue.push_back((0, (0..n).collect()));
        while let Some((id, users)) = queue.pop_front() {
            if users.len() == 1 {
                nodes[id].leaf_user = Some(users[0] as UserId);
                leaf_of_user[users[0]] = id;
                continue;
            }
            nodes[id].policy = Some(next_policy);
            next_policy += 1;
            let dir = principal_direction(user_embs, &users, &mut rng);
            let mut keyed: Vec<(f64, usize)> = users
                .iter()
                .map(|&u| (dot(user_embs.row(u), &dir), u))
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut offset = 0;
            for size in block_sizes(keyed.len(), arity) {
                let block: Vec<usize> = keyed[offset..offset + size].iter().map(|k| k.1).collect();
                offset += size;
                let child = nodes.len();
                nodes.push(Node {
                    children: Vec::new(),
                    parent: Some(id),
                    leaf_user: None,
                    policy: None,
                    avail: block.len(),
                });
                nodes[id].children.push(child);
                queue.push_back((child, block));
            }
        }
        let tree = ClusterTree {
            nodes,
            depth,
            arity,
            seed,
            leaf_of_user,
        };
        debug_assert!(tree.audit().is_ok(), "{:?}", tree.audit());
        Ok(tree)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_users(&self) -> usize {
        self.leaf_of_user.len()
    }

    pub fn num_internal(&self) -> usize {
        self.nodes.iter().filter(|n| n.policy.is_some()).count()
    }

    pub fn leaf_of(&self, user: UserId) -> usize {
        self.leaf_of_user[user as usize]
    }

    /// Child counts of the internal nodes in policy-id order.
    pub fn policy_shapes(&self) -> Vec<usize> {
        let mut shapes = vec![0; self.num_internal()];
        for n in &self.nodes {
            if let Some(p) = n.policy {
                shapes[p] = n.children.len();
            }
        }
        shapes
    }

    pub fn height(&self) -> usize {
        self.subtree_height(0)
    }

    fn subtree_height(&self, id: usize) -> usize {
        self.nodes[id]
            .children
            .iter()
            .map(|&c| 1 + self.subtree_height(c))
            .max()
            .unwrap_or(0)
    }

    pub fn is_available(&self, user: UserId) -> bool {
        self.nodes[self.leaf_of(user)].avail == 1
    }

    pub fn available_count(&self) -> usize {
        self.nodes[0].avail
    }

    /// Flip one leaf's availability and update counters up to the root.
    /// Idempotent.
    pub fn set_available(&mut self, user: UserId, available: bool) {
        let leaf = self.leaf_of(user);
        let now = self.nodes[leaf].avail == 1;
        if now == available {
            return;
        }
        let mut cur = Some(leaf);
        while let Some(id) = cur {
            let node = &mut self.nodes[id];
            if available {
                node.avail += 1;
            } else {
                node.avail -= 1;
            }
            cur = node.parent;
        }
    }

    pub fn reset_availability(&mut self) {
        fn fill(nodes: &mut [Node], id: usize) -> usize {
            let count = if nodes[id].is_leaf() {
                1
            } else {
                let children = nodes[id].children.clone();
                children.into_iter().map(|c| fill(nodes, c)).sum()
            };
            nodes[id].avail = count;
            count
        }
        fill(&mut self.nodes, 0);
    }

    fn child_mask(&self, id: usize) -> Vec<bool> {
        self.nodes[id]
            .children
            .iter()
            .map(|&c| self.nodes[c].avail > 0)
            .collect()
    }

    /// Masked, renormalized child distribution at an internal node.
    pub fn masked_probs(&self, policies: &PolicyStore, id: usize, state: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let node = &self.nodes[id];
        let policy = &policies.nodes[node.policy.expect("internal node")];
        let mask = self.child_mask(id);
        (renormalize(&policy_forward(policy, state), &mask), mask)
    }

    /// Walk from the root sampling each node's masked distribution. Returns
    /// the path and the summed log-probability of the choices actually made.
    pub fn sample_path(&self, policies: &PolicyStore, state: &[f64], rng: &mut SeededRng) -> Result<(Path, f64)> {
        if self.available_count() == 0 {
            return Err(Error::ActionSpaceExhausted);
        }
        let mut id = 0;
        let mut decisions = Vec::with_capacity(self.depth);
        let mut log_prob = 0.0;
        while !self.nodes[id].is_leaf() {
            let (probs, mask) = self.masked_probs(policies, id, state);
            let choice = sample_index(&probs, &mask, rng);
            log_prob += probs[choice].ln();
            decisions.push(Decision {
                node: id,
                choice,
                mask,
            });
            id = self.nodes[id].children[choice];
        }
        let leaf = self.nodes[id].leaf_user.expect("leaf");
        Ok((Path { decisions, leaf }, log_prob))
    }

    /// Exact selection probability of every user (zero when unavailable).
    pub fn leaf_probabilities(&self, policies: &PolicyStore, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_users()];
        let mut stack = vec![(0usize, 1.0f64)];
        while let Some((id, p)) = stack.pop() {
            let node = &self.nodes[id];
            if let Some(u) = node.leaf_user {
                if node.avail == 1 {
                    out[u as usize] = p;
                }
                continue;
            }
            if node.avail == 0 {
                continue;
            }
            let (probs, _) = self.masked_probs(policies, id, state);
            for (&c, q) in node.children.iter().zip(probs) {
                if q > 0.0 {
                    stack.push((c, p * q));
                }
            }
        }
        out
    }

    /// Check every structural invariant; returns the first violation.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let n = self.num_users();
        let mut seen = vec![false; n];
        for (id, node) in self.nodes.iter().enumerate() {
            match node.leaf_user {
                Some(u) => {
                    if !node.children.is_empty() || node.policy.is_some() {
                        return Err(format!("leaf {id} has children or a policy"));
                    }
                    let u = u as usize;
                    if u >= n || seen[u] || self.leaf_of_user[u] != id {
                        return Err(format!("leaf {id} breaks the user bijection"));
                    }
                    seen[u] = true;
                    if node.avail > 1 {
                        return Err(format!("leaf {id} avail {}", node.avail));
                    }
                }
                None => {
                    let k = node.children.len();
                    if k == 0 || k > self.arity {
                        return Err(format!("node {id} has {k} children (arity {})", self.arity));
                    }
                    if node.policy.is_none() {
                        return Err(format!("internal node {id} lacks a policy"));
                    }
                    let hs: Vec<usize> = node.children.iter().map(|&c| self.subtree_height(c)).collect();
                    let (lo, hi) = (hs.iter().min().unwrap(), hs.iter().max().unwrap());
                    if hi - lo > 1 {
                        return Err(format!("node {id} child heights {hs:?} differ by more than one"));
                    }
                    let sum: usize = node.children.iter().map(|&c| self.nodes[c].avail).sum();
                    if sum != node.avail {
                        return Err(format!("node {id} avail {} != children sum {sum}", node.avail));
                    }
                    for &c in &node.children {
                        if self.nodes[c].parent != Some(id) {
                            return Err(format!("child {c} of {id} has wrong parent"));
                        }
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("some user has no leaf".into());
        }
        if self.height() > self.depth {
            return Err(format!("height {} exceeds depth {}", self.height(), self.depth));
        }
        let internal = self.num_internal();
        if internal > count_nonleaf(self.arity, self.depth) {
            return Err(format!("{internal} internal nodes exceed bound"));
        }
        Ok(())
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let mut w = Writer::new(b"FTTR");
        w.u64(self.arity as u64);
        w.u64(self.depth as u64);
        w.u64(self.seed);
        w.u64(self.num_users() as u64);
        w.u64(self.nodes.len() as u64);
        for node in &self.nodes {
            w.u64(node.leaf_user.map_or(u64::MAX, u64::from));
            w.u64(node.policy.map_or(u64::MAX, |p| p as u64));
            w.u64(node.children.len() as u64);
            for &c in &node.children {
                w.u64(c as u64);
            }
        }
        w.save(path)
    }

    /// Load a saved tree; every leaf starts available.
    pub fn load(path: &FsPath) -> Result<Self> {
        let mut r = Reader::open(path, b"FTTR")?;
        let arity = r.usize()?;
        let depth = r.usize()?;
        let seed = r.u64()?;
        let num_users = r.usize()?;
        let count = r.usize()?;
        let mut nodes = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let leaf = r.u64()?;
            let policy = r.u64()?;
            let k = r.usize()?;
            let children = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            nodes.push(Node {
                children,
                parent: None,
                leaf_user: (leaf != u64::MAX).then_some(leaf as UserId),
                policy: (policy != u64::MAX).then_some(policy as usize),
                avail: 0,
            });
        }
        r.finish()?;
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: m.to_string(),
        };
        let mut leaf_of_user = vec![usize::MAX; num_users];
        for id in 0..nodes.len() {
            for c in nodes[id].children.clone() {
                if c >= nodes.len() {
                    return Err(bad("child index out of range"));
                }
                nodes[c].parent = Some(id);
            }
            if let Some(u) = nodes[id].leaf_user {
                *leaf_of_user
                    .get_mut(u as usize)
                    .ok_or_else(|| bad("leaf user out of range"))? = id;
            }
        }
        let mut tree = ClusterTree {
            nodes,
            depth,
            arity,
            seed,
            leaf_of_user,
        };
        tree.reset_availability();
        tree.audit().map_err(|e| bad(&e))?;
        Ok(tree)
    }
}

/// Zero masked-out entries and rescale the rest to sum to one.
pub fn renormalize(probs: &[f64], mask: &[bool]) -> Vec<f64> {
    let z: f64 = probs.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m { p / z } else { 0.0 })
        .collect()
}

fn sample_index(probs: &[f64], mask: &[bool], rng: &mut SeededRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m || p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    last.expect("at least one available child")
}
