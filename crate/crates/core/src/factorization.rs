//! Latent-factor models: the rating MF that supplies user/item embeddings,
//! predicted ratings and the user filter, and the BPR ranker the simulator
//! uses to build recommendation lists.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::dataset::{ItemId, RatingsTable, UserId};
use crate::linalg::{dot, sigmoid, Matrix};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;
/// Row norms above this after training are treated as divergence.
pub const MAX_ROW_NORM: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub fn mf_default(seed: u64) -> Self {
        SgdConfig {
            dim: 32,
            epochs: 50,
            lr: 0.005,
            reg: 0.02,
            seed,
        }
    }

    pub fn bpr_default(seed: u64) -> Self {
        SgdConfig {
            dim: 32,
            epochs: 30,
            lr: 0.01,
            reg: 0.01,
            seed,
        }
    }
}

fn check_finite(what: &str, m: &Matrix, epoch: usize) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::Divergence(format!(
            "{what} has non-finite entries after epoch {epoch}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rating MF
// ---------------------------------------------------------------------------

/// User matrix `U` and item matrix `V` of the rating model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub users: Matrix,
    pub items: Matrix,
    pub config: SgdConfig,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn user(&self, u: UserId) -> &[f64] {
        self.users.row(u as usize)
    }

    pub fn item(&self, i: ItemId) -> &[f64] {
        self.items.row(i as usize)
    }

    pub fn raw_score(&self, u: UserId, i: ItemId) -> f64 {
        dot(self.user(u), self.item(i))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(b"FTMF");
        write_config(&mut w, &self.config);
        w.matrix(&self.users);
        w.matrix(&self.items);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, b"FTMF")?;
        let config = read_config(&mut r)?;
        let users = r.matrix()?;
        let items = r.matrix()?;
        r.finish()?;
        Ok(EmbeddingMatrix {
            users,
            items,
            config,
        })
    }
}

fn write_config(w: &mut Writer, c: &SgdConfig) {
    w.u64(c.dim as u64);
    w.u64(c.epochs as u64);
    w.f64(c.lr);
    w.f64(c.reg);
    w.u64(c.seed);
}

fn read_config(r: &mut Reader) -> Result<SgdConfig> {
    Ok(SgdConfig {
        dim: r.usize()?,
        epochs: r.usize()?,
        lr: r.f64()?,
        reg: r.f64()?,
        seed: r.u64()?,
    })
}

/// Per-entry objective `½(r − u·v)² + ½·reg·(‖u‖² + ‖v‖²)`.
pub fn mf_entry_loss(u: &[f64], v: &[f64], rating: f64, reg: f64) -> f64 {
    let e = rating - dot(u, v);
    0.5 * e * e + 0.5 * reg * (dot(u, u) + dot(v, v))
}

/// Gradient of [`mf_entry_loss`] with respect to `(u, v)`.
pub fn mf_entry_gradient(u: &[f64], v: &[f64], rating: f64, reg: f64) -> (Vec<f64>, Vec<f64>) {
    let e = rating - dot(u, v);
    let gu = u.iter().zip(v).map(|(ui, vi)| -e * vi + reg * ui).collect();
    let gv = v.iter().zip(u).map(|(vi, ui)| -e * ui + reg * vi).collect();
    (gu, gv)
}

fn mf_sgd_step(u: &mut [f64], v: &mut [f64], rating: f64, lr: f64, reg: f64) {
    let e = rating - dot(u, v);
    for (ui, vi) in u.iter_mut().zip(v.iter_mut()) {
        let (a, b) = (*ui, *vi);
        *ui -= lr * (-e * b + reg * a);
        *vi -= lr * (-e * a + reg * b);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MfReport {
    pub train_rmse: Vec<f64>,
}

pub fn rmse(emb: &EmbeddingMatrix, table: &RatingsTable, clamp: bool) -> f64 {
    if table.is_empty() {
        return 0.0;
    }
    let sse: f64 = table
        .rows()
        .iter()
        .map(|r| {
            let p = if clamp {
                predict_rating(emb, r.user, r.item)
            } else {
                emb.raw_score(r.user, r.item)
            };
            (r.rating - p).powi(2)
        })
        .sum();
    (sse / table.len() as f64).sqrt()
}

/// Fit `U Vᵀ` to the observed ratings by SGD over shuffled rows.
pub fn train_mf(table: &RatingsTable, cfg: &SgdConfig) -> Result<(EmbeddingMatrix, MfReport)> {
    if cfg.dim == 0 {
        return Err(Error::invalid("MF dimension must be >= 1"));
    }
    if table.is_empty() {
        return Err(Error::EmptyResult("MF training table is empty".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut users = Matrix::uniform(table.num_users(), cfg.dim, INIT_SCALE, &mut rng);
    let mut items = Matrix::uniform(table.num_items(), cfg.dim, INIT_SCALE, &mut rng);
    let mut order: Vec<usize> = (0..table.len()).collect();
    let mut report = MfReport::default();
    let mut emb;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &r in &order {
            let row = table.row(r);
            let u = users.row_mut(row.user as usize);
            let v = items.row_mut(row.item as usize);
            mf_sgd_step(u, v, row.rating, cfg.lr, cfg.reg);
        }
        check_finite("MF user matrix", &users, epoch)?;
        check_finite("MF item matrix", &items, epoch)?;
        emb = EmbeddingMatrix {
            users,
            items,
            config: *cfg,
        };
        let e = rmse(&emb, table, false);
        log::debug!("mf epoch {epoch}: train rmse {e:.4}");
        report.train_rmse.push(e);
        users = emb.users;
        items = emb.items;
    }
    let norm = users.max_row_norm().max(items.max_row_norm());
    if norm > MAX_ROW_NORM {
        return Err(Error::Divergence(format!("MF row norm {norm} exceeds {MAX_ROW_NORM}")));
    }
    Ok((
        EmbeddingMatrix {
            users,
            items,
            config: *cfg,
        },
        report,
    ))
}

/// `U[user] · V[item]` clamped to the rating scale `[1, 5]`.
pub fn predict_rating(emb: &EmbeddingMatrix, user: UserId, item: ItemId) -> f64 {
    emb.raw_score(user, item).clamp(1.0, 5.0)
}

// ---------------------------------------------------------------------------
// BPR ranker
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BprModel {
    pub users: Matrix,
    pub items: Matrix,
    pub config: SgdConfig,
    pub trained_on_rows: usize,
}

impl BprModel {
    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    #[inline]
    pub fn score(&self, u: UserId, i: ItemId) -> f64 {
        dot(self.users.row(u as usize), self.items.row(i as usize))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(b"FTBP");
        write_config(&mut w, &self.config);
        w.u64(self.trained_on_rows as u64);
        w.matrix(&self.users);
        w.matrix(&self.items);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, b"FTBP")?;
        let config = read_config(&mut r)?;
        let trained_on_rows = r.usize()?;
        let users = r.matrix()?;
        let items = r.matrix()?;
        r.finish()?;
        Ok(BprModel {
            users,
            items,
            config,
            trained_on_rows,
        })
    }

    /// One descent step on `-ln σ(x_uij) + ½·reg·(‖p_u‖² + ‖q_i‖² + ‖q_j‖²)`.
    fn step(&mut self, u: UserId, pos: ItemId, neg: ItemId, lr: f64, reg: f64) {
        let d = self.dim();
        let p = self.users.row(u as usize).to_vec();
        let qi = self.items.row(pos as usize).to_vec();
        let qj = self.items.row(neg as usize).to_vec();
        let x: f64 = (0..d).map(|k| p[k] * (qi[k] - qj[k])).sum();
        let g = sigmoid(-x);
        {
            let pu = self.users.row_mut(u as usize);
            for k in 0..d {
                pu[k] += lr * (g * (qi[k] - qj[k]) - reg * p[k]);
            }
        }
        {
            let q = self.items.row_mut(pos as usize);
            for k in 0..d {
                q[k] += lr * (g * p[k] - reg * qi[k]);
            }
        }
        {
            let q = self.items.row_mut(neg as usize);
            for k in 0..d {
                q[k] += lr * (-g * p[k] - reg * qj[k]);
            }
        }
    }

    /// Warm-start pairwise updates on freshly appended rows.
    ///
    /// Even steps draw their positive from `new_rows`, odd steps from the
    /// rows before it (the historical log), so the refresh does not forget
    /// the rest of the catalog. Negatives are uniform unobserved items.
    pub fn fine_tune(&mut self, table: &RatingsTable, new_rows: Range<usize>, tune: &FineTune, seed: u64) {
        if tune.steps == 0 || new_rows.is_empty() {
            return;
        }
        let mut rng = rng::seeded(seed);
        let history = new_rows.start;
        for step in 0..tune.steps {
            let r = if step % 2 == 1 && history > 0 {
                rng.gen_range(0..history)
            } else {
                rng.gen_range(new_rows.clone())
            };
            let row = *table.row(r);
            if let Some(neg) = sample_negative(table, row.user, &mut rng) {
                self.step(row.user, row.item, neg, tune.lr, tune.reg);
            }
        }
        self.trained_on_rows = table.len();
    }
}

/// Warm-start refresh hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTune {
    pub steps: usize,
    pub lr: f64,
    pub reg: f64,
}

impl Default for FineTune {
    fn default() -> Self {
        FineTune {
            steps: 200,
            lr: 0.01,
            reg: 0.01,
        }
    }
}

/// Uniform item the user has not interacted with; `None` if the user has
/// rated (nearly) everything.
fn sample_negative(table: &RatingsTable, user: UserId, rng: &mut SeededRng) -> Option<ItemId> {
    let n = table.num_items();
    if table.user_degree(user) >= n {
        return None;
    }
    for _ in 0..1000 {
        let j = rng.gen_range(0..n) as ItemId;
        if !table.contains(user, j) {
            return Some(j);
        }
    }
    (0..n as ItemId).find(|&j| !table.contains(user, j))
}

/// Per-triple BPR objective (the quantity each step descends).
pub fn bpr_triple_loss(p: &[f64], qi: &[f64], qj: &[f64], reg: f64) -> f64 {
    let x: f64 = p.iter().zip(qi.iter().zip(qj)).map(|(a, (b, c))| a * (b - c)).sum();
    -sigmoid(x).ln() + 0.5 * reg * (dot(p, p) + dot(qi, qi) + dot(qj, qj))
}

/// Analytic gradient of [`bpr_triple_loss`] with respect to `(p, q_i, q_j)`.
pub fn bpr_triple_gradient(p: &[f64], qi: &[f64], qj: &[f64], reg: f64) -> [Vec<f64>; 3] {
    let x: f64 = p.iter().zip(qi.iter().zip(qj)).map(|(a, (b, c))| a * (b - c)).sum();
    let g = sigmoid(-x);
    let gp = (0..p.len()).map(|k| -g * (qi[k] - qj[k]) + reg * p[k]).collect();
    let gi = (0..p.len()).map(|k| -g * p[k] + reg * qi[k]).collect();
    let gj = (0..p.len()).map(|k| g * p[k] + reg * qj[k]).collect();
    [gp, gi, gj]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BprReport {
    /// AUC over a fixed-size sample of (user, observed, unobserved) triples.
    pub sampled_auc: Vec<f64>,
}

const AUC_SAMPLES: usize = 2000;

/// Fraction of sampled (u, i⁺, i⁻) triples ordered correctly; ties count ½.
pub fn sampled_auc(model: &BprModel, table: &RatingsTable, samples: usize, rng: &mut SeededRng) -> f64 {
    let mut hits = 0.0;
    let mut n = 0usize;
    for _ in 0..samples {
        let row = *table.row(rng.gen_range(0..table.len()));
        let Some(neg) = sample_negative(table, row.user, rng) else {
            continue;
        };
        let (a, b) = (model.score(row.user, row.item), model.score(row.user, neg));
        hits += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
        n += 1;
    }
    if n == 0 {
        0.5
    } else {
        hits / n as f64
    }
}

/// Standard pairwise BPR: each epoch draws `|rows|` (u, i⁺, i⁻) triples.
pub fn train_bpr(table: &RatingsTable, cfg: &SgdConfig) -> Result<(BprModel, BprReport)> {
    if cfg.dim == 0 {
        return Err(Error::invalid("BPR dimension must be >= 1"));
    }
    if table.is_empty() {
        return Err(Error::EmptyResult("BPR training table is empty".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut model = BprModel {
        users: Matrix::uniform(table.num_users(), cfg.dim, INIT_SCALE, &mut rng),
        items: Matrix::uniform(table.num_items(), cfg.dim, INIT_SCALE, &mut rng),
        config: *cfg,
        trained_on_rows: table.len(),
    };
    let mut report = BprReport::default();
    let mut auc_rng = rng::seeded(rng::derive(cfg.seed, rng::stream::EVAL));
    for epoch in 0..cfg.epochs {
        for _ in 0..table.len() {
            let row = *table.row(rng.gen_range(0..table.len()));
            if let Some(neg) = sample_negative(table, row.user, &mut rng) {
                model.step(row.user, row.item, neg, cfg.lr, cfg.reg);
            }
        }
        check_finite("BPR user matrix", &model.users, epoch)?;
        check_finite("BPR item matrix", &model.items, epoch)?;
        let auc = sampled_auc(&model, table, AUC_SAMPLES, &mut auc_rng);
        log::debug!("bpr epoch {epoch}: sampled auc {auc:.4}");
        report.sampled_auc.push(auc);
    }
    Ok((model, report))
}

/// Functional form of [`BprModel::fine_tune`].
pub fn fine_tune_bpr(
    model: &BprModel,
    table: &RatingsTable,
    new_rows: Range<usize>,
    tune: &FineTune,
    seed: u64,
) -> Result<BprModel> {
    if new_rows.is_empty() && tune.steps > 0 {
        return Err(Error::invalid("fine-tune needs at least one new row"));
    }
    if new_rows.end > table.len() {
        return Err(Error::invalid("new_rows extends past the table"));
    }
    let mut out = model.clone();
    out.fine_tune(table, new_rows, tune, seed);
    if !out.users.is_finite() || !out.items.is_finite() {
        return Err(Error::Divergence("BPR fine-tune produced non-finite entries".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;

    fn emb(u: &[f64], v: &[f64]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            users: Matrix::from_rows(&[u.to_vec()]),
            items: Matrix::from_rows(&[v.to_vec()]),
            config: SgdConfig::mf_default(0),
        }
    }

    #[test]
    fn predict_rating_clamps() {
        assert_eq!(predict_rating(&emb(&[2.0], &[2.0]), 0, 0), 4.0);
        assert_eq!(predict_rating(&emb(&[3.0], &[3.0]), 0, 0), 5.0);
        assert_eq!(predict_rating(&emb(&[0.0, 0.0], &[0.0, 0.0]), 0, 0), 1.0);
    }

    #[test]
    fn rank_one_matrix_is_fit() {
        let t = RatingsTable::from_interactions(
            2,
            2,
            [(0, 0, 4.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]
                .map(|(u, i, r)| Interaction::new(u, i, r)),
        )
        .unwrap();
        let cfg = SgdConfig {
            dim: 1,
            epochs: 3000,
            lr: 0.02,
            reg: 0.0,
            seed: 3,
        };
        let (_, report) = train_mf(&t, &cfg).unwrap();
        assert!(*report.train_rmse.last().unwrap() < 0.01, "{:?}", report.train_rmse.last());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let t = RatingsTable::from_interactions(3, 4, [Interaction::new(0, 1, 3.0)]).unwrap();
        let cfg = SgdConfig { epochs: 0, ..SgdConfig::mf_default(11) };
        let (e, report) = train_mf(&t, &cfg).unwrap();
        assert!(report.train_rmse.is_empty());
        let mut rng = rng::seeded(11);
        assert_eq!(e.users, Matrix::uniform(3, 32, INIT_SCALE, &mut rng));
        assert_eq!(e.items, Matrix::uniform(4, 32, INIT_SCALE, &mut rng));
    }

    #[test]
    fn divergence_is_reported() {
        let t = RatingsTable::from_interactions(
            2,
            2,
            [(0, 0, 5.0), (0, 1, 5.0), (1, 0, 5.0), (1, 1, 1.0)].map(|(u, i, r)| Interaction::new(u, i, r)),
        )
        .unwrap();
        let cfg = SgdConfig { dim: 4, epochs: 50, lr: 50.0, reg: 0.0, seed: 1 };
        assert!(matches!(train_mf(&t, &cfg), Err(Error::Divergence(_))));
    }

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|k| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += h;
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn mf_gradient_matches_finite_differences() {
        let mut rng = rng::seeded(42);
        for _ in 0..20 {
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = rng.gen_range(1.0..5.0);
            let (gu, gv) = mf_entry_gradient(&u, &v, r, 0.05);
            let fu = finite_diff(|x| mf_entry_loss(x, &v, r, 0.05), &u);
            let fv = finite_diff(|x| mf_entry_loss(&u, x, r, 0.05), &v);
            assert!(rel_err(&gu, &fu) < 1e-5);
            assert!(rel_err(&gv, &fv) < 1e-5);
        }
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let mut rng = rng::seeded(43);
        for _ in 0..20 {
            let mk = |rng: &mut SeededRng| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (p, qi, qj) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let [gp, gi, gj] = bpr_triple_gradient(&p, &qi, &qj, 0.01);
            assert!(rel_err(&gp, &finite_diff(|x| bpr_triple_loss(x, &qi, &qj, 0.01), &p)) < 1e-5);
            assert!(rel_err(&gi, &finite_diff(|x| bpr_triple_loss(&p, x, &qj, 0.01), &qi)) < 1e-5);
            assert!(rel_err(&gj, &finite_diff(|x| bpr_triple_loss(&p, &qi, x, 0.01), &qj)) < 1e-5);
        }
    }

    #[test]
    fn bpr_step_descends_the_checked_gradient() {
        let mut rng = rng::seeded(5);
        let mut m = BprModel {
            users: Matrix::uniform(1, 4, 0.5, &mut rng),
            items: Matrix::uniform(2, 4, 0.5, &mut rng),
            config: SgdConfig::bpr_default(0),
            trained_on_rows: 0,
        };
        let (p, qi, qj) = (m.users.row(0).to_vec(), m.items.row(0).to_vec(), m.items.row(1).to_vec());
        let [gp, gi, gj] = bpr_triple_gradient(&p, &qi, &qj, 0.01);
        m.step(0, 0, 1, 0.1, 0.01);
        for k in 0..4 {
            assert!((m.users.get(0, k) - (p[k] - 0.1 * gp[k])).abs() < 1e-15);
            assert!((m.items.get(0, k) - (qi[k] - 0.1 * gi[k])).abs() < 1e-15);
            assert!((m.items.get(1, k) - (qj[k] - 0.1 * gj[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn bpr_orders_seen_above_unseen() {
        let t = RatingsTable::from_interactions(1, 2, [Interaction::new(0, 0, 4.0)]).unwrap();
        let cfg = SgdConfig { epochs: 500, ..SgdConfig::bpr_default(8) };
        let (m, _) = train_bpr(&t, &cfg).unwrap();
        assert!(m.score(0, 0) > m.score(0, 1));
    }

    #[test]
    fn fine_tune_zero_steps_is_identity_and_positive_pair_rises() {
        let rows: Vec<_> = (0..4u32).flat_map(|u| (0..3u32).map(move |i| Interaction::new(u, (u + i) % 6, 4.0))).collect();
        let mut t = RatingsTable::from_interactions(4, 6, rows).unwrap();
        let (m, _) = train_bpr(&t, &SgdConfig { epochs: 5, ..SgdConfig::bpr_default(1) }).unwrap();
        let start = t.len();
        t.append(Interaction::new(0, 5, 4.0)).unwrap();
        let zero = FineTune { steps: 0, ..FineTune::default() };
        assert_eq!(fine_tune_bpr(&m, &t, start..t.len(), &zero, 3).unwrap(), m);
        let tuned = fine_tune_bpr(&m, &t, start..t.len(), &FineTune { steps: 400, lr: 0.05, reg: 0.0 }, 3).unwrap();
        assert!(tuned.score(0, 5) > m.score(0, 5));
        let again = fine_tune_bpr(&m, &t, start..t.len(), &FineTune { steps: 400, lr: 0.05, reg: 0.0 }, 3).unwrap();
        assert_eq!(again, tuned);
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = RatingsTable::from_interactions(3, 3, [Interaction::new(0, 1, 4.0), Interaction::new(2, 2, 1.0)]).unwrap();
        let (e, _) = train_mf(&t, &SgdConfig { epochs: 2, dim: 3, ..SgdConfig::mf_default(1) }).unwrap();
        e.save(&dir.path().join("mf.bin")).unwrap();
        assert_eq!(EmbeddingMatrix::load(&dir.path().join("mf.bin")).unwrap(), e);
        let (b, _) = train_bpr(&t, &SgdConfig { epochs: 2, dim: 3, ..SgdConfig::bpr_default(1) }).unwrap();
        b.save(&dir.path().join("bpr.bin")).unwrap();
        assert_eq!(BprModel::load(&dir.path().join("bpr.bin")).unwrap(), b);
        assert!(BprModel::load(&dir.path().join("mf.bin")).is_err());
    }
}
