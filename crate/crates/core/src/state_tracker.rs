//! MDP state construction: reward bucketing, input concatenation and the SRU
//! recurrence whose output vector is the agent's state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::linalg::{sigmoid, Matrix};
use crate::rng;
use crate::{Error, Result};

/// Linear bucketing of a scalar reward into `buckets` one-hot slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardEncoding {
    pub buckets: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl RewardEncoding {
    pub fn new(buckets: usize, r_min: f64, r_max: f64) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::invalid("reward encoding needs at least one bucket"));
        }
        if !(r_max > r_min) {
            return Err(Error::invalid(format!(
                "reward range ({r_min}, {r_max}] is empty"
            )));
        }
        Ok(RewardEncoding {
            buckets,
            r_min,
            r_max,
        })
    }

    /// 1-based bucket `h − ⌊h·(r_max − r)/(r_max − r_min)⌋`, clamped to `[1, h]`.
    pub fn bucket(&self, r: f64) -> usize {
        let h = self.buckets as f64;
        let raw = h - (h * (self.r_max - r) / (self.r_max - self.r_min)).floor();
        if raw.is_nan() {
            return 1;
        }
        raw.clamp(1.0, h) as usize
    }

    pub fn encode(&self, r: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.buckets];
        v[self.bucket(r) - 1] = 1.0;
        v
    }
}

/// Free-function form of [`RewardEncoding::encode`].
pub fn encode_reward(enc: &RewardEncoding, r: f64) -> Vec<f64> {
    enc.encode(r)
}

/// `x_t = (e_u, e_r)`: user embedding first, reward one-hot second.
pub fn make_input(user_emb: &[f64], reward_onehot: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(user_emb.len() + reward_onehot.len());
    x.extend_from_slice(user_emb);
    x.extend_from_slice(reward_onehot);
    x
}

/// SRU cell weights. Square: the highway term mixes `c` with `x` elementwise,
/// so the state width equals the input width.
#[derive(Debug, Clone, PartialEq)]
pub struct SruParams {
    pub w: Matrix,
    pub w_f: Matrix,
    pub w_g: Matrix,
    pub b_f: Vec<f64>,
    pub b_g: Vec<f64>,
}

/// Recurrent state; `h` is the MDP state vector `s_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SruState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl SruParams {
    pub fn zeros(dim: usize) -> Self {
        SruParams {
            w: Matrix::zeros(dim, dim),
            w_f: Matrix::zeros(dim, dim),
            w_g: Matrix::zeros(dim, dim),
            b_f: vec![0.0; dim],
            b_g: vec![0.0; dim],
        }
    }

    /// Uniform `[-scale, scale]` weights and biases.
    pub fn random(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let w = Matrix::uniform(dim, dim, scale, &mut rng);
        let w_f = Matrix::uniform(dim, dim, scale, &mut rng);
        let w_g = Matrix::uniform(dim, dim, scale, &mut rng);
        let b_f = Matrix::uniform(1, dim, scale, &mut rng).as_slice().to_vec();
        let b_g = Matrix::uniform(1, dim, scale, &mut rng).as_slice().to_vec();
        SruParams {
            w,
            w_f,
            w_g,
            b_f,
            b_g,
        }
    }

    pub fn dim(&self) -> usize {
        self.b_f.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self.w_f.is_finite()
            && self.w_g.is_finite()
            && self.b_f.iter().chain(&self.b_g).all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(b"FTSR");
        w.matrix(&self.w);
        w.matrix(&self.w_f);
        w.matrix(&self.w_g);
        w.f64s(&self.b_f);
        w.f64s(&self.b_g);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, b"FTSR")?;
        let p = SruParams {
            w: r.matrix()?,
            w_f: r.matrix()?,
            w_g: r.matrix()?,
            b_f: r.f64s()?,
            b_g: r.f64s()?,
        };
        r.finish()?;
        Ok(p)
    }
}

/// Intermediate values of one SRU step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct SruTrace {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn sru_forward(params: &SruParams, state: &SruState, x: &[f64]) -> Result<(SruState, SruTrace)> {
    let d = params.dim();
    if x.len() != d || state.c.len() != d {
        return Err(Error::invalid(format!(
            "SRU dimension mismatch: params {d}, input {}, state {}",
            x.len(),
            state.c.len()
        )));
    }
    let x_tilde = params.w.matvec(x);
    let zf = params.w_f.matvec(x);
    let zg = params.w_g.matvec(x);
    let mut f = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut h = vec![0.0; d];
    for k in 0..d {
        f[k] = sigmoid(zf[k] + params.b_f[k]);
        g[k] = sigmoid(zg[k] + params.b_g[k]);
        c[k] = f[k] * state.c[k] + (1.0 - f[k]) * x_tilde[k];
        h[k] = g[k] * c[k].tanh() + (1.0 - g[k]) * x[k];
    }
    if c.iter().chain(&h).any(|v| !v.is_finite()) {
        return Err(Error::Divergence("SRU produced a non-finite state".into()));
    }
    let next = SruState { c: c.clone(), h };
    let trace = SruTrace {
        x: x.to_vec(),
        x_tilde,
        f,
        g,
        c_prev: state.c.clone(),
        c,
    };
    Ok((next, trace))
}

/// One SRU update `(c_{t-1}, x_t) → (c_t, h_t)`.
pub fn sru_step(params: &SruParams, state: &SruState, x: &[f64]) -> Result<SruState> {
    sru_forward(params, state, x).map(|(s, _)| s)
}

/// `s_1`: mean of the promoted items' embeddings, zero-padded to the state
/// width; the internal state starts at zero.
pub fn init_state(item_embs: &[&[f64]], state_dim: usize) -> Result<SruState> {
    let first = item_embs
        .first()
        .ok_or_else(|| Error::invalid("initial state needs at least one item embedding"))?;
    let d = first.len();
    if d > state_dim || item_embs.iter().any(|e| e.len() != d) {
        return Err(Error::invalid("item embedding width mismatch"));
    }
    let mut h = vec![0.0; state_dim];
    for e in item_embs {
        for (hk, ek) in h.iter_mut().zip(e.iter()) {
            *hk += ek;
        }
    }
    let n = item_embs.len() as f64;
    for hk in h.iter_mut().take(d) {
        *hk /= n;
    }
    Ok(SruState {
        c: vec![0.0; state_dim],
        h,
    })
}

/// Gradient accumulator with the same shape as [`SruParams`].
#[derive(Debug, Clone)]
pub struct SruGrad(pub SruParams);

impl SruGrad {
    pub fn zeros(dim: usize) -> Self {
        SruGrad(SruParams::zeros(dim))
    }
}

/// Backpropagate one step.
///
/// Given `dh` (loss gradient w.r.t. this step's `h_t`) and `dc_next` (w.r.t.
/// `c_t` flowing back from later steps), accumulate parameter gradients and
/// return the gradient w.r.t. `c_{t-1}`. The input `x_t` is data (user
/// embedding and reward code), so no gradient is returned for it.
pub fn sru_backward(params: &SruParams, tr: &SruTrace, dh: &[f64], dc_next: &[f64], grad: &mut SruGrad) -> Vec<f64> {
    let d = params.dim();
    let mut dc_prev = vec![0.0; d];
    let mut dzf = vec![0.0; d];
    let mut dzg = vec![0.0; d];
    let mut dxt = vec![0.0; d];
    for k in 0..d {
        let tc = tr.c[k].tanh();
        let dc = dc_next[k] + dh[k] * tr.g[k] * (1.0 - tc * tc);
        let dg = dh[k] * (tc - tr.x[k]);
        let df = dc * (tr.c_prev[k] - tr.x_tilde[k]);
        dzf[k] = df * tr.f[k] * (1.0 - tr.f[k]);
        dzg[k] = dg * tr.g[k] * (1.0 - tr.g[k]);
        dxt[k] = dc * (1.0 - tr.f[k]);
        dc_prev[k] = dc * tr.f[k];
    }
    let g = &mut grad.0;
    for r in 0..d {
        for c in 0..d {
            let xc = tr.x[c];
            let i = r * d + c;
            g.w.as_mut_slice()[i] += dxt[r] * xc;
            g.w_f.as_mut_slice()[i] += dzf[r] * xc;
            g.w_g.as_mut_slice()[i] += dzg[r] * xc;
        }
        g.b_f[r] += dzf[r];
        g.b_g[r] += dzg[r];
    }
    dc_prev
}

impl SruParams {
    /// `self += alpha * grad`
    pub fn add_scaled(&mut self, alpha: f64, grad: &SruGrad) {
        let g = &grad.0;
        for (a, b) in [
            (&mut self.w, &g.w),
            (&mut self.w_f, &g.w_f),
            (&mut self.w_g, &g.w_g),
        ] {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += alpha * y;
            }
        }
        for (x, y) in self.b_f.iter_mut().zip(&g.b_f) {
            *x += alpha * y;
        }
        for (x, y) in self.b_g.iter_mut().zip(&g.b_g) {
            *x += alpha * y;
        }
    }
}
