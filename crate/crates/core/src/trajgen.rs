//! Sequential latent-variable model for trajectory augmentation.
//!
//! Generative side: `z_0 ~ N(0, I)`, a recurrent latent transition
//! `p(z_t | z_{t−1}, a_{t−1})`, a categorical state decoder `p(s_t | z_t)` and
//! a Gaussian reward decoder `p(r_{t−1} | z_t)`. Inference side: an initial
//! encoder `q(z_0 | s_0)` and a recurrent encoder `q(z_t | z_{t−1}, a_{t−1}, s_t)`.
//! Both recurrent cells are single-layer tanh cells; one-hot inputs enter
//! as embedding lookups. Gradients of the single-sample reparameterized
//! ELBO are computed by hand and checked against finite differences.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::Trajectory;
use crate::policy::TabularPolicy;
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum TrajGenError {
    #[error("empty training batch")]
    EmptyBatch,

    #[error("participant {participant}: state {state} or action {action} outside the model's spaces")]
    OutOfRange { participant: u64, state: usize, action: usize },

    #[error("non-finite ELBO term: {0}")]
    NonFinite(&'static str),

    #[error("training diverged at iteration {iteration} (last finite ELBO {last_finite})")]
    Diverged { iteration: usize, last_finite: f64 },

    #[error("invalid training config: {0}")]
    Config(String),

    #[error("checkpoint has {got} parameters, shape requires {expected}")]
    Checkpoint { expected: usize, got: usize },
}

// ── Shapes and parameter layout ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl VaeShape {
    /// Hidden 64, latent 8.
    pub fn for_spaces(n_states: usize, n_actions: usize) -> Self {
        VaeShape { n_states, n_actions, hidden: 64, latent: 8 }
    }

    /// Under a thousand parameters; used for gradient checks.
    pub fn small() -> Self {
        VaeShape { n_states: 6, n_actions: 3, hidden: 6, latent: 3 }
    }
}

/// Offsets of every parameter block in the flat vector. Matrices are
/// row-major with rows = outputs; embeddings are `rows = categories`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    e0: usize,
    b0: usize,
    wm0: usize,
    cm0: usize,
    wv0: usize,
    cv0: usize,
    uq: usize,
    vq: usize,
    aq: usize,
    sq: usize,
    bq: usize,
    wmq: usize,
    cmq: usize,
    wvq: usize,
    cvq: usize,
    up: usize,
    vp: usize,
    ap: usize,
    bp: usize,
    wmp: usize,
    cmp: usize,
    wvp: usize,
    cvp: usize,
    ws: usize,
    bs: usize,
    wr: usize,
    br: usize,
    wrv: usize,
    brv: usize,
    total: usize,
}

impl Layout {
    fn new(s: &VaeShape) -> Self {
        let (ns, na, h, z) = (s.n_states, s.n_actions, s.hidden, s.latent);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let l = Layout {
            e0: take(ns * h),
            b0: take(h),
            wm0: take(z * h),
            cm0: take(z),
            wv0: take(z * h),
            cv0: take(z),
            uq: take(h * h),
            vq: take(h * z),
            aq: take(na * h),
            sq: take(ns * h),
            bq: take(h),
            wmq: take(z * h),
            cmq: take(z),
            wvq: take(z * h),
            cvq: take(z),
            up: take(h * h),
            vp: take(h * z),
            ap: take(na * h),
            bp: take(h),
            wmp: take(z * h),
            cmp: take(z),
            wvp: take(z * h),
            cvp: take(z),
            ws: take(ns * z),
            bs: take(ns),
            wr: take(z),
            br: take(1),
            wrv: take(z),
            brv: take(1),
            total: 0,
        };
        Layout { total: at, ..l }
    }
}

// ── Small dense helpers ─────────────────────────────────────────────────

/// `y = W x + b` for `W` of shape `rows × cols`.
fn affine(p: &[f64], w: usize, b: usize, rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    p[w..w + rows * cols].chunks_exact(cols).zip(&p[b..b + rows]).map(|(row, bias)| bias + dot(row, x)).collect()
}

/// Dot product with independent partial sums, so the additions pipeline
/// instead of forming one dependency chain.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += W x`.
fn add_matvec(p: &[f64], w: usize, rows: usize, x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (row, yr) in p[w..w + rows * cols].chunks_exact(cols).zip(y.iter_mut()) {
        *yr += dot(row, x);
    }
}

fn add_into(g: &mut [f64], at: usize, v: &[f64]) {
    g[at..at + v.len()].iter_mut().zip(v).for_each(|(gi, x)| *gi += x);
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// `e^x` for `x ≤ 0`, within a few ulps of `f64::exp`. Branch-free and
/// call-free so the softmax over the state space vectorizes.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5·2^52 rounds to an integer held in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = x.max(-708.0);
    let t = x * LOG2E + SHIFT;
    let k = t - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut q = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        q = q * r + c;
    }
    let scale = f64::from_bits((t.to_bits() as i64).wrapping_add(1023).wrapping_shl(52) as u64);
    scale * q
}

/// `tanh` through `exp_nonpos`; several times cheaper than the libm call
/// and within a few ulps of it away from zero.
#[inline(always)]
fn tanh_fast(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let e = exp_nonpos(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Overwrites `v` with its softmax and returns the log-sum-exp. Reductions
/// run over four independent lanes so they vectorize; on AVX2 hardware the
/// same body is compiled for 256-bit registers. Both paths perform
/// identical operations in identical order.
fn softmax_in_place(v: &mut [f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { softmax_avx2(v) };
    }
    softmax_body(v)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn softmax_avx2(v: &mut [f64]) -> f64 {
    softmax_body(v)
}

#[inline(always)]
fn softmax_body(v: &mut [f64]) -> f64 {
    let mut lanes = [f64::NEG_INFINITY; 4];
    let chunks = v.chunks_exact(4);
    let mut m = chunks.remainder().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for c in chunks {
        for k in 0..4 {
            lanes[k] = lanes[k].max(c[k]);
        }
    }
    m = lanes.iter().cloned().fold(m, f64::max);
    v.iter_mut().for_each(|x| *x = exp_nonpos(*x - m));
    let mut acc = [0.0; 4];
    let chunks = v.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for k in 0..4 {
            acc[k] += c[k];
        }
    }
    let s = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    let inv = 1.0 / s;
    v.iter_mut().for_each(|x| *x *= inv);
    m + s.ln()
}

/// `KL(N(μq, e^lq) ‖ N(μp, e^lp))` for diagonal Gaussians.
fn kl_diag(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| 0.5 * (lp[i] - lq[i] + (lq[i].exp() + (mq[i] - mp[i]).powi(2)) / lp[i].exp() - 1.0))
        .sum()
}

/// Smallest reward variance; keeps the reward likelihood bounded.
const REWARD_VAR_FLOOR: f64 = 1e-2;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

// ── Model ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqVae {
    pub shape: VaeShape,
    pub params: Vec<f64>,
}

/// A trajectory as model input: states `x_0..x_L` (the last one is the
/// terminal state), actions `a_0..a_{L−1}` and rewards `r_0..r_{L−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub x: Vec<usize>,
    pub a: Vec<usize>,
    pub r: Vec<f64>,
}

/// The four ELBO components, each averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboTerms {
    pub state_log_lik: f64,
    pub reward_log_lik: f64,
    pub kl_initial: f64,
    pub kl_transition: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.state_log_lik + self.reward_log_lik - self.kl_initial - self.kl_transition
    }

    fn check(&self) -> Result<(), TrajGenError> {
        for (v, name) in [
            (self.state_log_lik, "state log-likelihood"),
            (self.reward_log_lik, "reward log-likelihood"),
            (self.kl_initial, "initial KL"),
            (self.kl_transition, "transition KL"),
        ] {
            if !v.is_finite() {
                return Err(TrajGenError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Reparameterization noise for one sequence: `ε_t` for `t = 0..=L`.
pub type Noise = Vec<Vec<f64>>;

/// Activations of one time step, one column per sequence.
struct Step {
    active: Vec<bool>,
    x: Vec<usize>,
    a: Vec<usize>,
    eps: DMatrix<f64>,
    hq: DMatrix<f64>,
    hp: DMatrix<f64>,
    mq: DMatrix<f64>,
    lq: DMatrix<f64>,
    mp: DMatrix<f64>,
    lp: DMatrix<f64>,
    z: DMatrix<f64>,
    /// State-decoder gradient with respect to `z`.
    dz_state: DMatrix<f64>,
    /// Reward-decoder mean and pre-softplus variance per column.
    reward: Vec<(f64, f64)>,
}

/// Weight blocks as matrices, with the transposes the backward pass uses.
struct Weights {
    wm0: DMatrix<f64>,
    wv0: DMatrix<f64>,
    uq: DMatrix<f64>,
    vq: DMatrix<f64>,
    wmq: DMatrix<f64>,
    wvq: DMatrix<f64>,
    up: DMatrix<f64>,
    vp: DMatrix<f64>,
    wmp: DMatrix<f64>,
    wvp: DMatrix<f64>,
    ws: DMatrix<f64>,
    wm0_t: DMatrix<f64>,
    wv0_t: DMatrix<f64>,
    uq_t: DMatrix<f64>,
    vq_t: DMatrix<f64>,
    wmq_t: DMatrix<f64>,
    wvq_t: DMatrix<f64>,
    up_t: DMatrix<f64>,
    vp_t: DMatrix<f64>,
    wmp_t: DMatrix<f64>,
    wvp_t: DMatrix<f64>,
    ws_t: DMatrix<f64>,
}

impl Weights {
    fn new(p: &[f64], l: &Layout, s: &VaeShape) -> Self {
        let (ns, h, z) = (s.n_states, s.hidden, s.latent);
        let m = |at: usize, rows: usize, cols: usize| DMatrix::from_row_slice(rows, cols, &p[at..at + rows * cols]);
        let (wm0, wv0, uq, vq) = (m(l.wm0, z, h), m(l.wv0, z, h), m(l.uq, h, h), m(l.vq, h, z));
        let (wmq, wvq, up, vp) = (m(l.wmq, z, h), m(l.wvq, z, h), m(l.up, h, h), m(l.vp, h, z));
        let (wmp, wvp, ws) = (m(l.wmp, z, h), m(l.wvp, z, h), m(l.ws, ns, z));
        Weights {
            wm0_t: wm0.transpose(),
            wv0_t: wv0.transpose(),
            uq_t: uq.transpose(),
            vq_t: vq.transpose(),
            wmq_t: wmq.transpose(),
            wvq_t: wvq.transpose(),
            up_t: up.transpose(),
            vp_t: vp.transpose(),
            wmp_t: wmp.transpose(),
            wvp_t: wvp.transpose(),
            ws_t: ws.transpose(),
            wm0,
            wv0,
            uq,
            vq,
            wmq,
            wvq,
            up,
            vp,
            wmp,
            wvp,
            ws,
        }
    }
}

/// Embedding columns `p[at + idx[b]·rows ..]` side by side.
fn gather(p: &[f64], at: usize, rows: usize, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, idx.len(), |r, b| p[at + idx[b] * rows + r])
}

fn add_bias(m: &mut DMatrix<f64>, bias: &[f64]) {
    for mut col in m.column_iter_mut() {
        col.iter_mut().zip(bias).for_each(|(v, c)| *v += c);
    }
}

fn affine_cols(w: &DMatrix<f64>, x: &DMatrix<f64>, bias: &[f64]) -> DMatrix<f64> {
    let mut y = w * x;
    add_bias(&mut y, bias);
    y
}

fn add_row_sums(g: &mut [f64], at: usize, m: &DMatrix<f64>) {
    for col in m.column_iter() {
        add_into(g, at, col.as_slice());
    }
}

/// Scatters column `b` of `m` into the embedding row `idx[b]`.
fn add_cols(g: &mut [f64], at: usize, m: &DMatrix<f64>, idx: &[usize]) {
    let rows = m.nrows();
    for (col, &i) in m.column_iter().zip(idx) {
        add_into(g, at + i * rows, col.as_slice());
    }
}

impl SeqVae {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero,
    /// log-variance heads zero.
    pub fn init(shape: VaeShape, seed: u64) -> Self {
        let l = Layout::new(&shape);
        let (ns, na, h, z) = (shape.n_states, shape.n_actions, shape.hidden, shape.latent);
        let mut p = vec![0.0; l.total];
        let mut rng = stream_rng(seed, 0x7a3);
        let mut fill = |at: usize, n: usize, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            for x in &mut p[at..at + n] {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x = e * s;
            }
        };
        fill(l.e0, ns * h, 1);
        fill(l.wm0, z * h, h);
        fill(l.uq, h * h, h);
        fill(l.vq, h * z, z);
        fill(l.aq, na * h, 1);
        fill(l.sq, ns * h, 1);
        fill(l.wmq, z * h, h);
        fill(l.up, h * h, h);
        fill(l.vp, h * z, z);
        fill(l.ap, na * h, 1);
        fill(l.wmp, z * h, h);
        fill(l.ws, ns * z, z);
        fill(l.wr, z, z);
        // Embedding rows feed a tanh; keep them in its linear range.
        for x in &mut p[l.e0..l.e0 + ns * h] {
            *x *= 0.5;
        }
        SeqVae { shape, params: p }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the initial encoder's output heads so `q(z_0|s_0) = N(0, I)`.
    pub fn zero_initial_heads(&mut self) {
        let l = Layout::new(&self.shape);
        let (h, z) = (self.shape.hidden, self.shape.latent);
        for at in [l.wm0, l.wv0] {
            self.params[at..at + z * h].fill(0.0);
        }
        for at in [l.cm0, l.cv0] {
            self.params[at..at + z].fill(0.0);
        }
    }

    pub fn from_json(s: &str) -> Result<Self, TrajGenError> {
        let m: SeqVae = serde_json::from_str(s).map_err(|e| TrajGenError::Config(e.to_string()))?;
        let expected = Layout::new(&m.shape).total;
        if m.params.len() != expected {
            return Err(TrajGenError::Checkpoint { expected, got: m.params.len() });
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn sequence(&self, t: &Trajectory) -> Result<Sequence, TrajGenError> {
        let bad = |state, action| TrajGenError::OutOfRange { participant: t.participant_id, state, action };
        let mut x: Vec<usize> = t.steps.iter().map(|s| s.state).collect();
        x.push(t.terminal_state);
        for s in &t.steps {
            if s.state >= self.shape.n_states || s.action >= self.shape.n_actions {
                return Err(bad(s.state, s.action));
            }
        }
        if t.terminal_state >= self.shape.n_states {
            return Err(bad(t.terminal_state, 0));
        }
        Ok(Sequence { x, a: t.steps.iter().map(|s| s.action).collect(), r: t.steps.iter().map(|s| s.reward).collect() })
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, seq: &Sequence, rng: &mut R) -> Noise {
        (0..seq.x.len())
            .map(|_| (0..self.shape.latent).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    /// State distribution `p(s | z)`.
    pub fn decode_state(&self, z: &[f64]) -> Vec<f64> {
        let l = Layout::new(&self.shape);
        let mut v = affine(&self.params, l.ws, l.bs, self.shape.n_states, z);
        softmax_in_place(&mut v);
        v
    }

    /// Batch-mean ELBO terms with the given noise.
    pub fn elbo_terms(&self, batch: &[Sequence], noise: &[Noise]) -> Result<ElboTerms, TrajGenError> {
        Ok(self.batch_pass(batch, noise, false)?.0)
    }

    /// Batch-mean ELBO and its gradient with the given noise.
    pub fn elbo_and_grad(&self, batch: &[Sequence], noise: &[Noise]) -> Result<(ElboTerms, Vec<f64>), TrajGenError> {
        let (terms, g) = self.batch_pass(batch, noise, true)?;
        Ok((terms, g.expect("gradient requested")))
    }

    /// Runs the whole batch at once, one column per sequence. Sequences that
    /// have ended are carried as masked columns: they contribute nothing to
    /// the ELBO and receive zero gradient.
    fn batch_pass(&self, batch: &[Sequence], noise: &[Noise], want_grad: bool) -> Result<(ElboTerms, Option<Vec<f64>>), TrajGenError> {
        if batch.is_empty() {
            return Err(TrajGenError::EmptyBatch);
        }
        let p = &self.params;
        let l = Layout::new(&self.shape);
        let (ns, h, zd) = (self.shape.n_states, self.shape.hidden, self.shape.latent);
        let nb = batch.len();
        let w = 1.0 / nb as f64;
        let wt = Weights::new(p, &l, &self.shape);
        let steps = batch.iter().map(|s| s.a.len()).max().unwrap_or(0);
        let mut terms = ElboTerms::default();
        let mut g = want_grad.then(|| vec![0.0; p.len()]);
        let mut dws = DMatrix::<f64>::zeros(ns, zd);
        let mut dbs = vec![0.0; ns];

        // ── Forward ──
        let mut cs: Vec<Step> = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let active: Vec<bool> = batch.iter().map(|s| t <= s.a.len()).collect();
            let x: Vec<usize> = batch.iter().map(|s| s.x.get(t).copied().unwrap_or(0)).collect();
            let a: Vec<usize> = batch.iter().map(|s| if t == 0 { 0 } else { s.a.get(t - 1).copied().unwrap_or(0) }).collect();
            let eps = DMatrix::from_fn(zd, nb, |i, b| noise[b].get(t).map_or(0.0, |e| e[i]));
            let (hq, hp, mq, lq, mp, lp) = if t == 0 {
                let mut pre = gather(p, l.e0, h, &x);
                add_bias(&mut pre, &p[l.b0..l.b0 + h]);
                let hq = pre.map(tanh_fast);
                let mq = affine_cols(&wt.wm0, &hq, &p[l.cm0..l.cm0 + zd]);
                let lq = affine_cols(&wt.wv0, &hq, &p[l.cv0..l.cv0 + zd]);
                (hq, DMatrix::zeros(h, nb), mq, lq, DMatrix::zeros(zd, nb), DMatrix::zeros(zd, nb))
            } else {
                let prev = &cs[t - 1];
                let mut pre = gather(p, l.aq, h, &a) + gather(p, l.sq, h, &x) + &wt.uq * &prev.hq + &wt.vq * &prev.z;
                add_bias(&mut pre, &p[l.bq..l.bq + h]);
                let hq = pre.map(tanh_fast);
                let mut pre = gather(p, l.ap, h, &a) + &wt.up * &prev.hp + &wt.vp * &prev.z;
                add_bias(&mut pre, &p[l.bp..l.bp + h]);
                let hp = pre.map(tanh_fast);
                let mq = affine_cols(&wt.wmq, &hq, &p[l.cmq..l.cmq + zd]);
                let lq = affine_cols(&wt.wvq, &hq, &p[l.cvq..l.cvq + zd]);
                let mp = affine_cols(&wt.wmp, &hp, &p[l.cmp..l.cmp + zd]);
                let lp = affine_cols(&wt.wvp, &hp, &p[l.cvp..l.cvp + zd]);
                (hq, hp, mq, lq, mp, lp)
            };
            let z = DMatrix::from_fn(zd, nb, |i, b| mq[(i, b)] + (0.5 * lq[(i, b)]).exp() * eps[(i, b)]);
            for b in (0..nb).filter(|&b| active[b]) {
                let kl = kl_diag(mq.column(b).as_slice(), lq.column(b).as_slice(), mp.column(b).as_slice(), lp.column(b).as_slice());
                if t == 0 {
                    terms.kl_initial += w * kl;
                } else {
                    terms.kl_transition += w * kl;
                }
            }

            // State decoder; its backward is taken here so the logits
            // need not be kept.
            let mut logits = &wt.ws * &z;
            let mut dz_state = DMatrix::zeros(zd, nb);
            for (b, col) in logits.as_mut_slice().chunks_exact_mut(ns).enumerate() {
                if !active[b] {
                    col.fill(0.0);
                    continue;
                }
                col.iter_mut().zip(&p[l.bs..l.bs + ns]).for_each(|(v, c)| *v += c);
                let logit = col[x[b]];
                let lse = softmax_in_place(col);
                terms.state_log_lik += w * (logit - lse);
                // d log p(x | z) / d logits = onehot(x) − p.
                col.iter_mut().for_each(|v| *v *= -w);
                col[x[b]] += w;
                dbs.iter_mut().zip(col.iter()).for_each(|(d, v)| *d += v);
            }
            if want_grad {
                dws.gemm(1.0, &logits, &z.transpose(), 1.0);
                dz_state.gemm(1.0, &wt.ws_t, &logits, 0.0);
            }

            // Reward decoder.
            let mut reward = vec![(0.0, 0.0); nb];
            if t >= 1 {
                for b in (0..nb).filter(|&b| active[b]) {
                    let zc = z.column(b);
                    let mean = p[l.br] + dot(&p[l.wr..l.wr + zd], zc.as_slice());
                    let u = p[l.brv] + dot(&p[l.wrv..l.wrv + zd], zc.as_slice());
                    let var = softplus(u) + REWARD_VAR_FLOOR;
                    let e = batch[b].r[t - 1] - mean;
                    terms.reward_log_lik += w * -0.5 * (LN_2PI + var.ln() + e * e / var);
                    reward[b] = (mean, u);
                }
            }
            cs.push(Step { active, x, a, eps, hq, hp, mq, lq, mp, lp, z, dz_state, reward });
        }
        terms.check()?;
        let Some(g) = g.as_deref_mut() else {
            return Ok((terms, None));
        };

        // ── Backward ──
        add_into(g, l.ws, dws.transpose().as_slice());
        add_into(g, l.bs, &dbs);
        let mut next: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
        for t in (0..=steps).rev() {
            let c = &cs[t];
            let mut dz = c.dz_state.clone();
            if let Some((dq, dp)) = &next {
                dz.gemm(1.0, &wt.vq_t, dq, 1.0);
                dz.gemm(1.0, &wt.vp_t, dp, 1.0);
            }
            if t >= 1 {
                for b in (0..nb).filter(|&b| c.active[b]) {
                    let (mean, u) = c.reward[b];
                    let var = softplus(u) + REWARD_VAR_FLOOR;
                    let e = batch[b].r[t - 1] - mean;
                    let dmean = w * e / var;
                    let du = w * -0.5 * (1.0 / var - e * e / (var * var)) * sigmoid(u);
                    for i in 0..zd {
                        g[l.wr + i] += dmean * c.z[(i, b)];
                        g[l.wrv + i] += du * c.z[(i, b)];
                        dz[(i, b)] += dmean * p[l.wr + i] + du * p[l.wrv + i];
                    }
                    g[l.br] += dmean;
                    g[l.brv] += du;
                }
            }
            let mut dmq = DMatrix::zeros(zd, nb);
            let mut dlq = DMatrix::zeros(zd, nb);
            let mut dmp = DMatrix::zeros(zd, nb);
            let mut dlp = DMatrix::zeros(zd, nb);
            for b in 0..nb {
                let m = if c.active[b] { w } else { 0.0 };
                for i in 0..zd {
                    let (mq, lq, mp, lp) = (c.mq[(i, b)], c.lq[(i, b)], c.mp[(i, b)], c.lp[(i, b)]);
                    let sq = lq.exp();
                    // Reparameterization z = μ + e^{l/2} ε.
                    let dzr = dz[(i, b)];
                    let dl_reparam = dzr * 0.5 * (0.5 * lq).exp() * c.eps[(i, b)];
                    if t == 0 {
                        // KL against N(0, I).
                        dmq[(i, b)] = -m * mq + dzr;
                        dlq[(i, b)] = -m * 0.5 * (sq - 1.0) + dl_reparam;
                    } else {
                        // Transition KL enters the ELBO with a minus sign.
                        let sp = lp.exp();
                        let diff = mq - mp;
                        dmq[(i, b)] = -m * diff / sp + dzr;
                        dmp[(i, b)] = m * diff / sp;
                        dlq[(i, b)] = -m * 0.5 * (sq / sp - 1.0) + dl_reparam;
                        dlp[(i, b)] = -m * 0.5 * (1.0 - (sq + diff * diff) / sp);
                    }
                }
            }
            let hq_t = c.hq.transpose();
            let (wm, cm, wv, cv, wm_t, wv_t) =
                if t == 0 { (l.wm0, l.cm0, l.wv0, l.cv0, &wt.wm0_t, &wt.wv0_t) } else { (l.wmq, l.cmq, l.wvq, l.cvq, &wt.wmq_t, &wt.wvq_t) };
            add_into(g, wm, (&dmq * &hq_t).transpose().as_slice());
            add_row_sums(g, cm, &dmq);
            add_into(g, wv, (&dlq * &hq_t).transpose().as_slice());
            add_row_sums(g, cv, &dlq);
            let mut dhq = wm_t * &dmq + wv_t * &dlq;
            if let Some((dq, _)) = &next {
                dhq.gemm(1.0, &wt.uq_t, dq, 1.0);
            }
            let dpreq = dhq.zip_map(&c.hq, |d, y| d * (1.0 - y * y));
            if t == 0 {
                add_cols(g, l.e0, &dpreq, &c.x);
                add_row_sums(g, l.b0, &dpreq);
                break;
            }
            let hp_t = c.hp.transpose();
            add_into(g, l.wmp, (&dmp * &hp_t).transpose().as_slice());
            add_row_sums(g, l.cmp, &dmp);
            add_into(g, l.wvp, (&dlp * &hp_t).transpose().as_slice());
            add_row_sums(g, l.cvp, &dlp);
            let mut dhp = &wt.wmp_t * &dmp + &wt.wvp_t * &dlp;
            if let Some((_, dp)) = &next {
                dhp.gemm(1.0, &wt.up_t, dp, 1.0);
            }
            let dprep = dhp.zip_map(&c.hp, |d, y| d * (1.0 - y * y));

            let prev = &cs[t - 1];
            let (hq_prev, hp_prev, z_prev) = (prev.hq.transpose(), prev.hp.transpose(), prev.z.transpose());
            add_into(g, l.uq, (&dpreq * &hq_prev).transpose().as_slice());
            add_into(g, l.vq, (&dpreq * &z_prev).transpose().as_slice());
            add_cols(g, l.aq, &dpreq, &c.a);
            add_cols(g, l.sq, &dpreq, &c.x);
            add_row_sums(g, l.bq, &dpreq);
            add_into(g, l.up, (&dprep * &hp_prev).transpose().as_slice());
            add_into(g, l.vp, (&dprep * &z_prev).transpose().as_slice());
            add_cols(g, l.ap, &dprep, &c.a);
            add_row_sums(g, l.bp, &dprep);
            next = Some((dpreq, dprep));
        }
        Ok((terms, Some(g.to_vec())))
    }
}

/// Single-sample reparameterized ELBO, averaged over the batch, with noise
/// drawn from `seed`.
pub fn elbo(model: &SeqVae, batch: &[Trajectory], seed: u64) -> Result<f64, TrajGenError> {
    let seqs = batch.iter().map(|t| model.sequence(t)).collect::<Result<Vec<_>, _>>()?;
    let mut rng = stream_rng(seed, 0);
    let noise: Vec<Noise> = seqs.iter().map(|s| model.draw_noise(s, &mut rng)).collect();
    Ok(model.elbo_terms(&seqs, &noise)?.elbo())
}

// ── Gradient check ──────────────────────────────────────────────────────

/// Relative error with a floor of `1e-4` on the denominator, so gradients
/// near zero are compared in absolute terms.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Maximum relative error between the analytic gradient and central finite
/// differences (`h = 1e-5`) over the listed coordinates, noise frozen.
pub fn grad_check_coords(model: &SeqVae, batch: &[Trajectory], seed: u64, coords: &[usize]) -> Result<f64, TrajGenError> {
    let seqs = batch.iter().map(|t| model.sequence(t)).collect::<Result<Vec<_>, _>>()?;
    let mut rng = stream_rng(seed, 0);
    let noise: Vec<Noise> = seqs.iter().map(|s| model.draw_noise(s, &mut rng)).collect();
    let (_, grad) = model.elbo_and_grad(&seqs, &noise)?;
    let h = 1e-5;
    let errs = coords
        .par_iter()
        .map(|&i| {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let fd = (plus.elbo_terms(&seqs, &noise)?.elbo() - minus.elbo_terms(&seqs, &noise)?.elbo()) / (2.0 * h);
            Ok(rel_err(grad[i], fd))
        })
        .collect::<Result<Vec<f64>, TrajGenError>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// [`grad_check_coords`] over every parameter.
pub fn grad_check(model: &SeqVae, batch: &[Trajectory], seed: u64) -> Result<f64, TrajGenError> {
    let all: Vec<usize> = (0..model.n_params()).collect();
    grad_check_coords(model, batch, seed, &all)
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per iteration.
    pub decay: f64,
    /// `None` picks 1000 iterations above 200 trajectories, else 200.
    pub max_iters: Option<usize>,
    /// `None` picks 64 above 200 trajectories, else 4.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 3e-3, decay: 0.997, max_iters: None, batch_size: None, seed: 0, clip_norm: 10.0 }
    }
}

impl TrainConfig {
    /// `(batch size, iterations)` for a training set of `n` trajectories.
    pub fn schedule(&self, n: usize) -> (usize, usize) {
        let (b, it) = if n > 200 { (64, 1000) } else { (4, 200) };
        (self.batch_size.unwrap_or(b), self.max_iters.unwrap_or(it))
    }

    fn validate(&self) -> Result<(), TrajGenError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrajGenError::Config("learning rate must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrajGenError::Config("decay must lie in (0, 1]".into()));
        }
        if self.batch_size == Some(0) {
            return Err(TrajGenError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Size of the fixed subset whose ELBO forms the training trace.
pub const MONITOR_SIZE: usize = 16;

/// Trains a freshly initialized model with Adam; returns it with the ELBO
/// trace, one value per iteration, measured after the update on a fixed
/// subset of at most [`MONITOR_SIZE`] trajectories with frozen noise.
pub fn train(data: &[Trajectory], shape: VaeShape, config: &TrainConfig) -> Result<(SeqVae, Vec<f64>), TrajGenError> {
    train_from(SeqVae::init(shape, config.seed), data, config)
}

pub fn train_from(mut model: SeqVae, data: &[Trajectory], config: &TrainConfig) -> Result<(SeqVae, Vec<f64>), TrajGenError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrajGenError::EmptyBatch);
    }
    let seqs = data.iter().map(|t| model.sequence(t)).collect::<Result<Vec<_>, _>>()?;
    let (batch, iters) = config.schedule(seqs.len());
    let batch = batch.min(seqs.len());
    let n = model.params.len();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut lr = config.learning_rate;
    let mut trace = Vec::with_capacity(iters);
    let mut last_finite = f64::NAN;
    // Progress is tracked on a fixed monitoring set with frozen noise so the
    // trace reflects parameter changes rather than minibatch composition.
    let monitor: Vec<Sequence> = {
        let k = seqs.len().min(MONITOR_SIZE);
        let mut rng = stream_rng(config.seed, u64::MAX);
        let idx = sample_without_replacement(&mut rng, seqs.len(), k).into_vec();
        idx.iter().map(|&i| seqs[i].clone()).collect()
    };
    let monitor_noise: Vec<Noise> = {
        let mut rng = stream_rng(config.seed, u64::MAX - 1);
        monitor.iter().map(|s| model.draw_noise(s, &mut rng)).collect()
    };
    for it in 0..iters {
        let mut rng = stream_rng(config.seed, 1 + it as u64);
        let idx = sample_without_replacement(&mut rng, seqs.len(), batch).into_vec();
        let chosen: Vec<Sequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let noise: Vec<Noise> = chosen.iter().map(|s| model.draw_noise(s, &mut rng)).collect();
        let (terms, mut g) = model
            .elbo_and_grad(&chosen, &noise)
            .map_err(|_| TrajGenError::Diverged { iteration: it, last_finite })?;
        if !terms.elbo().is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(TrajGenError::Diverged { iteration: it, last_finite });
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > config.clip_norm {
            let s = config.clip_norm / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
        let t = (it + 1) as i32;
        let c1 = 1.0 - f64::powi(b1, t);
        let c2 = 1.0 - f64::powi(b2, t);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            // Ascent on the ELBO.
            model.params[i] += lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        lr *= config.decay;
        let value = model
            .elbo_terms(&monitor, &monitor_noise)
            .map_err(|_| TrajGenError::Diverged { iteration: it, last_finite })?
            .elbo();
        last_finite = value;
        trace.push(value);
    }
    Ok((model, trace))
}

// ── Sampling ────────────────────────────────────────────────────────────

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Rounds a decoded reward to the nearest of `{−1, 0, +1}`.
pub fn round_reward(r: f64) -> f64 {
    r.round().clamp(-1.0, 1.0)
}

/// Generates `n` synthetic trajectories from the prior: `z_0 ~ N(0, I)`,
/// states from the state decoder, actions from `beta`. A trajectory stops
/// when `stop(next_state, action)` holds or after `horizon` steps.
/// Non-final rewards are 0; the final reward is a rounded draw from the
/// reward decoder. Ids start at `first_id`; trajectory `k` uses stream `k`.
pub fn sample_trajectories<F>(
    model: &SeqVae,
    beta: &TabularPolicy,
    n: usize,
    horizon: usize,
    first_id: u64,
    seed: u64,
    stop: F,
) -> Vec<Trajectory>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    let p = &model.params;
    let l = Layout::new(&model.shape);
    let (h, zd) = (model.shape.hidden, model.shape.latent);
    (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k);
            let mut z: Vec<f64> = (0..zd).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut x = sample_categorical(&model.decode_state(&z), &mut rng);
            let mut hp = vec![0.0; h];
            let mut steps = Vec::with_capacity(horizon);
            let mut early = false;
            for t in 0..horizon.max(1) {
                let a = beta.sample(x, &mut rng);
                let mut pre: Vec<f64> = (0..h).map(|j| p[l.ap + a * h + j] + p[l.bp + j]).collect();
                add_matvec(p, l.up, h, &hp, &mut pre);
                add_matvec(p, l.vp, h, &z, &mut pre);
                hp = pre.iter().map(|&v| tanh_fast(v)).collect();
                let mp = affine(p, l.wmp, l.cmp, zd, &hp);
                let lp = affine(p, l.wvp, l.cvp, zd, &hp);
                z = (0..zd)
                    .map(|i| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        mp[i] + (0.5 * lp[i]).exp() * e
                    })
                    .collect();
                let next = sample_categorical(&model.decode_state(&z), &mut rng);
                let ends = stop(next, a);
                let last = ends || t + 1 >= horizon;
                let reward = if last {
                    let mean = p[l.br] + (0..zd).map(|i| p[l.wr + i] * z[i]).sum::<f64>();
                    let u = p[l.brv] + (0..zd).map(|i| p[l.wrv + i] * z[i]).sum::<f64>();
                    let e: f64 = StandardNormal.sample(&mut rng);
                    round_reward(mean + (softplus(u) + REWARD_VAR_FLOOR).sqrt() * e)
                } else {
                    0.0
                };
                steps.push(crate::mdp::Step { state: x, action: a, reward });
                x = next;
                if ends {
                    early = true;
                }
                if last {
                    break;
                }
            }
            Trajectory { participant_id: first_id + k, steps, terminal_state: x, terminated_early: early, synthetic: true }
        })
        .collect()
}
