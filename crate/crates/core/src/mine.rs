//! Donsker-Varadhan mutual-information estimation with exact oracles.
//!
//! For distributions `P` and `Q` on the same space and any function `T`,
//! `KL(P‖Q) ≥ E_P[T] − log E_Q[e^T]`, with equality at `T = log dP/dQ + C`.
//! Taking `P` as the joint law of `(F, G)` and `Q` as the product of its
//! marginals turns the right-hand side into a trainable lower bound on
//! `I(F; G)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Lower clamp on the log-denominator.
pub const LOG_DENOM_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatNetConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for StatNetConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 2 }
    }
}

/// `T_φ`: GELU MLP from a concatenated `(f, g)` pair to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticsNetwork<S> {
    pub config: StatNetConfig,
    pub input_dim: usize,
    pub params: ParamStore<S>,
    layers: Vec<(ParamId, ParamId)>,
}

impl<S: Scalar> StatisticsNetwork<S> {
    /// `side_dim` is the width of each of the two paired vectors.
    pub fn new<R: Rng + ?Sized>(side_dim: usize, config: StatNetConfig, rng: &mut R) -> Result<Self> {
        if side_dim == 0 || config.hidden == 0 {
            return Err(Error::Config {
                key: "mine.hidden".into(),
                message: "statistics network widths must be positive".into(),
            });
        }
        let input_dim = 2 * side_dim;
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for l in 0..=config.layers {
            let out = if l == config.layers { 1 } else { config.hidden };
            let std = (1.0 / fan_in as f64).sqrt();
            let w = params.add(format!("t{l}.w"), Matrix::randn(fan_in, out, std, rng));
            let b = params.add(format!("t{l}.b"), Matrix::zeros(1, out));
            layers.push((w, b));
            fan_in = out;
        }
        Ok(Self {
            config,
            input_dim,
            params,
            layers,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    /// Records `T` on every row of `x` (`n × 2d`), returning an `n × 1` node.
    pub fn forward(&self, g: &mut Graph<S>, x: Var, trainable: bool) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(&self.params, w, trainable);
            let b = g.param(&self.params, b, trainable);
            let z = g.matmul(h, w);
            let z = g.add_row(z, b);
            h = if l == last { z } else { g.gelu(z) };
        }
        h
    }

    /// `T` on every row of `x`.
    pub fn eval(&self, x: &Matrix<S>) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(x.clone());
        let t = self.forward(&mut g, x, false);
        g.value(t).to_f64_vec()
    }

    /// Adds `c` to the output bias, shifting `T` by a constant.
    pub fn shift_output(&mut self, c: S) {
        let (_, b) = *self.layers.last().expect("at least one layer");
        let v = self.params.get_mut(b);
        v.set(0, 0, v.get(0, 0) + c);
    }
}

/// Random permutation with no fixed points (a single cycle, Sattolo's
/// algorithm). Length 1 returns the identity.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// `n` joint samples `(f_i, g_i)` plus the derangement used to pair
/// `f_i` with `g_{perm[i]}` for product-of-marginals samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePairBatch<S> {
    pub f: Matrix<S>,
    pub g: Matrix<S>,
    pub perm: Vec<usize>,
}

impl<S: Scalar> FeaturePairBatch<S> {
    pub fn new<R: Rng + ?Sized>(f: Matrix<S>, g: Matrix<S>, rng: &mut R) -> Result<Self> {
        if f.rows() != g.rows() {
            return Err(Error::arg(format!("{} F rows but {} G rows", f.rows(), g.rows())));
        }
        if f.rows() < 2 {
            return Err(Error::arg("the bound needs at least two pairs"));
        }
        let perm = derangement(f.rows(), rng);
        Ok(Self { f, g, perm })
    }

    pub fn len(&self) -> usize {
        self.f.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.f.rows() == 0
    }

    pub fn joint(&self) -> Matrix<S> {
        self.f.hcat(&self.g)
    }

    pub fn marginal(&self) -> Matrix<S> {
        self.f.hcat(&self.g.select_rows(&self.perm))
    }
}

/// `log(mean(exp(x)))` with max-subtraction.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (x.iter().map(|v| (v - m).exp()).sum::<f64>() / x.len() as f64).ln()
}

/// `mean(t_joint) − max(log mean exp(t_marginal), floor)`.
pub fn dv_from_scores(t_joint: &[f64], t_marginal: &[f64]) -> f64 {
    let mean = t_joint.iter().sum::<f64>() / t_joint.len() as f64;
    mean - log_mean_exp(t_marginal).max(LOG_DENOM_FLOOR)
}

/// Empirical DV bound of `T` on a batch.
pub fn dv_lower_bound<S: Scalar>(t: &StatisticsNetwork<S>, batch: &FeaturePairBatch<S>) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::arg("the bound needs at least two pairs"));
    }
    let joint = t.eval(&batch.joint());
    let marg = t.eval(&batch.marginal());
    Ok(dv_from_scores(&joint, &marg))
}

/// Records the DV bound of `T` between the rows of `f` and of `g`, where
/// `g_marg` holds the deranged `g` rows. Used where `f` itself carries
/// gradient.
pub fn dv_graph<S: Scalar>(
    graph: &mut Graph<S>,
    t: &StatisticsNetwork<S>,
    f: Var,
    g: Var,
    g_marg: Var,
    trainable: bool,
) -> Var {
    let xj = graph.hcat(f, g);
    let xm = graph.hcat(f, g_marg);
    let tj = t.forward(graph, xj, trainable);
    let tm = t.forward(graph, xm, trainable);
    let mj = graph.mean(tj);
    let lme = graph.log_mean_exp(tm, S::lit(LOG_DENOM_FLOOR));
    graph.sub(mj, lme)
}

/// `E_P[T] − log E_Q[e^T]` by direct summation over a finite support.
/// Terms with zero mass contribute nothing even where `T = −∞`.
pub fn exact_dv(p: &[f64], q: &[f64], t: &[f64]) -> f64 {
    let ep: f64 = p.iter().zip(t).filter(|(&pi, _)| pi > 0.0).map(|(pi, ti)| pi * ti).sum();
    let m = q
        .iter()
        .zip(t)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(_, &ti)| ti)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = q.iter().zip(t).filter(|(&qi, _)| qi > 0.0).map(|(qi, ti)| qi * (ti - m).exp()).sum();
    ep - (m + s.ln())
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
        return Err(Error::arg(format!("{name} is not a probability vector")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ p ln(p/q)`.
pub fn exact_kl_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::arg("p and q have different supports"));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::arg("q vanishes on the support of p; KL is infinite"));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// MI between `X` and `Y` where each of `dims` coordinate pairs is a
/// standard bivariate normal with correlation `rho`: `−(dims/2)·ln(1−ρ²)`.
pub fn exact_mi_gaussian(rho: f64, dims: usize) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::arg(format!("|rho| = {} must be below 1", rho.abs())));
    }
    Ok(-(dims as f64) / 2.0 * (1.0 - rho * rho).ln())
}

/// `n` samples of `(X, Y)` for [`exact_mi_gaussian`].
pub fn sample_gaussian_pairs<S: Scalar, R: Rng + ?Sized>(
    rho: f64,
    dims: usize,
    n: usize,
    rng: &mut R,
) -> (Matrix<S>, Matrix<S>) {
    let c = (1.0 - rho * rho).sqrt();
    let mut x = Vec::with_capacity(n * dims);
    let mut y = Vec::with_capacity(n * dims);
    for _ in 0..n * dims {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        x.push(S::lit(a));
        y.push(S::lit(rho * a + c * b));
    }
    (Matrix::from_vec(n, dims, x), Matrix::from_vec(n, dims, y))
}

/// Gradient-ascent trainer for `T` with a moving-average denominator.
///
/// The gradient of `log mean exp(T_marg)` is `∇ mean exp(T_marg) / mean
/// exp(T_marg)`; the denominator is replaced by an exponential moving
/// average across steps. `ema_rate = 1` recovers the plain batch gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MineTrainer<S> {
    pub net: StatisticsNetwork<S>,
    pub adam: Adam,
    pub ema_rate: f64,
    /// Log of the moving average of `mean(exp(T_marg))`.
    pub log_ema: Option<f64>,
}

/// Result of one estimator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MineStep {
    /// Raw batch bound before the update.
    pub estimate: f64,
    pub grad_norm: f64,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl<S: Scalar> MineTrainer<S> {
    pub fn new(net: StatisticsNetwork<S>, ema_rate: f64) -> Result<Self> {
        if !(ema_rate > 0.0 && ema_rate <= 1.0) {
            return Err(Error::Config {
                key: "mine.ema_rate".into(),
                message: format!("{ema_rate} not in (0, 1]"),
            });
        }
        let adam = Adam::new(AdamConfig::default(), &net.params);
        Ok(Self {
            net,
            adam,
            ema_rate,
            log_ema: None,
        })
    }

    /// Folds a batch value of `log mean exp(T_marg)` into the average.
    pub fn update_ema(&mut self, lme: f64) -> f64 {
        let r = self.ema_rate;
        let next = match self.log_ema {
            None => lme,
            Some(_) if r >= 1.0 => lme,
            Some(prev) => log_add_exp((1.0 - r).ln() + prev, r.ln() + lme),
        };
        self.log_ema = Some(next);
        next
    }

    /// Records the surrogate whose gradient is the smoothed DV gradient:
    /// `mean(T_joint) − mean(exp(T_marg − log_ema))`. Updates the average
    /// from this batch and returns `(surrogate, raw bound)`.
    pub fn surrogate(&mut self, g: &mut Graph<S>, f: Var, gj: Var, gm: Var, trainable: bool) -> (Var, f64) {
        let xj = g.hcat(f, gj);
        let xm = g.hcat(f, gm);
        let tj = self.net.forward(g, xj, trainable);
        let tm = self.net.forward(g, xm, trainable);
        let tjv = g.value(tj).to_f64_vec();
        let tmv = g.value(tm).to_f64_vec();
        let lme = log_mean_exp(&tmv);
        let raw = dv_from_scores(&tjv, &tmv);
        let shift = self.update_ema(lme);
        let mj = g.mean(tj);
        let me = g.mean_exp_shift(tm, S::lit(shift));
        (g.sub(mj, me), raw)
    }

    /// One ascent step of `φ` on a batch.
    pub fn step(&mut self, batch: &FeaturePairBatch<S>, lr: f64) -> Result<MineStep> {
        let mut g = Graph::new();
        let f = g.constant(batch.f.clone());
        let gj = g.constant(batch.g.clone());
        let gm = g.constant(batch.g.select_rows(&batch.perm));
        let (obj, raw) = self.surrogate(&mut g, f, gj, gm, true);
        let loss = g.scale(obj, S::lit(-1.0));
        let grads = g.backward(loss, &self.net.params);
        if !raw.is_finite() || !grads.is_finite() {
            let t = self.net.eval(&batch.joint());
            let (lo, hi) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            return Err(Error::Divergence(format!(
                "statistics network produced a non-finite objective (batch {}, T range [{lo}, {hi}], log_ema {:?})",
                batch.len(),
                self.log_ema
            )));
        }
        let grad_norm = grads.global_norm();
        self.adam.update(&mut self.net.params, &grads, lr);
        Ok(MineStep {
            estimate: raw,
            grad_norm,
        })
    }
}

/// Gradient of the plain DV objective `mean(T_joint) − log mean exp(T_marg)`
/// w.r.t. `φ`.
pub fn dv_gradient<S: Scalar>(t: &StatisticsNetwork<S>, batch: &FeaturePairBatch<S>) -> (f64, Gradients<S>) {
    let mut g = Graph::new();
    let f = g.constant(batch.f.clone());
    let gj = g.constant(batch.g.clone());
    let gm = g.constant(batch.g.select_rows(&batch.perm));
    let v = dv_graph(&mut g, t, f, gj, gm, true);
    let grads = g.backward(v, &t.params);
    (g.scalar(v).as_f64(), grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTestConfig {
    pub seed: u64,
    pub dims: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_rate: f64,
    pub eval_samples: usize,
    pub net: StatNetConfig,
}

impl Default for SelfTestConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: 1,
            steps: 1500,
            batch: 256,
            lr: 3e-3,
            ema_rate: 0.01,
            eval_samples: 20_000,
            net: StatNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestRecord {
    pub rho: f64,
    pub analytic_mi: f64,
    pub estimate: f64,
    pub abs_error: f64,
}

/// Trains a fresh estimator per `rho` on correlated Gaussians and reports
/// the bound on a held-out sample against the closed form.
pub fn mi_selftest(rhos: &[f64], cfg: &SelfTestConfig) -> Result<Vec<SelfTestRecord>> {
    if cfg.batch < 2 || cfg.eval_samples < 2 {
        return Err(Error::Config {
            key: "selftest.batch".into(),
            message: "needs at least two samples".into(),
        });
    }
    rhos.iter()
        .enumerate()
        .map(|(i, &rho)| {
            let analytic = exact_mi_gaussian(rho, cfg.dims)?;
            let mut rng = crate::rng::stream(cfg.seed, "mi-selftest", &[i as u64]);
            let net = StatisticsNetwork::<f64>::new(cfg.dims, cfg.net, &mut rng)?;
            let mut tr = MineTrainer::new(net, cfg.ema_rate)?;
            for s in 0..cfg.steps {
                let (x, y) = sample_gaussian_pairs::<f64, _>(rho, cfg.dims, cfg.batch, &mut rng);
                let b = FeaturePairBatch::new(x, y, &mut rng)?;
                // linear decay over the last half
                let frac = s as f64 / cfg.steps as f64;
                let lr = if frac < 0.5 { cfg.lr } else { cfg.lr * 2.0 * (1.0 - frac) + 1e-5 };
                tr.step(&b, lr)?;
            }
            let mut eval_rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(cfg.seed, "mi-eval", &[i as u64]));
            let (x, y) = sample_gaussian_pairs::<f64, _>(rho, cfg.dims, cfg.eval_samples, &mut eval_rng);
            let b = FeaturePairBatch::new(x, y, &mut eval_rng)?;
            let estimate = dv_lower_bound(&tr.net, &b)?;
            Ok(SelfTestRecord {
                rho,
                analytic_mi: analytic,
                estimate,
                abs_error: (estimate - analytic).abs(),
            })
        })
        .collect()
}
