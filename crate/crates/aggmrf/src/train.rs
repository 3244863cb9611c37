//! Persistent contrastive divergence training.
//!
//! Each iteration advances the persistent Gibbs particles by one sweep,
//! estimates the expected aggregates, forms the (optionally rescaled)
//! gradient with split L2 regularization, preconditions it with the
//! approximate diagonal Hessian, and takes one step. An exact-expectation
//! mode replaces the Monte Carlo estimate with full enumeration on tiny
//! state spaces, which is what the oracle tests train with.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::baselines::nllh;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gibbs::{init_state, InitStrategy, MomentEstimate};
use crate::model::{exact_moments, predict_proba, ModelParams};
use crate::projection::{AggregatedData, ProjectionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Plain,
    Rescaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectationMode {
    Gibbs,
    Exact,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub n_prime: usize,
    pub step_mu: f64,
    pub step_theta: f64,
    pub lambda_mu: f64,
    pub lambda_theta: f64,
    pub gradient_mode: GradientMode,
    pub expectation_mode: ExpectationMode,
    pub seed: u64,
    pub epsilon_div: f64,
    pub init_strategy: InitStrategy,
    pub eval_period: usize,
}

/// Step sizes from the table count: 1/K on both parameters, or five times
/// that on mu with fast weights.
pub fn default_steps(k_tables: usize, fast_weights: bool) -> (f64, f64) {
    let base = 1.0 / k_tables as f64;
    (if fast_weights { 5.0 * base } else { base }, base)
}

impl TrainConfig {
    /// Heuristic defaults for a projection with `num_tables` tables and `n`
    /// aggregated samples.
    pub fn defaults(num_tables: usize, n: f64, fast_weights: bool) -> TrainConfig {
        let (step_mu, step_theta) = default_steps(num_tables, fast_weights);
        TrainConfig {
            iterations: 500,
            n_prime: ((n / 10.0).ceil() as usize).max(1),
            step_mu,
            step_theta,
            lambda_mu: 1.0,
            lambda_theta: 64.0,
            gradient_mode: GradientMode::Rescaled,
            expectation_mode: ExpectationMode::Gibbs,
            seed: 0,
            epsilon_div: 1e-9 * n.max(1.0),
            init_strategy: InitStrategy::Marginals,
            eval_period: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.step_mu <= 0.0 || self.step_theta <= 0.0 {
            return Err(Error::InvalidConfig("step sizes must be positive".into()));
        }
        if self.lambda_mu < 0.0 || self.lambda_theta < 0.0 {
            return Err(Error::InvalidConfig("lambdas must be nonnegative".into()));
        }
        if self.epsilon_div <= 0.0 {
            return Err(Error::InvalidConfig("epsilon_div must be positive".into()));
        }
        if self.n_prime < 1 {
            return Err(Error::InvalidConfig("n_prime must be >= 1".into()));
        }
        Ok(())
    }

    /// Apply `key=value` lines (as accepted on the command line) over this
    /// config. Blank lines and `#` comments are skipped.
    pub fn apply_kv(mut self, text: &str) -> Result<TrainConfig> {
        for (lno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", lno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::InvalidConfig(format!("line {}: bad {what} `{value}`", lno + 1));
            match key {
                "iterations" => self.iterations = value.parse().map_err(|_| bad("integer"))?,
                "n_prime" => self.n_prime = value.parse().map_err(|_| bad("integer"))?,
                "step_mu" => self.step_mu = value.parse().map_err(|_| bad("real"))?,
                "step_theta" => self.step_theta = value.parse().map_err(|_| bad("real"))?,
                "lambda_mu" => self.lambda_mu = value.parse().map_err(|_| bad("real"))?,
                "lambda_theta" => self.lambda_theta = value.parse().map_err(|_| bad("real"))?,
                "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
                "epsilon_div" => self.epsilon_div = value.parse().map_err(|_| bad("real"))?,
                "eval_period" => self.eval_period = value.parse().map_err(|_| bad("integer"))?,
                "gradient" => {
                    self.gradient_mode = match value {
                        "plain" => GradientMode::Plain,
                        "rescaled" => GradientMode::Rescaled,
                        _ => return Err(bad("gradient mode")),
                    }
                }
                "expectation" => {
                    self.expectation_mode = match value {
                        "gibbs" => ExpectationMode::Gibbs,
                        "exact" => ExpectationMode::Exact,
                        _ => return Err(bad("expectation mode")),
                    }
                }
                "init" => {
                    self.init_strategy = match value {
                        "marginals" => InitStrategy::Marginals,
                        "uniform" => InitStrategy::Uniform,
                        _ => return Err(bad("init strategy")),
                    }
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "line {}: unknown key `{key}`",
                        lno + 1
                    )))
                }
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub grad_mu_norm: f64,
    pub grad_theta_norm: f64,
    pub moment_gap: f64,
    pub test_nllh: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iter,grad_mu_norm,grad_theta_norm,moment_gap,test_nllh,seconds\n");
        for r in &self.rows {
            let nllh = r.test_nllh.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{nllh},{}",
                r.iteration, r.grad_mu_norm, r.grad_theta_norm, r.moment_gap, r.seconds
            );
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Trace equality ignoring wall-clock columns.
    pub fn same_numbers(&self, other: &TrainTrace) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.iteration == b.iteration
                    && a.grad_mu_norm == b.grad_mu_norm
                    && a.grad_theta_norm == b.grad_theta_norm
                    && a.moment_gap == b.moment_gap
                    && a.test_nllh == b.test_nllh
            })
    }
}

/// Loss gradients from observed and estimated aggregates.
///
/// `est` is at particle scale; `scale` (= n/n') brings it to sample scale.
/// The plain mode is the exact penalized gradient; the rescaled mode replaces
/// the theta gradient by the ratio form that only moves theta where the
/// positive-rate ratio is off.
pub fn compute_gradients(
    agg: &AggregatedData,
    est: &MomentEstimate,
    scale: f64,
    p: &ModelParams,
    cfg: &TrainConfig,
) -> (Vec<f64>, Vec<f64>) {
    let k = agg.d.len();
    let mut g_mu = Vec::with_capacity(k);
    let mut g_theta = Vec::with_capacity(k);
    for i in 0..k {
        let d_hat = scale * est.d_hat[i];
        let c_hat = scale * est.c_hat[i];
        g_mu.push(d_hat - agg.d[i] + 2.0 * cfg.lambda_mu * p.mu[i]);
        let g = match cfg.gradient_mode {
            GradientMode::Plain => c_hat - agg.c[i],
            GradientMode::Rescaled => {
                agg.d[i] / (d_hat + cfg.epsilon_div) * c_hat - agg.c[i]
            }
        };
        g_theta.push(g + 2.0 * cfg.lambda_theta * p.theta[i]);
    }
    (g_mu, g_theta)
}

/// Divide each gradient coordinate by the approximate diagonal Hessian:
/// the expected count plus twice the matching regularization strength.
/// `d_hat` and `c_hat` are at sample scale.
pub fn precondition(
    g_mu: &[f64],
    g_theta: &[f64],
    d_hat: &[f64],
    c_hat: &[f64],
    cfg: &TrainConfig,
) -> (Vec<f64>, Vec<f64>) {
    let dir_mu = g_mu
        .iter()
        .zip(d_hat)
        .map(|(g, d)| g / (d + 2.0 * cfg.lambda_mu + cfg.epsilon_div))
        .collect();
    let dir_theta = g_theta
        .iter()
        .zip(c_hat)
        .map(|(g, c)| g / (c + 2.0 * cfg.lambda_theta + cfg.epsilon_div))
        .collect();
    (dir_mu, dir_theta)
}

/// Optional test-set evaluation performed during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalHook<'a> {
    pub test: &'a Dataset,
}

/// Train from aggregated data by persistent contrastive divergence (or exact
/// full-gradient descent when `expectation_mode` is `Exact`).
///
/// Parameters start at zero (the uniform distribution). The Gibbs state is
/// initialized once and carried across iterations. Evaluation hooks never
/// touch the training RNG streams, so traces are reproducible with and
/// without them.
pub fn pcd_train(
    agg: &AggregatedData,
    ps: &ProjectionSet,
    cfg: &TrainConfig,
    eval: Option<EvalHook<'_>>,
) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    agg.validate(ps)?;
    let n = agg.n;
    let mut params = ModelParams::zeros(ps);
    let mut state = match cfg.expectation_mode {
        ExpectationMode::Gibbs => Some(init_state(
            ps,
            agg,
            cfg.n_prime,
            cfg.seed,
            cfg.init_strategy,
        )?),
        ExpectationMode::Exact => {
            // Fail before the loop if the space is not enumerable.
            exact_moments(ps, &params, n)?;
            None
        }
    };

    let start = Instant::now();
    let mut trace = TrainTrace::default();
    for iteration in 1..=cfg.iterations {
        let (est, scale) = match (&cfg.expectation_mode, state.as_mut()) {
            (ExpectationMode::Gibbs, Some(state)) => {
                state.sweep(ps, &params)?;
                let est = state.estimate_moments(ps, &params)?;
                (est, n / cfg.n_prime as f64)
            }
            _ => {
                let m = exact_moments(ps, &params, n)?;
                (
                    MomentEstimate {
                        d_hat: m.expected_d,
                        c_hat: m.expected_c,
                    },
                    1.0,
                )
            }
        };
        let (g_mu, g_theta) = compute_gradients(agg, &est, scale, &params, cfg);
        let d_hat: Vec<f64> = est.d_hat.iter().map(|v| v * scale).collect();
        let c_hat: Vec<f64> = est.c_hat.iter().map(|v| v * scale).collect();
        let (dir_mu, dir_theta) = precondition(&g_mu, &g_theta, &d_hat, &c_hat, cfg);
        for (m, dir) in params.mu.iter_mut().zip(&dir_mu) {
            *m -= cfg.step_mu * dir;
        }
        for (t, dir) in params.theta.iter_mut().zip(&dir_theta) {
            *t -= cfg.step_theta * dir;
        }
        if !params.is_finite() {
            return Err(Error::NumericalAbort { iteration });
        }

        let moment_gap = if n > 0.0 {
            d_hat
                .iter()
                .zip(&agg.d)
                .map(|(e, d)| (e - d).abs())
                .fold(0.0f64, f64::max)
                / n
        } else {
            0.0
        };
        let test_nllh = match &eval {
            Some(hook) if iteration % cfg.eval_period.max(1) == 0 => {
                Some(evaluate_nllh(ps, &params, hook.test)?)
            }
            _ => None,
        };
        trace.rows.push(TraceRow {
            iteration,
            grad_mu_norm: l2(&g_mu),
            grad_theta_norm: l2(&g_theta),
            moment_gap,
            test_nllh,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, trace))
}

/// Test NLLH of the conditional model.
pub fn evaluate_nllh(ps: &ProjectionSet, p: &ModelParams, test: &Dataset) -> Result<f64> {
    let predictions: Vec<f64> = test
        .records()
        .iter()
        .map(|r| predict_proba(ps, p, &r.x))
        .collect();
    let labels: Vec<bool> = test.records().iter().map(|r| r.y).collect();
    Ok(nllh(&predictions, &labels)?.nllh)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
