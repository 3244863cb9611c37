//! Comparison models and the evaluation metric.
//!
//! The normalized log-likelihood used everywhere is
//! `1 - log_loss / entropy(labels)`: the constant mean predictor scores
//! exactly 0, perfect predictions score 1, and anything worse than constant
//! goes negative. (The published definition is recovered by reading its
//! `LogLikelihood` as the negated log loss.)

use std::fmt::Write as _;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use crate::data::{Dataset, Modality, Record, Schema};
use crate::error::{Error, Result};
use crate::model::{predict_proba, sigmoid, ModelParams};
use crate::projection::{aggregate, AggregatedData, ProjectionKind, ProjectionSet};
use crate::train::{pcd_train, EvalHook, TrainConfig, TrainTrace};

const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub nllh: f64,
    pub log_loss: f64,
    pub label_entropy: f64,
    pub n_test: usize,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\"nllh\": {}, \"log_loss\": {}, \"entropy\": {}, \"n\": {}}}",
            self.nllh, self.log_loss, self.label_entropy, self.n_test
        );
        s
    }
}

/// Normalized log-likelihood of a prediction sequence. Errors when the labels
/// are all-zero or all-one (zero entropy).
pub fn nllh(predictions: &[f64], labels: &[bool]) -> Result<EvalReport> {
    assert_eq!(predictions.len(), labels.len());
    if labels.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let n = labels.len() as f64;
    let mean = labels.iter().filter(|&&y| y).count() as f64 / n;
    if mean == 0.0 || mean == 1.0 {
        return Err(Error::DegenerateLabels);
    }
    let entropy = -(mean * mean.ln() + (1.0 - mean) * (1.0 - mean).ln());
    let mut log_loss = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        log_loss -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    log_loss /= n;
    Ok(EvalReport {
        nllh: 1.0 - log_loss / entropy,
        log_loss,
        label_entropy: entropy,
        n_test: labels.len(),
    })
}

/// Evaluate a trained joint model on a test dataset.
pub fn evaluate_model(ps: &ProjectionSet, p: &ModelParams, test: &Dataset) -> Result<EvalReport> {
    let predictions: Vec<f64> = test
        .records()
        .iter()
        .map(|r| predict_proba(ps, p, &r.x))
        .collect();
    let labels: Vec<bool> = test.records().iter().map(|r| r.y).collect();
    nllh(&predictions, &labels)
}

/// A logistic model over the same sparse row features as the joint model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub lambda: f64,
}

impl LogisticModel {
    pub fn predict(&self, ps: &ProjectionSet, x: &[Modality]) -> f64 {
        let mut logit = 0.0;
        ps.for_each_active_row(x, |row| logit += self.weights[row]);
        sigmoid(logit)
    }

    pub fn evaluate(&self, ps: &ProjectionSet, test: &Dataset) -> Result<EvalReport> {
        let predictions: Vec<f64> = test
            .records()
            .iter()
            .map(|r| self.predict(ps, &r.x))
            .collect();
        let labels: Vec<bool> = test.records().iter().map(|r| r.y).collect();
        nllh(&predictions, &labels)
    }
}

/// Fit a logistic regression on record-level data by full-batch descent with
/// the same diagonal preconditioning as the joint trainer plus a backtracking
/// step, minimizing mean log loss + lambda ||w||^2 / n. Stops at the
/// iteration cap or when the mean-scale gradient drops below 1e-6.
pub fn train_logistic(
    ds: &Dataset,
    ps: &ProjectionSet,
    lambda: f64,
    iterations: usize,
) -> Result<LogisticModel> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.schema() != ps.schema() {
        return Err(Error::SchemaMismatch(
            "dataset schema differs from projection schema".into(),
        ));
    }
    let n = ds.len();
    let t = ps.num_tables();
    let k = ps.k();
    // Row visits per record, one per table, multiplicities as repeats.
    let mut visits = Vec::with_capacity(n * t);
    for r in ds.records() {
        ps.for_each_active_row(&r.x, |row| visits.push(row as u32));
    }
    let labels: Vec<bool> = ds.records().iter().map(|r| r.y).collect();

    let objective = |w: &[f64]| -> f64 {
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let logit: f64 = visits[i * t..(i + 1) * t]
                .iter()
                .map(|&row| w[row as usize])
                .sum();
            // log(1 + exp(-margin)) with the stable branch.
            let margin = if y { logit } else { -logit };
            total += if margin > 0.0 {
                (-margin).exp().ln_1p()
            } else {
                -margin + margin.exp().ln_1p()
            };
        }
        total + lambda * w.iter().map(|v| v * v).sum::<f64>()
    };

    let mut w = vec![0.0f64; k];
    let mut grad = vec![0.0f64; k];
    let mut precond = vec![0.0f64; k];
    let eps = 1e-9 * n as f64;
    let mut current = objective(&w);
    for _ in 0..iterations {
        grad.fill(0.0);
        precond.fill(0.0);
        for (i, &y) in labels.iter().enumerate() {
            let rows = &visits[i * t..(i + 1) * t];
            let logit: f64 = rows.iter().map(|&row| w[row as usize]).sum();
            let p = sigmoid(logit);
            let residual = p - y as u8 as f64;
            for &row in rows {
                grad[row as usize] += residual;
                precond[row as usize] += p;
            }
        }
        for i in 0..k {
            grad[i] += 2.0 * lambda * w[i];
        }
        let max_grad = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_grad / n as f64 <= 1e-6 {
            break;
        }
        let dir: Vec<f64> = grad
            .iter()
            .zip(&precond)
            .map(|(g, c)| g / (c + 2.0 * lambda + eps))
            .collect();
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut step = 1.0;
        let mut candidate = vec![0.0f64; k];
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..k {
                candidate[i] = w[i] - step * dir[i];
            }
            let value = objective(&candidate);
            if value <= current - 1e-4 * step * slope {
                std::mem::swap(&mut w, &mut candidate);
                current = value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(LogisticModel { weights: w, lambda })
}

/// Train the Naive Bayes special case: the joint model on single-feature
/// tables, with early stopping on the test score. Returns the parameters of
/// the best-scoring iteration (reached by deterministic replay) together
/// with that iteration index and the full trace.
///
/// As published, the reported score is the best test value seen during
/// training; without early stopping the test score eventually degrades below
/// the constant model.
pub fn train_naive_bayes(
    agg_single: &AggregatedData,
    ps_single: &ProjectionSet,
    cfg: &TrainConfig,
    test: &Dataset,
) -> Result<(ModelParams, usize, TrainTrace)> {
    if *ps_single.kind() != ProjectionKind::Single {
        return Err(Error::InvalidConfig(
            "naive bayes requires a single-feature projection".into(),
        ));
    }
    let hook = EvalHook { test };
    let (_, trace) = pcd_train(agg_single, ps_single, cfg, Some(hook))?;
    let best = trace
        .rows
        .iter()
        .filter_map(|r| r.test_nllh.map(|v| (r.iteration, v)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidConfig("no evaluation rows in trace".into()))?;
    let mut replay = cfg.clone();
    replay.iterations = best;
    let (params, _) = pcd_train(agg_single, ps_single, &replay, None)?;
    Ok((params, best, trace))
}

/// Closed-form Naive Bayes logit from single-feature tables: class-prior log
/// odds plus per-feature log ratios of the empirical conditionals. Undefined
/// (infinite) on zero cells.
pub fn nb_closed_form_logit(
    agg: &AggregatedData,
    ps: &ProjectionSet,
    x: &[Modality],
) -> Result<f64> {
    if *ps.kind() != ProjectionKind::Single {
        return Err(Error::InvalidConfig(
            "closed-form naive bayes requires single-feature tables".into(),
        ));
    }
    let first_rows = ps.table_rows(0);
    let clicks: f64 = agg.c[..first_rows].iter().sum();
    let n = agg.n;
    let d = ps.schema().num_features();
    let mut logit = (clicks / (n - clicks)).ln();
    // One table per feature, in feature order.
    for (f, &m) in x.iter().enumerate().take(d) {
        let row = ps.row_offsets()[f] + m as usize;
        let c = agg.c[row];
        let d_count = agg.d[row];
        logit += (c / clicks).ln() - ((d_count - c) / (n - clicks)).ln();
    }
    Ok(logit)
}

/// Exhaustive best-pair search: for every unordered feature pair, fit a
/// logistic on the two singles plus their interaction table and keep the best
/// test score.
pub fn best_two_features(
    ds_train: &Dataset,
    ds_test: &Dataset,
    lambda: f64,
    iterations: usize,
) -> Result<((usize, usize), LogisticModel, EvalReport)> {
    let d = ds_train.schema().num_features();
    if d < 2 {
        return Err(Error::InvalidSchema("need at least two features".into()));
    }
    let mut best: Option<((usize, usize), LogisticModel, EvalReport)> = None;
    for i in 0..d {
        for j in i + 1..d {
            let sub_train = ds_train.project(&[i, j])?;
            let sub_test = ds_test.project(&[i, j])?;
            let ps = ProjectionSet::build_pairwise(sub_train.schema().clone(), true)?;
            let model = train_logistic(&sub_train, &ps, lambda, iterations)?;
            let report = model.evaluate(&ps, &sub_test)?;
            if best
                .as_ref()
                .is_none_or(|(_, _, b)| report.nllh > b.nllh)
            {
                best = Some(((i, j), model, report));
            }
        }
    }
    Ok(best.expect("at least one pair"))
}

/// Synthetic distribution on which the pairwise tables are provably blind:
/// x3 = x1 xor x2 with fair-coin inputs, and P(Y=1 | x) = 0.25 + 0.5 * x3.
pub fn generate_xor(n: usize, seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    let schema = Schema::new(vec![
        ("x1".into(), 2),
        ("x2".into(), 2),
        ("x3".into(), 2),
    ])?;
    let mut rng = SmallRng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let x1 = rng.random_bool(0.5) as Modality;
            let x2 = rng.random_bool(0.5) as Modality;
            let x3 = x1 ^ x2;
            let y = rng.random_bool(0.25 + 0.5 * x3 as f64);
            Record {
                x: vec![x1, x2, x3],
                y,
            }
        })
        .collect();
    Dataset::new(schema, records)
}

/// Convenience: aggregate a dataset on its single-feature tables.
pub fn single_table_aggregates(ds: &Dataset) -> Result<(AggregatedData, ProjectionSet)> {
    let ps = ProjectionSet::build_single(ds.schema().clone());
    let agg = aggregate(&ps, ds)?;
    Ok((agg, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::ExpectationMode;

    #[test]
    fn constant_mean_predictor_scores_zero() {
        let labels = vec![true, false, true, true, false, false, true];
        let mean = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
        let preds = vec![mean; labels.len()];
        let report = nllh(&preds, &labels).unwrap();
        assert!(report.nllh.abs() < 1e-12);
    }

    #[test]
    fn half_predictions_on_balanced_labels_score_zero() {
        let labels = vec![true, false, true, false];
        let report = nllh(&[0.5; 4], &labels).unwrap();
        assert!(report.nllh.abs() < 1e-12);
        assert!((report.log_loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![true, false, true];
        let preds = vec![1.0, 0.0, 1.0];
        let report = nllh(&preds, &labels).unwrap();
        assert!((report.nllh - 1.0).abs() < 1e-9);
    }

    #[test]
    fn better_models_score_higher() {
        let labels: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let good: Vec<f64> = labels.iter().map(|&y| if y { 0.8 } else { 0.2 }).collect();
        let mean = labels.iter().filter(|&&y| y).count() as f64 / 100.0;
        let constant = vec![mean; 100];
        let g = nllh(&good, &labels).unwrap().nllh;
        let c = nllh(&constant, &labels).unwrap().nllh;
        assert!(g > c);
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn degenerate_labels_error() {
        assert!(matches!(
            nllh(&[0.5, 0.5], &[true, true]),
            Err(Error::DegenerateLabels)
        ));
        assert!(matches!(
            nllh(&[0.5, 0.5], &[false, false]),
            Err(Error::DegenerateLabels)
        ));
    }

    #[test]
    fn report_json_shape() {
        let labels = vec![true, false];
        let report = nllh(&[0.5, 0.5], &labels).unwrap();
        let line = report.to_json_line();
        assert!(line.starts_with("{\"nllh\": "));
        assert!(line.contains("\"n\": 2"));
    }

    fn separable_toy() -> (Dataset, ProjectionSet) {
        let schema = Schema::new(vec![("f".into(), 2)]).unwrap();
        let records: Vec<Record> = (0..40)
            .map(|i| Record {
                x: vec![(i % 2) as Modality],
                y: i % 2 == 0,
            })
            .collect();
        let ds = Dataset::new(schema.clone(), records).unwrap();
        let ps = ProjectionSet::build_single(schema);
        (ds, ps)
    }

    #[test]
    fn logistic_learns_a_separable_feature() {
        let (ds, ps) = separable_toy();
        let model = train_logistic(&ds, &ps, 1.0, 500).unwrap();
        assert!(model.weights.iter().all(|w| w.is_finite()));
        let report = model.evaluate(&ps, &ds).unwrap();
        assert!(report.nllh > 0.3, "nllh {}", report.nllh);
        assert!(model.predict(&ps, &[0]) > 0.8);
        assert!(model.predict(&ps, &[1]) < 0.2);
    }

    #[test]
    fn heavy_regularization_pushes_to_half() {
        let (ds, ps) = separable_toy();
        let model = train_logistic(&ds, &ps, 1e9, 500).unwrap();
        assert!((model.predict(&ps, &[0]) - 0.5).abs() < 1e-3);
        assert!((model.predict(&ps, &[1]) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn logistic_recovers_the_xor_conditional() {
        let ds = generate_xor(30_000, 5).unwrap();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), true).unwrap();
        let model = train_logistic(&ds, &ps, 1.0, 2000).unwrap();
        // Only the four feasible states (x3 = x1 xor x2) ever occur.
        for x in crate::model::StateIter::new(ds.schema()).filter(|x| x[2] == x[0] ^ x[1]) {
            let truth = 0.25 + 0.5 * x[2] as f64;
            let got = model.predict(&ps, &x);
            assert!((got - truth).abs() < 0.03, "x {x:?}: {got} vs {truth}");
        }
    }

    #[test]
    fn xor_generator_statistics() {
        let n = 100_000;
        let ds = generate_xor(n, 11).unwrap();
        let nf = n as f64;
        let freq = |f: usize| {
            ds.records().iter().filter(|r| r.x[f] == 1).count() as f64 / nf
        };
        let sigma = (0.25f64 / nf).sqrt();
        assert!((freq(2) - 0.5).abs() < 4.0 * sigma);
        // Pairwise independence of x1 and x3.
        let joint11 = ds
            .records()
            .iter()
            .filter(|r| r.x[0] == 1 && r.x[2] == 1)
            .count() as f64
            / nf;
        let corr = joint11 - freq(0) * freq(2);
        assert!(corr.abs() < 4.0 * sigma, "corr {corr}");
        let y_given_x3: f64 = {
            let hits = ds.records().iter().filter(|r| r.x[2] == 1);
            let total = hits.clone().count() as f64;
            hits.filter(|r| r.y).count() as f64 / total
        };
        assert!((y_given_x3 - 0.75).abs() < 4.0 * (0.1875f64 / (nf / 2.0)).sqrt());
    }

    #[test]
    fn trained_nb_matches_closed_form() {
        // Two features, all cells populated.
        let schema = Schema::uniform(2, 2);
        let mut records = Vec::new();
        let counts = [
            ((0, 0), 12, 9),
            ((0, 1), 8, 2),
            ((1, 0), 6, 2),
            ((1, 1), 14, 3),
        ];
        for ((a, b), total, pos) in counts {
            for i in 0..total {
                records.push(Record {
                    x: vec![a as Modality, b as Modality],
                    y: i < pos,
                });
            }
        }
        let ds = Dataset::new(schema, records).unwrap();
        let (agg, ps) = single_table_aggregates(&ds).unwrap();
        let mut cfg = TrainConfig::defaults(ps.num_tables(), agg.n, false);
        cfg.expectation_mode = ExpectationMode::Exact;
        cfg.lambda_mu = 1e-8;
        cfg.lambda_theta = 1e-8;
        cfg.iterations = 8000;
        cfg.eval_period = 200;
        let (params, best, _) = train_naive_bayes(&agg, &ps, &cfg, &ds).unwrap();
        assert!(best >= 1);
        for x in crate::model::StateIter::new(ps.schema()) {
            let closed = sigmoid(nb_closed_form_logit(&agg, &ps, &x).unwrap());
            let trained = predict_proba(&ps, &params, &x);
            assert!(
                (closed - trained).abs() < 1e-3,
                "x {x:?}: closed {closed} trained {trained}"
            );
        }
    }

    #[test]
    fn predictive_pair_beats_noise() {
        let mut rng = SmallRng::seed_from_u64(21);
        let schema = Schema::uniform(4, 2);
        // The label needs the joint of features 0 and 1; features 2 and 3
        // are noise.
        let records: Vec<Record> = (0..6000)
            .map(|_| {
                let a = rng.random_bool(0.5) as Modality;
                let b = rng.random_bool(0.5) as Modality;
                let noise1 = rng.random_bool(0.5) as Modality;
                let noise2 = rng.random_bool(0.5) as Modality;
                let y = rng.random_bool(if a == 1 && b == 1 { 0.9 } else { 0.1 });
                Record {
                    x: vec![a, b, noise1, noise2],
                    y,
                }
            })
            .collect();
        let ds = Dataset::new(schema, records).unwrap();
        let (train, _, test) = crate::data::split_dataset(&ds, (0.6, 0.2, 0.2), 3).unwrap();
        let ((i, j), _, report) = best_two_features(&train, &test, 1.0, 500).unwrap();
        assert_eq!((i, j), (0, 1));
        assert!(report.nllh > 0.2, "nllh {}", report.nllh);
    }
}
