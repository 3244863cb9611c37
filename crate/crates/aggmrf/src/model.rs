//! The log-linear joint model on (features, label).
//!
//! The unnormalized log-density of a state `(x, y)` is `phi(x) . (mu + y
//! theta)`, which makes the conditional label model a logistic on the same
//! sparse features. Exact enumeration of the state space is provided for
//! tiny problems; it is the oracle everything else is tested against and is
//! guarded by an explicit cap.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Dataset, Modality, Schema};
use crate::error::{Error, Result};
use crate::projection::ProjectionSet;

/// States (times two labels) above this are refused by the enumeration
/// oracle.
pub const ENUMERATION_CAP: u64 = 2_000_000;

/// Parameter vectors, indexed like the projection rows they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(ps: &ProjectionSet) -> ModelParams {
        ModelParams {
            mu: vec![0.0; ps.k()],
            theta: vec![0.0; ps.k()],
        }
    }

    pub fn new(mu: Vec<f64>, theta: Vec<f64>, ps: &ProjectionSet) -> Result<ModelParams> {
        if mu.len() != ps.k() || theta.len() != ps.k() {
            return Err(Error::SchemaMismatch(format!(
                "parameter length {} does not match K={}",
                mu.len(),
                ps.k()
            )));
        }
        Ok(ModelParams { mu, theta })
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite()) && self.theta.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-700.0, 700.0);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The exponent of the joint density: sum over active rows of
/// `multiplicity * (mu_k + y * theta_k)`.
pub fn log_potential(ps: &ProjectionSet, p: &ModelParams, x: &[Modality], y: bool) -> f64 {
    let mut total = 0.0;
    ps.for_each_active_row(x, |row| {
        total += p.mu[row];
        if y {
            total += p.theta[row];
        }
    });
    total
}

/// Conditional click probability `sigma(phi(x) . theta)`.
pub fn predict_proba(ps: &ProjectionSet, p: &ModelParams, x: &[Modality]) -> f64 {
    let mut logit = 0.0;
    ps.for_each_active_row(x, |row| logit += p.theta[row]);
    sigmoid(logit)
}

/// Distribution of feature `d` given the other coordinates and the label,
/// touching only the tables containing `d`.
pub fn conditional_feature_dist(
    ps: &ProjectionSet,
    p: &ModelParams,
    x: &[Modality],
    d: usize,
    y: bool,
) -> Vec<f64> {
    let m = ps.schema().cardinality(d);
    let mut logits = vec![0.0f64; m];
    for entry in ps.feature_entries(d) {
        let mut base = entry.offset;
        for &(other, stride) in &entry.others {
            base += x[other] as usize * stride;
        }
        for (cand, logit) in logits.iter_mut().enumerate() {
            let row = ps.param_index(base + cand * entry.stride);
            *logit += p.mu[row];
            if y {
                *logit += p.theta[row];
            }
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in &mut logits {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in &mut logits {
        *l /= total;
    }
    logits
}

/// Iterator over all joint feature configurations of a schema, in odometer
/// order (last feature fastest).
pub struct StateIter {
    cards: Vec<usize>,
    current: Vec<Modality>,
    done: bool,
}

impl StateIter {
    pub fn new(schema: &Schema) -> StateIter {
        StateIter {
            cards: (0..schema.num_features())
                .map(|f| schema.cardinality(f))
                .collect(),
            current: vec![0; schema.num_features()],
            done: false,
        }
    }
}

impl Iterator for StateIter {
    type Item = Vec<Modality>;

    fn next(&mut self) -> Option<Vec<Modality>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let mut i = self.cards.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.current[i] += 1;
            if (self.current[i] as usize) < self.cards[i] {
                break;
            }
            self.current[i] = 0;
        }
        Some(out)
    }
}

fn check_cap(schema: &Schema) -> Result<()> {
    let states = schema
        .state_count()
        .map(|s| s * 2)
        .unwrap_or(u128::MAX);
    if states > ENUMERATION_CAP as u128 {
        return Err(Error::EnumerationCap {
            states,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(())
}

/// Partition function logarithm by full enumeration (log-sum-exp stabilized).
pub fn log_partition(ps: &ProjectionSet, p: &ModelParams) -> Result<f64> {
    check_cap(ps.schema())?;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    for x in StateIter::new(ps.schema()) {
        let lw0 = log_potential(ps, p, &x, false);
        let lw1 = log_potential(ps, p, &x, true);
        for lw in [lw0, lw1] {
            if lw > max {
                sum = sum * (max - lw).exp() + 1.0;
                max = lw;
            } else {
                sum += (lw - max).exp();
            }
        }
    }
    Ok(max + sum.ln())
}

/// Expected aggregates under the model at sample scale `n`, plus the
/// partition function.
#[derive(Debug, Clone)]
pub struct ExactMoments {
    pub log_z: f64,
    pub expected_d: Vec<f64>,
    pub expected_c: Vec<f64>,
    pub n: f64,
}

impl ExactMoments {
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }
}

/// Full enumeration of the joint space: `expected_d[k] = n * sum_x,y
/// pi(x,y) phi_k(x)` and `expected_c` weighted by the label.
pub fn exact_moments(ps: &ProjectionSet, p: &ModelParams, n: f64) -> Result<ExactMoments> {
    let log_z = log_partition(ps, p)?;
    let mut expected_d = vec![0.0; ps.k()];
    let mut expected_c = vec![0.0; ps.k()];
    for x in StateIter::new(ps.schema()) {
        let lw0 = log_potential(ps, p, &x, false);
        let lw1 = log_potential(ps, p, &x, true);
        let w0 = (lw0 - log_z).exp();
        let w1 = (lw1 - log_z).exp();
        ps.for_each_active_row(&x, |row| {
            expected_d[row] += n * (w0 + w1);
            expected_c[row] += n * w1;
        });
    }
    Ok(ExactMoments {
        log_z,
        expected_d,
        expected_c,
        n,
    })
}

/// Negative log-likelihood of a record-level dataset under the model. Exists
/// for oracle checks on tiny spaces only.
pub fn exact_nll_of_dataset(ps: &ProjectionSet, p: &ModelParams, ds: &Dataset) -> Result<f64> {
    let log_z = log_partition(ps, p)?;
    let mut total = 0.0;
    for r in ds.records() {
        total -= log_potential(ps, p, &r.x, r.y) - log_z;
    }
    Ok(total)
}

/// Write a model checkpoint: header, projection fingerprint, then both
/// parameter vectors as lossless bit patterns.
pub fn save_model(p: &ModelParams, ps: &ProjectionSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "mrfmodel v1 K={}", p.k());
    let _ = writeln!(out, "fingerprint {:016x}", ps.fingerprint());
    out.push_str("mu\n");
    for v in &p.mu {
        let _ = writeln!(out, "{:016x}", v.to_bits());
    }
    out.push_str("theta\n");
    for v in &p.theta {
        let _ = writeln!(out, "{:016x}", v.to_bits());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint, validating K and the projection fingerprint.
pub fn load_model(path: &Path, ps: &ProjectionSet) -> Result<ModelParams> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "empty file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("mrfmodel") || parts.next() != Some("v1") {
        return Err(Error::format(path, 1, "expected `mrfmodel v1` header"));
    }
    let k: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("K="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, 1, "missing K="))?;
    if k != ps.k() {
        return Err(Error::SchemaMismatch(format!(
            "checkpoint has K={k}, projection has K={}",
            ps.k()
        )));
    }
    let (_, fp_line) = lines
        .next()
        .ok_or_else(|| Error::format(path, 2, "missing fingerprint"))?;
    let fp = fp_line
        .strip_prefix("fingerprint ")
        .and_then(|v| u64::from_str_radix(v.trim(), 16).ok())
        .ok_or_else(|| Error::format(path, 2, "bad fingerprint line"))?;
    if fp != ps.fingerprint() {
        return Err(Error::SchemaMismatch(
            "checkpoint fingerprint does not match the projection".into(),
        ));
    }

    let mut read_vec = |name: &str| -> Result<Vec<f64>> {
        let (lno, tag) = lines
            .next()
            .ok_or_else(|| Error::format(path, 0, "truncated file"))?;
        if tag.trim() != name {
            return Err(Error::format(path, lno + 1, format!("expected `{name}`")));
        }
        let mut v = Vec::with_capacity(k);
        for _ in 0..k {
            let (vno, line) = lines
                .next()
                .ok_or_else(|| Error::format(path, lno + 1, "truncated file"))?;
            let bits = u64::from_str_radix(line.trim(), 16)
                .map_err(|_| Error::format(path, vno + 1, "bad value encoding"))?;
            v.push(f64::from_bits(bits));
        }
        Ok(v)
    };
    let mu = read_vec("mu")?;
    let theta = read_vec("theta")?;
    ModelParams::new(mu, theta, ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, Schema};
    use crate::projection::aggregate;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn toy_pairwise() -> ProjectionSet {
        ProjectionSet::build_pairwise(Schema::uniform(3, 2), false).unwrap()
    }

    fn random_params(ps: &ProjectionSet, seed: u64, scale: f64) -> ModelParams {
        let mut rng = SmallRng::seed_from_u64(seed);
        ModelParams {
            mu: (0..ps.k()).map(|_| rng.random_range(-scale..scale)).collect(),
            theta: (0..ps.k()).map(|_| rng.random_range(-scale..scale)).collect(),
        }
    }

    #[test]
    fn zero_params_have_zero_potential() {
        let ps = toy_pairwise();
        let p = ModelParams::zeros(&ps);
        for x in StateIter::new(ps.schema()) {
            assert_eq!(log_potential(&ps, &p, &x, false), 0.0);
            assert_eq!(log_potential(&ps, &p, &x, true), 0.0);
        }
    }

    #[test]
    fn potential_is_a_direct_sum_on_a_single_table() {
        let ps = ProjectionSet::build_single(Schema::new(vec![("f".into(), 2)]).unwrap());
        let p = ModelParams::new(vec![1.0, 2.0], vec![10.0, 20.0], &ps).unwrap();
        assert_eq!(log_potential(&ps, &p, &[1], true), 22.0);
        assert_eq!(log_potential(&ps, &p, &[1], false), 2.0);
    }

    #[test]
    fn potential_matches_dense_dot_product() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 3, 2.0);
        for x in StateIter::new(ps.schema()) {
            let enc = ps.encode(&x).unwrap();
            let mut dense = vec![0.0f64; ps.k()];
            for &(row, mult) in &enc.rows {
                dense[row] = mult as f64;
            }
            for y in [false, true] {
                let expected: f64 = dense
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * (p.mu[k] + if y { p.theta[k] } else { 0.0 }))
                    .sum();
                let got = log_potential(&ps, &p, &x, y);
                assert!((got - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_theta_predicts_half() {
        let ps = toy_pairwise();
        let mut p = ModelParams::zeros(&ps);
        p.mu.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        for x in StateIter::new(ps.schema()) {
            assert_eq!(predict_proba(&ps, &p, &x), 0.5);
        }
    }

    #[test]
    fn log_three_logit_predicts_three_quarters() {
        let ps = ProjectionSet::build_single(Schema::new(vec![("f".into(), 1)]).unwrap());
        let p = ModelParams::new(vec![0.0], vec![3.0f64.ln()], &ps).unwrap();
        assert!((predict_proba(&ps, &p, &[0]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(800.0), sigmoid(700.0));
        assert_eq!(sigmoid(-800.0), sigmoid(-700.0));
        assert!(sigmoid(700.0).is_finite() && sigmoid(700.0) <= 1.0);
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(-700.0) < 1e-300);
        assert_eq!(sigmoid(f64::MAX), 1.0);
        assert!(sigmoid(f64::MIN) >= 0.0);
    }

    #[test]
    fn prediction_matches_bayes_rule_on_enumeration() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 11, 1.5);
        let log_z = log_partition(&ps, &p).unwrap();
        for x in StateIter::new(ps.schema()) {
            let pi0 = (log_potential(&ps, &p, &x, false) - log_z).exp();
            let pi1 = (log_potential(&ps, &p, &x, true) - log_z).exp();
            let bayes = pi1 / (pi0 + pi1);
            assert!((predict_proba(&ps, &p, &x) - bayes).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_conditional_under_zero_params() {
        let ps = toy_pairwise();
        let p = ModelParams::zeros(&ps);
        let dist = conditional_feature_dist(&ps, &p, &[0, 0, 0], 1, false);
        assert_eq!(dist, vec![0.5, 0.5]);
    }

    #[test]
    fn conditional_on_single_table_is_softmax_of_mu() {
        let ps = ProjectionSet::build_single(Schema::new(vec![("f".into(), 3)]).unwrap());
        let p = ModelParams::new(
            vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()],
            vec![0.0; 3],
            &ps,
        )
        .unwrap();
        let dist = conditional_feature_dist(&ps, &p, &[0], 0, false);
        assert!((dist[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((dist[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((dist[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_matches_full_recomputation() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 21, 2.0);
        let x = [1, 0, 1];
        for d in 0..3 {
            for y in [false, true] {
                let dist = conditional_feature_dist(&ps, &p, &x, d, y);
                // Oracle: recompute the full potential for every candidate.
                let mut logits = Vec::new();
                for m in 0..2u16 {
                    let mut xm = x.to_vec();
                    xm[d] = m;
                    logits.push(log_potential(&ps, &p, &xm, y));
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for (m, &l) in logits.iter().enumerate() {
                    assert!((dist[m] - (l - max).exp() / total).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_moments_on_one_binary_feature() {
        let ps = ProjectionSet::build_single(Schema::new(vec![("f".into(), 2)]).unwrap());
        let p = ModelParams::zeros(&ps);
        let m = exact_moments(&ps, &p, 10.0).unwrap();
        assert!((m.z() - 4.0).abs() < 1e-12);
        assert!((m.expected_d[0] - 5.0).abs() < 1e-12);
        assert!((m.expected_d[1] - 5.0).abs() < 1e-12);
        assert!((m.expected_c[0] - 2.5).abs() < 1e-12);
        assert!((m.expected_c[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_moments_on_toy_pairwise() {
        let ps = toy_pairwise();
        let p = ModelParams::zeros(&ps);
        let m = exact_moments(&ps, &p, 12.0).unwrap();
        for k in 0..ps.k() {
            assert!((m.expected_d[k] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_sums_to_one() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 31, 3.0);
        let log_z = log_partition(&ps, &p).unwrap();
        let mut total = 0.0;
        for x in StateIter::new(ps.schema()) {
            for y in [false, true] {
                total += (log_potential(&ps, &p, &x, y) - log_z).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moments_match_monte_carlo_within_three_sigma() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 41, 1.0);
        let m = exact_moments(&ps, &p, 1.0).unwrap();
        // Draw from the exact distribution via inverse CDF.
        let states: Vec<(Vec<Modality>, bool)> = StateIter::new(ps.schema())
            .flat_map(|x| [(x.clone(), false), (x, true)])
            .collect();
        let probs: Vec<f64> = states
            .iter()
            .map(|(x, y)| (log_potential(&ps, &p, x, *y) - m.log_z).exp())
            .collect();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &pr in &probs {
            acc += pr;
            cdf.push(acc);
        }
        let draws = 1_000_000usize;
        let mut rng = SmallRng::seed_from_u64(7);
        let mut counts = vec![0.0f64; ps.k()];
        for _ in 0..draws {
            let u: f64 = rng.random();
            let idx = cdf.partition_point(|&v| v < u).min(states.len() - 1);
            ps.for_each_active_row(&states[idx].0, |row| counts[row] += 1.0);
        }
        for k in 0..ps.k() {
            let p_k = m.expected_d[k];
            let se = (p_k * (1.0 - p_k) / draws as f64).sqrt().max(1e-9);
            let got = counts[k] / draws as f64;
            assert!(
                (got - p_k).abs() < 3.0 * se + 1e-4,
                "row {k}: {got} vs {p_k} (se {se})"
            );
        }
    }

    #[test]
    fn uniform_nll_is_n_log_states() {
        let schema = Schema::uniform(2, 2);
        let ps = ProjectionSet::build_pairwise(schema.clone(), false).unwrap();
        let p = ModelParams::zeros(&ps);
        let records: Vec<Record> = vec![
            Record { x: vec![0, 0], y: true },
            Record { x: vec![1, 1], y: false },
            Record { x: vec![0, 1], y: true },
        ];
        let ds = Dataset::new(schema, records).unwrap();
        let nll = exact_nll_of_dataset(&ps, &p, &ds).unwrap();
        assert!((nll - 3.0 * 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_is_additive_in_records() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 51, 1.0);
        let schema = ps.schema().clone();
        let one = Dataset::new(
            schema.clone(),
            vec![Record { x: vec![1, 0, 1], y: true }],
        )
        .unwrap();
        let two = Dataset::new(
            schema,
            vec![
                Record { x: vec![1, 0, 1], y: true },
                Record { x: vec![1, 0, 1], y: true },
            ],
        )
        .unwrap();
        let n1 = exact_nll_of_dataset(&ps, &p, &one).unwrap();
        let n2 = exact_nll_of_dataset(&ps, &p, &two).unwrap();
        assert!((n2 - 2.0 * n1).abs() < 1e-10);
    }

    #[test]
    fn nll_gradient_matches_moment_gap() {
        // Central finite differences of the dataset NLL reproduce
        // expected_d - d and expected_c - c.
        let ps = toy_pairwise();
        let schema = ps.schema().clone();
        let mut rng = SmallRng::seed_from_u64(61);
        let records: Vec<Record> = (0..50)
            .map(|_| Record {
                x: (0..3).map(|_| rng.random_range(0..2) as Modality).collect(),
                y: rng.random_bool(0.4),
            })
            .collect();
        let ds = Dataset::new(schema, records).unwrap();
        let agg = aggregate(&ps, &ds).unwrap();
        let p = random_params(&ps, 62, 0.8);
        let m = exact_moments(&ps, &p, agg.n).unwrap();
        let h = 1e-4;
        for k in 0..ps.k() {
            let mut plus = p.clone();
            plus.mu[k] += h;
            let mut minus = p.clone();
            minus.mu[k] -= h;
            let fd = (exact_nll_of_dataset(&ps, &plus, &ds).unwrap()
                - exact_nll_of_dataset(&ps, &minus, &ds).unwrap())
                / (2.0 * h);
            let analytic = m.expected_d[k] - agg.d[k];
            assert!(
                (fd - analytic).abs() < 1e-5 * analytic.abs().max(1.0),
                "mu[{k}]: fd {fd} vs {analytic}"
            );

            let mut plus = p.clone();
            plus.theta[k] += h;
            let mut minus = p.clone();
            minus.theta[k] -= h;
            let fd = (exact_nll_of_dataset(&ps, &plus, &ds).unwrap()
                - exact_nll_of_dataset(&ps, &minus, &ds).unwrap())
                / (2.0 * h);
            let analytic = m.expected_c[k] - agg.c[k];
            assert!(
                (fd - analytic).abs() < 1e-5 * analytic.abs().max(1.0),
                "theta[{k}]: fd {fd} vs {analytic}"
            );
        }
    }

    #[test]
    fn enumeration_cap_errors_loudly() {
        let schema = Schema::uniform(21, 10);
        let ps = ProjectionSet::build_pairwise(schema, false).unwrap();
        let p = ModelParams::zeros(&ps);
        assert!(matches!(
            exact_moments(&ps, &p, 1.0),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 71, 5.0);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&p, &ps, f.path()).unwrap();
        let back = load_model(f.path(), &ps).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 72, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        save_model(&p, &ps, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        fs::write(&path, truncated).unwrap();
        assert!(load_model(&path, &ps).is_err());
    }

    #[test]
    fn checkpoint_rejects_wrong_projection() {
        let ps = toy_pairwise();
        let p = random_params(&ps, 73, 1.0);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&p, &ps, f.path()).unwrap();
        let other = ProjectionSet::build_pairwise(Schema::uniform(3, 2), true).unwrap();
        assert!(load_model(f.path(), &other).is_err());
        let other_schema = ProjectionSet::build_pairwise(Schema::uniform(4, 2), false).unwrap();
        assert!(load_model(f.path(), &other_schema).is_err());
    }
}
