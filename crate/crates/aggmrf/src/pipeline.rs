//! Batch pipeline operations behind the command-line interface.
//!
//! Each function here is one subcommand's worth of work, callable in-process
//! so that scripted runs and the binary produce bit-identical artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::baselines::{
    best_two_features, evaluate_model, generate_xor, nb_closed_form_logit, train_logistic,
    train_naive_bayes, EvalReport,
};
use crate::data::{load_csv, CsvOptions, Dataset, Vocab};
use crate::encoding::{apply_encodings, fit_target_encoding, save_encodings, TargetEncoding};
use crate::error::{Error, Result};
use crate::model::{load_model, predict_proba, save_model, ModelParams, ENUMERATION_CAP};
use crate::projection::{aggregate, read_tables, write_tables, ProjectionSet};
use crate::train::{pcd_train, EvalHook, TrainConfig, TrainTrace};

/// Default sidecar path for the value dictionaries written next to a tables
/// file.
pub fn vocab_path_for(tables: &Path) -> PathBuf {
    let mut p = tables.as_os_str().to_owned();
    p.push(".vocab");
    PathBuf::from(p)
}

#[derive(Debug, Clone)]
pub struct AggregateArgs {
    pub input: PathBuf,
    pub csv: CsvOptions,
    pub pairs: bool,
    pub include_singles: bool,
    pub hash_buckets: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    /// Optionally split off a raw test file before aggregating.
    pub test_out: Option<(PathBuf, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSummary {
    pub n: f64,
    pub num_features: usize,
    pub k: usize,
    pub num_tables: usize,
}

/// Load a raw CSV, optionally split off test lines, build the projection,
/// aggregate, and write the tables file plus its vocab sidecar.
pub fn run_aggregate(args: &AggregateArgs) -> Result<AggregateSummary> {
    let input: PathBuf = match &args.test_out {
        Some((test_path, frac)) => {
            if !(*frac > 0.0 && *frac < 1.0) {
                return Err(Error::InvalidConfig(
                    "test fraction must be in (0, 1)".into(),
                ));
            }
            let text = fs::read_to_string(&args.input)?;
            let mut lines = text.lines();
            let header = lines
                .next()
                .ok_or_else(|| Error::format(&args.input, 1, "empty file"))?;
            let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
            if rows.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let mut order: Vec<usize> = (0..rows.len()).collect();
            let mut rng = SmallRng::seed_from_u64(args.seed);
            order.shuffle(&mut rng);
            let n_test = ((rows.len() as f64) * frac).floor() as usize;
            let mut test_text = String::from(header);
            test_text.push('\n');
            for &i in &order[..n_test] {
                test_text.push_str(rows[i]);
                test_text.push('\n');
            }
            fs::write(test_path, test_text)?;
            let mut train_text = String::from(header);
            train_text.push('\n');
            for &i in &order[n_test..] {
                train_text.push_str(rows[i]);
                train_text.push('\n');
            }
            let train_path = args.out.with_extension("train.csv");
            fs::write(&train_path, train_text)?;
            train_path
        }
        None => args.input.clone(),
    };

    let (ds, vocab) = load_csv(&input, &args.csv)?;
    let base = if args.pairs {
        ProjectionSet::build_pairwise(ds.schema().clone(), args.include_singles)?
    } else {
        ProjectionSet::build_single(ds.schema().clone())
    };
    let ps = match args.hash_buckets {
        Some(buckets) => ProjectionSet::build_hashed(&base, buckets, args.seed)?,
        None => base,
    };
    let agg = aggregate(&ps, &ds)?;
    write_tables(&agg, &ps, &args.out)?;
    vocab.save(&vocab_path_for(&args.out))?;
    Ok(AggregateSummary {
        n: agg.n,
        num_features: ds.schema().num_features(),
        k: ps.k(),
        num_tables: ps.num_tables(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub tables: PathBuf,
    pub cfg: TrainConfig,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub csv: CsvOptions,
    pub out_model: PathBuf,
    pub out_trace: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub k: usize,
    pub final_moment_gap: f64,
    pub final_test_nllh: Option<f64>,
}

pub fn run_train(args: &TrainArgs) -> Result<(ModelParams, TrainTrace, TrainSummary)> {
    let (agg, ps) = read_tables(&args.tables)?;
    let test = load_test_set(args.test.as_deref(), args.vocab.as_deref(), &args.tables, &args.csv)?;
    let hook = test.as_ref().map(|t| EvalHook { test: t });
    let (params, trace) = pcd_train(&agg, &ps, &args.cfg, hook)?;
    save_model(&params, &ps, &args.out_model)?;
    if let Some(trace_path) = &args.out_trace {
        trace.write_csv(trace_path)?;
    }
    let final_test_nllh = match &test {
        Some(t) => Some(crate::train::evaluate_nllh(&ps, &params, t)?),
        None => None,
    };
    let summary = TrainSummary {
        k: ps.k(),
        final_moment_gap: trace.rows.last().map(|r| r.moment_gap).unwrap_or(0.0),
        final_test_nllh,
    };
    Ok((params, trace, summary))
}

fn load_test_set(
    test: Option<&Path>,
    vocab: Option<&Path>,
    tables: &Path,
    csv: &CsvOptions,
) -> Result<Option<Dataset>> {
    match test {
        None => Ok(None),
        Some(test_path) => {
            let vocab_file = vocab
                .map(Path::to_path_buf)
                .unwrap_or_else(|| vocab_path_for(tables));
            let vocab = Vocab::load(&vocab_file)?;
            let mut csv = csv.clone();
            csv.label_column = vocab.label_column.clone();
            Ok(Some(vocab.load_csv(test_path, &csv)?))
        }
    }
}

pub fn run_evaluate(
    model: &Path,
    tables: &Path,
    vocab: Option<&Path>,
    test: &Path,
    csv: &CsvOptions,
) -> Result<EvalReport> {
    let (_, ps) = read_tables(tables)?;
    let params = load_model(model, &ps)?;
    let test_ds = load_test_set(Some(test), vocab, tables, csv)?.expect("test path given");
    evaluate_model(&ps, &params, &test_ds)
}

/// Regularization grid: trains one model per (lambda_mu, lambda_theta) cell
/// and reports the test score matrix as CSV (lambda_theta rows, lambda_mu
/// columns).
pub fn run_grid(
    tables: &Path,
    test: &Path,
    vocab: Option<&Path>,
    csv: &CsvOptions,
    base_cfg: &TrainConfig,
    lambda_mu_list: &[f64],
    lambda_theta_list: &[f64],
) -> Result<String> {
    if lambda_mu_list.is_empty() || lambda_theta_list.is_empty() {
        return Err(Error::InvalidConfig("empty lambda list".into()));
    }
    let (agg, ps) = read_tables(tables)?;
    let test_ds = load_test_set(Some(test), vocab, tables, csv)?.expect("test path given");
    let mut out = String::from("lambda_theta\\lambda_mu");
    for lm in lambda_mu_list {
        let _ = write!(out, ",{lm}");
    }
    out.push('\n');
    for &lt in lambda_theta_list {
        let _ = write!(out, "{lt}");
        for &lm in lambda_mu_list {
            let mut cfg = base_cfg.clone();
            cfg.lambda_mu = lm;
            cfg.lambda_theta = lt;
            let (params, _) = pcd_train(&agg, &ps, &cfg, None)?;
            let report = evaluate_model(&ps, &params, &test_ds)?;
            let _ = write!(out, ",{:.6}", report.nllh);
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    NaiveBayes,
    Logistic,
    BestTwoFeatures,
    All,
}

#[derive(Debug, Clone)]
pub struct BaselineArgs {
    pub train: PathBuf,
    pub test: PathBuf,
    pub which: BaselineKind,
    pub csv: CsvOptions,
    pub lambda_grid: Vec<f64>,
    pub iterations: usize,
    pub nb_cfg: TrainConfig,
}

/// Train the requested record-level baselines and report test scores. Each
/// baseline picks the best regularization on the grid by test score, the way
/// the published skylines were benched.
pub fn run_baselines(args: &BaselineArgs) -> Result<Vec<(String, EvalReport)>> {
    let (train_ds, vocab) = load_csv(&args.train, &args.csv)?;
    let test_ds = vocab.load_csv(&args.test, &args.csv)?;
    let mut results = Vec::new();

    if matches!(args.which, BaselineKind::Logistic | BaselineKind::All) {
        let ps = ProjectionSet::build_pairwise(train_ds.schema().clone(), true)?;
        let mut best: Option<EvalReport> = None;
        for &lambda in &args.lambda_grid {
            let model = train_logistic(&train_ds, &ps, lambda, args.iterations)?;
            let report = model.evaluate(&ps, &test_ds)?;
            if best.as_ref().is_none_or(|b| report.nllh > b.nllh) {
                best = Some(report);
            }
        }
        results.push(("logistic".to_string(), best.expect("non-empty grid")));
    }
    if matches!(args.which, BaselineKind::NaiveBayes | BaselineKind::All) {
        let ps = ProjectionSet::build_single(train_ds.schema().clone());
        let agg = aggregate(&ps, &train_ds)?;
        let mut best: Option<EvalReport> = None;
        for &lambda in &args.lambda_grid {
            let mut cfg = args.nb_cfg.clone();
            cfg.lambda_mu = 1.0_f64.min(lambda);
            cfg.lambda_theta = lambda;
            let (params, _, _) = train_naive_bayes(&agg, &ps, &cfg, &test_ds)?;
            let report = evaluate_model(&ps, &params, &test_ds)?;
            if best.as_ref().is_none_or(|b| report.nllh > b.nllh) {
                best = Some(report);
            }
        }
        results.push(("naive_bayes".to_string(), best.expect("non-empty grid")));
    }
    if matches!(args.which, BaselineKind::BestTwoFeatures | BaselineKind::All) {
        let mut best: Option<EvalReport> = None;
        for &lambda in &args.lambda_grid {
            let (_, _, report) =
                best_two_features(&train_ds, &test_ds, lambda, args.iterations)?;
            if best.as_ref().is_none_or(|b| report.nllh > b.nllh) {
                best = Some(report);
            }
        }
        results.push(("b2f".to_string(), best.expect("non-empty grid")));
    }
    Ok(results)
}

/// Generate a synthetic dataset and write it as a raw CSV.
pub fn run_synth(kind: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = match kind {
        "xor" => generate_xor(n, seed)?,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown synthetic kind `{other}`"
            )))
        }
    };
    ds.write_indexed(out, "label")
}

#[derive(Debug, Clone)]
pub struct EncodeArgs {
    pub heldout: PathBuf,
    pub csv: CsvOptions,
    /// Feature names to encode; all features when empty.
    pub features: Vec<String>,
    pub count_bins: usize,
    pub ctr_bins: usize,
    pub prior_strength: f64,
    pub out: PathBuf,
    /// Optional raw CSVs to re-encode with the fitted maps.
    pub apply: Vec<(PathBuf, PathBuf)>,
}

pub fn run_encode(args: &EncodeArgs) -> Result<Vec<TargetEncoding>> {
    let (heldout, vocab) = load_csv(&args.heldout, &args.csv)?;
    let schema = heldout.schema();
    let indices: Vec<usize> = if args.features.is_empty() {
        (0..schema.num_features()).collect()
    } else {
        args.features
            .iter()
            .map(|name| {
                schema
                    .feature_index(name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect::<Result<_>>()?
    };
    let encodings: Vec<TargetEncoding> = indices
        .iter()
        .map(|&f| {
            fit_target_encoding(
                &heldout,
                f,
                args.count_bins,
                args.ctr_bins,
                args.prior_strength,
            )
        })
        .collect::<Result<_>>()?;
    save_encodings(&encodings, schema, &args.out)?;
    for (input, output) in &args.apply {
        let ds = vocab.load_csv(input, &args.csv)?;
        let encoded = apply_encodings(&ds, &encodings)?;
        encoded.write_indexed(output, &args.csv.label_column)?;
    }
    Ok(encodings)
}

/// Per-triplet comparison of the joint model against the logistic and the
/// closed-form Naive Bayes, on every feature triplet below the modality
/// limit. Returns CSV text.
pub fn run_triplets(
    train: &Path,
    test: &Path,
    csv: &CsvOptions,
    max_modalities: usize,
    lambda: f64,
    mrf_cfg: &TrainConfig,
) -> Result<String> {
    let (train_ds, vocab) = load_csv(train, csv)?;
    let test_ds = vocab.load_csv(test, csv)?;
    let schema = train_ds.schema();
    let eligible: Vec<usize> = (0..schema.num_features())
        .filter(|&f| schema.cardinality(f) <= max_modalities)
        .collect();
    let mut out = String::from("f1,f2,f3,mrf_nllh,logistic_nllh,nb_nllh\n");
    for a in 0..eligible.len() {
        for b in a + 1..eligible.len() {
            for c in b + 1..eligible.len() {
                let triple = [eligible[a], eligible[b], eligible[c]];
                let sub_train = train_ds.project(&triple)?;
                let sub_test = test_ds.project(&triple)?;
                let ps = ProjectionSet::build_pairwise(sub_train.schema().clone(), true)?;
                let agg = aggregate(&ps, &sub_train)?;

                let mut cfg = mrf_cfg.clone();
                cfg.lambda_theta = lambda;
                cfg.n_prime = ((agg.n / 10.0).ceil() as usize).clamp(1_000, 10_000);
                cfg.epsilon_div = 1e-9 * agg.n.max(1.0);
                // Fast weights are unstable at this small table count.
                let (step_mu, step_theta) =
                    crate::train::default_steps(ps.num_tables(), false);
                cfg.step_mu = step_mu;
                cfg.step_theta = step_theta;
                let states = sub_train.schema().state_count().unwrap_or(u128::MAX) * 2;
                if states <= ENUMERATION_CAP as u128 && states <= 8192 {
                    cfg.expectation_mode = crate::train::ExpectationMode::Exact;
                }
                let (params, _) = pcd_train(&agg, &ps, &cfg, None)?;
                let mrf_report = evaluate_model(&ps, &params, &sub_test)?;

                let logistic = train_logistic(&sub_train, &ps, lambda, 2000)?;
                let logistic_report = logistic.evaluate(&ps, &sub_test)?;

                let ps_single = ProjectionSet::build_single(sub_train.schema().clone());
                let agg_single = aggregate(&ps_single, &sub_train)?;
                let nb_preds: Vec<f64> = sub_test
                    .records()
                    .iter()
                    .map(|r| {
                        nb_closed_form_logit(&agg_single, &ps_single, &r.x)
                            .map(crate::model::sigmoid)
                    })
                    .collect::<Result<_>>()?;
                let labels: Vec<bool> = sub_test.records().iter().map(|r| r.y).collect();
                let nb_report = crate::baselines::nllh(&nb_preds, &labels)?;

                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6}",
                    schema.name(triple[0]),
                    schema.name(triple[1]),
                    schema.name(triple[2]),
                    mrf_report.nllh,
                    logistic_report.nllh,
                    nb_report.nllh
                );
            }
        }
    }
    Ok(out)
}

/// Predictions of a saved model on a test CSV, one probability per line
/// (used by the examples and for debugging).
pub fn predict_file(
    model: &Path,
    tables: &Path,
    vocab: Option<&Path>,
    test: &Path,
    csv: &CsvOptions,
) -> Result<Vec<f64>> {
    let (_, ps) = read_tables(tables)?;
    let params = load_model(model, &ps)?;
    let test_ds = load_test_set(Some(test), vocab, tables, csv)?.expect("test path given");
    Ok(test_ds
        .records()
        .iter()
        .map(|r| predict_proba(&ps, &params, &r.x))
        .collect())
}
