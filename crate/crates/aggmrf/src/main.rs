//! Batch command-line interface over the library pipeline.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 numerical abort
//! during training.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aggmrf::data::CsvOptions;
use aggmrf::error::Error;
use aggmrf::gibbs::InitStrategy;
use aggmrf::pipeline::{
    run_aggregate, run_baselines, run_encode, run_evaluate, run_grid, run_synth, run_triplets,
    AggregateArgs, BaselineArgs, BaselineKind, EncodeArgs, TrainArgs,
};
use aggmrf::train::{default_steps, ExpectationMode, GradientMode, TrainConfig};

#[derive(Parser)]
#[command(name = "aggmrf", version, about = "Train label models from aggregated contingency tables")]
struct Cli {
    /// Particle-parallel worker threads (results are invariant to this).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CsvFlags {
    /// Label column name.
    #[arg(long, default_value = "label")]
    label: String,

    /// Comma-separated continuous columns to discretize.
    #[arg(long, value_delimiter = ',')]
    continuous: Vec<String>,

    /// Quantile bins for continuous columns.
    #[arg(long, default_value_t = 10)]
    bins: usize,

    /// Do not reserve an extra "unseen" modality per categorical feature.
    #[arg(long)]
    no_reserve_unseen: bool,

    /// Explicit label value mapped to 0.
    #[arg(long)]
    negative_label: Option<String>,

    /// Explicit label value mapped to 1.
    #[arg(long)]
    positive_label: Option<String>,
}

impl CsvFlags {
    fn to_options(&self) -> CsvOptions {
        let mut opts = CsvOptions::new(self.label.clone())
            .continuous(self.continuous.clone())
            .bins(self.bins)
            .reserve_unseen(!self.no_reserve_unseen);
        if let (Some(neg), Some(pos)) = (&self.negative_label, &self.positive_label) {
            opts.label_values = Some((neg.clone(), pos.clone()));
        }
        opts
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Training iterations.
    #[arg(long, short = 'T', default_value_t = 500)]
    iterations: usize,

    /// Number of persistent Gibbs particles.
    #[arg(long)]
    n_prime: Option<usize>,

    #[arg(long, default_value_t = 1.0)]
    lambda_mu: f64,

    #[arg(long, default_value_t = 64.0)]
    lambda_theta: f64,

    /// Step size on mu (default: table-count heuristic).
    #[arg(long)]
    step_mu: Option<f64>,

    /// Step size on theta (default: 1 / table count).
    #[arg(long)]
    step_theta: Option<f64>,

    /// Use a five-times-larger step on mu.
    #[arg(long)]
    fast_weights: bool,

    /// Gradient form on theta.
    #[arg(long, value_parser = ["plain", "rescaled"], default_value = "rescaled")]
    gradient: String,

    /// Replace Gibbs estimation with exact enumeration (tiny spaces only).
    #[arg(long)]
    exact: bool,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Particle initialization.
    #[arg(long, value_parser = ["marginals", "uniform"], default_value = "marginals")]
    init: String,

    /// Test evaluation period (iterations).
    #[arg(long, default_value_t = 10)]
    eval_period: usize,

    /// key=value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl TrainFlags {
    fn to_config(&self, num_tables: usize, n: f64) -> Result<TrainConfig, Error> {
        let mut cfg = TrainConfig::defaults(num_tables, n, self.fast_weights);
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            cfg = cfg.apply_kv(&text)?;
        }
        cfg.iterations = self.iterations;
        if let Some(np) = self.n_prime {
            cfg.n_prime = np;
        }
        cfg.lambda_mu = self.lambda_mu;
        cfg.lambda_theta = self.lambda_theta;
        let (step_mu, step_theta) = default_steps(num_tables, self.fast_weights);
        cfg.step_mu = self.step_mu.unwrap_or(step_mu);
        cfg.step_theta = self.step_theta.unwrap_or(step_theta);
        cfg.gradient_mode = match self.gradient.as_str() {
            "plain" => GradientMode::Plain,
            _ => GradientMode::Rescaled,
        };
        cfg.expectation_mode = if self.exact {
            ExpectationMode::Exact
        } else {
            ExpectationMode::Gibbs
        };
        cfg.seed = self.seed;
        cfg.init_strategy = match self.init.as_str() {
            "uniform" => InitStrategy::Uniform,
            _ => InitStrategy::Marginals,
        };
        cfg.eval_period = self.eval_period;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate a raw CSV into contingency tables.
    Aggregate {
        #[arg(long)]
        input: PathBuf,

        #[command(flatten)]
        csv: CsvFlags,

        /// Single-feature tables only (Naive Bayes shape).
        #[arg(long)]
        singles: bool,

        /// With pairwise tables, drop the single-feature tables.
        #[arg(long)]
        pairs_only: bool,

        /// Hash the row space into this many buckets.
        #[arg(long)]
        hash: Option<usize>,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: PathBuf,

        /// Split off this fraction of raw lines as a test file first.
        #[arg(long)]
        test_frac: Option<f64>,

        /// Where to write the split-off test lines.
        #[arg(long)]
        test_out: Option<PathBuf>,
    },

    /// Train the joint model from a tables file.
    Train {
        #[arg(long)]
        tables: PathBuf,

        #[command(flatten)]
        train: TrainFlags,

        /// Raw test CSV for periodic evaluation.
        #[arg(long)]
        test: Option<PathBuf>,

        /// Vocab sidecar (default: <tables>.vocab).
        #[arg(long)]
        vocab: Option<PathBuf>,

        #[command(flatten)]
        csv: CsvFlags,

        #[arg(long)]
        out: PathBuf,

        /// Write the per-iteration trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },

    /// Evaluate a saved model on a test CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,

        #[arg(long)]
        tables: PathBuf,

        #[arg(long)]
        vocab: Option<PathBuf>,

        #[arg(long)]
        test: PathBuf,

        #[command(flatten)]
        csv: CsvFlags,

        /// Write the report here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Regularization grid search.
    Grid {
        #[arg(long)]
        tables: PathBuf,

        #[arg(long)]
        test: PathBuf,

        #[arg(long)]
        vocab: Option<PathBuf>,

        #[command(flatten)]
        csv: CsvFlags,

        #[command(flatten)]
        train: TrainFlags,

        #[arg(long, value_delimiter = ',', required = true)]
        lambda_mu_list: Vec<f64>,

        #[arg(long, value_delimiter = ',', required = true)]
        lambda_theta_list: Vec<f64>,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Record-level baselines: logistic skyline, Naive Bayes, best pair.
    Baselines {
        #[arg(long)]
        train: PathBuf,

        #[arg(long)]
        test: PathBuf,

        #[arg(long, value_parser = ["nb", "logistic", "b2f", "all"], default_value = "all")]
        which: String,

        #[command(flatten)]
        csv: CsvFlags,

        /// Regularization grid (best test score wins).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 1.0, 4.0, 16.0, 64.0, 256.0])]
        lambda_grid: Vec<f64>,

        /// Iteration cap for the logistic optimizer.
        #[arg(long, default_value_t = 2000)]
        iterations: usize,

        /// Iterations for the Naive Bayes PCD run.
        #[arg(long, default_value_t = 400)]
        nb_iterations: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value = "xor")]
        kind: String,

        #[arg(long)]
        n: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: PathBuf,
    },

    /// Fit target encodings on held-out data.
    Encode {
        #[arg(long)]
        heldout: PathBuf,

        #[command(flatten)]
        csv: CsvFlags,

        /// Features to encode (all when omitted).
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,

        #[arg(long, default_value_t = 10)]
        count_bins: usize,

        #[arg(long, default_value_t = 10)]
        ctr_bins: usize,

        #[arg(long, default_value_t = 10.0)]
        prior: f64,

        #[arg(long)]
        out: PathBuf,

        /// Raw CSV to re-encode with the fitted maps.
        #[arg(long)]
        apply: Option<PathBuf>,

        /// Output path for the re-encoded CSV.
        #[arg(long)]
        apply_out: Option<PathBuf>,
    },

    /// Compare the joint model, logistic and Naive Bayes on feature triplets.
    Triplets {
        #[arg(long)]
        train: PathBuf,

        #[arg(long)]
        test: PathBuf,

        #[command(flatten)]
        csv: CsvFlags,

        #[arg(long, default_value_t = 100)]
        max_modalities: usize,

        #[arg(long, default_value_t = 1.0)]
        lambda: f64,

        #[arg(long, default_value_t = 300)]
        iterations: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("aggmrf: could not size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::NumericalAbort { iteration }) => {
            eprintln!("aggmrf: non-finite parameters at iteration {iteration}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("aggmrf: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Aggregate {
            input,
            csv,
            singles,
            pairs_only,
            hash,
            seed,
            out,
            test_frac,
            test_out,
        } => {
            let test_out = match (test_out, test_frac) {
                (Some(path), Some(frac)) => Some((path, frac)),
                (None, None) => None,
                _ => {
                    return Err(Error::InvalidConfig(
                        "--test-out and --test-frac must be given together".into(),
                    ))
                }
            };
            let summary = run_aggregate(&AggregateArgs {
                input,
                csv: csv.to_options(),
                pairs: !singles,
                include_singles: !pairs_only,
                hash_buckets: hash,
                seed,
                out,
                test_out,
            })?;
            println!(
                "n={} D={} K={} tables={}",
                summary.n, summary.num_features, summary.k, summary.num_tables
            );
            Ok(())
        }
        Command::Train {
            tables,
            train,
            test,
            vocab,
            csv,
            out,
            trace,
        } => {
            let (agg, ps) = aggmrf::projection::read_tables(&tables)?;
            let cfg = train.to_config(ps.num_tables(), agg.n)?;
            let (_, _, summary) = aggmrf::pipeline::run_train(&TrainArgs {
                tables,
                cfg,
                test,
                vocab,
                csv: csv.to_options(),
                out_model: out,
                out_trace: trace,
            })?;
            print!(
                "K={} moment_gap={:.6}",
                summary.k, summary.final_moment_gap
            );
            if let Some(nllh) = summary.final_test_nllh {
                print!(" test_nllh={nllh:.6}");
            }
            println!();
            Ok(())
        }
        Command::Evaluate {
            model,
            tables,
            vocab,
            test,
            csv,
            out,
        } => {
            let report = run_evaluate(
                &model,
                &tables,
                vocab.as_deref(),
                &test,
                &csv.to_options(),
            )?;
            let line = report.to_json_line();
            println!("{line}");
            if let Some(path) = out {
                fs::write(path, format!("{line}\n"))?;
            }
            Ok(())
        }
        Command::Grid {
            tables,
            test,
            vocab,
            csv,
            train,
            lambda_mu_list,
            lambda_theta_list,
            out,
        } => {
            let (agg, ps) = aggmrf::projection::read_tables(&tables)?;
            let cfg = train.to_config(ps.num_tables(), agg.n)?;
            let matrix = run_grid(
                &tables,
                &test,
                vocab.as_deref(),
                &csv.to_options(),
                &cfg,
                &lambda_mu_list,
                &lambda_theta_list,
            )?;
            print!("{matrix}");
            if let Some(path) = out {
                fs::write(path, matrix)?;
            }
            Ok(())
        }
        Command::Baselines {
            train,
            test,
            which,
            csv,
            lambda_grid,
            iterations,
            nb_iterations,
            seed,
        } => {
            if lambda_grid.is_empty() {
                return Err(Error::InvalidConfig("empty lambda grid".into()));
            }
            let which = match which.as_str() {
                "nb" => BaselineKind::NaiveBayes,
                "logistic" => BaselineKind::Logistic,
                "b2f" => BaselineKind::BestTwoFeatures,
                _ => BaselineKind::All,
            };
            let mut nb_cfg = TrainConfig::defaults(1, 1.0, false);
            nb_cfg.iterations = nb_iterations;
            nb_cfg.seed = seed;
            nb_cfg.eval_period = 5;
            let results = run_baselines(&BaselineArgs {
                train,
                test,
                which,
                csv: csv.to_options(),
                lambda_grid,
                iterations,
                nb_cfg,
            })?;
            for (name, report) in results {
                println!("{name} {}", report.to_json_line());
            }
            Ok(())
        }
        Command::Synth { kind, n, seed, out } => {
            run_synth(&kind, n, seed, &out)?;
            println!("wrote {n} records to {}", out.display());
            Ok(())
        }
        Command::Encode {
            heldout,
            csv,
            features,
            count_bins,
            ctr_bins,
            prior,
            out,
            apply,
            apply_out,
        } => {
            let apply = match (apply, apply_out) {
                (Some(a), Some(b)) => vec![(a, b)],
                (None, None) => Vec::new(),
                _ => {
                    return Err(Error::InvalidConfig(
                        "--apply and --apply-out must be given together".into(),
                    ))
                }
            };
            let encodings = run_encode(&EncodeArgs {
                heldout,
                csv: csv.to_options(),
                features,
                count_bins,
                ctr_bins,
                prior_strength: prior,
                out,
                apply,
            })?;
            for e in &encodings {
                println!(
                    "feature {} -> {} modalities",
                    e.feature, e.encoded_cardinality
                );
            }
            Ok(())
        }
        Command::Triplets {
            train,
            test,
            csv,
            max_modalities,
            lambda,
            iterations,
            seed,
            out,
        } => {
            let mut cfg = TrainConfig::defaults(6, 1.0, true);
            cfg.iterations = iterations;
            cfg.seed = seed;
            let table = run_triplets(
                &train,
                &test,
                &csv.to_options(),
                max_modalities,
                lambda,
                &cfg,
            )?;
            print!("{table}");
            if let Some(path) = out {
                fs::write(path, table)?;
            }
            Ok(())
        }
    }
}
