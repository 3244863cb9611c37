//! Persistent Gibbs particles and Monte Carlo moment estimation.
//!
//! A state holds n' particles that are carried across training iterations.
//! One sweep draws a label for each particle, then resamples every feature
//! coordinate from its conditional, in ascending feature order.
//!
//! Randomness is counter-based: the stream for a particle is derived from
//! (master seed, particle index, sweep counter), so results are bit-identical
//! for any worker count and a checkpoint can resume a run exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::model::{sigmoid, ModelParams};
use crate::projection::{empirical_marginals, AggregatedData, ProjectionSet};

/// Particles per work unit. Fixed so that chunk boundaries (and therefore
/// float reduction order) do not depend on the number of workers.
const CHUNK: usize = 4096;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-particle stream. Phase 0 is initialization; sweep t uses
/// phase t + 1.
fn stream_rng(master: u64, particle: u64, phase: u64) -> SmallRng {
    let key = mix64(
        master
            ^ mix64(particle.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            ^ mix64(phase.wrapping_mul(0xD1B5_4A32_D192_ED03)),
    );
    SmallRng::seed_from_u64(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Draw each feature independently from its empirical marginal,
    /// reconstructed from the aggregated tables.
    Marginals,
    Uniform,
}

/// The persistent particle store.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    particles: Vec<Modality>,
    labels: Vec<u8>,
    n_prime: usize,
    num_features: usize,
    master_seed: u64,
    sweep: u64,
    fingerprint: u64,
}

/// Monte Carlo aggregate estimates at particle scale (sums over n'
/// particles, before any n/n' rescaling).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub d_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
}

pub fn init_state(
    ps: &ProjectionSet,
    agg: &AggregatedData,
    n_prime: usize,
    seed: u64,
    strategy: InitStrategy,
) -> Result<GibbsState> {
    if n_prime == 0 {
        return Err(Error::InvalidConfig("n_prime must be >= 1".into()));
    }
    let schema = ps.schema();
    let d = schema.num_features();

    // Per-feature cumulative distributions for the initial draw.
    let cdfs: Vec<Vec<f64>> = match strategy {
        InitStrategy::Uniform => (0..d)
            .map(|f| {
                let m = schema.cardinality(f) as f64;
                (1..=schema.cardinality(f)).map(|i| i as f64 / m).collect()
            })
            .collect(),
        InitStrategy::Marginals => empirical_marginals(ps, agg)?
            .into_iter()
            .map(|marg| {
                let mut acc = 0.0;
                marg.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect(),
    };

    let mut particles = vec![0 as Modality; n_prime * d];
    particles
        .par_chunks_mut(CHUNK * d)
        .enumerate()
        .for_each(|(chunk_idx, chunk)| {
            let start = chunk_idx * CHUNK;
            for (j, x) in chunk.chunks_mut(d).enumerate() {
                let mut rng = stream_rng(seed, (start + j) as u64, 0);
                for (f, cdf) in cdfs.iter().enumerate() {
                    let u: f64 = rng.random();
                    x[f] = cdf.partition_point(|&acc| acc < u).min(cdf.len() - 1) as Modality;
                }
            }
        });

    Ok(GibbsState {
        particles,
        labels: vec![0; n_prime],
        n_prime,
        num_features: d,
        master_seed: seed,
        sweep: 0,
        fingerprint: ps.fingerprint(),
    })
}

impl GibbsState {
    pub fn n_prime(&self) -> usize {
        self.n_prime
    }

    pub fn sweep_count(&self) -> u64 {
        self.sweep
    }

    pub fn particle(&self, i: usize) -> &[Modality] {
        &self.particles[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> bool {
        self.labels[i] != 0
    }

    fn check_projection(&self, ps: &ProjectionSet) -> Result<()> {
        if self.fingerprint != ps.fingerprint() {
            return Err(Error::SchemaMismatch(
                "gibbs state was initialized for a different projection".into(),
            ));
        }
        Ok(())
    }

    /// One full sweep: per particle, draw the label from the conditional
    /// label model, then resample each feature in ascending order.
    pub fn sweep(&mut self, ps: &ProjectionSet, p: &ModelParams) -> Result<()> {
        self.check_projection(ps)?;
        if p.k() != ps.k() {
            return Err(Error::SchemaMismatch("parameter length mismatch".into()));
        }
        let d = self.num_features;
        let master = self.master_seed;
        let phase = self.sweep + 1;
        let max_card = (0..d)
            .map(|f| ps.schema().cardinality(f))
            .max()
            .unwrap_or(1);

        self.particles
            .par_chunks_mut(CHUNK * d)
            .zip(self.labels.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(chunk_idx, (xs, ys))| {
                let start = chunk_idx * CHUNK;
                let mut weights = vec![0.0f64; max_card];
                for (j, (x, y_out)) in xs.chunks_mut(d).zip(ys).enumerate() {
                    let mut rng = stream_rng(master, (start + j) as u64, phase);

                    let mut logit = 0.0;
                    ps.for_each_active_row(x, |row| logit += p.theta[row]);
                    let y = rng.random::<f64>() < sigmoid(logit);
                    *y_out = y as u8;

                    for f in 0..d {
                        let m = ps.schema().cardinality(f);
                        let w = &mut weights[..m];
                        w.fill(0.0);
                        for entry in ps.feature_entries(f) {
                            let mut base = entry.offset;
                            for &(other, stride) in &entry.others {
                                base += x[other] as usize * stride;
                            }
                            for (cand, wv) in w.iter_mut().enumerate() {
                                let row = ps.param_index(base + cand * entry.stride);
                                *wv += p.mu[row];
                                if y {
                                    *wv += p.theta[row];
                                }
                            }
                        }
                        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for wv in w.iter_mut() {
                            *wv = (*wv - max).exp();
                            total += *wv;
                        }
                        let target = rng.random::<f64>() * total;
                        let mut acc = 0.0;
                        let mut pick = m - 1;
                        for (cand, &wv) in w.iter().enumerate() {
                            acc += wv;
                            if acc >= target {
                                pick = cand;
                                break;
                            }
                        }
                        x[f] = pick as Modality;
                    }
                }
            });
        self.sweep += 1;
        Ok(())
    }

    /// Moment estimates with the label marginalized out: `c_hat` sums the
    /// conditional click probability rather than the sampled label.
    pub fn estimate_moments(&self, ps: &ProjectionSet, p: &ModelParams) -> Result<MomentEstimate> {
        self.check_projection(ps)?;
        let d = self.num_features;
        let k = ps.k();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = self
            .particles
            .par_chunks(CHUNK * d)
            .map(|xs| {
                let mut d_hat = vec![0.0; k];
                let mut c_hat = vec![0.0; k];
                for x in xs.chunks(d) {
                    let mut logit = 0.0;
                    ps.for_each_active_row(x, |row| logit += p.theta[row]);
                    let proba = sigmoid(logit);
                    ps.for_each_active_row(x, |row| {
                        d_hat[row] += 1.0;
                        c_hat[row] += proba;
                    });
                }
                (d_hat, c_hat)
            })
            .collect();
        Ok(reduce_partials(partials, k))
    }

    /// Moment estimates using the sampled labels instead of marginalizing;
    /// the higher-variance baseline the marginalized estimator is compared
    /// against.
    pub fn estimate_moments_sampled(&self, ps: &ProjectionSet) -> Result<MomentEstimate> {
        self.check_projection(ps)?;
        let d = self.num_features;
        let k = ps.k();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = self
            .particles
            .par_chunks(CHUNK * d)
            .zip(self.labels.par_chunks(CHUNK))
            .map(|(xs, ys)| {
                let mut d_hat = vec![0.0; k];
                let mut c_hat = vec![0.0; k];
                for (x, &y) in xs.chunks(d).zip(ys) {
                    ps.for_each_active_row(x, |row| {
                        d_hat[row] += 1.0;
                        if y != 0 {
                            c_hat[row] += 1.0;
                        }
                    });
                }
                (d_hat, c_hat)
            })
            .collect();
        Ok(reduce_partials(partials, k))
    }

    /// Binary checkpoint: text header line, then particle coordinates as
    /// little-endian u16 and one label byte per particle.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(
            f,
            "gibbs v1 n'={} sweep={} seed={}",
            self.n_prime, self.sweep, self.master_seed
        )?;
        let mut body = Vec::with_capacity(self.particles.len() * 2 + self.labels.len());
        for &m in &self.particles {
            body.extend_from_slice(&m.to_le_bytes());
        }
        body.extend_from_slice(&self.labels);
        f.write_all(&body)?;
        Ok(())
    }

    pub fn load(path: &Path, ps: &ProjectionSet) -> Result<GibbsState> {
        let bytes = fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, 1, "missing header"))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::format(path, 1, "non-utf8 header"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("gibbs") || parts.next() != Some("v1") {
            return Err(Error::format(path, 1, "expected `gibbs v1` header"));
        }
        let mut n_prime = None;
        let mut sweep = None;
        let mut seed = None;
        for p in parts {
            if let Some(v) = p.strip_prefix("n'=") {
                n_prime = v.parse::<usize>().ok();
            } else if let Some(v) = p.strip_prefix("sweep=") {
                sweep = v.parse::<u64>().ok();
            } else if let Some(v) = p.strip_prefix("seed=") {
                seed = v.parse::<u64>().ok();
            }
        }
        let n_prime = n_prime.ok_or_else(|| Error::format(path, 1, "missing n'="))?;
        let sweep = sweep.ok_or_else(|| Error::format(path, 1, "missing sweep="))?;
        let seed = seed.ok_or_else(|| Error::format(path, 1, "missing seed="))?;
        let d = ps.schema().num_features();
        let body = &bytes[newline + 1..];
        if body.len() != n_prime * d * 2 + n_prime {
            return Err(Error::format(path, 2, "unexpected body length"));
        }
        let mut particles = Vec::with_capacity(n_prime * d);
        for pair in body[..n_prime * d * 2].chunks_exact(2) {
            particles.push(u16::from_le_bytes([pair[0], pair[1]]));
        }
        let labels = body[n_prime * d * 2..].to_vec();
        let state = GibbsState {
            particles,
            labels,
            n_prime,
            num_features: d,
            master_seed: seed,
            sweep,
            fingerprint: ps.fingerprint(),
        };
        for i in 0..n_prime {
            ps.schema().validate_record(state.particle(i))?;
        }
        Ok(state)
    }
}

fn reduce_partials(partials: Vec<(Vec<f64>, Vec<f64>)>, k: usize) -> MomentEstimate {
    let mut d_hat = vec![0.0; k];
    let mut c_hat = vec![0.0; k];
    for (pd, pc) in partials {
        for i in 0..k {
            d_hat[i] += pd[i];
            c_hat[i] += pc[i];
        }
    }
    MomentEstimate { d_hat, c_hat }
}
