//! Target encodings: cardinality reduction fitted on held-out data.
//!
//! Each raw modality of a high-cardinality feature is summarized by its
//! held-out occurrence count and smoothed positive rate; the two are
//! quantile-binned jointly and the resulting (count bin, rate bin) pairs
//! become the encoded modalities. Fitting and training must not share data,
//! otherwise the encoded feature leaks the label.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{fit_discretization, Dataset, Modality, Record, Schema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoding {
    pub feature: usize,
    /// Raw modality to encoded modality, total over the raw cardinality.
    pub map: Vec<Modality>,
    pub encoded_cardinality: usize,
    pub count_bins: usize,
    pub ctr_bins: usize,
    /// Held-out (occurrences, positives) per raw modality.
    pub stats: Vec<(f64, f64)>,
    /// Smoothed rate per raw modality.
    pub rates: Vec<f64>,
}

/// Fit one feature's encoding on held-out data.
///
/// Occurrence counts are binned on a log(1+o) scale, smoothed rates
/// `(positives + prior * global_rate) / (o + prior)` on their own scale,
/// both into per-modality quantile bins. Raw modalities unseen in the
/// held-out data map to a reserved final slot.
pub fn fit_target_encoding(
    heldout: &Dataset,
    feature: usize,
    count_bins: usize,
    ctr_bins: usize,
    prior_strength: f64,
) -> Result<TargetEncoding> {
    if heldout.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if count_bins < 1 || ctr_bins < 1 {
        return Err(Error::InvalidConfig("bin counts must be >= 1".into()));
    }
    if feature >= heldout.schema().num_features() {
        return Err(Error::InvalidConfig(format!(
            "feature index {feature} out of range"
        )));
    }
    let cardinality = heldout.schema().cardinality(feature);
    let mut stats = vec![(0.0f64, 0.0f64); cardinality];
    for r in heldout.records() {
        let m = r.x[feature] as usize;
        stats[m].0 += 1.0;
        if r.y {
            stats[m].1 += 1.0;
        }
    }
    let global_rate = heldout.label_mean();
    let rates: Vec<f64> = stats
        .iter()
        .map(|&(o, pos)| (pos + prior_strength * global_rate) / (o + prior_strength))
        .collect();

    let seen: Vec<usize> = (0..cardinality).filter(|&m| stats[m].0 > 0.0).collect();
    let count_values: Vec<f64> = seen.iter().map(|&m| stats[m].0.ln_1p()).collect();
    let rate_values: Vec<f64> = seen.iter().map(|&m| rates[m]).collect();
    let count_plan = fit_discretization(&count_values, count_bins)?;
    let rate_plan = fit_discretization(&rate_values, ctr_bins)?;

    // Dense remap of the (count bin, rate bin) pairs actually used, in raw
    // modality order; the reserved slot comes last.
    let mut pair_to_dense: Vec<Option<Modality>> = vec![None; count_bins * ctr_bins + 1];
    let mut map = vec![0 as Modality; cardinality];
    let mut next: Modality = 0;
    for &m in &seen {
        let pair = count_plan.apply(stats[m].0.ln_1p()) as usize * ctr_bins
            + rate_plan.apply(rates[m]) as usize;
        let dense = *pair_to_dense[pair].get_or_insert_with(|| {
            let d = next;
            next += 1;
            d
        });
        map[m] = dense;
    }
    let reserved = next;
    for m in 0..cardinality {
        if stats[m].0 == 0.0 {
            map[m] = reserved;
        }
    }
    Ok(TargetEncoding {
        feature,
        map,
        encoded_cardinality: reserved as usize + 1,
        count_bins,
        ctr_bins,
        stats,
        rates,
    })
}

/// Apply encodings to a dataset, producing the schema with reduced
/// cardinalities. Record order and labels are untouched.
pub fn apply_encodings(ds: &Dataset, encodings: &[TargetEncoding]) -> Result<Dataset> {
    let schema = ds.schema();
    for e in encodings {
        if e.feature >= schema.num_features() {
            return Err(Error::InvalidConfig(format!(
                "encoding references feature {} of a {}-feature schema",
                e.feature,
                schema.num_features()
            )));
        }
        if e.map.len() != schema.cardinality(e.feature) {
            return Err(Error::SchemaMismatch(format!(
                "encoding for feature {} covers {} modalities, schema has {}",
                e.feature,
                e.map.len(),
                schema.cardinality(e.feature)
            )));
        }
    }
    let mut features: Vec<(String, usize)> = schema
        .features()
        .iter()
        .map(|f| (f.name.clone(), f.cardinality))
        .collect();
    for e in encodings {
        features[e.feature].1 = e.encoded_cardinality;
    }
    let new_schema = Schema::new(features)?;
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let mut x = r.x.clone();
            for e in encodings {
                x[e.feature] = e.map[x[e.feature] as usize];
            }
            Record { x, y: r.y }
        })
        .collect();
    Dataset::new(new_schema, records)
}

/// Write encodings in the text exchange format, one line per raw modality.
pub fn save_encodings(
    encodings: &[TargetEncoding],
    schema: &Schema,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    for e in encodings {
        let name = schema.name(e.feature);
        for (raw, &enc) in e.map.iter().enumerate() {
            let _ = writeln!(
                out,
                "feature={name} raw={raw} encoded={enc} count={} rate={}",
                e.stats[raw].0, e.rates[raw]
            );
        }
    }
    fs::write(path, out)?;
    Ok(())
}
