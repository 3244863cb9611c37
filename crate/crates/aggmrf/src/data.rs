//! Feature space, record-level datasets, CSV ingestion and discretization.
//!
//! Categorical columns are mapped to dense modality indices in first-seen
//! order. Continuous columns are discretized into quantile bins and then
//! treated as categorical. Modality dictionaries are frozen when a file is
//! first loaded; by default each feature reserves one extra "unseen" modality
//! (the last index) to which unknown test-time values map.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};

/// Modality index within a feature. Cardinalities above `u16::MAX + 1` are
/// rejected at schema construction.
pub type Modality = u16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feature {
    pub name: String,
    pub cardinality: usize,
}

/// The categorical feature space: an ordered list of features with their
/// modality counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    features: Vec<Feature>,
}

impl Schema {
    pub fn new(features: Vec<(String, usize)>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidSchema("no features".into()));
        }
        let mut seen = HashMap::new();
        for (i, (name, card)) in features.iter().enumerate() {
            if *card < 1 {
                return Err(Error::InvalidSchema(format!(
                    "feature `{name}` has cardinality 0"
                )));
            }
            if *card > Modality::MAX as usize + 1 {
                return Err(Error::InvalidSchema(format!(
                    "feature `{name}` has cardinality {card}, above the supported maximum"
                )));
            }
            if seen.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidSchema(format!("duplicate feature `{name}`")));
            }
        }
        Ok(Schema {
            features: features
                .into_iter()
                .map(|(name, cardinality)| Feature { name, cardinality })
                .collect(),
        })
    }

    /// Uniform-cardinality schema with generated names, handy for tests and
    /// synthetic data.
    pub fn uniform(d: usize, m: usize) -> Schema {
        Schema::new((0..d).map(|i| (format!("f{i}"), m)).collect()).expect("valid schema")
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn cardinality(&self, feature: usize) -> usize {
        self.features[feature].cardinality
    }

    pub fn name(&self, feature: usize) -> &str {
        &self.features[feature].name
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Number of joint feature configurations, or `None` on overflow.
    pub fn state_count(&self) -> Option<u128> {
        let mut total: u128 = 1;
        for f in &self.features {
            total = total.checked_mul(f.cardinality as u128)?;
            if total > u64::MAX as u128 {
                return None;
            }
        }
        Some(total)
    }

    pub fn validate_record(&self, x: &[Modality]) -> Result<()> {
        if x.len() != self.features.len() {
            return Err(Error::InvalidRecord(format!(
                "record has {} coordinates, schema has {} features",
                x.len(),
                self.features.len()
            )));
        }
        for (d, (&m, f)) in x.iter().zip(&self.features).enumerate() {
            if m as usize >= f.cardinality {
                return Err(Error::InvalidRecord(format!(
                    "feature {d} (`{}`): modality {m} out of range (cardinality {})",
                    f.name, f.cardinality
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub x: Vec<Modality>,
    pub y: bool,
}

/// A record-level dataset bound to a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(schema: Schema, records: Vec<Record>) -> Result<Self> {
        for r in &records {
            schema.validate_record(&r.x)?;
        }
        Ok(Dataset { schema, records })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fraction of positive labels.
    pub fn label_mean(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.y).count() as f64 / self.records.len() as f64
    }

    /// Restrict the dataset to a subset of features, producing a new schema in
    /// the given feature order.
    pub fn project(&self, features: &[usize]) -> Result<Dataset> {
        let schema = Schema::new(
            features
                .iter()
                .map(|&f| {
                    (
                        self.schema.name(f).to_string(),
                        self.schema.cardinality(f),
                    )
                })
                .collect(),
        )?;
        let records = self
            .records
            .iter()
            .map(|r| Record {
                x: features.iter().map(|&f| r.x[f]).collect(),
                y: r.y,
            })
            .collect();
        Dataset::new(schema, records)
    }

    /// Dump as CSV with modality indices (header row, then one record per
    /// line, label last).
    pub fn write_indexed(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut out = String::new();
        for f in self.schema.features() {
            out.push_str(&f.name);
            out.push(',');
        }
        out.push_str(label_column);
        out.push('\n');
        for r in &self.records {
            for &m in &r.x {
                let _ = write!(out, "{m},");
            }
            let _ = writeln!(out, "{}", r.y as u8);
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load a CSV of modality indices previously written by
    /// [`Dataset::write_indexed`], validating against the schema.
    pub fn read_indexed(path: &Path, schema: &Schema) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let d = schema.num_features();
        if headers.len() != d + 1 {
            return Err(Error::format(
                path,
                1,
                format!("expected {} columns, found {}", d + 1, headers.len()),
            ));
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let mut x = Vec::with_capacity(d);
            for v in row.iter().take(d) {
                let m: Modality = v.parse().map_err(|_| {
                    Error::format(path, i + 2, format!("bad modality index `{v}`"))
                })?;
                x.push(m);
            }
            let y = match &row[d] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::NonBinaryLabel {
                        row: i + 2,
                        value: other.to_string(),
                    })
                }
            };
            records.push(Record { x, y });
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Dataset::new(schema.clone(), records)
    }
}

/// Quantile cut points for one continuous column.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationPlan {
    cuts: Vec<f64>,
}

impl DiscretizationPlan {
    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// Number of reachable bins.
    pub fn bins(&self) -> usize {
        self.cuts.len() + 1
    }

    /// Bin of `v`: the count of cut points strictly below it. NaN maps to
    /// bin 0.
    pub fn apply(&self, v: f64) -> Modality {
        self.cuts.partition_point(|&c| c < v) as Modality
    }
}

/// Compute quantile cut points at k/bins for k = 1..bins-1, with linear
/// interpolation between order statistics, deduplicated.
pub fn fit_discretization(values: &[f64], bins: usize) -> Result<DiscretizationPlan> {
    if bins < 1 {
        return Err(Error::InvalidConfig("bins must be >= 1".into()));
    }
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Err(Error::InvalidConfig(
            "discretization needs at least one finite value".into(),
        ));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted[0] == sorted[sorted.len() - 1] {
        // All values identical: a single bin.
        return Ok(DiscretizationPlan { cuts: Vec::new() });
    }
    let n = sorted.len();
    let mut cuts = Vec::with_capacity(bins.saturating_sub(1));
    for k in 1..bins {
        let pos = (k as f64 / bins as f64) * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let cut = if lo + 1 < n {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[lo]
        };
        if cuts.last().is_none_or(|&last| cut > last) {
            cuts.push(cut);
        }
    }
    Ok(DiscretizationPlan { cuts })
}

/// Per-feature value dictionary fitted at load time. Shared between train and
/// test loads so both map through identical modality indices.
#[derive(Debug, Clone)]
pub enum ColumnVocab {
    Categorical {
        /// Distinct values in first-seen order.
        values: Vec<String>,
        /// Whether an extra "unseen" modality (the last index) is reserved.
        reserve_unseen: bool,
    },
    Continuous { plan: DiscretizationPlan },
}

impl ColumnVocab {
    pub fn cardinality(&self) -> usize {
        match self {
            ColumnVocab::Categorical {
                values,
                reserve_unseen,
            } => values.len() + usize::from(*reserve_unseen),
            ColumnVocab::Continuous { plan } => plan.bins(),
        }
    }
}

/// Frozen preprocessing state: feature dictionaries plus the label column
/// name. Applying it to another CSV reproduces the training-time mapping.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub label_column: String,
    pub columns: Vec<(String, ColumnVocab)>,
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub label_column: String,
    pub continuous_columns: Vec<String>,
    pub bins: usize,
    pub reserve_unseen: bool,
    /// Optional explicit label mapping (negative, positive). When unset, the
    /// values 0/1, no/yes, false/true are accepted case-insensitively.
    pub label_values: Option<(String, String)>,
}

impl CsvOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        CsvOptions {
            label_column: label_column.into(),
            continuous_columns: Vec::new(),
            bins: 10,
            reserve_unseen: true,
            label_values: None,
        }
    }

    pub fn continuous(mut self, columns: Vec<String>) -> Self {
        self.continuous_columns = columns;
        self
    }

    pub fn bins(mut self, bins: usize) -> Self {
        self.bins = bins;
        self
    }

    pub fn reserve_unseen(mut self, reserve: bool) -> Self {
        self.reserve_unseen = reserve;
        self
    }

    fn parse_label(&self, raw: &str, row: usize) -> Result<bool> {
        if let Some((neg, pos)) = &self.label_values {
            if raw == neg {
                return Ok(false);
            }
            if raw == pos {
                return Ok(true);
            }
        } else {
            match raw.to_ascii_lowercase().as_str() {
                "0" | "no" | "false" => return Ok(false),
                "1" | "yes" | "true" => return Ok(true),
                _ => {}
            }
        }
        Err(Error::NonBinaryLabel {
            row,
            value: raw.to_string(),
        })
    }
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        rows.push(row.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

/// Load a raw CSV, fitting dictionaries and discretization plans on it.
///
/// Returns the dataset together with the frozen [`Vocab`] so test files can
/// be mapped identically via [`Vocab::load_csv`].
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<(Dataset, Vocab)> {
    let (headers, rows) = read_rows(path)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let label_idx = headers
        .iter()
        .position(|h| *h == options.label_column)
        .ok_or_else(|| Error::MissingColumn(options.label_column.clone()))?;
    for c in &options.continuous_columns {
        if !headers.iter().any(|h| h == c) {
            return Err(Error::MissingColumn(c.clone()));
        }
    }

    let mut columns: Vec<(String, ColumnVocab)> = Vec::new();
    let mut col_indices: Vec<usize> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == label_idx {
            continue;
        }
        col_indices.push(i);
        if options.continuous_columns.iter().any(|c| c == h) {
            let values: Vec<f64> = rows
                .iter()
                .map(|r| r[i].parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            let plan = fit_discretization(&values, options.bins)?;
            columns.push((h.clone(), ColumnVocab::Continuous { plan }));
        } else {
            let mut values = Vec::new();
            let mut seen: HashMap<&str, Modality> = HashMap::new();
            for r in &rows {
                let v = r[i].as_str();
                if !seen.contains_key(v) {
                    seen.insert(v, values.len() as Modality);
                    values.push(v.to_string());
                }
            }
            columns.push((
                h.clone(),
                ColumnVocab::Categorical {
                    values,
                    reserve_unseen: options.reserve_unseen,
                },
            ));
        }
    }

    let vocab = Vocab {
        label_column: options.label_column.clone(),
        columns,
    };
    let dataset = vocab.map_rows(&headers, &rows, label_idx, &col_indices, options, path)?;
    Ok((dataset, vocab))
}

impl Vocab {
    pub fn schema(&self) -> Result<Schema> {
        Schema::new(
            self.columns
                .iter()
                .map(|(name, v)| (name.clone(), v.cardinality()))
                .collect(),
        )
    }

    /// Map another CSV through the frozen dictionaries. Unknown categorical
    /// values go to the reserved modality (an error if none was reserved).
    pub fn load_csv(&self, path: &Path, options: &CsvOptions) -> Result<Dataset> {
        let (headers, rows) = read_rows(path)?;
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let label_idx = headers
            .iter()
            .position(|h| *h == self.label_column)
            .ok_or_else(|| Error::MissingColumn(self.label_column.clone()))?;
        let mut col_indices = Vec::with_capacity(self.columns.len());
        for (name, _) in &self.columns {
            let i = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            col_indices.push(i);
        }
        self.map_rows(&headers, &rows, label_idx, &col_indices, options, path)
    }

    fn map_rows(
        &self,
        _headers: &[String],
        rows: &[Vec<String>],
        label_idx: usize,
        col_indices: &[usize],
        options: &CsvOptions,
        path: &Path,
    ) -> Result<Dataset> {
        let schema = self.schema()?;
        let lookups: Vec<Option<HashMap<&str, Modality>>> = self
            .columns
            .iter()
            .map(|(_, v)| match v {
                ColumnVocab::Categorical { values, .. } => Some(
                    values
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (s.as_str(), i as Modality))
                        .collect(),
                ),
                ColumnVocab::Continuous { .. } => None,
            })
            .collect();

        let mut records = Vec::with_capacity(rows.len());
        for (row_no, row) in rows.iter().enumerate() {
            let mut x = Vec::with_capacity(self.columns.len());
            for (c, (&src, (name, vocab))) in
                col_indices.iter().zip(&self.columns).enumerate()
            {
                let raw = row[src].as_str();
                let m = match vocab {
                    ColumnVocab::Categorical {
                        values,
                        reserve_unseen,
                    } => match lookups[c].as_ref().unwrap().get(raw) {
                        Some(&m) => m,
                        None if *reserve_unseen => values.len() as Modality,
                        None => {
                            return Err(Error::format(
                                path,
                                row_no + 2,
                                format!("unseen value `{raw}` for feature `{name}`"),
                            ))
                        }
                    },
                    ColumnVocab::Continuous { plan } => {
                        plan.apply(raw.parse::<f64>().unwrap_or(f64::NAN))
                    }
                };
                x.push(m);
            }
            let y = options.parse_label(&row[label_idx], row_no + 2)?;
            records.push(Record { x, y });
        }
        Dataset::new(schema, records)
    }

    /// Serialize to the vocab text format (one `feature` line per column,
    /// followed by its `value` or `cuts` lines).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "vocab v1 features={} label={}",
            self.columns.len(),
            self.label_column
        );
        for (name, v) in &self.columns {
            match v {
                ColumnVocab::Categorical {
                    values,
                    reserve_unseen,
                } => {
                    let _ = writeln!(
                        out,
                        "feature {name} kind=cat values={} reserve={}",
                        values.len(),
                        *reserve_unseen as u8
                    );
                    for (i, s) in values.iter().enumerate() {
                        let _ = writeln!(out, "value {i} {s}");
                    }
                }
                ColumnVocab::Continuous { plan } => {
                    let _ = writeln!(out, "feature {name} kind=cont cuts={}", plan.cuts.len());
                    for c in &plan.cuts {
                        let _ = writeln!(out, "cut {:016x}", c.to_bits());
                    }
                }
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(path, 1, "empty file"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("vocab") || parts.next() != Some("v1") {
            return Err(Error::format(path, 1, "expected `vocab v1` header"));
        }
        let mut n_features = None;
        let mut label = None;
        for p in parts {
            if let Some(v) = p.strip_prefix("features=") {
                n_features = v.parse::<usize>().ok();
            } else if let Some(v) = p.strip_prefix("label=") {
                label = Some(v.to_string());
            }
        }
        let n_features =
            n_features.ok_or_else(|| Error::format(path, 1, "missing features="))?;
        let label = label.ok_or_else(|| Error::format(path, 1, "missing label="))?;

        let mut columns = Vec::with_capacity(n_features);
        let mut lines = lines.peekable();
        while let Some((lno, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("feature") {
                return Err(Error::format(path, lno + 1, "expected `feature` line"));
            }
            let name = parts
                .next()
                .ok_or_else(|| Error::format(path, lno + 1, "missing feature name"))?
                .to_string();
            let mut kind = None;
            let mut count = 0usize;
            let mut reserve = true;
            for p in parts {
                if let Some(v) = p.strip_prefix("kind=") {
                    kind = Some(v.to_string());
                } else if let Some(v) = p.strip_prefix("values=") {
                    count = v.parse().map_err(|_| {
                        Error::format(path, lno + 1, "bad values= count")
                    })?;
                } else if let Some(v) = p.strip_prefix("cuts=") {
                    count = v
                        .parse()
                        .map_err(|_| Error::format(path, lno + 1, "bad cuts= count"))?;
                } else if let Some(v) = p.strip_prefix("reserve=") {
                    reserve = v == "1";
                }
            }
            match kind.as_deref() {
                Some("cat") => {
                    let mut values = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (vno, vline) = lines
                            .next()
                            .ok_or_else(|| Error::format(path, lno + 1, "truncated file"))?;
                        let rest = vline.strip_prefix("value ").ok_or_else(|| {
                            Error::format(path, vno + 1, "expected `value` line")
                        })?;
                        let (_, raw) = rest.split_once(' ').unwrap_or((rest, ""));
                        values.push(raw.to_string());
                    }
                    columns.push((
                        name,
                        ColumnVocab::Categorical {
                            values,
                            reserve_unseen: reserve,
                        },
                    ));
                }
                Some("cont") => {
                    let mut cuts = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (vno, vline) = lines
                            .next()
                            .ok_or_else(|| Error::format(path, lno + 1, "truncated file"))?;
                        let hex = vline.strip_prefix("cut ").ok_or_else(|| {
                            Error::format(path, vno + 1, "expected `cut` line")
                        })?;
                        let bits = u64::from_str_radix(hex.trim(), 16).map_err(|_| {
                            Error::format(path, vno + 1, "bad cut encoding")
                        })?;
                        cuts.push(f64::from_bits(bits));
                    }
                    columns.push((name, ColumnVocab::Continuous {
                        plan: DiscretizationPlan { cuts },
                    }));
                }
                _ => return Err(Error::format(path, lno + 1, "unknown feature kind")),
            }
        }
        if columns.len() != n_features {
            return Err(Error::format(
                path,
                1,
                format!("expected {n_features} features, found {}", columns.len()),
            ));
        }
        Ok(Vocab {
            label_column: label,
            columns,
        })
    }
}

/// Disjoint (train, heldout, test) partition via a seeded shuffle. All three
/// fractions must be positive and sum to one.
pub fn split_dataset(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit);
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SmallRng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (a * n as f64).floor() as usize;
    let n_heldout = (b * n as f64).floor() as usize;
    let take = |range: std::ops::Range<usize>| -> Result<Dataset> {
        Dataset::new(
            ds.schema().clone(),
            order[range]
                .iter()
                .map(|&i| ds.records()[i].clone())
                .collect(),
        )
    };
    Ok((
        take(0..n_train)?,
        take(n_train..n_train + n_heldout)?,
        take(n_train + n_heldout..n)?,
    ))
}
