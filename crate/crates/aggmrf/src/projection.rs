//! Projection families (contingency-table row spaces) and aggregation.
//!
//! A projection set organizes K binary projections as contingency tables over
//! feature subsets. Every record activates exactly one row per table; the
//! sparse list of active rows is the encoding that every other module works
//! with. A hashed projection reduces the row space to a bucket space through
//! a seeded one-slot-per-row map.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Dataset, Modality, Schema};
use crate::error::{Error, Result};

/// One table's contribution to the row index of a given feature: the rows it
/// owns start at `offset`, this feature moves with `stride`, and the other
/// member features move with their own strides.
#[derive(Debug, Clone)]
pub struct FeatureEntry {
    pub table: usize,
    pub offset: usize,
    pub stride: usize,
    pub others: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProjectionKind {
    Single,
    Pairwise,
    Hashed { buckets: usize, seed: u64 },
}

/// The family of K projections, organized as contingency tables with a flat
/// row space. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    schema: Schema,
    tables: Vec<Vec<usize>>,
    row_offsets: Vec<usize>,
    base_rows: usize,
    k: usize,
    kind: ProjectionKind,
    bucket_map: Option<Vec<u32>>,
    feature_entries: Vec<Vec<FeatureEntry>>,
}

/// Active rows of one record: `(row index, multiplicity)`. Multiplicities are
/// 1 for unhashed projections and count bucket collisions for hashed ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseEncoding {
    pub rows: Vec<(usize, u32)>,
}

impl SparseEncoding {
    pub fn total_multiplicity(&self) -> u32 {
        self.rows.iter().map(|&(_, m)| m).sum()
    }
}

/// Observed aggregates: per-row example counts `d`, label sums `c`, and the
/// total sample count. Counts are kept as reals.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedData {
    pub d: Vec<f64>,
    pub c: Vec<f64>,
    pub n: f64,
}

impl AggregatedData {
    pub fn validate(&self, ps: &ProjectionSet) -> Result<()> {
        if self.d.len() != ps.k() || self.c.len() != ps.k() {
            return Err(Error::SchemaMismatch(format!(
                "aggregate has {} rows, projection has {}",
                self.d.len(),
                ps.k()
            )));
        }
        for (k, (&d, &c)) in self.d.iter().zip(&self.c).enumerate() {
            if c > d + 1e-9 || c < -1e-9 || d < 0.0 {
                return Err(Error::InvalidRecord(format!(
                    "row {k}: invalid counts d={d} c={c}"
                )));
            }
        }
        Ok(())
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn bucket_of(seed: u64, row: usize, buckets: usize) -> u32 {
    (mix64(seed ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) % buckets as u64) as u32
}

impl ProjectionSet {
    fn from_tables(schema: Schema, tables: Vec<Vec<usize>>, kind: ProjectionKind) -> Self {
        let mut row_offsets = Vec::with_capacity(tables.len());
        let mut next = 0usize;
        for t in &tables {
            row_offsets.push(next);
            next += t.iter().map(|&f| schema.cardinality(f)).product::<usize>();
        }
        let base_rows = next;

        let mut feature_entries = vec![Vec::new(); schema.num_features()];
        for (ti, t) in tables.iter().enumerate() {
            // Row-major strides within the table.
            let mut strides = vec![1usize; t.len()];
            for j in (0..t.len().saturating_sub(1)).rev() {
                strides[j] = strides[j + 1] * schema.cardinality(t[j + 1]);
            }
            for (j, &f) in t.iter().enumerate() {
                let others = t
                    .iter()
                    .enumerate()
                    .filter(|&(l, _)| l != j)
                    .map(|(l, &g)| (g, strides[l]))
                    .collect();
                feature_entries[f].push(FeatureEntry {
                    table: ti,
                    offset: row_offsets[ti],
                    stride: strides[j],
                    others,
                });
            }
        }

        ProjectionSet {
            schema,
            tables,
            row_offsets,
            base_rows,
            k: base_rows,
            kind,
            bucket_map: None,
            feature_entries,
        }
    }

    /// One contingency table per feature.
    pub fn build_single(schema: Schema) -> ProjectionSet {
        let tables = (0..schema.num_features()).map(|f| vec![f]).collect();
        ProjectionSet::from_tables(schema, tables, ProjectionKind::Single)
    }

    /// One contingency table per unordered feature pair, in lexicographic
    /// order, optionally preceded by the single-feature tables.
    pub fn build_pairwise(schema: Schema, include_singles: bool) -> Result<ProjectionSet> {
        let d = schema.num_features();
        if d < 2 && !include_singles {
            return Err(Error::InvalidSchema(
                "pairwise projection needs at least two features".into(),
            ));
        }
        let mut tables: Vec<Vec<usize>> = Vec::new();
        if include_singles {
            tables.extend((0..d).map(|f| vec![f]));
        }
        for i in 0..d {
            for j in i + 1..d {
                tables.push(vec![i, j]);
            }
        }
        Ok(ProjectionSet::from_tables(
            schema,
            tables,
            ProjectionKind::Pairwise,
        ))
    }

    /// Map an existing projection's rows into `buckets` slots through a
    /// seeded hash, one slot per row.
    pub fn build_hashed(base: &ProjectionSet, buckets: usize, seed: u64) -> Result<ProjectionSet> {
        if buckets == 0 {
            return Err(Error::InvalidConfig("buckets must be >= 1".into()));
        }
        if base.is_hashed() {
            return Err(Error::InvalidConfig("base projection is already hashed".into()));
        }
        let map = (0..base.base_rows)
            .map(|row| bucket_of(seed, row, buckets))
            .collect();
        let mut ps = base.clone();
        ps.kind = ProjectionKind::Hashed { buckets, seed };
        ps.bucket_map = Some(map);
        ps.k = buckets;
        Ok(ps)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn kind(&self) -> &ProjectionKind {
        &self.kind
    }

    pub fn is_hashed(&self) -> bool {
        matches!(self.kind, ProjectionKind::Hashed { .. })
    }

    /// Total parameter rows: the flat row count, or the bucket count when
    /// hashed.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn tables(&self) -> &[Vec<usize>] {
        &self.tables
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn table_rows(&self, table: usize) -> usize {
        let end = if table + 1 < self.tables.len() {
            self.row_offsets[table + 1]
        } else {
            self.base_rows
        };
        end - self.row_offsets[table]
    }

    pub(crate) fn feature_entries(&self, feature: usize) -> &[FeatureEntry] {
        &self.feature_entries[feature]
    }


    /// Map a base row into parameter space (identity unless hashed).
    #[inline]
    pub fn param_index(&self, base_row: usize) -> usize {
        match &self.bucket_map {
            Some(map) => map[base_row] as usize,
            None => base_row,
        }
    }

    /// Base row activated by `x` in one table.
    #[inline]
    pub(crate) fn table_row(&self, table: usize, x: &[Modality]) -> usize {
        let mut row = self.row_offsets[table];
        let members = &self.tables[table];
        let mut stride = 1usize;
        for &f in members.iter().rev() {
            row += x[f] as usize * stride;
            stride *= self.schema.cardinality(f);
        }
        row
    }

    /// Visit the parameter-space row of every table for `x`, in table order.
    /// Hashed projections visit bucket indices (one call per base table, so a
    /// bucket may be visited more than once).
    #[inline]
    pub(crate) fn for_each_active_row(&self, x: &[Modality], mut visit: impl FnMut(usize)) {
        for t in 0..self.tables.len() {
            visit(self.param_index(self.table_row(t, x)));
        }
    }

    /// Sparse encoding of `x`: active rows with multiplicities, sorted by row
    /// index.
    pub fn encode(&self, x: &[Modality]) -> Result<SparseEncoding> {
        self.schema.validate_record(x)?;
        let mut rows: Vec<(usize, u32)> = Vec::with_capacity(self.tables.len());
        self.for_each_active_row(x, |row| rows.push((row, 1)));
        rows.sort_unstable();
        rows.dedup_by(|next, prev| {
            if next.0 == prev.0 {
                prev.1 += next.1;
                true
            } else {
                false
            }
        });
        Ok(SparseEncoding { rows })
    }

    /// Table and member modalities of a base row.
    pub fn row_location(&self, base_row: usize) -> (usize, Vec<Modality>) {
        let table = match self.row_offsets.binary_search(&base_row) {
            Ok(t) => t,
            Err(t) => t - 1,
        };
        let mut rem = base_row - self.row_offsets[table];
        let members = &self.tables[table];
        let mut mods = vec![0 as Modality; members.len()];
        for (j, &f) in members.iter().enumerate().rev() {
            let card = self.schema.cardinality(f);
            mods[j] = (rem % card) as Modality;
            rem /= card;
        }
        (table, mods)
    }

    /// Stable hash of the table structure, used to bind model checkpoints to
    /// the projection they were trained against.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xA076_1D64_78BD_642Fu64;
        let mut feed = |v: u64| h = mix64(h ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        feed(self.schema.num_features() as u64);
        for f in self.schema.features() {
            feed(f.cardinality as u64);
            for b in f.name.bytes() {
                feed(b as u64);
            }
        }
        feed(self.tables.len() as u64);
        for t in &self.tables {
            feed(t.len() as u64);
            for &f in t {
                feed(f as u64);
            }
        }
        match self.kind {
            ProjectionKind::Single => feed(1),
            ProjectionKind::Pairwise => feed(2),
            ProjectionKind::Hashed { buckets, seed } => {
                feed(3);
                feed(buckets as u64);
                feed(seed);
            }
        }
        h
    }
}

/// Observed aggregates of a dataset under a projection: `d[k]` counts the
/// records activating row k, `c[k]` sums their labels.
pub fn aggregate(ps: &ProjectionSet, ds: &Dataset) -> Result<AggregatedData> {
    if ds.schema() != ps.schema() {
        return Err(Error::SchemaMismatch(
            "dataset schema differs from projection schema".into(),
        ));
    }
    let mut d = vec![0.0; ps.k()];
    let mut c = vec![0.0; ps.k()];
    for r in ds.records() {
        ps.for_each_active_row(&r.x, |row| {
            d[row] += 1.0;
            if r.y {
                c[row] += 1.0;
            }
        });
    }
    Ok(AggregatedData {
        d,
        c,
        n: ds.len() as f64,
    })
}

/// Per-feature empirical marginals reconstructed from the aggregated tables,
/// using the first table containing each feature.
pub fn empirical_marginals(ps: &ProjectionSet, agg: &AggregatedData) -> Result<Vec<Vec<f64>>> {
    if ps.is_hashed() {
        return Err(Error::InvalidConfig(
            "feature marginals cannot be reconstructed from hashed aggregates".into(),
        ));
    }
    let schema = ps.schema();
    let mut marginals = Vec::with_capacity(schema.num_features());
    for f in 0..schema.num_features() {
        let entry = ps.feature_entries(f).first().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "feature `{}` appears in no table",
                schema.name(f)
            ))
        })?;
        let table = entry.table;
        let mut sums = vec![0.0; schema.cardinality(f)];
        let start = ps.row_offsets()[table];
        for r in 0..ps.table_rows(table) {
            let (_, mods) = ps.row_location(start + r);
            let pos = ps.tables()[table].iter().position(|&g| g == f).unwrap();
            sums[mods[pos] as usize] += agg.d[start + r];
        }
        let total: f64 = sums.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "feature `{}` has an all-zero table",
                schema.name(f)
            )));
        }
        for s in &mut sums {
            *s /= total;
        }
        marginals.push(sums);
    }
    Ok(marginals)
}

/// Write aggregated tables in the text exchange format.
///
/// Unhashed files carry one section per table with all rows (zero rows
/// included). Hashed files keep the base table structure (no per-table data
/// rows) and append a `buckets` section with the bucket-space counts.
pub fn write_tables(agg: &AggregatedData, ps: &ProjectionSet, path: &Path) -> Result<()> {
    agg.validate(ps)?;
    let mut out = String::new();
    match ps.kind {
        ProjectionKind::Hashed { buckets, seed } => {
            let _ = writeln!(
                out,
                "aggdata v1 n={} tables={} hashed buckets={buckets} seed={seed}",
                agg.n,
                ps.num_tables()
            );
        }
        _ => {
            let _ = writeln!(out, "aggdata v1 n={} tables={}", agg.n, ps.num_tables());
        }
    }
    for (t, members) in ps.tables().iter().enumerate() {
        let names: Vec<&str> = members.iter().map(|&f| ps.schema().name(f)).collect();
        let _ = writeln!(
            out,
            "table {} rows={}",
            names.join(","),
            ps.table_rows(t)
        );
        if !ps.is_hashed() {
            let start = ps.row_offsets()[t];
            for r in 0..ps.table_rows(t) {
                let (_, mods) = ps.row_location(start + r);
                let mods: Vec<String> = mods.iter().map(|m| m.to_string()).collect();
                let _ = writeln!(
                    out,
                    "{} {} {}",
                    mods.join(","),
                    agg.d[start + r],
                    agg.c[start + r]
                );
            }
        }
    }
    if ps.is_hashed() {
        let _ = writeln!(out, "buckets rows={}", ps.k());
        for b in 0..ps.k() {
            let _ = writeln!(out, "{b} {} {}", agg.d[b], agg.c[b]);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read an aggregated-tables file, reconstructing the projection (and its
/// schema) from the table sections.
pub fn read_tables(path: &Path) -> Result<(AggregatedData, ProjectionSet)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().peekable();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "empty file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("aggdata") || parts.next() != Some("v1") {
        return Err(Error::format(path, 1, "expected `aggdata v1` header"));
    }
    let mut n = None;
    let mut n_tables = None;
    let mut hashed = false;
    let mut buckets = 0usize;
    let mut seed = 0u64;
    for p in parts {
        if let Some(v) = p.strip_prefix("n=") {
            n = v.parse::<f64>().ok();
        } else if let Some(v) = p.strip_prefix("tables=") {
            n_tables = v.parse::<usize>().ok();
        } else if p == "hashed" {
            hashed = true;
        } else if let Some(v) = p.strip_prefix("buckets=") {
            buckets = v
                .parse()
                .map_err(|_| Error::format(path, 1, "bad buckets="))?;
        } else if let Some(v) = p.strip_prefix("seed=") {
            seed = v.parse().map_err(|_| Error::format(path, 1, "bad seed="))?;
        }
    }
    let n = n.ok_or_else(|| Error::format(path, 1, "missing n="))?;
    let n_tables = n_tables.ok_or_else(|| Error::format(path, 1, "missing tables="))?;

    struct RawTable {
        names: Vec<String>,
        rows: usize,
        data: Vec<(Vec<usize>, f64, f64)>,
    }
    let mut raw_tables: Vec<RawTable> = Vec::new();
    let mut bucket_data: Vec<(f64, f64)> = Vec::new();

    while let Some((lno, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("table ") {
            let (names_part, rows_part) = rest
                .rsplit_once(" rows=")
                .ok_or_else(|| Error::format(path, lno + 1, "missing rows="))?;
            let rows: usize = rows_part
                .trim()
                .parse()
                .map_err(|_| Error::format(path, lno + 1, "bad rows="))?;
            let names: Vec<String> = names_part.split(',').map(str::to_string).collect();
            let mut data = Vec::with_capacity(rows);
            if !hashed {
                for _ in 0..rows {
                    let (dno, dline) = lines
                        .next()
                        .ok_or_else(|| Error::format(path, lno + 1, "truncated table"))?;
                    let mut fields = dline.split_whitespace();
                    let mods_str = fields
                        .next()
                        .ok_or_else(|| Error::format(path, dno + 1, "missing modalities"))?;
                    let d: f64 = fields
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::format(path, dno + 1, "bad d value"))?;
                    let c: f64 = fields
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::format(path, dno + 1, "bad c value"))?;
                    if c > d {
                        return Err(Error::format(
                            path,
                            dno + 1,
                            format!("row has c={c} > d={d}"),
                        ));
                    }
                    let mods: Vec<usize> = mods_str
                        .split(',')
                        .map(|m| m.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::format(path, dno + 1, "bad modality index"))?;
                    if mods.len() != names.len() {
                        return Err(Error::format(path, dno + 1, "modality arity mismatch"));
                    }
                    data.push((mods, d, c));
                }
            }
            raw_tables.push(RawTable { names, rows, data });
        } else if let Some(rest) = line.strip_prefix("buckets rows=") {
            let rows: usize = rest
                .trim()
                .parse()
                .map_err(|_| Error::format(path, lno + 1, "bad buckets rows="))?;
            for _ in 0..rows {
                let (dno, dline) = lines
                    .next()
                    .ok_or_else(|| Error::format(path, lno + 1, "truncated buckets"))?;
                let mut fields = dline.split_whitespace();
                let _b: usize = fields
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(path, dno + 1, "bad bucket index"))?;
                let d: f64 = fields
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(path, dno + 1, "bad d value"))?;
                let c: f64 = fields
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(path, dno + 1, "bad c value"))?;
                if c > d {
                    return Err(Error::format(path, dno + 1, format!("row has c={c} > d={d}")));
                }
                bucket_data.push((d, c));
            }
        } else {
            return Err(Error::format(path, lno + 1, "unexpected line"));
        }
    }

    if raw_tables.len() != n_tables {
        return Err(Error::format(
            path,
            1,
            format!(
                "table count mismatch: header says {n_tables}, found {}",
                raw_tables.len()
            ),
        ));
    }

    // Reconstruct the schema: feature order by first appearance, cardinality
    // from the enumerated rows (zero rows are always written).
    let mut feature_names: Vec<String> = Vec::new();
    for t in &raw_tables {
        for name in &t.names {
            if !feature_names.contains(name) {
                feature_names.push(name.clone());
            }
        }
    }
    let mut cards = vec![0usize; feature_names.len()];
    for t in &raw_tables {
        let idx: Vec<usize> = t
            .names
            .iter()
            .map(|n| feature_names.iter().position(|f| f == n).unwrap())
            .collect();
        for (mods, _, _) in &t.data {
            for (j, &m) in mods.iter().enumerate() {
                cards[idx[j]] = cards[idx[j]].max(m + 1);
            }
        }
    }
    if hashed {
        // Without data rows, infer cardinalities from the declared table
        // sizes: singles give exact counts, pairs are cross-checked below.
        for t in &raw_tables {
            if t.names.len() == 1 {
                let i = feature_names.iter().position(|f| f == &t.names[0]).unwrap();
                cards[i] = cards[i].max(t.rows);
            }
        }
        for t in &raw_tables {
            if t.names.len() == 2 {
                let i = feature_names.iter().position(|f| f == &t.names[0]).unwrap();
                let j = feature_names.iter().position(|f| f == &t.names[1]).unwrap();
                if cards[i] > 0 && t.rows % cards[i] == 0 {
                    cards[j] = cards[j].max(t.rows / cards[i]);
                } else if cards[j] > 0 && t.rows % cards[j] == 0 {
                    cards[i] = cards[i].max(t.rows / cards[j]);
                }
            }
        }
    }
    if cards.iter().any(|&c| c == 0) {
        return Err(Error::format(
            path,
            1,
            "could not infer feature cardinalities",
        ));
    }
    let schema = Schema::new(
        feature_names
            .iter()
            .cloned()
            .zip(cards.iter().copied())
            .collect(),
    )?;

    let tables: Vec<Vec<usize>> = raw_tables
        .iter()
        .map(|t| {
            t.names
                .iter()
                .map(|n| feature_names.iter().position(|f| f == n).unwrap())
                .collect()
        })
        .collect();
    let all_single = tables.iter().all(|t| t.len() == 1);
    let base = ProjectionSet::from_tables(
        schema,
        tables,
        if all_single {
            ProjectionKind::Single
        } else {
            ProjectionKind::Pairwise
        },
    );

    for (t, raw) in raw_tables.iter().enumerate() {
        if base.table_rows(t) != raw.rows {
            return Err(Error::format(
                path,
                1,
                format!(
                    "table {t}: declared {} rows, schema implies {}",
                    raw.rows,
                    base.table_rows(t)
                ),
            ));
        }
    }

    if hashed {
        let ps = ProjectionSet::build_hashed(&base, buckets, seed)?;
        if bucket_data.len() != buckets {
            return Err(Error::format(
                path,
                1,
                format!(
                    "bucket count mismatch: header says {buckets}, found {}",
                    bucket_data.len()
                ),
            ));
        }
        let (d, c) = bucket_data.into_iter().unzip();
        let agg = AggregatedData { d, c, n };
        agg.validate(&ps)?;
        Ok((agg, ps))
    } else {
        let mut d = vec![0.0; base.k()];
        let mut c = vec![0.0; base.k()];
        for (t, raw) in raw_tables.iter().enumerate() {
            let start = base.row_offsets()[t];
            for (r, (_, dv, cv)) in raw.data.iter().enumerate() {
                d[start + r] = *dv;
                c[start + r] = *cv;
            }
        }
        let agg = AggregatedData { d, c, n };
        agg.validate(&base)?;
        Ok((agg, base))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    /// The five records of the toy example, in first-seen index form:
    /// f1 "1"->0 "2"->1; f2 B->0 A->1; f3 a->0 b->1.
    pub(crate) fn toy_dataset() -> Dataset {
        let schema = Schema::new(vec![
            ("f1".into(), 2),
            ("f2".into(), 2),
            ("f3".into(), 2),
        ])
        .unwrap();
        let rows: [([Modality; 3], bool); 5] = [
            ([0, 0, 0], true),
            ([1, 1, 1], true),
            ([0, 0, 1], false),
            ([1, 0, 0], true),
            ([0, 1, 1], false),
        ];
        Dataset::new(
            schema,
            rows.iter()
                .map(|(x, y)| Record { x: x.to_vec(), y: *y })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn toy_pairwise_has_three_tables_and_twelve_rows() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), false).unwrap();
        assert_eq!(ps.num_tables(), 3);
        assert_eq!(ps.k(), 12);
    }

    #[test]
    fn single_feature_schema_with_singles_only() {
        let schema = Schema::new(vec![("only".into(), 4)]).unwrap();
        let ps = ProjectionSet::build_pairwise(schema, true).unwrap();
        assert_eq!(ps.num_tables(), 1);
        assert_eq!(ps.k(), 4);
    }

    #[test]
    fn pair_count_arithmetic() {
        let schema = Schema::uniform(20, 10);
        let ps = ProjectionSet::build_pairwise(schema, false).unwrap();
        assert_eq!(ps.num_tables(), 190);
        assert_eq!(ps.k(), 19000);
    }

    #[test]
    fn single_tables_k_is_cardinality_sum() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_single(ds.schema().clone());
        assert_eq!(ps.k(), 6);
        let ps1 = ProjectionSet::build_single(Schema::new(vec![("a".into(), 5)]).unwrap());
        assert_eq!(ps1.k(), 5);
    }

    #[test]
    fn encode_activates_one_row_per_table() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), false).unwrap();
        // Example 1 in index form: (0, 0, 0).
        let enc = ps.encode(&[0, 0, 0]).unwrap();
        assert_eq!(enc.rows, vec![(0, 1), (4, 1), (8, 1)]);
        let enc2 = ps.encode(&[1, 0, 1]).unwrap();
        // (f1,f2)=(1,0) -> row 2; (f1,f3)=(1,1) -> 4+3; (f2,f3)=(0,1) -> 8+1.
        assert_eq!(enc2.rows, vec![(2, 1), (7, 1), (9, 1)]);
    }

    #[test]
    fn encode_rejects_out_of_range_modality() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), false).unwrap();
        assert!(ps.encode(&[2, 0, 0]).is_err());
    }

    #[test]
    fn toy_aggregation_matches_hand_counts() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), false).unwrap();
        let agg = aggregate(&ps, &ds).unwrap();
        assert_eq!(agg.n, 5.0);
        // (f1,f2) table at offset 0, rows (a*2+b) with f2: B=0, A=1:
        // ("1",B)=2 examples 1&3, one click; ("1",A)=1; ("2",A)=1; ("2",B)=1.
        assert_eq!(agg.d[0..4], [2.0, 1.0, 1.0, 1.0]);
        assert_eq!(agg.c[0..4], [1.0, 0.0, 1.0, 1.0]);
        // (f2,f3) table at offset 8 with rows (B,a),(B,b),(A,a),(A,b):
        // matches the published aggregation: (B,a)=2/2, (B,b)=1/0, (A,b)=2/1.
        assert_eq!(agg.d[8..12], [2.0, 1.0, 0.0, 2.0]);
        assert_eq!(agg.c[8..12], [2.0, 0.0, 0.0, 1.0]);
        // Each table's displays sum to n.
        for t in 0..3 {
            let start = ps.row_offsets()[t];
            let sum: f64 = agg.d[start..start + 4].iter().sum();
            assert_eq!(sum, 5.0);
        }
    }

    #[test]
    fn empty_dataset_aggregates_to_zero() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), false).unwrap();
        let empty = Dataset::new(ds.schema().clone(), Vec::new()).unwrap();
        let agg = aggregate(&ps, &empty).unwrap();
        assert!(agg.d.iter().all(|&v| v == 0.0));
        assert!(agg.c.iter().all(|&v| v == 0.0));
        assert_eq!(agg.n, 0.0);
    }

    #[test]
    fn aggregation_is_linear_in_the_dataset() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), true).unwrap();
        let agg = aggregate(&ps, &ds).unwrap();
        let doubled = Dataset::new(
            ds.schema().clone(),
            ds.records()
                .iter()
                .chain(ds.records())
                .cloned()
                .collect(),
        )
        .unwrap();
        let agg2 = aggregate(&ps, &doubled).unwrap();
        for k in 0..ps.k() {
            assert_eq!(agg2.d[k], 2.0 * agg.d[k]);
            assert_eq!(agg2.c[k], 2.0 * agg.c[k]);
        }
    }

    #[test]
    fn hashed_aggregation_commutes_with_bucket_sums() {
        let ds = toy_dataset();
        let base = ProjectionSet::build_pairwise(ds.schema().clone(), true).unwrap();
        let hashed = ProjectionSet::build_hashed(&base, 5, 42).unwrap();
        let base_agg = aggregate(&base, &ds).unwrap();
        let hashed_agg = aggregate(&hashed, &ds).unwrap();
        let mut d = vec![0.0; 5];
        let mut c = vec![0.0; 5];
        for row in 0..base.k() {
            let b = hashed.param_index(row);
            d[b] += base_agg.d[row];
            c[b] += base_agg.c[row];
        }
        assert_eq!(hashed_agg.d, d);
        assert_eq!(hashed_agg.c, c);
    }

    #[test]
    fn injective_hash_permutes_aggregates() {
        let ds = toy_dataset();
        let base = ProjectionSet::build_single(ds.schema().clone());
        // Find a seed whose map is injective on the 6 base rows.
        let seed = (0..)
            .find(|&s| {
                let h = ProjectionSet::build_hashed(&base, 64, s).unwrap();
                let mut seen = std::collections::HashSet::new();
                (0..base.k()).all(|r| seen.insert(h.param_index(r)))
            })
            .unwrap();
        let hashed = ProjectionSet::build_hashed(&base, 64, seed).unwrap();
        let base_agg = aggregate(&base, &ds).unwrap();
        let hashed_agg = aggregate(&hashed, &ds).unwrap();
        for row in 0..base.k() {
            let b = hashed.param_index(row);
            assert_eq!(hashed_agg.d[b], base_agg.d[row]);
            assert_eq!(hashed_agg.c[b], base_agg.c[row]);
        }
    }

    #[test]
    fn one_bucket_collapses_everything() {
        let ds = toy_dataset();
        let base = ProjectionSet::build_pairwise(ds.schema().clone(), false).unwrap();
        let hashed = ProjectionSet::build_hashed(&base, 1, 0).unwrap();
        let enc = hashed.encode(&[0, 0, 0]).unwrap();
        assert_eq!(enc.rows, vec![(0, 3)]);
        let agg = aggregate(&hashed, &ds).unwrap();
        assert_eq!(agg.d[0], 5.0 * 3.0);
    }

    #[test]
    fn tables_file_round_trip() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), true).unwrap();
        let agg = aggregate(&ps, &ds).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_tables(&agg, &ps, f.path()).unwrap();
        let (agg2, ps2) = read_tables(f.path()).unwrap();
        assert_eq!(agg.d, agg2.d);
        assert_eq!(agg.c, agg2.c);
        assert_eq!(agg.n, agg2.n);
        assert_eq!(ps.tables(), ps2.tables());
        assert_eq!(ps.k(), ps2.k());
        assert_eq!(ps.schema(), ps2.schema());
        assert_eq!(ps.fingerprint(), ps2.fingerprint());
    }

    #[test]
    fn hashed_tables_file_round_trip() {
        let ds = toy_dataset();
        let base = ProjectionSet::build_pairwise(ds.schema().clone(), true).unwrap();
        let ps = ProjectionSet::build_hashed(&base, 7, 99).unwrap();
        let agg = aggregate(&ps, &ds).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_tables(&agg, &ps, f.path()).unwrap();
        let (agg2, ps2) = read_tables(f.path()).unwrap();
        assert_eq!(agg.d, agg2.d);
        assert_eq!(agg.c, agg2.c);
        assert_eq!(ps.fingerprint(), ps2.fingerprint());
    }

    #[test]
    fn c_above_d_is_rejected() {
        let text = "aggdata v1 n=5 tables=1\ntable f1 rows=2\n0 1 2\n1 4 0\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tables");
        fs::write(&p, text).unwrap();
        let err = read_tables(&p).unwrap_err();
        assert!(err.to_string().contains("c=2 > d=1"), "{err}");
    }

    #[test]
    fn table_count_mismatch_is_rejected() {
        let text = "aggdata v1 n=5 tables=2\ntable f1 rows=2\n0 1 0\n1 4 1\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tables");
        fs::write(&p, text).unwrap();
        let err = read_tables(&p).unwrap_err();
        assert!(err.to_string().contains("table count mismatch"), "{err}");
    }

    #[test]
    fn marginals_from_toy_tables() {
        let ds = toy_dataset();
        let ps = ProjectionSet::build_pairwise(ds.schema().clone(), false).unwrap();
        let agg = aggregate(&ps, &ds).unwrap();
        let marg = empirical_marginals(&ps, &agg).unwrap();
        // Three of five records have f1 = "1" (index 0).
        assert!((marg[0][0] - 0.6).abs() < 1e-12);
        assert!((marg[0][1] - 0.4).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_schema() -> impl Strategy<Value = Schema> {
            proptest::collection::vec(1usize..=4, 1..=4)
                .prop_map(|cards| {
                    Schema::new(
                        cards
                            .into_iter()
                            .enumerate()
                            .map(|(i, c)| (format!("f{i}"), c))
                            .collect(),
                    )
                    .unwrap()
                })
        }

        proptest! {
            #[test]
            fn every_table_has_exactly_one_active_row(schema in arb_schema(), seed in 0u64..1000) {
                let ps = ProjectionSet::build_pairwise(schema.clone(), true).unwrap();
                let mut state = seed;
                let x: Vec<Modality> = (0..schema.num_features())
                    .map(|f| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                        ((state >> 33) % schema.cardinality(f) as u64) as Modality
                    })
                    .collect();
                let enc = ps.encode(&x).unwrap();
                prop_assert_eq!(enc.total_multiplicity() as usize, ps.num_tables());
                // Each row belongs to a distinct table.
                let mut tables: Vec<usize> = enc
                    .rows
                    .iter()
                    .map(|&(row, _)| ps.row_location(row).0)
                    .collect();
                tables.dedup();
                prop_assert_eq!(tables.len(), ps.num_tables());
            }

            #[test]
            fn hash_commutes_with_aggregation(
                schema in arb_schema(),
                buckets in 1usize..16,
                seed in 0u64..500,
                n in 1usize..40,
            ) {
                let base = ProjectionSet::build_pairwise(schema.clone(), true).unwrap();
                let hashed = ProjectionSet::build_hashed(&base, buckets, seed).unwrap();
                let mut state = seed.wrapping_add(1);
                let records: Vec<Record> = (0..n)
                    .map(|_| {
                        let x = (0..schema.num_features())
                            .map(|f| {
                                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                                ((state >> 33) % schema.cardinality(f) as u64) as Modality
                            })
                            .collect();
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                        Record { x, y: state >> 63 == 1 }
                    })
                    .collect();
                let ds = Dataset::new(schema, records).unwrap();
                let base_agg = aggregate(&base, &ds).unwrap();
                let hashed_agg = aggregate(&hashed, &ds).unwrap();
                let mut d = vec![0.0; buckets];
                let mut c = vec![0.0; buckets];
                for row in 0..base.k() {
                    d[hashed.param_index(row)] += base_agg.d[row];
                    c[hashed.param_index(row)] += base_agg.c[row];
                }
                prop_assert_eq!(hashed_agg.d, d);
                prop_assert_eq!(hashed_agg.c, c);
                // c never exceeds d.
                for k in 0..base.k() {
                    prop_assert!(base_agg.c[k] <= base_agg.d[k]);
                }
            }
        }
    }
}
