//! Training-run observations: ingestion, validation, filtering and
//! aggregation into per-(B, T) learning-rate optima.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::{fmt_sig17, parse_int, parse_real, parse_uint};
use crate::profile::{find_optimum, LossProfile, OptimumMethod, ProfileContext, ProfilePoint};

/// Canonical column order of the run CSV.
pub const CSV_COLUMNS: [&str; 8] = [
    "run_id",
    "d_model",
    "d_model_base",
    "batch_size",
    "lr",
    "seed",
    "tokens",
    "val_loss",
];

/// One training observation: a validation loss measured at a token-budget
/// snapshot of a run with peak learning rate `lr` and batch size
/// `batch_size` (in tokens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub d_model: u32,
    pub d_model_base: u32,
    pub batch_size: u64,
    pub lr: f64,
    pub seed: i64,
    pub tokens: u64,
    pub val_loss: f64,
}

impl RunRecord {
    /// Checks the per-record invariants, returning the offending field.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.d_model == 0 {
            return Err(("d_model", "d_model must be positive".into()));
        }
        if self.d_model_base == 0 {
            return Err(("d_model_base", "d_model_base must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(("lr", "lr must be positive".into()));
        }
        if self.tokens < self.batch_size {
            return Err(("tokens", "tokens must be at least batch_size".into()));
        }
        if !(self.val_loss > 0.0 && self.val_loss.is_finite()) {
            return Err(("val_loss", "val_loss must be positive".into()));
        }
        Ok(())
    }

    fn config_key(&self) -> (u32, u32, u64, u64, i64, u64) {
        (
            self.d_model,
            self.d_model_base,
            self.batch_size,
            self.lr.to_bits(),
            self.seed,
            self.tokens,
        )
    }
}

/// Validated, immutable collection of run records.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSet {
    records: Vec<RunRecord>,
    provenance: String,
}

impl RunSet {
    pub fn new(records: Vec<RunRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        let mut configs = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if let Err((field, message)) = r.check() {
                return Err(Error::Row {
                    row: i + 1,
                    field: field.into(),
                    message,
                });
            }
            if !ids.insert((r.run_id.as_str(), r.tokens)) {
                return Err(Error::Row {
                    row: i + 1,
                    field: "run_id".into(),
                    message: format!("duplicate (run_id, tokens) = ({}, {})", r.run_id, r.tokens),
                });
            }
            if !configs.insert(r.config_key()) {
                return Err(Error::Row {
                    row: i + 1,
                    field: "lr".into(),
                    message: "duplicate (d_model, d_model_base, batch_size, lr, seed, tokens)".into(),
                });
            }
        }
        Ok(Self {
            records,
            provenance: provenance.into(),
        })
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct values of a key over all records, ascending.
    pub fn distinct<K: Ord>(&self, key: impl Fn(&RunRecord) -> K) -> Vec<K> {
        let set: std::collections::BTreeSet<K> = self.records.iter().map(key).collect();
        set.into_iter().collect()
    }
}

/// Parses a run CSV. Columns may appear in any order; `seed` is optional
/// and defaults to 0.
pub fn ingest_csv<R: Read>(reader: R, provenance: &str) -> Result<RunSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyInput);
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        let Some(known) = CSV_COLUMNS.iter().find(|c| **c == h) else {
            return Err(Error::invalid(format!("unknown column `{h}`")));
        };
        if index.insert(known, i).is_some() {
            return Err(Error::invalid(format!("duplicate column `{h}`")));
        }
    }
    for col in CSV_COLUMNS {
        if col != "seed" && !index.contains_key(col) {
            return Err(Error::MissingColumn(col.into()));
        }
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |col: &str| -> Option<&str> { index.get(col).and_then(|&i| row.get(i)) };
        let bad = |field: &str, message: String| Error::Row {
            row: line,
            field: field.into(),
            message,
        };
        let field = |col: &'static str| -> Result<&str> {
            get(col).ok_or_else(|| bad(col, "missing value".into()))
        };
        let uint = |col: &'static str| -> Result<u64> {
            let s = field(col)?;
            parse_uint(s).ok_or_else(|| bad(col, format!("`{s}` is not a non-negative integer")))
        };
        let real = |col: &'static str| -> Result<f64> {
            let s = field(col)?;
            parse_real(s).ok_or_else(|| bad(col, format!("`{s}` is not a number")))
        };
        let run_id = field("run_id")?.to_string();
        if run_id.is_empty() {
            return Err(bad("run_id", "run_id must be non-empty".into()));
        }
        let narrow = |col: &'static str, v: u64| -> Result<u32> {
            u32::try_from(v).map_err(|_| bad(col, format!("{v} is out of range")))
        };
        let seed = match get("seed") {
            None => 0,
            Some(s) if s.is_empty() => 0,
            Some(s) => parse_int(s).ok_or_else(|| bad("seed", format!("`{s}` is not an integer")))?,
        };
        let rec = RunRecord {
            run_id,
            d_model: narrow("d_model", uint("d_model")?)?,
            d_model_base: narrow("d_model_base", uint("d_model_base")?)?,
            batch_size: uint("batch_size")?,
            lr: real("lr")?,
            seed,
            tokens: uint("tokens")?,
            val_loss: real("val_loss")?,
        };
        if let Err((f, message)) = rec.check() {
            return Err(bad(f, message));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    RunSet::new(records, provenance)
}

/// Writes the canonical CSV form: fixed column order, floats with 17
/// significant digits.
pub fn emit_csv<W: Write>(rs: &RunSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in rs.records() {
        w.write_record([
            r.run_id.clone(),
            r.d_model.to_string(),
            r.d_model_base.to_string(),
            r.batch_size.to_string(),
            fmt_sig17(r.lr),
            r.seed.to_string(),
            r.tokens.to_string(),
            fmt_sig17(r.val_loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Constraint on one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint<T> {
    Eq(T),
    /// Inclusive bounds; `None` leaves that side open.
    Range(Option<T>, Option<T>),
    OneOf(Vec<T>),
}

impl<T: PartialOrd> Constraint<T> {
    pub fn admits(&self, v: &T) -> bool {
        match self {
            Constraint::Eq(x) => v == x,
            Constraint::Range(lo, hi) => {
                lo.as_ref().is_none_or(|lo| v >= lo) && hi.as_ref().is_none_or(|hi| v <= hi)
            }
            Constraint::OneOf(xs) => xs.iter().any(|x| x == v),
        }
    }
}

/// Conjunctive predicate over record fields. Every listed constraint must
/// hold; fields with no constraints are unconstrained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunFilter {
    pub run_id: Vec<Constraint<String>>,
    pub d_model: Vec<Constraint<u32>>,
    pub d_model_base: Vec<Constraint<u32>>,
    pub batch_size: Vec<Constraint<u64>>,
    pub lr: Vec<Constraint<f64>>,
    pub seed: Vec<Constraint<i64>>,
    pub tokens: Vec<Constraint<u64>>,
    pub val_loss: Vec<Constraint<f64>>,
}

impl RunFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn d_model(mut self, c: Constraint<u32>) -> Self {
        self.d_model.push(c);
        self
    }

    pub fn d_model_base(mut self, c: Constraint<u32>) -> Self {
        self.d_model_base.push(c);
        self
    }

    pub fn batch_size(mut self, c: Constraint<u64>) -> Self {
        self.batch_size.push(c);
        self
    }

    pub fn lr(mut self, c: Constraint<f64>) -> Self {
        self.lr.push(c);
        self
    }

    pub fn seed(mut self, c: Constraint<i64>) -> Self {
        self.seed.push(c);
        self
    }

    pub fn tokens(mut self, c: Constraint<u64>) -> Self {
        self.tokens.push(c);
        self
    }

    /// Conjunction of two filters.
    pub fn and(mut self, other: RunFilter) -> Self {
        self.run_id.extend(other.run_id);
        self.d_model.extend(other.d_model);
        self.d_model_base.extend(other.d_model_base);
        self.batch_size.extend(other.batch_size);
        self.lr.extend(other.lr);
        self.seed.extend(other.seed);
        self.tokens.extend(other.tokens);
        self.val_loss.extend(other.val_loss);
        self
    }

    pub fn matches(&self, r: &RunRecord) -> bool {
        fn all<T: PartialOrd>(cs: &[Constraint<T>], v: &T) -> bool {
            cs.iter().all(|c| c.admits(v))
        }
        all(&self.run_id, &r.run_id)
            && all(&self.d_model, &r.d_model)
            && all(&self.d_model_base, &r.d_model_base)
            && all(&self.batch_size, &r.batch_size)
            && all(&self.lr, &r.lr)
            && all(&self.seed, &r.seed)
            && all(&self.tokens, &r.tokens)
            && all(&self.val_loss, &r.val_loss)
    }
}

/// Order-preserving subset of `rs` matching `predicate`.
pub fn filter(rs: &RunSet, predicate: &RunFilter) -> RunSet {
    RunSet {
        records: rs.records.iter().filter(|r| predicate.matches(r)).cloned().collect(),
        provenance: rs.provenance.clone(),
    }
}

/// Key of one aggregated optimum. `d_model` is `None` when optima were
/// pooled across the μP family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub d_model_base: u32,
    pub d_model: Option<u32>,
    pub batch_size: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimumEntry {
    pub log2_eta_star_mean: f64,
    pub log2_eta_star_std: f64,
    pub n_contributing: usize,
}

impl OptimumEntry {
    pub fn eta_star(&self) -> f64 {
        self.log2_eta_star_mean.exp2()
    }

    /// One-sigma band of η* in linear units, propagated from the log2
    /// dispersion to first order.
    pub fn sigma_eta_star(&self) -> f64 {
        self.eta_star() * std::f64::consts::LN_2 * self.log2_eta_star_std
    }
}

/// A (model, seed, B, T) cell that could not produce an optimum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub d_model_base: u32,
    pub d_model: u32,
    pub seed: i64,
    pub batch_size: u64,
    pub tokens: u64,
    pub n_lr: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimumTable {
    pub entries: BTreeMap<CellKey, OptimumEntry>,
    pub skipped: Vec<SkippedCell>,
}

impl OptimumTable {
    /// Distinct (d_model_base, d_model) series in the table.
    pub fn series(&self) -> Vec<(u32, Option<u32>)> {
        let set: std::collections::BTreeSet<_> =
            self.entries.keys().map(|k| (k.d_model_base, k.d_model)).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Pool optima across the widths of one μP family (otherwise only
    /// across seeds of the same width).
    pub group_by_mup_family: bool,
    pub method: OptimumMethod,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            group_by_mup_family: true,
            method: OptimumMethod::GridArgmin,
        }
    }
}

/// Finds η* for every (base, d_model, seed, B, T) member and reduces them to
/// the mean and standard deviation of log2 η* per cell.
pub fn aggregate_optima(rs: &RunSet, opts: &AggregateOptions) -> OptimumTable {
    type MemberKey = (u32, u32, u64, u64, i64);
    let mut members: BTreeMap<MemberKey, Vec<ProfilePoint>> = BTreeMap::new();
    for r in rs.records() {
        members
            .entry((r.d_model_base, r.d_model, r.batch_size, r.tokens, r.seed))
            .or_default()
            .push(ProfilePoint {
                lr: r.lr,
                val_loss: r.val_loss,
            });
    }

    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for ((base, d_model, batch_size, tokens, seed), mut points) in members {
        points.sort_by(|a, b| a.lr.total_cmp(&b.lr));
        let context = ProfileContext {
            batch_size,
            tokens,
            d_model,
            d_model_base: base,
            seed: Some(seed),
        };
        let n_lr = points.len();
        let Ok(profile) = LossProfile::new(context, points) else {
            skipped.push(SkippedCell {
                d_model_base: base,
                d_model,
                seed,
                batch_size,
                tokens,
                n_lr,
            });
            continue;
        };
        let opt = find_optimum(&profile, opts.method);
        let key = CellKey {
            d_model_base: base,
            d_model: (!opts.group_by_mup_family).then_some(d_model),
            batch_size,
            tokens,
        };
        cells.entry(key).or_default().push(opt.eta_star.log2());
    }

    let entries = cells
        .into_iter()
        .map(|(k, logs)| {
            let n = logs.len();
            let mean = logs.iter().sum::<f64>() / n as f64;
            let std = if n == 1 {
                0.0
            } else {
                (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
            };
            (
                k,
                OptimumEntry {
                    log2_eta_star_mean: mean,
                    log2_eta_star_std: std,
                    n_contributing: n,
                },
            )
        })
        .collect();
    OptimumTable { entries, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "run_id,d_model,d_model_base,batch_size,lr,seed,tokens,val_loss\n";

    fn rec(id: &str, d: u32, b: u64, lr: f64, seed: i64, t: u64, loss: f64) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            d_model: d,
            d_model_base: 1024,
            batch_size: b,
            lr,
            seed,
            tokens: t,
            val_loss: loss,
        }
    }

    #[test]
    fn ingests_single_row() {
        let csv = format!("{HEADER}r1,1024,1024,1048576,0.001953125,0,1073741824,3.40\n");
        let rs = ingest_csv(csv.as_bytes(), "t").unwrap();
        assert_eq!(rs.len(), 1);
        let r = &rs.records()[0];
        assert_eq!(r.lr, (-9f64).exp2());
        assert_eq!(r.batch_size, 1 << 20);
        assert_eq!(r.tokens, 1 << 30);
        assert_eq!(r.val_loss, 3.40);
    }

    #[test]
    fn column_order_is_free_and_seed_optional() {
        let csv = "val_loss,lr,tokens,batch_size,d_model_base,d_model,run_id\n3.1,2^-9.5,2^30,2^20,1024,512,a\n";
        let rs = ingest_csv(csv.as_bytes(), "t").unwrap();
        let r = &rs.records()[0];
        assert_eq!(r.seed, 0);
        assert_eq!(r.d_model, 512);
        assert_eq!(r.lr, (-9.5f64).exp2());
    }

    #[test]
    fn negative_loss_names_field_and_row() {
        let csv = format!("{HEADER}r1,1024,1024,1048576,0.001953125,0,1073741824,-1\n");
        let err = ingest_csv(csv.as_bytes(), "t").unwrap_err().to_string();
        assert!(err.contains("val_loss must be positive"), "{err}");
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn malformed_number_names_field() {
        let csv = format!("{HEADER}r1,1024,1024,1048576,abc,0,1073741824,3.4\n");
        let err = ingest_csv(csv.as_bytes(), "t").unwrap_err();
        match err {
            Error::Row { row, field, .. } => {
                assert_eq!(row, 2);
                assert_eq!(field, "lr");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_column_and_empty_input() {
        let csv = "run_id,d_model,d_model_base,batch_size,lr,seed,tokens\nr,1,1,1,1,0,1\n";
        assert!(matches!(
            ingest_csv(csv.as_bytes(), "t"),
            Err(Error::MissingColumn(c)) if c == "val_loss"
        ));
        assert!(matches!(ingest_csv("".as_bytes(), "t"), Err(Error::EmptyInput)));
        assert!(matches!(ingest_csv(HEADER.as_bytes(), "t"), Err(Error::EmptyInput)));
    }

    #[test]
    fn tokens_below_batch_rejected() {
        let csv = format!("{HEADER}r1,1024,1024,1048576,0.001,0,1024,3.4\n");
        let err = ingest_csv(csv.as_bytes(), "t").unwrap_err().to_string();
        assert!(err.contains("tokens"), "{err}");
    }

    #[test]
    fn duplicate_snapshot_rejected() {
        let a = rec("a", 256, 1 << 20, 0.001, 0, 1 << 30, 3.0);
        let mut b = a.clone();
        b.lr = 0.002;
        assert!(RunSet::new(vec![a.clone(), b], "t").is_err());
        let mut c = a.clone();
        c.run_id = "c".into();
        assert!(RunSet::new(vec![a, c], "t").is_err());
    }

    fn three_batches() -> RunSet {
        let mut v = Vec::new();
        for (i, b) in [18u32, 20, 22].iter().enumerate() {
            for (j, t) in [30u32, 35, 37].iter().enumerate() {
                v.push(rec(&format!("r{i}"), 256, 1 << b, 0.001, 0, 1 << t, 3.0 + j as f64));
            }
        }
        RunSet::new(v, "t").unwrap()
    }

    #[test]
    fn filter_equality_range_and_identity() {
        let rs = three_batches();
        let only = filter(&rs, &RunFilter::new().batch_size(Constraint::Eq(1 << 20)));
        assert_eq!(only.len(), 3);
        assert!(only.records().iter().all(|r| r.batch_size == 1 << 20));

        let ranged = filter(
            &rs,
            &RunFilter::new().tokens(Constraint::Range(Some(1 << 30), Some(1 << 35))),
        );
        assert_eq!(ranged.len(), 6);
        assert!(ranged.records().iter().all(|r| r.tokens != 1 << 37));

        assert_eq!(filter(&rs, &RunFilter::new()), rs);
    }

    #[test]
    fn log_space_mean_of_optima() {
        // One profile per width; optima at 2^-9, 2^-9, 2^-8.5.
        let mut v = Vec::new();
        let grid = [-10.0f64, -9.5, -9.0, -8.5, -8.0];
        for (d, opt) in [(256u32, -9.0f64), (512, -9.0), (1024, -8.5)] {
            for (k, e) in grid.iter().enumerate() {
                v.push(rec(&format!("{d}-{k}"), d, 1 << 20, e.exp2(), 0, 1 << 30, 3.0 + (e - opt).powi(2)));
            }
        }
        let rs = RunSet::new(v, "t").unwrap();
        let table = aggregate_optima(&rs, &AggregateOptions::default());
        assert_eq!(table.entries.len(), 1);
        let e = table.entries.values().next().unwrap();
        assert_eq!(e.n_contributing, 3);
        let expected = (-9.0 - 9.0 - 8.5) / 3.0;
        assert!((e.log2_eta_star_mean - expected).abs() < 1e-12);
        assert!((e.eta_star() - 2.193e-3).abs() < 1e-6);

        let per_width = aggregate_optima(
            &rs,
            &AggregateOptions {
                group_by_mup_family: false,
                ..Default::default()
            },
        );
        assert_eq!(per_width.entries.len(), 3);
        assert!(per_width.entries.values().all(|e| e.log2_eta_star_std == 0.0 && e.n_contributing == 1));
    }

    #[test]
    fn single_lr_cells_are_reported() {
        let rs = RunSet::new(vec![rec("a", 256, 1 << 20, 0.001, 0, 1 << 30, 3.0)], "t").unwrap();
        let table = aggregate_optima(&rs, &AggregateOptions::default());
        assert!(table.entries.is_empty());
        assert_eq!(table.skipped.len(), 1);
        assert_eq!(table.skipped[0].n_lr, 1);
    }
}
