//! μP width multipliers and the default experiment grid.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::{fmt_pow2_label, fmt_sig17, parse_int, parse_real, parse_uint};
use crate::run_store::CSV_COLUMNS;

/// Head dimension; the head count follows the width.
pub const HEAD_DIM: u32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    /// Input embeddings and biases.
    Embedding,
    /// Matrix-like hidden weights (attention and MLP projections).
    Hidden,
    /// Output (unembedding) logits.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lr_multiplier: f64,
    pub init_std_multiplier: f64,
    pub output_multiplier: f64,
}

impl Multipliers {
    pub const IDENTITY: Multipliers = Multipliers {
        lr_multiplier: 1.0,
        init_std_multiplier: 1.0,
        output_multiplier: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MupModelSpec {
    pub d_model: u32,
    pub d_model_base: u32,
    pub width_ratio: f64,
    pub init_sigma_base: f64,
    pub head_dim: u32,
    /// `None` when the width is not a multiple of the head dimension.
    pub n_heads: Option<u32>,
    pub multipliers: BTreeMap<ParamClass, Multipliers>,
}

pub fn init_sigma_base(d_model_base: u32) -> f64 {
    1.0 / (d_model_base as f64).sqrt()
}

pub fn width_multipliers(d_model: u32, d_model_base: u32) -> Result<MupModelSpec> {
    if d_model == 0 || d_model_base == 0 {
        return Err(Error::invalid("widths must be positive"));
    }
    let m = d_model as f64 / d_model_base as f64;
    let mut multipliers = BTreeMap::new();
    multipliers.insert(ParamClass::Embedding, Multipliers::IDENTITY);
    multipliers.insert(
        ParamClass::Hidden,
        Multipliers {
            lr_multiplier: 1.0 / m,
            init_std_multiplier: 1.0 / m.sqrt(),
            output_multiplier: 1.0,
        },
    );
    multipliers.insert(
        ParamClass::Output,
        Multipliers {
            lr_multiplier: 1.0,
            init_std_multiplier: 1.0,
            output_multiplier: 1.0 / m,
        },
    );
    Ok(MupModelSpec {
        d_model,
        d_model_base,
        width_ratio: m,
        init_sigma_base: init_sigma_base(d_model_base),
        head_dim: HEAD_DIM,
        n_heads: d_model.is_multiple_of(HEAD_DIM).then_some(d_model / HEAD_DIM),
        multipliers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub batch_size: u64,
    pub tokens: u64,
    pub d_model: u32,
    pub d_model_base: u32,
    #[serde(default)]
    pub seed: i64,
}

impl GridPoint {
    /// Run identifier shared by all token snapshots of one training run.
    pub fn run_id(&self) -> String {
        format!(
            "d{}-base{}-B{}-lr{}-s{}",
            self.d_model,
            self.d_model_base,
            fmt_pow2_label(self.batch_size as f64),
            fmt_pow2_label(self.lr),
            self.seed
        )
    }
}

fn pow2_axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| (lo + k as f64 * step).exp2()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    /// Learning-rate axis per μP base width.
    pub lr: BTreeMap<u32, Vec<f64>>,
    pub batch_sizes: Vec<u64>,
    pub tokens: Vec<u64>,
    pub widths: Vec<u32>,
    pub seeds: Vec<i64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        let mut lr = BTreeMap::new();
        lr.insert(256, pow2_axis(-11.0, -6.0, 1.0));
        lr.insert(1024, pow2_axis(-12.0, -7.0, 0.5));
        Self {
            lr,
            batch_sizes: (0..6).map(|k| 1u64 << (16 + 2 * k)).collect(),
            tokens: (30..=35).map(|k| 1u64 << k).collect(),
            widths: vec![256, 512, 1024],
            seeds: vec![0],
        }
    }
}

impl GridAxes {
    pub fn bases(&self) -> Vec<u32> {
        self.lr.keys().copied().collect()
    }

    /// Restricts the grid to one μP base.
    pub fn only_base(mut self, base: u32) -> Result<Self> {
        let axis = self
            .lr
            .remove(&base)
            .ok_or_else(|| Error::invalid(format!("no learning-rate axis for base {base}")))?;
        self.lr = BTreeMap::from([(base, axis)]);
        Ok(self)
    }

    /// Number of points `enumerate_grid` produces.
    pub fn size(&self) -> usize {
        let per_lr = self.batch_sizes.len() * self.tokens.len() * self.widths.len() * self.seeds.len();
        self.lr.values().map(|a| a.len() * per_lr).sum()
    }
}

/// Cartesian product of the axes, ordered by base, width, batch size,
/// learning rate, seed and budget.
pub fn enumerate_grid(axes: &GridAxes) -> Vec<GridPoint> {
    let mut out = Vec::with_capacity(axes.size());
    for (&base, lrs) in &axes.lr {
        for &d_model in &axes.widths {
            for &batch_size in &axes.batch_sizes {
                for &lr in lrs {
                    for &seed in &axes.seeds {
                        for &tokens in &axes.tokens {
                            out.push(GridPoint {
                                lr,
                                batch_size,
                                tokens,
                                d_model,
                                d_model_base: base,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Writes the grid in run-store CSV layout with an empty loss column.
pub fn write_grid_csv<W: Write>(points: &[GridPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for p in points {
        w.write_record([
            p.run_id(),
            p.d_model.to_string(),
            p.d_model_base.to_string(),
            p.batch_size.to_string(),
            fmt_sig17(p.lr),
            p.seed.to_string(),
            p.tokens.to_string(),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads grid points from a run-store style CSV, ignoring any loss column.
pub fn read_grid_csv<R: Read>(reader: R) -> Result<Vec<GridPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let (i_lr, i_b, i_t, i_d, i_base) = (
        need("lr")?,
        need("batch_size")?,
        need("tokens")?,
        need("d_model")?,
        need("d_model_base")?,
    );
    let i_seed = col("seed");
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = n + 2;
        let bad = |field: &str| Error::Row {
            row,
            field: field.to_string(),
            message: "unparseable or non-positive value".into(),
        };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let lr = parse_real(get(i_lr)).filter(|v| *v > 0.0).ok_or_else(|| bad("lr"))?;
        let batch_size = parse_uint(get(i_b)).filter(|v| *v > 0).ok_or_else(|| bad("batch_size"))?;
        let tokens = parse_uint(get(i_t)).filter(|v| *v > 0).ok_or_else(|| bad("tokens"))?;
        let d_model = parse_uint(get(i_d))
            .and_then(|v| u32::try_from(v).ok())
            .filter(|v| *v > 0)
            .ok_or_else(|| bad("d_model"))?;
        let d_model_base = parse_uint(get(i_base))
            .and_then(|v| u32::try_from(v).ok())
            .filter(|v| *v > 0)
            .ok_or_else(|| bad("d_model_base"))?;
        let seed = match i_seed.map(get) {
            None | Some("") => 0,
            Some(s) => parse_int(s).ok_or_else(|| bad("seed"))?,
        };
        out.push(GridPoint {
            lr,
            batch_size,
            tokens,
            d_model,
            d_model_base,
            seed,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}
