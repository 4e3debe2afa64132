//! Published accuracy tables transcribed as `(model, benchmark, top1)` rows.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::robustness_gap;
use crate::error::{Error, Result};

pub const REFERENCE_BENCHMARK: &str = "IN-1K";
pub const VARIANT_BENCHMARKS: [&str; 5] = ["IN-A", "IN-R", "IN-V2", "IN-Sketch", "ObjectNet"];
/// Pseudo-benchmarks holding the published summary columns.
pub const AVG_ROW: &str = "avg";
pub const DELTA_ROW: &str = "delta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub model: String,
    pub benchmark: String,
    pub top1: f64,
}

/// Rows grouped by model, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureTable {
    pub models: Vec<(String, BTreeMap<String, f64>)>,
}

impl FixtureTable {
    pub fn from_rows(rows: Vec<FixtureRow>) -> Result<Self> {
        let mut t = FixtureTable::default();
        for r in rows {
            let idx = match t.models.iter().position(|(m, _)| *m == r.model) {
                Some(i) => i,
                None => {
                    t.models.push((r.model.clone(), BTreeMap::new()));
                    t.models.len() - 1
                }
            };
            if t.models[idx].1.insert(r.benchmark.clone(), r.top1).is_some() {
                return Err(Error::Input(format!(
                    "duplicate fixture row {}/{}",
                    r.model, r.benchmark
                )));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<FixtureRow>, _>>()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
        Self::from_rows(rows)
    }
}

/// Recomputed summary columns of one table row next to the published ones.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCheck {
    pub model: String,
    pub published_avg: f64,
    pub published_delta: f64,
    pub avg: f64,
    pub delta: f64,
}

impl GapCheck {
    pub fn matches(&self) -> bool {
        (self.avg - self.published_avg).abs() < 1e-9
            && (self.delta - self.published_delta).abs() < 1e-9
    }
}

/// Recomputes the rounded average and gap for every model in the table.
pub fn check_robustness_table(table: &FixtureTable) -> Result<Vec<GapCheck>> {
    table
        .models
        .iter()
        .map(|(model, b)| {
            let get = |k: &str| {
                b.get(k)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("fixture {model} lacks {k}")))
            };
            let reference = get(REFERENCE_BENCHMARK)?;
            let variants = VARIANT_BENCHMARKS
                .iter()
                .map(|k| get(k))
                .collect::<Result<Vec<_>>>()?;
            let g = robustness_gap(reference, &variants)?.rounded(reference);
            Ok(GapCheck {
                model: model.clone(),
                published_avg: get(AVG_ROW)?,
                published_delta: get(DELTA_ROW)?,
                avg: g.avg,
                delta: g.delta,
            })
        })
        .collect()
}

/// The transcribed robustness table shipped with the crate.
pub fn bundled_robustness_table() -> Result<FixtureTable> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/robustness_table.csv");
    FixtureTable::load(&path)
}
