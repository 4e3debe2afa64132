use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{round1, RetrievalTable};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
}

impl Accuracy {
    pub fn rounded(top1: f64, top5: Option<f64>) -> Self {
        Accuracy {
            top1: round1(top1),
            top5: top5.map(round1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetric {
    pub frames_per_clip: usize,
    pub top1: f64,
    pub top5: f64,
    pub mean_top1_top5: f64,
}

/// Percentages at one decimal. `delta_gap` is the reference top-1 minus
/// `averaged_accuracy`, both as printed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub reference: String,
    pub benchmarks: BTreeMap<String, Accuracy>,
    pub averaged_accuracy: f64,
    pub delta_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<VideoMetric>,
}

/// One line of the flat export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub benchmark: String,
    pub metric: String,
    pub value: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported report schema {}", r.schema_version),
            });
        }
        Ok(r)
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |b: &str, m: &str, v: f64| MetricRow {
            benchmark: b.into(),
            metric: m.into(),
            value: v,
        };
        let mut out = Vec::new();
        for (name, acc) in &self.benchmarks {
            out.push(row(name, "top1", acc.top1));
            if let Some(t5) = acc.top5 {
                out.push(row(name, "top5", t5));
            }
        }
        out.push(row("summary", "averaged_accuracy", self.averaged_accuracy));
        out.push(row("summary", "delta_gap", self.delta_gap));
        if let Some(r) = &self.retrieval {
            for (dir, table) in [("text_retrieval", &r.text_retrieval), ("image_retrieval", &r.image_retrieval)] {
                for (k, v) in table {
                    out.push(row(dir, &format!("R@{k}"), *v));
                }
            }
        }
        if let Some(v) = &self.video {
            out.push(row("video", "top1", v.top1));
            out.push(row("video", "top5", v.top5));
            out.push(row("video", "mean_top1_top5", v.mean_top1_top5));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows() {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.json", self.to_json()), ("report.csv", self.to_csv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        let mut benchmarks = BTreeMap::new();
        benchmarks.insert("holdout".into(), Accuracy::rounded(87.54, Some(100.0)));
        benchmarks.insert("holdout-noise".into(), Accuracy::rounded(80.0, None));
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            reference: "holdout".into(),
            benchmarks,
            averaged_accuracy: 83.8,
            delta_gap: 3.8,
            retrieval: Some(RetrievalTable {
                text_retrieval: [(1, 50.0), (5, 100.0)].into_iter().collect(),
                image_retrieval: [(1, 25.0), (5, 75.0)].into_iter().collect(),
            }),
            video: None,
        }
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(r.benchmarks["holdout"].top1, 87.5);
        let back = EvalReport::from_json(&r.to_json(), Path::new("r.json")).unwrap();
        assert_eq!(back, r);
        let bumped = r.to_json().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(EvalReport::from_json(&bumped, Path::new("r.json")).is_err());
    }

    #[test]
    fn csv_rows() {
        let csv = sample().to_csv();
        assert!(csv.starts_with("benchmark,metric,value\n"));
        assert!(csv.contains("text_retrieval,R@5,100.0"));
        assert!(csv.contains("summary,delta_gap,3.8"));
    }
}
