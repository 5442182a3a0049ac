use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::stats;
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 12] = [
    "scene_id",
    "mode",
    "ratio_requested",
    "ratio_realized",
    "pruning_accuracy",
    "spearman",
    "flops_relative",
    "K",
    "lambda",
    "G",
    "d_lowrank",
    "seed",
];

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// One scene under one pruning setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene_id: usize,
    pub mode: String,
    pub ratio_requested: f64,
    pub ratio_realized: f64,
    pub pruning_accuracy: f64,
    pub spearman: f64,
    /// Estimated from the dense cost model, not measured.
    pub flops_relative: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    #[serde(rename = "G")]
    pub g: usize,
    pub d_lowrank: usize,
    pub seed: u64,
}

impl ReportRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "ratio_realized" => Some(self.ratio_realized),
            "pruning_accuracy" => Some(self.pruning_accuracy),
            "spearman" => Some(self.spearman),
            "flops_relative" => Some(self.flops_relative),
            _ => None,
        }
    }

    fn group(&self) -> GroupKey {
        GroupKey {
            mode: self.mode.clone(),
            ratio_requested: self.ratio_requested,
            k: self.k,
            lambda: self.lambda,
            g: self.g,
            d_lowrank: self.d_lowrank,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupKey {
    pub mode: String,
    pub ratio_requested: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    #[serde(rename = "G")]
    pub g: usize,
    pub d_lowrank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation of each metric over one group of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(flatten)]
    pub key: GroupKey,
    pub count: usize,
    pub metrics: BTreeMap<String, Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub wall_clock_seconds: f64,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip)]
    pub rows: Vec<ReportRow>,
}

/// Groups rows by setting, in order of first appearance.
pub fn aggregate(rows: &[ReportRow], metrics: &[String]) -> Vec<Aggregate> {
    let mut groups: Vec<(GroupKey, Vec<&ReportRow>)> = Vec::new();
    for row in rows {
        let key = row.group();
        match groups.iter_mut().find(|(k, _)| same_group(k, &key)) {
            Some((_, members)) => members.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(key, members)| {
            let metrics = metrics
                .iter()
                .filter_map(|m| {
                    let values: Vec<f64> = members.iter().filter_map(|r| r.metric(m)).collect();
                    (values.len() == members.len()).then(|| {
                        (
                            m.clone(),
                            Summary {
                                mean: stats::mean(&values),
                                sd: stats::std_dev(&values),
                            },
                        )
                    })
                })
                .collect();
            Aggregate {
                key,
                count: members.len(),
                metrics,
            }
        })
        .collect()
}

fn same_group(a: &GroupKey, b: &GroupKey) -> bool {
    a.mode == b.mode
        && a.ratio_requested.to_bits() == b.ratio_requested.to_bits()
        && a.k == b.k
        && a.lambda.to_bits() == b.lambda.to_bits()
        && a.g == b.g
        && a.d_lowrank == b.d_lowrank
}

impl Report {
    pub fn new(config: ExperimentConfig, rows: Vec<ReportRow>, wall_clock_seconds: f64) -> Self {
        let aggregates = aggregate(&rows, &config.metrics);
        Self {
            config,
            code_version: CODE_VERSION.to_string(),
            wall_clock_seconds,
            aggregates,
            rows,
        }
    }

    /// Aggregates recomputed from the rows.
    pub fn recompute_aggregates(&self) -> Vec<Aggregate> {
        aggregate(&self.rows, &self.config.metrics)
    }

    pub fn find(&self, mode: &str, ratio: f64) -> impl Iterator<Item = &Aggregate> {
        let mode = mode.to_string();
        self.aggregates
            .iter()
            .filter(move |a| a.key.mode == mode && a.key.ratio_requested == ratio)
    }

    /// CSV body exactly as written by [`write_report`].
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Csv {
                path: PathBuf::from("<memory>"),
                source: e,
            })?;
        }
        w.into_inner()
            .map_err(|e| Error::io("<memory>", e.into_error()))
    }
}

/// `report.csv` pairs with `report.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the rows as CSV and everything else as a JSON sidecar next to it.
pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to write a report with no rows".into(),
        ));
    }
    if path.extension().is_some_and(|e| e == "json") {
        return Err(Error::InvalidArgument(format!(
            "{}: report path would collide with its JSON sidecar",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let body = report.to_csv()?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json(&side, e))?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if let Some(missing) = CSV_HEADER
        .iter()
        .find(|c| !headers.iter().any(|h| h == **c))
    {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: missing.to_string(),
        });
    }
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(csv_err)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut report: Report = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    report.rows = rows;
    Ok(report)
}
