//! Metrics output: one record per case followed by an aggregate line.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxseg::metrics::{aggregate, ClassMetrics, MetricsReport};

use crate::failure::{CmdResult, Failure, Status};
use crate::outdir::write_jsonl;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateLine {
    pub cases: usize,
    /// Mean over cases of each case's foreground mean.
    pub aggregate: ClassMetrics,
    /// Mean over cases for each foreground class.
    pub per_class: BTreeMap<String, ClassMetrics>,
}

impl AggregateLine {
    pub fn new(reports: &[MetricsReport]) -> Self {
        let mut per_class: BTreeMap<String, Vec<ClassMetrics>> = BTreeMap::new();
        for r in reports {
            for (name, m) in &r.per_class {
                per_class.entry(name.clone()).or_default().push(*m);
            }
        }
        Self {
            cases: reports.len(),
            aggregate: aggregate(reports),
            per_class: per_class
                .into_iter()
                .map(|(k, v)| (k, ClassMetrics::mean(&v)))
                .collect(),
        }
    }
}

/// Write `reports` as JSON lines plus the aggregate line; returns the aggregate.
pub fn write_metrics(path: &Path, reports: &[MetricsReport]) -> CmdResult<AggregateLine> {
    let line = AggregateLine::new(reports);
    let json = |e: serde_json::Error| Failure::new(Status::Other, e.to_string());
    let mut rows = reports
        .iter()
        .map(serde_json::to_value)
        .collect::<Result<Vec<_>, _>>()
        .map_err(json)?;
    rows.push(serde_json::to_value(&line).map_err(json)?);
    write_jsonl(path, rows)?;
    Ok(line)
}

/// Human-readable table in the column order DSC, JI, NSD.
pub fn print_table(line: &AggregateLine) {
    println!("{:<12} {:>7} {:>7} {:>7}", "class", "DSC", "JI", "NSD");
    for (name, m) in &line.per_class {
        println!("{name:<12} {:>7.4} {:>7.4} {:>7.4}", m.dsc, m.ji, m.nsd);
    }
    let m = line.aggregate;
    println!("{:<12} {:>7.4} {:>7.4} {:>7.4}", "mean", m.dsc, m.ji, m.nsd);
    println!("cases: {}", line.cases);
}
