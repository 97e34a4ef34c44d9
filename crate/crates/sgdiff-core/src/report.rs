//! Experiment report assembly: one versioned JSON document per run with a
//! config echo, metrics, ledger totals, and artifact paths.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ledger::LedgerExport;
use crate::metrics::DistReport;

pub const SCHEMA_VERSION: u32 = 1;

/// Fixed wording carried by every report so desk-scale distances are never
/// read as image-space FID numbers.
pub const METRIC_NOTE: &str = "Distribution metrics are 1D Wasserstein-1 and energy distance \
against analytic or full-compute references; they replace FID at this scale and are not \
comparable to image-space FID values.";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub steps: usize,
    pub cfg_steps: Option<u64>,
    pub total_forward_passes: Option<u64>,
    pub dist: Option<DistReport>,
    pub ledger: Option<LedgerExport>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub command: String,
    pub metric_note: String,
    pub config_echo: Value,
    pub runs: Vec<RunSummary>,
    pub artifacts: Vec<String>,
    /// Command-specific payload (search logs, rank traces, panel tables).
    pub extra: Value,
}

/// Build a report document; absent inputs stay explicit nulls.
pub fn assemble_report(
    name: &str,
    command: &str,
    config_echo: Value,
    runs: Vec<RunSummary>,
    artifacts: Vec<String>,
    extra: Value,
) -> ExperimentReport {
    ExperimentReport {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        command: command.to_string(),
        metric_note: METRIC_NOTE.to_string(),
        config_echo,
        runs,
        artifacts,
        extra,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_round_trips() {
        let r = assemble_report("x", "sample", Value::Null, vec![], vec![], Value::Null);
        let text = serde_json::to_string_pretty(&r).unwrap();
        let back: ExperimentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.schema_version, 1);
    }

    #[test]
    fn partial_runs_serialize_nulls() {
        let run = RunSummary {
            label: "baseline".into(),
            steps: 50,
            cfg_steps: None,
            total_forward_passes: None,
            dist: None,
            ledger: None,
        };
        let v = serde_json::to_value(&run).unwrap();
        assert!(v.get("dist").unwrap().is_null());
        assert!(v.get("ledger").unwrap().is_null());
    }
}
