//! Plain-text run reports (`key: value` lines) and the sweep CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::budget::Metric;
use crate::error::{Error, Result};
use crate::netgraph::CostReport;

/// Summary of one pruning run. Costs come from the pruned graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub method: String,
    pub metric: Metric,
    pub budget_fraction: f64,
    /// `B` in the configured metric.
    pub budget: f64,
    pub costs: CostReport,
    pub eval_accuracy: Option<f64>,
    pub violations: u64,
    pub extra_epochs: usize,
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Volume => "volume",
        Metric::Flops => "flop",
    }
}

impl PruneReport {
    pub fn final_cost(&self) -> f64 {
        match self.metric {
            Metric::Volume => self.costs.volume,
            Metric::Flops => self.costs.flops,
        }
    }

    pub fn within_budget(&self) -> bool {
        self.final_cost() <= self.budget
    }

    pub fn to_text(&self) -> String {
        let c = &self.costs;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("method", self.method.clone());
        kv("metric", metric_name(self.metric).into());
        kv("budget_fraction", self.budget_fraction.to_string());
        kv("budget", self.budget.to_string());
        kv("full_volume", c.full_volume.to_string());
        kv("volume", c.volume.to_string());
        kv("volume_factor", c.volume_factor.to_string());
        kv("full_flops", c.full_flops.to_string());
        kv("flops", c.flops.to_string());
        kv("flop_factor", c.flop_factor.to_string());
        kv("regular_block_volume", c.regular_block_volume.to_string());
        kv("regular_block_flops", c.regular_block_flops.to_string());
        kv("regular_volume_delta", (c.regular_block_volume - c.volume).to_string());
        kv("regular_flops_delta", (c.regular_block_flops - c.flops).to_string());
        kv("eval_accuracy", self.eval_accuracy.map_or_else(|| "none".into(), |a| a.to_string()));
        kv("budget_violation_steps", self.violations.to_string());
        kv("extra_epochs", self.extra_epochs.to_string());
        kv("within_budget", self.within_budget().to_string());
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| Error::integrity(path, format!("line {}: expected `key: value`", i + 1)))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).map(String::as_str).ok_or_else(|| Error::integrity(path, format!("missing field {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::integrity(path, format!("field {k} is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::integrity(path, format!("field {k} is not an integer")))
        };
        let metric = match get("metric")? {
            "volume" => Metric::Volume,
            "flop" => Metric::Flops,
            m => return Err(Error::integrity(path, format!("unknown metric {m}"))),
        };
        let eval_accuracy = match get("eval_accuracy")? {
            "none" => None,
            _ => Some(num("eval_accuracy")?),
        };
        Ok(Self {
            method: get("method")?.to_string(),
            metric,
            budget_fraction: num("budget_fraction")?,
            budget: num("budget")?,
            costs: CostReport {
                full_volume: num("full_volume")?,
                full_flops: num("full_flops")?,
                volume: num("volume")?,
                flops: num("flops")?,
                volume_factor: num("volume_factor")?,
                flop_factor: num("flop_factor")?,
                regular_block_volume: num("regular_block_volume")?,
                regular_block_flops: num("regular_block_flops")?,
            },
            eval_accuracy,
            violations: int("budget_violation_steps")?,
            extra_epochs: int("extra_epochs")? as usize,
        })
    }
}

/// One row of a budget sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: String,
    /// Target reduction factor `V_F / B`.
    pub factor: u32,
    pub budget: f64,
    /// `ok`, `over_budget`, or `error:<kind>`.
    pub status: String,
    pub volume: Option<f64>,
    pub volume_factor: Option<f64>,
    pub flop_factor: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const SWEEP_HEADER: &str = "method,factor,budget,status,volume,volume_factor,flop_factor,accuracy";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.factor,
            r.budget,
            r.status,
            opt(r.volume),
            opt(r.volume_factor),
            opt(r.flop_factor),
            opt(r.accuracy)
        );
    }
    s
}

pub fn sweep_from_csv(text: &str, path: &Path) -> Result<Vec<SweepRow>> {
    let mut lines = text.split_terminator('\n');
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::integrity(path, "unexpected sweep header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::integrity(path, format!("line {}: malformed sweep row", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad())
                }
            };
            Ok(SweepRow {
                method: f[0].to_string(),
                factor: f[1].parse().map_err(|_| bad())?,
                budget: f[2].parse().map_err(|_| bad())?,
                status: f[3].to_string(),
                volume: opt(f[4])?,
                volume_factor: opt(f[5])?,
                flop_factor: opt(f[6])?,
                accuracy: opt(f[7])?,
            })
        })
        .collect()
}
