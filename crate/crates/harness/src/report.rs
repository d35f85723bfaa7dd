//! Evaluation of ranking-model scores on the test day.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ppm_data::{Dataset, FrequencyBuckets};
use ppm_metrics::{auc, precision_at_n, uctr_ucvr, Ranked, UserDay};
use ppm_models::urm::TASKS;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Cut-off of the precision metric and size of the simulated slate.
pub const TOP_N: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub auc: Option<f64>,
    pub precision_at_2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    /// Training impressions of the target item, e.g. `[5, 20)`.
    pub bucket: String,
    pub samples: usize,
    /// Click AUC inside the bucket.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub tasks: Vec<TaskMetrics>,
    /// Mean of the click and order values.
    pub average_auc: Option<f64>,
    pub average_precision_at_2: Option<f64>,
    pub buckets: Vec<BucketMetrics>,
    /// Clicks and orders per user per day when each request shows the
    /// model's top two candidates.
    pub uctr: f64,
    pub ucvr: f64,
    pub steps: u64,
}

fn mean2(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? + b?) / 2.0)
}

fn label_of(s: &ppm_data::Sample, task: usize) -> bool {
    match task {
        0 => s.labels.click == 1,
        1 => s.labels.order == 1,
        _ => s.labels.cart == 1,
    }
}

impl MetricsReport {
    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Click AUC of the lowest and highest frequency bucket.
    pub fn bucket_auc(&self, b: usize) -> Option<f64> {
        self.buckets.get(b).and_then(|m| m.auc)
    }

    /// Scalars keyed by `metric/qualifier`, for aggregation across seeds.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for t in &self.tasks {
            if let Some(v) = t.auc {
                out.insert(format!("auc/{}", t.task), v);
            }
            if let Some(v) = t.precision_at_2 {
                out.insert(format!("p@2/{}", t.task), v);
            }
        }
        if let Some(v) = self.average_auc {
            out.insert("auc/average".into(), v);
        }
        if let Some(v) = self.average_precision_at_2 {
            out.insert("p@2/average".into(), v);
        }
        for (i, b) in self.buckets.iter().enumerate() {
            if let Some(v) = b.auc {
                out.insert(format!("auc/bucket{i} {}", b.bucket), v);
            }
        }
        out.insert("uctr".into(), self.uctr);
        out.insert("ucvr".into(), self.ucvr);
        out
    }

    /// One JSON object per line: metric, split, bucket, value.
    pub fn lines(&self, split: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |metric: String, bucket: Option<&str>, value: Option<f64>| {
            out.push(serde_json::json!({ "metric": metric, "split": split, "bucket": bucket, "value": value }).to_string());
        };
        for t in &self.tasks {
            push(format!("auc/{}", t.task), None, t.auc);
            push(format!("p@2/{}", t.task), None, t.precision_at_2);
        }
        push("auc/average".into(), None, self.average_auc);
        push("p@2/average".into(), None, self.average_precision_at_2);
        for b in &self.buckets {
            push("auc/click".into(), Some(&b.bucket), b.auc);
        }
        push("uctr".into(), None, Some(self.uctr));
        push("ucvr".into(), None, Some(self.ucvr));
        out
    }

    pub fn write_lines(&self, split: &str, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        for line in self.lines(split) {
            writeln!(f, "{line}").map_err(|e| HarnessError::io(path, e))?;
        }
        Ok(())
    }
}

/// Scores `preds[i] = [click, order, cart]` of `dataset.test[i]`.
pub fn evaluate(dataset: &Dataset, preds: &[[f32; 3]], buckets: &FrequencyBuckets, steps: u64) -> Result<MetricsReport> {
    let test = &dataset.test;
    if preds.len() != test.len() || buckets.assignment.len() != test.len() {
        return Err(HarnessError::Config(format!(
            "{} predictions and {} bucket assignments for {} test samples",
            preds.len(),
            buckets.assignment.len(),
            test.len()
        )));
    }
    let mut tasks = Vec::new();
    for (k, name) in TASKS.iter().enumerate() {
        let scores: Vec<f64> = preds.iter().map(|p| p[k] as f64).collect();
        let labels: Vec<bool> = test.iter().map(|s| label_of(s, k)).collect();
        let ranked: Vec<Ranked> = test
            .iter()
            .zip(&scores)
            .zip(&labels)
            .map(|((s, &score), &relevant)| Ranked { request_id: s.request_id, item_id: s.target_item_id, score, relevant })
            .collect();
        tasks.push(TaskMetrics {
            task: name.to_string(),
            auc: auc(&scores, &labels)?,
            precision_at_2: precision_at_n(&ranked, TOP_N),
        });
    }
    let mut bucket_rows = Vec::new();
    for b in 0..buckets.sizes.len() {
        let members = buckets.members(b);
        let scores: Vec<f64> = members.iter().map(|&i| preds[i][0] as f64).collect();
        let labels: Vec<bool> = members.iter().map(|&i| test[i].labels.click == 1).collect();
        bucket_rows.push(BucketMetrics { bucket: buckets.label(b), samples: members.len(), auc: auc(&scores, &labels)? });
    }
    let (uctr, ucvr) = uctr_ucvr(&simulated_log(dataset, preds))?;
    Ok(MetricsReport {
        samples: test.len(),
        average_auc: mean2(tasks[0].auc, tasks[1].auc),
        average_precision_at_2: mean2(tasks[0].precision_at_2, tasks[1].precision_at_2),
        tasks,
        buckets: bucket_rows,
        uctr,
        ucvr,
        steps,
    })
}

/// Shows each test request's top [`TOP_N`] candidates by click score and
/// tallies the clicks and orders they would have received.
pub fn simulated_log(dataset: &Dataset, preds: &[[f32; 3]]) -> Vec<UserDay> {
    let mut by_request: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.test.iter().enumerate() {
        by_request.entry(s.request_id).or_default().push(i);
    }
    let mut tally: BTreeMap<(u32, u32), (u64, u64)> = BTreeMap::new();
    for idx in by_request.values_mut() {
        idx.sort_by(|&a, &b| {
            preds[b][0]
                .total_cmp(&preds[a][0])
                .then(dataset.test[a].target_item_id.cmp(&dataset.test[b].target_item_id))
        });
        let s0 = &dataset.test[idx[0]];
        let entry = tally.entry((s0.user_id, dataset.day_of(s0.timestamp))).or_default();
        for &i in idx.iter().take(TOP_N) {
            entry.0 += dataset.test[i].labels.click as u64;
            entry.1 += dataset.test[i].labels.order as u64;
        }
    }
    tally
        .into_iter()
        .map(|((user_id, day), (clicks, orders))| UserDay { user_id, day, clicks, orders })
        .collect()
}
