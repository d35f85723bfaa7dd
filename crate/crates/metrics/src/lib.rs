//! Offline ranking metrics.
//!
//! Undefined cases (a single class, no eligible group) return `None` rather
//! than a made-up number.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{what}: {a} scores but {b} labels")]
    Length { what: &'static str, a: usize, b: usize },
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counted as one half.
///
/// The pair count is accumulated as an integer (twice the credited pairs) so
/// the result is exactly `count / (2 * positives * negatives)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length { what: "auc", a: scores.len(), b: labels.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut twice_pairs) = (0u128, 0u128);
    let (mut pos_total, mut neg_total) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_pairs += pos * (2 * neg_below + neg);
        neg_below += neg;
        pos_total += pos;
        neg_total += neg;
        i = j;
    }
    if pos_total == 0 || neg_total == 0 {
        return Ok(None);
    }
    Ok(Some(twice_pairs as f64 / (2 * pos_total * neg_total) as f64))
}

/// One scored candidate of a request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub request_id: u64,
    pub item_id: u32,
    pub score: f64,
    pub relevant: bool,
}

/// Mean over requests with at least `n` candidates of the share of relevant
/// items among the top `n`. Ranking is by score descending, then item id
/// ascending.
pub fn precision_at_n(records: &[Ranked], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let mut groups: BTreeMap<u64, Vec<&Ranked>> = BTreeMap::new();
    for r in records {
        groups.entry(r.request_id).or_default().push(r);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for group in groups.values_mut().filter(|g| g.len() >= n) {
        group.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
        let hits = group[..n].iter().filter(|r| r.relevant).count();
        sum += hits as f64 / n as f64;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Activity of one user on one day.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UserDay {
    pub user_id: u32,
    pub day: u32,
    pub clicks: u64,
    pub orders: u64,
}

/// Clicks and orders per distinct user, computed for each day and averaged
/// over days. Several entries for the same user and day are summed.
pub fn uctr_ucvr(log: &[UserDay]) -> Result<(f64, f64), MetricError> {
    if log.is_empty() {
        return Err(MetricError::Empty("uctr_ucvr"));
    }
    let mut days: BTreeMap<u32, (BTreeSet<u32>, u64, u64)> = BTreeMap::new();
    for e in log {
        let d = days.entry(e.day).or_default();
        d.0.insert(e.user_id);
        d.1 += e.clicks;
        d.2 += e.orders;
    }
    let (mut uctr, mut ucvr) = (0.0, 0.0);
    for (users, clicks, orders) in days.values() {
        uctr += *clicks as f64 / users.len() as f64;
        ucvr += *orders as f64 / users.len() as f64;
    }
    let n = days.len() as f64;
    Ok((uctr / n, ucvr / n))
}
