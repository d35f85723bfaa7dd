mod common;

use std::collections::{BTreeMap, BTreeSet};

use ppm_data::{generate, split_by_frequency, Dataset};
use ppm_harness::{evaluate, MetricsReport};

fn world() -> Dataset {
    generate(&common::tiny_config().data, 3).unwrap()
}

/// Coarse pseudo-random scores, so ties occur.
fn scores(n: usize, salt: u64) -> Vec<[f32; 3]> {
    (0..n as u64)
        .map(|i| {
            let h = |k: u64| ((i.wrapping_mul(2_654_435_761).wrapping_add(salt * 97 + k * 13)) % 50) as f32 / 50.0;
            [h(0), h(1), h(2)]
        })
        .collect()
}

fn brute_auc(s: &[f64], y: &[bool]) -> Option<f64> {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                credit += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    (pairs > 0.0).then(|| credit / pairs)
}

fn label(s: &ppm_data::Sample, k: usize) -> bool {
    [s.labels.click, s.labels.order, s.labels.cart][k] == 1
}

fn report(d: &Dataset, preds: &[[f32; 3]]) -> MetricsReport {
    let buckets = split_by_frequency(d, &[5, 20]).unwrap();
    evaluate(d, preds, &buckets, 7).unwrap()
}

#[test]
fn task_aucs_match_pair_counting() {
    let d = world();
    let preds = scores(d.test.len(), 1);
    let r = report(&d, &preds);
    for (k, name) in ["click", "order", "cart"].iter().enumerate() {
        let s: Vec<f64> = preds.iter().map(|p| p[k] as f64).collect();
        let y: Vec<bool> = d.test.iter().map(|x| label(x, k)).collect();
        let want = brute_auc(&s, &y).unwrap();
        assert!((r.task(name).unwrap().auc.unwrap() - want).abs() < 1e-12, "{name}");
    }
    let avg = (r.task("click").unwrap().auc.unwrap() + r.task("order").unwrap().auc.unwrap()) / 2.0;
    assert!((r.average_auc.unwrap() - avg).abs() < 1e-15);
    assert_eq!(r.samples, d.test.len());
    assert_eq!(r.steps, 7);
}

#[test]
fn precision_matches_enumeration() {
    let d = world();
    let preds = scores(d.test.len(), 2);
    let r = report(&d, &preds);
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in d.test.iter().enumerate() {
        groups.entry(s.request_id).or_default().push(i);
    }
    let (mut sum, mut n) = (0.0, 0.0);
    for idx in groups.values().filter(|g| g.len() >= 2) {
        // every pair of candidates; the shown pair is the one no other
        // candidate beats
        let beats = |a: usize, b: usize| {
            preds[a][0] > preds[b][0] || (preds[a][0] == preds[b][0] && d.test[a].target_item_id < d.test[b].target_item_id)
        };
        let top: Vec<usize> = idx.iter().copied().filter(|&a| idx.iter().filter(|&&b| b != a && beats(b, a)).count() < 2).collect();
        assert_eq!(top.len(), 2);
        sum += top.iter().filter(|&&i| d.test[i].labels.click == 1).count() as f64 / 2.0;
        n += 1.0;
    }
    assert!((r.task("click").unwrap().precision_at_2.unwrap() - sum / n).abs() < 1e-12);
}

#[test]
fn perfect_scores_give_unit_auc() {
    let d = world();
    let preds: Vec<[f32; 3]> = d.test.iter().map(|s| [s.labels.click as f32, s.labels.order as f32, s.labels.cart as f32]).collect();
    let r = report(&d, &preds);
    assert_eq!(r.task("click").unwrap().auc, Some(1.0));
    assert_eq!(r.task("order").unwrap().auc, Some(1.0));
    for b in &r.buckets {
        assert!(b.auc.is_none() || b.auc == Some(1.0));
    }
    let constant = vec![[0.5f32; 3]; d.test.len()];
    assert_eq!(report(&d, &constant).task("click").unwrap().auc, Some(0.5));
}

#[test]
fn buckets_partition_the_test_day() {
    let d = world();
    let preds = scores(d.test.len(), 3);
    let r = report(&d, &preds);
    assert_eq!(r.buckets.len(), 3);
    assert_eq!(r.buckets.iter().map(|b| b.samples).sum::<usize>(), d.test.len());
    let buckets = split_by_frequency(&d, &[5, 20]).unwrap();
    for (b, m) in r.buckets.iter().enumerate() {
        let idx = buckets.members(b);
        let s: Vec<f64> = idx.iter().map(|&i| preds[i][0] as f64).collect();
        let y: Vec<bool> = idx.iter().map(|&i| d.test[i].labels.click == 1).collect();
        assert_eq!(m.auc.is_some(), brute_auc(&s, &y).is_some());
        if let (Some(a), Some(b)) = (m.auc, brute_auc(&s, &y)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn user_rates_count_the_top_two_slate() {
    let d = world();
    let preds = scores(d.test.len(), 4);
    let r = report(&d, &preds);
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in d.test.iter().enumerate() {
        groups.entry(s.request_id).or_default().push(i);
    }
    let (mut clicks, mut orders, mut users) = (0u64, 0u64, BTreeSet::new());
    let mut days = BTreeSet::new();
    for idx in groups.values() {
        let mut idx = idx.clone();
        idx.sort_by(|&a, &b| preds[b][0].total_cmp(&preds[a][0]).then(d.test[a].target_item_id.cmp(&d.test[b].target_item_id)));
        for &i in idx.iter().take(2) {
            clicks += d.test[i].labels.click as u64;
            orders += d.test[i].labels.order as u64;
        }
        users.insert(d.test[idx[0]].user_id);
        days.insert(d.day_of(d.test[idx[0]].timestamp));
    }
    assert_eq!(days.len(), 1, "the test split is one day");
    assert!((r.uctr - clicks as f64 / users.len() as f64).abs() < 1e-12);
    assert!((r.ucvr - orders as f64 / users.len() as f64).abs() < 1e-12);
}

#[test]
fn metric_lines_and_scalars() {
    let d = world();
    let r = report(&d, &scores(d.test.len(), 5));
    let lines = r.lines("test");
    assert_eq!(lines.len(), 3 * 2 + 2 + 3 + 2);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["split"], "test");
        assert!(v["metric"].is_string());
    }
    let s = r.scalars();
    for k in ["auc/click", "auc/order", "auc/cart", "p@2/click", "auc/average", "p@2/average", "uctr", "ucvr"] {
        assert!(s.contains_key(k), "{k}");
    }
    assert!(s.keys().any(|k| k.starts_with("auc/bucket0 ")));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    r.write_lines("test", &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), lines.len());
}

#[test]
fn mismatched_predictions_are_rejected() {
    let d = world();
    let buckets = split_by_frequency(&d, &[5]).unwrap();
    assert!(evaluate(&d, &scores(d.test.len() - 1, 0), &buckets, 0).is_err());
}
