use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gate weights observed for one (topic, user) forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub topic_id: String,
    pub user_id: String,
    /// Adapted layer the gates were applied to. Gates are shared across
    /// layers in the toy model, which emits a single record with layer 0.
    pub layer_id: usize,
    pub ga: Vec<f64>,
    pub gb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicUtilization {
    pub count: usize,
    pub mean_ga: Vec<f64>,
    pub mean_gb: Vec<f64>,
}

/// Per-topic arithmetic mean of analyzing and writing gate vectors.
pub fn utilization_stats(records: &[GateRecord]) -> Result<BTreeMap<String, TopicUtilization>> {
    if records.is_empty() {
        return Err(Error::EmptyCollection("gate records"));
    }
    let n = records[0].ga.len();
    let mut acc: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        if r.ga.len() != n || r.gb.len() != n {
            return Err(Error::contract(format!(
                "gate record for topic {} has {}/{} entries, expected {n}",
                r.topic_id,
                r.ga.len(),
                r.gb.len()
            )));
        }
        let e = acc
            .entry(r.topic_id.clone())
            .or_insert_with(|| (0, vec![0.0; n], vec![0.0; n]));
        e.0 += 1;
        for i in 0..n {
            e.1[i] += r.ga[i];
            e.2[i] += r.gb[i];
        }
    }
    Ok(acc
        .into_iter()
        .map(|(topic, (count, sa, sb))| {
            let c = count as f64;
            let u = TopicUtilization {
                count,
                mean_ga: sa.into_iter().map(|v| v / c).collect(),
                mean_gb: sb.into_iter().map(|v| v / c).collect(),
            };
            (topic, u)
        })
        .collect())
}

/// Largest pairwise L1 distance between per-topic mean analyzing gates.
pub fn max_pairwise_l1(stats: &BTreeMap<String, TopicUtilization>) -> f64 {
    let profiles: Vec<&[f64]> = stats.values().map(|u| u.mean_ga.as_slice()).collect();
    let mut best = 0.0f64;
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let d: f64 = profiles[i].iter().zip(profiles[j]).map(|(a, b)| (a - b).abs()).sum();
            best = best.max(d);
        }
    }
    best
}
