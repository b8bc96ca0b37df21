//! Text renderings of evaluation and utilization results.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use socialalign_core::pac_lora::TopicUtilization;
use socialalign_core::pipeline::{Evaluation, LabeledGeneration};
use socialalign_core::sentiment::SentimentLabel;

/// A metric on the 0–100 presentation scale, one decimal.
pub fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

#[derive(Serialize)]
struct TopicMetrics<'a> {
    topic_id: &'a str,
    js: f64,
    predicted: &'a [f64; 7],
    truth: &'a [f64; 7],
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    accuracy: f64,
    macro_f1: f64,
    mean_js: f64,
    topics: Vec<TopicMetrics<'a>>,
}

/// Full-precision metrics as JSON.
pub fn metrics_json(ev: &Evaluation) -> String {
    let file = MetricsFile {
        accuracy: ev.micro.accuracy,
        macro_f1: ev.micro.macro_f1,
        mean_js: ev.mean_js(),
        topics: ev
            .topics
            .iter()
            .map(|t| TopicMetrics {
                topic_id: &t.topic_id,
                js: t.js,
                predicted: t.predicted.weights(),
                truth: t.truth.weights(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("plain data serializes") + "\n"
}

pub fn report_txt(ev: &Evaluation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "metric\tvalue");
    let _ = writeln!(s, "accuracy\t{}", pct(ev.micro.accuracy));
    let _ = writeln!(s, "macro_f1\t{}", pct(ev.micro.macro_f1));
    let _ = writeln!(s, "mean_js\t{}", pct(ev.mean_js()));
    let _ = writeln!(s);
    let _ = writeln!(s, "topic\tjs");
    for t in &ev.topics {
        let _ = writeln!(s, "{}\t{}", t.topic_id, pct(t.js));
    }
    s
}

/// Plot data: one row per topic and label with predicted and true shares.
pub fn distributions_tsv(ev: &Evaluation) -> String {
    let mut s = String::from("topic\tlabel\tpredicted\ttruth\n");
    for t in &ev.topics {
        for l in SentimentLabel::ALL {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", t.topic_id, l.as_str(), t.predicted.get(l), t.truth.get(l));
        }
    }
    s
}

pub fn predictions_tsv(labeled: &[LabeledGeneration]) -> String {
    let mut s = String::from("topic\tpost\tpredicted\tgold\n");
    for l in labeled {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", l.topic_id, l.post_id, l.predicted.as_str(), l.gold.as_str());
    }
    s
}

/// Plot data: one row per topic and expert.
pub fn utilization_tsv(stats: &BTreeMap<String, TopicUtilization>) -> String {
    let mut s = String::from("topic\texpert\tmean_ga\tmean_gb\n");
    for (topic, u) in stats {
        for (i, (a, b)) in u.mean_ga.iter().zip(&u.mean_gb).enumerate() {
            let _ = writeln!(s, "{topic}\t{i}\t{a}\t{b}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentages_have_one_decimal() {
        assert_eq!(pct(1.0), "100.0");
        assert_eq!(pct(0.0), "0.0");
        assert_eq!(pct(0.12345), "12.3");
    }
}
