//! Report serialization: `key: value` summaries, metric CSV tables, and
//! the line-delimited training log.

use crate::error::{Result, TkgError};
use crate::eval::MetricReport;
use crate::trainer::TrainReport;

/// `key: value` per line; MAE omitted when no time query was scored.
pub fn metrics_text(report: &MetricReport, split: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("split: {split}\n"));
    out.push_str(&format!("queries: {}\n", report.queries));
    out.push_str(&format!("mrr: {}\n", report.mrr));
    out.push_str(&format!("hits@3: {}\n", report.hits3));
    out.push_str(&format!("hits@10: {}\n", report.hits10));
    if report.queries > 0 {
        out.push_str(&format!("mae_hours: {}\n", report.mae_hours));
    } else {
        out.push_str("mae_hours: absent\n");
    }
    out.push_str(&format!("skipped_time: {}\n", report.skipped_time));
    out
}

/// CSV rows `metric,value,split,tick-bucket`; the overall numbers use the
/// bucket label `all`.
pub fn metrics_csv(report: &MetricReport, split: &str) -> String {
    let mut out = String::from("metric,value,split,tick-bucket\n");
    let mut push = |metric: &str, value: f64, bucket: &str| {
        out.push_str(&format!("{metric},{value},{split},{bucket}\n"));
    };
    push("mrr", report.mrr, "all");
    push("hits@3", report.hits3, "all");
    push("hits@10", report.hits10, "all");
    push("mae_hours", report.mae_hours, "all");
    push("queries", report.queries as f64, "all");
    push("skipped_time", report.skipped_time as f64, "all");
    for bucket in &report.per_tick {
        let label = bucket.tick.to_string();
        push("mrr", bucket.mrr, &label);
        push("hits@3", bucket.hits3, &label);
        push("hits@10", bucket.hits10, &label);
        push("mae_hours", bucket.mae_hours, &label);
        push("queries", bucket.queries as f64, &label);
    }
    out
}

/// Parses rows written by [`metrics_csv`].
pub fn parse_metrics_csv(body: &str) -> Result<Vec<(String, f64, String, String)>> {
    let mut rows = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if i == 0 {
            if line != "metric,value,split,tick-bucket" {
                return Err(TkgError::Parse {
                    line: 1,
                    msg: format!("unexpected CSV header '{line}'"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(TkgError::Parse {
                line: i + 1,
                msg: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let value: f64 = parts[1].parse().map_err(|e| TkgError::Parse {
            line: i + 1,
            msg: format!("bad value '{}': {e}", parts[1]),
        })?;
        rows.push((
            parts[0].to_string(),
            value,
            parts[2].to_string(),
            parts[3].to_string(),
        ));
    }
    Ok(rows)
}

/// One structured log line per epoch (line-delimited JSON).
pub fn training_log(report: &TrainReport) -> String {
    let mut out = String::new();
    for (stats, metric) in report.epochs.iter().zip(&report.validation) {
        let record = serde_json::json!({
            "epoch": stats.epoch,
            "phase": stats.phase,
            "loss_time": stats.loss_time_sum,
            "loss_triple": stats.loss_triple_sum,
            "events": stats.events,
            "skipped_time": stats.skipped_time,
            "validation": metric,
            "seconds": stats.seconds,
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::TickBucket;

    fn sample() -> MetricReport {
        MetricReport {
            mrr: 0.5833333333333334,
            hits3: 2.0 / 3.0,
            hits10: 1.0,
            mae_hours: 1.25,
            queries: 3,
            skipped_time: 1,
            per_tick: vec![TickBucket {
                tick: 7,
                queries: 3,
                mrr: 0.5833333333333334,
                hits3: 2.0 / 3.0,
                hits10: 1.0,
                mae_hours: 1.25,
            }],
        }
    }

    #[test]
    fn csv_round_trips() {
        let report = sample();
        let csv = metrics_csv(&report, "test");
        let rows = parse_metrics_csv(&csv).unwrap();
        let find = |metric: &str, bucket: &str| {
            rows.iter()
                .find(|(m, _, _, b)| m == metric && b == bucket)
                .map(|(_, v, _, _)| *v)
                .unwrap()
        };
        assert_eq!(find("mrr", "all"), report.mrr);
        assert_eq!(find("mae_hours", "all"), report.mae_hours);
        assert_eq!(find("mrr", "7"), report.mrr);
        assert!(rows.iter().all(|(_, _, s, _)| s == "test"));
    }

    #[test]
    fn text_marks_absent_mae() {
        let empty = MetricReport::default();
        let text = metrics_text(&empty, "test");
        assert!(text.contains("mae_hours: absent"));
        let text = metrics_text(&sample(), "test");
        assert!(text.contains("mae_hours: 1.25"));
    }

    #[test]
    fn bad_csv_rejected() {
        assert!(parse_metrics_csv("wrong,header\n").is_err());
        assert!(parse_metrics_csv("metric,value,split,tick-bucket\nmrr,abc,x,all\n").is_err());
    }
}
