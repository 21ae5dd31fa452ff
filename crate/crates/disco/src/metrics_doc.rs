//! Renders run metrics as a structured text document with a stable key
//! order, so two runs with the same config and seed produce byte-identical
//! output.

use std::collections::BTreeMap;

use disco_core::scenario::Metrics;

/// Renders `key = value` lines sorted by key.
pub fn render_metrics(m: &Metrics) -> String {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    kv.insert("agg.ratio".into(), format!("{:.6}", m.agg_ratio));
    kv.insert("bytes.total".into(), m.bytes_total.to_string());
    kv.insert("bytes.into.A".into(), m.bytes_into_analyzer.to_string());
    kv.insert("bytes.delivery.A".into(), m.delivery_bytes_into_analyzer.to_string());
    for ((src, dst), bytes) in &m.bytes_per_link {
        kv.insert(format!("bytes.link.{src}-{dst}"), bytes.to_string());
    }
    for (topic, count) in &m.msgs_per_topic {
        kv.insert(format!("msgs.topic.{topic}"), count.to_string());
    }
    for (topic, hops) in &m.stretch_per_topic {
        kv.insert(format!("stretch.topic.{topic}"), hops.to_string());
    }
    kv.insert("delivered.msgs".into(), m.delivered_msgs.to_string());
    kv.insert("delivered.base".into(), m.delivered_base.to_string());
    kv.insert("publishes".into(), m.publishes.to_string());
    kv.insert("detect.count".into(), m.detect_count.to_string());
    kv.insert("detect.end_count".into(), m.detect_end_count.to_string());
    kv.insert(
        "detect.latency_us".into(),
        m.detect_latency.map(|d| d.as_micros().to_string()).unwrap_or_else(|| "none".into()),
    );
    kv.insert("false_alarms".into(), m.false_alarms.to_string());
    kv.insert("flash_crowd.observed".into(), m.flash_crowd_observed.to_string());
    kv.insert("remediation.actions".into(), m.remediation_actions.to_string());
    kv.insert("dws.entries".into(), m.dws_entries.to_string());
    kv.insert("dws.inserts".into(), m.dws_inserts.to_string());
    kv.insert("dws.evicted".into(), m.dws_evicted.to_string());
    let opt = |v: Option<u64>| v.map(|n| n.to_string()).unwrap_or_else(|| "none".into());
    kv.insert("diag.drop_hits".into(), opt(m.diag_drop_hits));
    kv.insert("diag.overload_hits".into(), opt(m.diag_overload_hits));
    kv.insert("diag.legacy_hits".into(), opt(m.diag_legacy_hits));

    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(&k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Joins trace lines into the trace file body.
pub fn render_trace(lines: &[String]) -> String {
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    out
}
