//! Scenario config files: INI-style sections `[topology]`, `[traffic]`,
//! `[detector]`, `[disco]` with `key = value` lines. Unknown sections or
//! keys are errors; every key has a default, so an empty file is the
//! default scenario.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use disco_core::scenario::ScenarioConfig;
use disco_core::simnet::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigParseError {}

fn err(line: usize, message: impl Into<String>) -> ConfigParseError {
    ConfigParseError { line, message: message.into() }
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigParseError> {
    value.parse::<T>().map_err(|_| err(line, format!("invalid number for {key}: {value:?}")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigParseError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("invalid boolean for {key}: {value:?}"))),
    }
}

fn parse_prefix(line: usize, key: &str, value: &str) -> Result<(Ipv4Addr, u8), ConfigParseError> {
    let (addr, len) = value
        .split_once('/')
        .ok_or_else(|| err(line, format!("{key} expects addr/len, got {value:?}")))?;
    let addr: Ipv4Addr =
        addr.parse().map_err(|_| err(line, format!("invalid address in {key}: {addr:?}")))?;
    let len: u8 = len.parse().map_err(|_| err(line, format!("invalid prefix length: {len:?}")))?;
    if len > 32 {
        return Err(err(line, "prefix length above 32"));
    }
    Ok((addr, len))
}

/// Parses the config document; keys not present keep their defaults.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigParseError> {
    let mut cfg = ScenarioConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| err(line_no, "unterminated section"))?;
            match name {
                "topology" | "traffic" | "detector" | "disco" => section = name.to_string(),
                other => return Err(err(line_no, format!("unknown section [{other}]"))),
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if section.is_empty() {
            return Err(err(line_no, "key before any section header"));
        }
        apply_key(&mut cfg, &section, key, value, line_no)?;
    }
    Ok(cfg)
}

fn apply_key(
    cfg: &mut ScenarioConfig,
    section: &str,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ConfigParseError> {
    let us = |v: &str, k: &str| parse_num::<u64>(line, k, v).map(SimDuration::from_micros);
    let ts = |v: &str, k: &str| parse_num::<u64>(line, k, v).map(SimTime::from_micros);
    match section {
        "topology" => match key {
            "relays" => cfg.topology.relays = parse_num(line, key, value)?,
            "default_latency_us" => cfg.topology.default_latency = us(value, key)?,
            "jitter_us" => cfg.topology.jitter_max = us(value, key)?,
            k if k.starts_with("latency.") && k.ends_with("_us") => {
                let pair = &k["latency.".len()..k.len() - "_us".len()];
                let (a, b) = pair
                    .split_once('-')
                    .ok_or_else(|| err(line, format!("expected latency.<A>-<B>_us, got {k}")))?;
                cfg.topology.link_latencies.push((a.to_string(), b.to_string(), us(value, key)?));
            }
            _ => return Err(err(line, format!("unknown key {key} in [topology]"))),
        },
        "traffic" => match key {
            "attack_start_us" => cfg.traffic.attack_start = ts(value, key)?,
            "attack_end_us" => cfg.traffic.attack_end = ts(value, key)?,
            "horizon_us" => cfg.traffic.horizon = ts(value, key)?,
            "victim_prefix" => cfg.traffic.victim_prefix = parse_prefix(line, key, value)?,
            "dilution_prefix" => cfg.traffic.dilution_prefix = parse_prefix(line, key, value)?,
            "attack_drops_per_sec" => cfg.traffic.attack_drops_per_sec = parse_num(line, key, value)?,
            "victim_share_pct" => cfg.traffic.victim_share_pct = parse_num(line, key, value)?,
            "benign_drops_per_sec" => cfg.traffic.benign_drops_per_sec = parse_num(line, key, value)?,
            "benign_inprefix_pct" => cfg.traffic.benign_inprefix_pct = parse_num(line, key, value)?,
            "queue_full_per_sec" => cfg.traffic.queue_full_per_sec = parse_num(line, key, value)?,
            "flows_per_window_victim_attack" => {
                cfg.traffic.flows_per_window_victim_attack = parse_num(line, key, value)?
            }
            "flows_per_window_dilution_attack" => {
                cfg.traffic.flows_per_window_dilution_attack = parse_num(line, key, value)?
            }
            "flows_per_window_benign" => {
                cfg.traffic.flows_per_window_benign = parse_num(line, key, value)?
            }
            "server_reports_per_sec" => {
                cfg.traffic.server_reports_per_sec = parse_num(line, key, value)?
            }
            "request_cost_normal" => cfg.traffic.request_cost_normal = parse_num(line, key, value)?,
            "request_cost_attack" => cfg.traffic.request_cost_attack = parse_num(line, key, value)?,
            "flash_crowd" => cfg.traffic.flash_crowd = parse_bool(line, key, value)?,
            "close_loop" => cfg.traffic.close_loop = parse_bool(line, key, value)?,
            "remediation_scale_pct" => {
                cfg.traffic.remediation_scale_pct = parse_num(line, key, value)?
            }
            _ => return Err(err(line, format!("unknown key {key} in [traffic]"))),
        },
        "detector" => match key {
            "heavy_flow_threshold" => cfg.detector.heavy_flow_threshold = parse_num(line, key, value)?,
            "window_us" => cfg.detector.window = us(value, key)?,
            "drop_rate_threshold" => cfg.detector.drop_rate_threshold = parse_num(line, key, value)?,
            "detect_windows" => cfg.detector.detect_windows = parse_num(line, key, value)?,
            "end_threshold" => cfg.detector.end_threshold = parse_num(line, key, value)?,
            "end_windows" => cfg.detector.end_windows = parse_num(line, key, value)?,
            "cost_threshold" => cfg.detector.cost_threshold = parse_num(line, key, value)?,
            "overload_rate_threshold" => {
                cfg.detector.overload_rate_threshold = parse_num(line, key, value)?
            }
            "monitor_max_events" => cfg.detector.monitor_max_events = parse_num(line, key, value)?,
            "monitor_max_period_us" => cfg.detector.monitor_max_period = us(value, key)?,
            "subscribe_drops_path" => cfg.detector.subscribe_drops_path = value.to_string(),
            "server_variant" => cfg.detector.server_variant = parse_bool(line, key, value)?,
            _ => return Err(err(line, format!("unknown key {key} in [detector]"))),
        },
        "disco" => match key {
            "lts_capacity" => cfg.disco.lts_capacity = parse_num(line, key, value)?,
            "edge_latency_us" => cfg.disco.edge_latency = us(value, key)?,
            "lts_ttl_multiple" => cfg.disco.lts_ttl_multiple = parse_num(line, key, value)?,
            "bucket_width_us" => cfg.disco.bucket_width = us(value, key)?,
            "base_ttl_us" => cfg.disco.base_ttl = us(value, key)?,
            "per_lookup_bonus_us" => cfg.disco.per_lookup_bonus = us(value, key)?,
            "per_subscriber_bonus_us" => cfg.disco.per_subscriber_bonus = us(value, key)?,
            "evidence_tag_bonus_us" => cfg.disco.evidence_tag_bonus = us(value, key)?,
            "zfilter_bits_per_link" => cfg.disco.zfilter_bits_per_link = parse_num(line, key, value)?,
            "sweep_interval_us" => cfg.disco.sweep_interval = us(value, key)?,
            "legacy_enabled" => cfg.disco.legacy_enabled = parse_bool(line, key, value)?,
            _ => return Err(err(line, format!("unknown key {key} in [disco]"))),
        },
        _ => unreachable!("sections validated at the header"),
    }
    Ok(())
}
