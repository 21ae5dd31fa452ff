//! DDoS validation harness: builds the bottleneck topology, drives sensor,
//! detector, remediator and server agents over the middleware, and collects
//! metrics.
//!
//! The forwarding plane is abstracted: sensors synthesize event streams from
//! the traffic model instead of simulating per-packet forwarding; the
//! middleware, not the data plane, is what runs here. Routers V and U report
//! TTL-expired drops (attack traffic is killed a few hops past the
//! bottleneck), R reports queue-full pressure and locally detected heavy
//! flows, the analyzer A zooms in by subscribing to downstream drop events
//! constrained to the heavy destination prefixes, and a remediator M reacts
//! to challenge reports by logging a rate limit and annotating the
//! contributing drop events so they get promoted into the working store for
//! later diagnosis.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use crate::aggregation::{AggregatorOp, ConstraintKind, FilterConstraint, GranularitySpec};
use crate::events::{AggMeta, AttrType, AttrValue, EventRecord, FlowKey, Template};
use crate::overlay::NodeId;
use crate::pubsub::{SubscriptionSpec, TopicId};
use crate::reply::ReplyMessage;
use crate::rng::{fnv1a64, SplitMix64};
use crate::sim::{Agent, AgentEvent, Effects, Sim, SimConfig};
use crate::simnet::{SimDuration, SimTime};
use crate::store::{LegacyIndirection, LegacyRecord, LookupQuery, RetentionPolicy};
use crate::vocabulary::{ConceptId, ConceptPattern, VocabularyTree};

pub const DROP_EVENT_PATH: &str = "event.network.drops.forwarding.rfc791-ttl-exceeded";
pub const QUEUE_FULL_PATH: &str = "event.network.drops.queue-full";
pub const OVERLOAD_PATH: &str = "event.server.overload.request-cost";
pub const HEAVY_FLOW_PATH: &str = "report.traffic.heavy-flow";
pub const CHALLENGE_DETECTED_PATH: &str = "report.challenge.detected";
pub const CHALLENGE_ENDED_PATH: &str = "report.challenge.ended";
pub const RATE_LIMIT_PATH: &str = "report.remediation.rate-limit";
pub const EVIDENCE_TAG_PATH: &str = "tag.challenge-evidence";
pub const LEGACY_ROUTE_PATH: &str = "legacy.routing.bgp-route";

pub const ATTR_FLOW: &str = "attribute.flow";
pub const ATTR_LOCATION: &str = "attribute.location";
pub const ATTR_TIME: &str = "attribute.time";
pub const ATTR_COUNT: &str = "attribute.count";
pub const ATTR_RATE: &str = "attribute.rate";
pub const ATTR_PREFIX: &str = "attribute.prefix";
pub const ATTR_COST: &str = "attribute.cost";
pub const ATTR_NEXTHOP: &str = "attribute.nexthop";

/// The concept paths every deployment registers, in bootstrap order.
pub fn default_vocabulary_paths() -> Vec<&'static str> {
    alloc::vec![
        "event",
        "event.network",
        "event.network.drops",
        DROP_EVENT_PATH,
        QUEUE_FULL_PATH,
        "event.server",
        "event.server.overload",
        OVERLOAD_PATH,
        "report",
        "report.traffic",
        HEAVY_FLOW_PATH,
        "report.challenge",
        CHALLENGE_DETECTED_PATH,
        CHALLENGE_ENDED_PATH,
        "report.remediation",
        RATE_LIMIT_PATH,
        ATTR_FLOW,
        crate::events::FLOW_SRC_ADDR_PATH,
        crate::events::FLOW_DST_ADDR_PATH,
        crate::events::FLOW_SRC_PORT_PATH,
        crate::events::FLOW_DST_PORT_PATH,
        crate::events::FLOW_PROTO_PATH,
        ATTR_LOCATION,
        ATTR_TIME,
        ATTR_COUNT,
        ATTR_RATE,
        ATTR_PREFIX,
        ATTR_COST,
        ATTR_NEXTHOP,
        "tag",
        EVIDENCE_TAG_PATH,
        "legacy",
        "legacy.routing",
        LEGACY_ROUTE_PATH,
    ]
}

/// Builds the vocabulary all scenario components share.
pub fn default_vocabulary() -> VocabularyTree {
    let mut v = VocabularyTree::new();
    for path in default_vocabulary_paths() {
        v.register_str(path).expect("builtin vocabulary registers");
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

/// Routers R, T, V, U, the server S, analyzer A and remediator M, plus
/// relay nodes that give the overlay multi-hop paths.
#[derive(Debug, Clone)]
pub struct TopologyConfig {
    pub relays: u32,
    pub default_latency: SimDuration,
    pub jitter_max: SimDuration,
    /// Per-pair latency overrides by node label, applied symmetrically.
    pub link_latencies: Vec<(String, String, SimDuration)>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            relays: 9,
            default_latency: SimDuration::from_millis(1),
            jitter_max: SimDuration::ZERO,
            link_latencies: Vec::new(),
        }
    }
}

/// Synthetic traffic: what the sensors observe per phase (pre-attack,
/// attack, post-attack).
#[derive(Debug, Clone)]
pub struct TrafficModel {
    pub attack_start: SimTime,
    pub attack_end: SimTime,
    pub horizon: SimTime,
    pub victim_prefix: (Ipv4Addr, u8),
    pub dilution_prefix: (Ipv4Addr, u8),
    /// TTL-exceeded drops per second during the attack, split between V and
    /// U by `victim_share_pct`.
    pub attack_drops_per_sec: u32,
    pub victim_share_pct: u32,
    /// Background drops per second at each of V and U, all phases.
    pub benign_drops_per_sec: u32,
    /// Percentage of benign drops whose destination falls in the victim
    /// prefix anyway.
    pub benign_inprefix_pct: u32,
    /// Queue-full events per second at R during the attack.
    pub queue_full_per_sec: u32,
    /// Flow counts R's local heavy-hitter detector sees per window.
    pub flows_per_window_victim_attack: u64,
    pub flows_per_window_dilution_attack: u64,
    pub flows_per_window_benign: u64,
    /// Server overload reports per second from S during the attack window.
    pub server_reports_per_sec: u32,
    pub request_cost_normal: i64,
    pub request_cost_attack: i64,
    /// Flash crowd: high request volume at normal per-request cost, no
    /// TTL-drop wave.
    pub flash_crowd: bool,
    /// Close the loop: sensors scale attack delivery down once remediation
    /// is announced.
    pub close_loop: bool,
    pub remediation_scale_pct: u32,
}

impl Default for TrafficModel {
    fn default() -> Self {
        Self {
            attack_start: SimTime::from_micros(3_000_000),
            attack_end: SimTime::from_micros(13_000_000),
            horizon: SimTime::from_micros(20_000_000),
            victim_prefix: (Ipv4Addr::new(4, 2, 0, 0), 16),
            dilution_prefix: (Ipv4Addr::new(7, 7, 0, 0), 16),
            attack_drops_per_sec: 200,
            victim_share_pct: 70,
            benign_drops_per_sec: 2,
            benign_inprefix_pct: 10,
            queue_full_per_sec: 40,
            flows_per_window_victim_attack: 120,
            flows_per_window_dilution_attack: 80,
            flows_per_window_benign: 10,
            server_reports_per_sec: 20,
            request_cost_normal: 100,
            request_cost_attack: 900,
            flash_crowd: false,
            close_loop: false,
            remediation_scale_pct: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// Flows per window above which R reports a prefix as a heavy flow.
    pub heavy_flow_threshold: u64,
    /// Detector window at both R and A.
    pub window: SimDuration,
    /// Weighted drop events per window that declare a challenge.
    pub drop_rate_threshold: u64,
    /// Evidence must persist this many consecutive windows before a
    /// challenge is declared; debounces the pipeline tail (every tree stage
    /// may hold events up to its period, so a burst keeps arriving for a
    /// few windows after the source went quiet).
    pub detect_windows: u32,
    /// Below this for `end_windows` consecutive windows ends the challenge.
    pub end_threshold: u64,
    pub end_windows: u32,
    /// Mean request cost above this marks requests as resource-intensive.
    pub cost_threshold: i64,
    pub overload_rate_threshold: u64,
    /// Steady-phase aggregation granularity of A's event subscriptions.
    pub monitor_max_events: u32,
    pub monitor_max_period: SimDuration,
    /// Event name A subscribes to on trigger; the default is the exact
    /// TTL-exceeded event, `event.network.drops.*` broadens it.
    pub subscribe_drops_path: String,
    /// Subscribe to server overload reports and use per-request cost to
    /// discriminate a DDoS from a flash crowd.
    pub server_variant: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            heavy_flow_threshold: 50,
            window: SimDuration::from_millis(500),
            drop_rate_threshold: 30,
            detect_windows: 2,
            end_threshold: 5,
            end_windows: 4,
            cost_threshold: 300,
            overload_rate_threshold: 5,
            monitor_max_events: 10,
            monitor_max_period: SimDuration::from_millis(500),
            subscribe_drops_path: DROP_EVENT_PATH.to_string(),
            server_variant: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscoConfig {
    pub lts_capacity: usize,
    pub edge_latency: SimDuration,
    pub lts_ttl_multiple: u32,
    pub bucket_width: SimDuration,
    pub base_ttl: SimDuration,
    pub per_lookup_bonus: SimDuration,
    pub per_subscriber_bonus: SimDuration,
    pub evidence_tag_bonus: SimDuration,
    pub zfilter_bits_per_link: u8,
    pub sweep_interval: SimDuration,
    pub legacy_enabled: bool,
}

impl Default for DiscoConfig {
    fn default() -> Self {
        Self {
            lts_capacity: 4096,
            edge_latency: SimDuration::from_millis(250),
            lts_ttl_multiple: 8,
            bucket_width: SimDuration::from_secs(1),
            base_ttl: SimDuration::from_secs(30),
            per_lookup_bonus: SimDuration::from_secs(5),
            per_subscriber_bonus: SimDuration::from_secs(1),
            evidence_tag_bonus: SimDuration::from_secs(60),
            zfilter_bits_per_link: 4,
            sweep_interval: SimDuration::from_secs(1),
            legacy_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioConfig {
    pub topology: TopologyConfig,
    pub traffic: TrafficModel,
    pub detector: DetectorConfig,
    pub disco: DiscoConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.traffic;
        if t.attack_start >= t.attack_end {
            return Err(ConfigError("attack_start must precede attack_end".into()));
        }
        if t.attack_end >= t.horizon {
            return Err(ConfigError("horizon must extend past attack_end".into()));
        }
        if t.victim_share_pct > 100 || t.benign_inprefix_pct > 100 || t.remediation_scale_pct > 100
        {
            return Err(ConfigError("percentages must be at most 100".into()));
        }
        if t.victim_prefix.1 > 32 || t.dilution_prefix.1 > 32 {
            return Err(ConfigError("prefix length above 32".into()));
        }
        let d = &self.detector;
        if d.heavy_flow_threshold == 0 || d.drop_rate_threshold == 0 {
            return Err(ConfigError("detector thresholds must be positive".into()));
        }
        if d.window == SimDuration::ZERO {
            return Err(ConfigError("detector window must be positive".into()));
        }
        if d.end_windows == 0 || d.detect_windows == 0 {
            return Err(ConfigError("detect_windows and end_windows must be positive".into()));
        }
        if d.monitor_max_events == 0 {
            return Err(ConfigError("monitor_max_events must be positive".into()));
        }
        if self.disco.zfilter_bits_per_link == 0 || self.disco.zfilter_bits_per_link > 32 {
            return Err(ConfigError("zfilter bits per link out of range".into()));
        }
        if self.disco.sweep_interval == SimDuration::ZERO {
            return Err(ConfigError("sweep_interval must be positive".into()));
        }
        if default_vocabulary().resolve_str(&d.subscribe_drops_path).is_err() {
            return Err(ConfigError(
                "subscribe_drops_path does not resolve in the deployment vocabulary".into(),
            ));
        }
        Ok(())
    }
}

/// What a run reports. Rendering to the metrics document lives with the IO
/// layer; everything here is plain data with deterministic ordering.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub bytes_per_link: BTreeMap<(String, String), u64>,
    pub bytes_total: u64,
    pub bytes_into_analyzer: u64,
    /// DATA and TEMPLATE bytes received by A: the cost of its delivery
    /// path, excluding query and control traffic.
    pub delivery_bytes_into_analyzer: u64,
    pub msgs_per_topic: BTreeMap<TopicId, u64>,
    pub stretch_per_topic: BTreeMap<TopicId, u32>,
    pub agg_ratio: f64,
    pub delivered_msgs: u64,
    pub delivered_base: u64,
    pub publishes: u64,
    pub detect_count: u64,
    pub detect_end_count: u64,
    pub detect_latency: Option<SimDuration>,
    pub false_alarms: u64,
    pub flash_crowd_observed: u64,
    pub remediation_actions: u64,
    pub dws_entries: u64,
    pub dws_inserts: u64,
    pub dws_evicted: u64,
    pub diag_drop_hits: Option<u64>,
    pub diag_overload_hits: Option<u64>,
    pub diag_legacy_hits: Option<u64>,
}

/// A finished run: metrics plus the raw trace lines (empty unless tracing
/// was requested).
#[derive(Debug)]
pub struct ScenarioOutput {
    pub metrics: Metrics,
    pub trace: Vec<String>,
}

pub fn node_id_for(label: &str) -> NodeId {
    NodeId(fnv1a64(alloc::format!("node:{label}").as_bytes()))
}

fn random_addr_in(prefix: (Ipv4Addr, u8), rng: &mut SplitMix64) -> Ipv4Addr {
    let base = u32::from(prefix.0);
    let host_bits = 32 - prefix.1 as u32;
    let mask = if prefix.1 == 0 { 0 } else { (!0u32) << host_bits };
    let host =
        if host_bits == 32 { rng.next_u32() } else { (rng.next_u64() % (1u64 << host_bits)) as u32 };
    Ipv4Addr::from((base & mask) | host)
}

fn random_flow(dst: Ipv4Addr, rng: &mut SplitMix64) -> FlowKey {
    FlowKey {
        src_addr: Ipv4Addr::from(rng.next_u32()),
        dst_addr: dst,
        src_port: (rng.next_below(64511) + 1024) as u16,
        dst_port: if rng.next_below(2) == 0 { 80 } else { 443 },
        proto: if rng.next_below(10) < 8 { 6 } else { 17 },
    }
}

fn rate_interval(per_sec: u32) -> SimDuration {
    SimDuration::from_micros(1_000_000 / per_sec.max(1) as u64)
}

struct Ids {
    drop_event: ConceptId,
    queue_full: ConceptId,
    overload: ConceptId,
    heavy_flow: ConceptId,
    detected: ConceptId,
    ended: ConceptId,
    rate_limit: ConceptId,
    evidence_tag: ConceptId,
    flow: ConceptId,
    dst_addr: ConceptId,
    location: ConceptId,
    time: ConceptId,
    count: ConceptId,
    rate: ConceptId,
    prefix: ConceptId,
    cost: ConceptId,
}

impl Ids {
    fn resolve(vocab: &VocabularyTree) -> Self {
        let id = |p: &str| vocab.id_of(p).expect("builtin path registered");
        Self {
            drop_event: id(DROP_EVENT_PATH),
            queue_full: id(QUEUE_FULL_PATH),
            overload: id(OVERLOAD_PATH),
            heavy_flow: id(HEAVY_FLOW_PATH),
            detected: id(CHALLENGE_DETECTED_PATH),
            ended: id(CHALLENGE_ENDED_PATH),
            rate_limit: id(RATE_LIMIT_PATH),
            evidence_tag: id(EVIDENCE_TAG_PATH),
            flow: id(ATTR_FLOW),
            dst_addr: id(crate::events::FLOW_DST_ADDR_PATH),
            location: id(ATTR_LOCATION),
            time: id(ATTR_TIME),
            count: id(ATTR_COUNT),
            rate: id(ATTR_RATE),
            prefix: id(ATTR_PREFIX),
            cost: id(ATTR_COST),
        }
    }
}

const DROP_TEMPLATE_ID: u16 = 1;
const QUEUE_FULL_TEMPLATE_ID: u16 = 2;
const HEAVY_TEMPLATE_ID: u16 = 3;
const DETECTED_TEMPLATE_ID: u16 = 4;
const ENDED_TEMPLATE_ID: u16 = 5;
const RATE_LIMIT_TEMPLATE_ID: u16 = 6;
const OVERLOAD_TEMPLATE_ID: u16 = 7;
const ROUTE_TEMPLATE_ID: u16 = 0x7FFF;

const TICK_BENIGN: u64 = 1;
const TICK_ATTACK: u64 = 2;
const TICK_QUEUE_FULL: u64 = 3;
const TICK_WINDOW: u64 = 4;
const TICK_SERVER: u64 = 5;
const TICK_DECIDE: u64 = 6;
const TICK_DIAG: u64 = 7;

const LOOKUP_DIAG_DROPS: u64 = 101;
const LOOKUP_DIAG_OVERLOAD: u64 = 102;
const LOOKUP_DIAG_LEGACY: u64 = 103;

/// Drop sensor on V or U: reports TTL-exceeded packets with flow
/// identification, reporter location and timestamp.
struct DropSensor {
    node: NodeId,
    cfg: ScenarioConfig,
    rng: SplitMix64,
    ids: Option<Ids>,
    /// Share of the attack drop rate observed at this router.
    share_pct: u32,
    /// Destinations of the attack traffic dropped here.
    attack_prefix: (Ipv4Addr, u8),
    /// Percent of full delivery after remediation (100 until then).
    attack_scale: u32,
}

impl DropSensor {
    fn publish_drop(&mut self, fx: &mut Effects<'_>, dst: Ipv4Addr) {
        let ids = self.ids.as_ref().unwrap();
        let flow = random_flow(dst, &mut self.rng);
        fx.publish_data(EventRecord {
            event_id: ids.drop_event,
            template_id: DROP_TEMPLATE_ID,
            issuer: self.node,
            values: alloc::vec![
                AttrValue::Flow(flow),
                AttrValue::NodeLoc(self.node),
                AttrValue::Timestamp(fx.now),
            ],
        });
    }

    fn attack_interval(&self) -> SimDuration {
        let t = &self.cfg.traffic;
        let rate = t.attack_drops_per_sec as u64 * self.share_pct as u64 * self.attack_scale as u64
            / 10_000;
        SimDuration::from_micros(1_000_000 / rate.max(1))
    }
}

impl Agent for DropSensor {
    fn on_event(&mut self, fx: &mut Effects<'_>, event: AgentEvent<'_>) {
        let t = self.cfg.traffic.clone();
        match event {
            AgentEvent::Started => {
                let ids = Ids::resolve(fx.vocab);
                fx.publish_template(Template {
                    issuer: self.node,
                    template_id: DROP_TEMPLATE_ID,
                    event_id: ids.drop_event,
                    fields: alloc::vec![
                        (ids.flow, AttrType::FlowKey),
                        (ids.location, AttrType::NodeLoc),
                        (ids.time, AttrType::Timestamp),
                    ],
                });
                self.ids = Some(ids);
                if t.benign_drops_per_sec > 0 {
                    fx.set_timer(TICK_BENIGN, fx.now + rate_interval(t.benign_drops_per_sec));
                }
                if !t.flash_crowd && t.attack_drops_per_sec > 0 && self.share_pct > 0 {
                    fx.set_timer(TICK_ATTACK, t.attack_start);
                }
                if t.close_loop {
                    let pattern = fx.vocab.resolve_str("report.remediation.*").unwrap();
                    fx.subscribe(SubscriptionSpec {
                        event_pattern: pattern,
                        filters: alloc::vec![],
                        discards: alloc::vec![],
                        aggregator_ops: BTreeMap::new(),
                        granularity: GranularitySpec::per_event(),
                    });
                }
            }
            AgentEvent::Timer { token: TICK_BENIGN } => {
                let in_prefix = self.rng.next_below(100) < t.benign_inprefix_pct as u64;
                let dst = if in_prefix {
                    random_addr_in(t.victim_prefix, &mut self.rng)
                } else {
                    Ipv4Addr::from(self.rng.next_u32())
                };
                self.publish_drop(fx, dst);
                let next = fx.now + rate_interval(t.benign_drops_per_sec);
                if next <= t.horizon {
                    fx.set_timer(TICK_BENIGN, next);
                }
            }
            AgentEvent::Timer { token: TICK_ATTACK } => {
                if fx.now >= t.attack_end {
                    return;
                }
                if fx.now >= t.attack_start {
                    let dst = random_addr_in(self.attack_prefix, &mut self.rng);
                    self.publish_drop(fx, dst);
                }
                let next = fx.now + self.attack_interval();
                if next < t.attack_end {
                    fx.set_timer(TICK_ATTACK, next);
                }
            }
            // Remediation announced: scale attack delivery down.
            AgentEvent::DataDelivered { record, .. }
                if t.close_loop && record.event_id == self.ids.as_ref().unwrap().rate_limit =>
            {
                self.attack_scale = t.remediation_scale_pct.max(1);
            }
            _ => {}
        }
    }
}

/// Edge router R: queue-full pressure reports plus a local heavy-hitter
/// detector publishing per-prefix heavy-flow reports.
struct EdgeRouter {
    node: NodeId,
    cfg: ScenarioConfig,
    rng: SplitMix64,
    ids: Option<Ids>,
}

impl EdgeRouter {
    fn window_flow_counts(&self, now: SimTime) -> Vec<((Ipv4Addr, u8), u64)> {
        let t = &self.cfg.traffic;
        let in_attack = now >= t.attack_start && now < t.attack_end;
        let victim =
            if in_attack { t.flows_per_window_victim_attack } else { t.flows_per_window_benign };
        let dilution =
            if in_attack { t.flows_per_window_dilution_attack } else { t.flows_per_window_benign };
        alloc::vec![(t.victim_prefix, victim), (t.dilution_prefix, dilution)]
    }
}

impl Agent for EdgeRouter {
    fn on_event(&mut self, fx: &mut Effects<'_>, event: AgentEvent<'_>) {
        let t = self.cfg.traffic.clone();
        let d = self.cfg.detector.clone();
        match event {
            AgentEvent::Started => {
                let ids = Ids::resolve(fx.vocab);
                fx.publish_template(Template {
                    issuer: self.node,
                    template_id: QUEUE_FULL_TEMPLATE_ID,
                    event_id: ids.queue_full,
                    fields: alloc::vec![
                        (ids.location, AttrType::NodeLoc),
                        (ids.time, AttrType::Timestamp),
                        (ids.count, AttrType::Counter64),
                    ],
                });
                fx.publish_template(Template {
                    issuer: self.node,
                    template_id: HEAVY_TEMPLATE_ID,
                    event_id: ids.heavy_flow,
                    fields: alloc::vec![
                        (ids.prefix, AttrType::Ipv4Prefix),
                        (ids.rate, AttrType::Counter64),
                        (ids.location, AttrType::NodeLoc),
                        (ids.time, AttrType::Timestamp),
                    ],
                });
                self.ids = Some(ids);
                fx.set_timer(TICK_WINDOW, fx.now + d.window);
                if t.queue_full_per_sec > 0 {
                    fx.set_timer(TICK_QUEUE_FULL, t.attack_start);
                }
            }
            AgentEvent::Timer { token: TICK_QUEUE_FULL } => {
                if fx.now >= t.attack_end {
                    return;
                }
                let ids = self.ids.as_ref().unwrap();
                fx.publish_data(EventRecord {
                    event_id: ids.queue_full,
                    template_id: QUEUE_FULL_TEMPLATE_ID,
                    issuer: self.node,
                    values: alloc::vec![
                        AttrValue::NodeLoc(self.node),
                        AttrValue::Timestamp(fx.now),
                        AttrValue::Counter(1 + self.rng.next_below(16)),
                    ],
                });
                let next = fx.now + rate_interval(t.queue_full_per_sec);
                if next < t.attack_end {
                    fx.set_timer(TICK_QUEUE_FULL, next);
                }
            }
            AgentEvent::Timer { token: TICK_WINDOW } => {
                let ids = self.ids.as_ref().unwrap();
                for (prefix, flows) in self.window_flow_counts(fx.now) {
                    if flows >= d.heavy_flow_threshold {
                        fx.publish_data(EventRecord {
                            event_id: ids.heavy_flow,
                            template_id: HEAVY_TEMPLATE_ID,
                            issuer: self.node,
                            values: alloc::vec![
                                AttrValue::Ipv4Prefix(prefix.0, prefix.1),
                                AttrValue::Counter(flows),
                                AttrValue::NodeLoc(self.node),
                                AttrValue::Timestamp(fx.now),
                            ],
                        });
                    }
                }
                let next = fx.now + d.window;
                if next <= t.horizon {
                    fx.set_timer(TICK_WINDOW, next);
                }
            }
            _ => {}
        }
    }
}

/// Victim-side server S reporting per-request cost deviations.
struct ServerSensor {
    node: NodeId,
    cfg: ScenarioConfig,
    rng: SplitMix64,
    ids: Option<Ids>,
}

impl Agent for ServerSensor {
    fn on_event(&mut self, fx: &mut Effects<'_>, event: AgentEvent<'_>) {
        let t = self.cfg.traffic.clone();
        match event {
            AgentEvent::Started => {
                let ids = Ids::resolve(fx.vocab);
                fx.publish_template(Template {
                    issuer: self.node,
                    template_id: OVERLOAD_TEMPLATE_ID,
                    event_id: ids.overload,
                    fields: alloc::vec![
                        (ids.flow, AttrType::FlowKey),
                        (ids.cost, AttrType::Gauge64),
                        (ids.location, AttrType::NodeLoc),
                        (ids.time, AttrType::Timestamp),
                    ],
                });
                self.ids = Some(ids);
                if t.server_reports_per_sec > 0 {
                    fx.set_timer(TICK_SERVER, t.attack_start);
                }
            }
            AgentEvent::Timer { token: TICK_SERVER } => {
                if fx.now >= t.attack_end {
                    return;
                }
                let ids = self.ids.as_ref().unwrap();
                let base = if t.flash_crowd { t.request_cost_normal } else { t.request_cost_attack };
                let jitter = (self.rng.next_below(21) as i64 - 10) * base / 100;
                let dst = random_addr_in(t.victim_prefix, &mut self.rng);
                fx.publish_data(EventRecord {
                    event_id: ids.overload,
                    template_id: OVERLOAD_TEMPLATE_ID,
                    issuer: self.node,
                    values: alloc::vec![
                        AttrValue::Flow(random_flow(dst, &mut self.rng)),
                        AttrValue::Gauge(base + jitter),
                        AttrValue::NodeLoc(self.node),
                        AttrValue::Timestamp(fx.now),
                    ],
                });
                let next = fx.now + rate_interval(t.server_reports_per_sec);
                if next < t.attack_end {
                    fx.set_timer(TICK_SERVER, next);
                }
            }
            _ => {}
        }
    }
}

/// The analyzer A: dormant until R reports heavy flows, then zooms into
/// downstream drop events constrained to the heavy prefixes, declares and
/// ends challenges, and runs the post-mortem lookups.
struct Analyzer {
    node: NodeId,
    router: NodeId,
    cfg: ScenarioConfig,
    ids: Option<Ids>,
    heavy_prefixes: Vec<(Ipv4Addr, u8)>,
    deciding: bool,
    window_drops: u64,
    window_overload: u64,
    window_cost_weighted: i128,
    overload_subscribed: bool,
    challenge_active: bool,
    detected_at: Option<SimTime>,
    ended_at: Option<SimTime>,
    evidence_windows: u32,
    quiet_windows: u32,
    flash_noted: bool,
    diag_scheduled: bool,
}

impl Analyzer {
    fn new(node: NodeId, router: NodeId, cfg: ScenarioConfig) -> Self {
        Self {
            node,
            router,
            cfg,
            ids: None,
            heavy_prefixes: Vec::new(),
            deciding: false,
            window_drops: 0,
            window_overload: 0,
            window_cost_weighted: 0,
            overload_subscribed: false,
            challenge_active: false,
            detected_at: None,
            ended_at: None,
            evidence_windows: 0,
            quiet_windows: 0,
            flash_noted: false,
            diag_scheduled: false,
        }
    }

    fn drops_pattern(&self, fx: &Effects<'_>) -> ConceptPattern {
        fx.vocab
            .resolve_str(&self.cfg.detector.subscribe_drops_path)
            .expect("drops path validated with config")
    }

    fn subscribe_drops(&mut self, fx: &mut Effects<'_>) {
        let pattern = self.drops_pattern(fx);
        let ids = self.ids.as_ref().unwrap();
        let d = &self.cfg.detector;
        let filters = self
            .heavy_prefixes
            .iter()
            .map(|(addr, len)| FilterConstraint {
                attr_id: ids.dst_addr,
                kind: ConstraintKind::Prefix(*addr, *len),
            })
            .collect();
        fx.subscribe(SubscriptionSpec {
            event_pattern: pattern,
            filters,
            discards: alloc::vec![],
            aggregator_ops: BTreeMap::new(),
            granularity: GranularitySpec {
                max_events: Some(d.monitor_max_events),
                max_period: Some(d.monitor_max_period),
            },
        });
    }

    fn mean_window_cost(&self) -> i64 {
        if self.window_overload == 0 {
            0
        } else {
            (self.window_cost_weighted / self.window_overload as i128) as i64
        }
    }

    fn publish_challenge(&mut self, fx: &mut Effects<'_>, detected: bool, rate: u64) {
        let ids = self.ids.as_ref().unwrap();
        let (event_id, template_id) = if detected {
            (ids.detected, DETECTED_TEMPLATE_ID)
        } else {
            (ids.ended, ENDED_TEMPLATE_ID)
        };
        let prefix = self.heavy_prefixes.first().copied().unwrap_or(self.cfg.traffic.victim_prefix);
        fx.publish_data(EventRecord {
            event_id,
            template_id,
            issuer: self.node,
            values: alloc::vec![
                AttrValue::Ipv4Prefix(prefix.0, prefix.1),
                AttrValue::Timestamp(fx.now),
                AttrValue::Counter(rate),
            ],
        });
    }

    fn run_diagnostics(&mut self, fx: &mut Effects<'_>) {
        let detected = self.detected_at.unwrap_or(SimTime::ZERO);
        let ended = self.ended_at.unwrap_or(fx.now).max(detected);
        let victim = self.cfg.traffic.victim_prefix;
        let drops_pattern = self.drops_pattern(fx);
        let overload_pattern = fx.vocab.resolve_str("event.server.overload.*").unwrap();
        let legacy_pattern = fx.vocab.resolve_str("legacy.routing.*").unwrap();
        let ids = self.ids.as_ref().unwrap();
        // Zoom: recent drop statistics toward the victim prefix.
        fx.lookup(
            LOOKUP_DIAG_DROPS,
            LookupQuery {
                event_pattern: drops_pattern,
                constraints: alloc::vec![FilterConstraint {
                    attr_id: ids.dst_addr,
                    kind: ConstraintKind::Prefix(victim.0, victim.1),
                }],
                time_from: SimTime::from_micros(detected.as_micros().saturating_sub(5_000_000)),
                time_to: detected,
            },
        );
        // Correlate overload reports over the challenge interval.
        fx.lookup(
            LOOKUP_DIAG_OVERLOAD,
            LookupQuery {
                event_pattern: overload_pattern,
                constraints: alloc::vec![],
                time_from: detected,
                time_to: ended,
            },
        );
        if self.cfg.disco.legacy_enabled {
            fx.lookup(
                LOOKUP_DIAG_LEGACY,
                LookupQuery {
                    event_pattern: legacy_pattern,
                    constraints: alloc::vec![FilterConstraint {
                        attr_id: ids.prefix,
                        kind: ConstraintKind::Prefix(victim.0, victim.1),
                    }],
                    time_from: SimTime::ZERO,
                    time_to: fx.now,
                },
            );
        }
    }
}

impl Agent for Analyzer {
    fn on_event(&mut self, fx: &mut Effects<'_>, event: AgentEvent<'_>) {
        match event {
            AgentEvent::Started => {
                let ids = Ids::resolve(fx.vocab);
                for (event_id, template_id) in
                    [(ids.detected, DETECTED_TEMPLATE_ID), (ids.ended, ENDED_TEMPLATE_ID)]
                {
                    fx.publish_template(Template {
                        issuer: self.node,
                        template_id,
                        event_id,
                        fields: alloc::vec![
                            (ids.prefix, AttrType::Ipv4Prefix),
                            (ids.time, AttrType::Timestamp),
                            (ids.rate, AttrType::Counter64),
                        ],
                    });
                }
                // Dormant, but pre-subscribed to heavy-flow reports from R.
                fx.subscribe(SubscriptionSpec {
                    event_pattern: ConceptPattern::exact(ids.heavy_flow),
                    filters: alloc::vec![FilterConstraint {
                        attr_id: ids.location,
                        kind: ConstraintKind::Exact(AttrValue::NodeLoc(self.router)),
                    }],
                    discards: alloc::vec![],
                    aggregator_ops: BTreeMap::new(),
                    granularity: GranularitySpec::per_event(),
                });
                self.ids = Some(ids);
            }
            AgentEvent::DataDelivered { record, meta, zfilter, template, .. } => {
                let (heavy_flow, overload, drop_family, cost_attr, prefix_attr, evidence_tag, dst_addr) = {
                    let ids = self.ids.as_ref().unwrap();
                    (
                        ids.heavy_flow,
                        ids.overload,
                        ids.drop_event.family(),
                        ids.cost,
                        ids.prefix,
                        ids.evidence_tag,
                        ids.dst_addr,
                    )
                };
                if record.event_id == heavy_flow {
                    if let Some(AttrValue::Ipv4Prefix(addr, len)) =
                        record.value_of(template, prefix_attr)
                    {
                        let p = (*addr, *len);
                        if !self.heavy_prefixes.contains(&p) {
                            self.heavy_prefixes.push(p);
                            // Zoom in (or refine): subscribe to downstream
                            // drop reports toward the heavy destinations.
                            self.subscribe_drops(fx);
                            if self.cfg.detector.server_variant && !self.overload_subscribed {
                                self.overload_subscribed = true;
                                let mut ops = BTreeMap::new();
                                ops.insert(cost_attr, AggregatorOp::Mean);
                                fx.subscribe(SubscriptionSpec {
                                    event_pattern: fx
                                        .vocab
                                        .resolve_str("event.server.overload.*")
                                        .unwrap(),
                                    filters: alloc::vec![],
                                    discards: alloc::vec![],
                                    aggregator_ops: ops,
                                    granularity: GranularitySpec {
                                        max_events: Some(self.cfg.detector.monitor_max_events),
                                        max_period: Some(self.cfg.detector.monitor_max_period),
                                    },
                                });
                            }
                            if !self.deciding {
                                self.deciding = true;
                                fx.set_timer(TICK_DECIDE, fx.now + self.cfg.detector.window);
                            }
                        }
                    }
                } else if record.event_id == overload {
                    self.window_overload += meta.base_count as u64;
                    if let Some(AttrValue::Gauge(mean_cost)) = record.value_of(template, cost_attr) {
                        self.window_cost_weighted += *mean_cost as i128 * meta.base_count as i128;
                    }
                    if self.challenge_active {
                        // Elect the contributing overload reports for the
                        // post-mortem correlation.
                        fx.reply(ReplyMessage {
                            event_id: record.event_id,
                            constraints: alloc::vec![],
                            time_from: SimTime::from_micros(
                                meta.period_start.as_micros().saturating_sub(2_000_000),
                            ),
                            time_to: meta.period_end,
                            tags: alloc::vec![evidence_tag],
                            zfilter,
                        });
                    }
                } else if record.event_id.family() == drop_family {
                    let _ = dst_addr;
                    self.window_drops += meta.base_count as u64;
                }
            }
            AgentEvent::Timer { token: TICK_DECIDE } => {
                let d = self.cfg.detector.clone();
                let drops = self.window_drops;
                let overload = self.window_overload;
                let mean_cost = self.mean_window_cost();
                self.window_drops = 0;
                self.window_overload = 0;
                self.window_cost_weighted = 0;

                let drop_evidence = drops >= d.drop_rate_threshold;
                let server_evidence = d.server_variant
                    && overload >= d.overload_rate_threshold
                    && mean_cost >= d.cost_threshold;
                let flash_signature = d.server_variant
                    && overload >= d.overload_rate_threshold
                    && mean_cost < d.cost_threshold
                    && !drop_evidence;

                if !self.challenge_active {
                    if drop_evidence || server_evidence {
                        self.evidence_windows += 1;
                        if self.evidence_windows >= d.detect_windows {
                            self.challenge_active = true;
                            self.quiet_windows = 0;
                            self.detected_at = Some(fx.now);
                            self.publish_challenge(fx, true, drops);
                            fx.note("challenge.detected", fx.now.as_micros() as i64);
                        }
                    } else {
                        self.evidence_windows = 0;
                        if flash_signature && !self.flash_noted {
                            self.flash_noted = true;
                            fx.note("flash.crowd", 1);
                        }
                    }
                } else if drops < d.end_threshold && !server_evidence {
                    self.quiet_windows += 1;
                    if self.quiet_windows >= d.end_windows {
                        self.challenge_active = false;
                        self.evidence_windows = 0;
                        self.ended_at = Some(fx.now);
                        self.publish_challenge(fx, false, drops);
                        fx.note("challenge.ended", fx.now.as_micros() as i64);
                        if !self.diag_scheduled {
                            self.diag_scheduled = true;
                            fx.set_timer(TICK_DIAG, fx.now + SimDuration::from_secs(2));
                        }
                    }
                } else {
                    self.quiet_windows = 0;
                }

                let next = fx.now + d.window;
                if next <= self.cfg.traffic.horizon {
                    fx.set_timer(TICK_DECIDE, next);
                }
            }
            AgentEvent::Timer { token: TICK_DIAG } => self.run_diagnostics(fx),
            AgentEvent::LookupDone { token, outcome } => {
                let key = match token {
                    LOOKUP_DIAG_DROPS => "diag.drop_hits",
                    LOOKUP_DIAG_OVERLOAD => "diag.overload_hits",
                    LOOKUP_DIAG_LEGACY => "diag.legacy_hits",
                    _ => return,
                };
                fx.note(key, outcome.entries.len() as i64);
                if token == LOOKUP_DIAG_LEGACY {
                    // Pull routing context into the working store for the
                    // diagnosis record.
                    if let Some(first) = outcome.entries.first() {
                        let tag = self.ids.as_ref().unwrap().evidence_tag;
                        fx.annotate_result(first.clone(), alloc::vec![tag]);
                    }
                }
            }
            _ => {}
        }
    }
}

/// Remediator stub M: reacts to challenge reports by announcing a rate
/// limit (logged, not enforced unless the loop is closed) and annotating
/// the contributing drop events so they are promoted for diagnosis.
struct Remediator {
    node: NodeId,
    cfg: ScenarioConfig,
    ids: Option<Ids>,
    active: bool,
    drops_subscribed: bool,
}

impl Agent for Remediator {
    fn on_event(&mut self, fx: &mut Effects<'_>, event: AgentEvent<'_>) {
        match event {
            AgentEvent::Started => {
                let ids = Ids::resolve(fx.vocab);
                fx.publish_template(Template {
                    issuer: self.node,
                    template_id: RATE_LIMIT_TEMPLATE_ID,
                    event_id: ids.rate_limit,
                    fields: alloc::vec![
                        (ids.prefix, AttrType::Ipv4Prefix),
                        (ids.time, AttrType::Timestamp),
                    ],
                });
                fx.subscribe(SubscriptionSpec {
                    event_pattern: fx.vocab.resolve_str("report.challenge.*").unwrap(),
                    filters: alloc::vec![],
                    discards: alloc::vec![],
                    aggregator_ops: BTreeMap::new(),
                    granularity: GranularitySpec::per_event(),
                });
                self.ids = Some(ids);
            }
            AgentEvent::DataDelivered { record, meta, zfilter, template, .. } => {
                let (detected, ended, rate_limit_id, prefix_attr, dst_addr, evidence_tag, drop_family) = {
                    let ids = self.ids.as_ref().unwrap();
                    (
                        ids.detected,
                        ids.ended,
                        ids.rate_limit,
                        ids.prefix,
                        ids.dst_addr,
                        ids.evidence_tag,
                        ids.drop_event.family(),
                    )
                };
                if record.event_id == detected {
                    self.active = true;
                    let prefix = match record.value_of(template, prefix_attr) {
                        Some(AttrValue::Ipv4Prefix(a, l)) => (*a, *l),
                        _ => self.cfg.traffic.victim_prefix,
                    };
                    fx.publish_data(EventRecord {
                        event_id: rate_limit_id,
                        template_id: RATE_LIMIT_TEMPLATE_ID,
                        issuer: self.node,
                        values: alloc::vec![
                            AttrValue::Ipv4Prefix(prefix.0, prefix.1),
                            AttrValue::Timestamp(fx.now),
                        ],
                    });
                    fx.note("remediation.action", 1);
                    if !self.drops_subscribed {
                        self.drops_subscribed = true;
                        let d = &self.cfg.detector;
                        fx.subscribe(SubscriptionSpec {
                            event_pattern: fx
                                .vocab
                                .resolve_str(&d.subscribe_drops_path)
                                .expect("validated"),
                            filters: alloc::vec![FilterConstraint {
                                attr_id: dst_addr,
                                kind: ConstraintKind::Prefix(prefix.0, prefix.1),
                            }],
                            discards: alloc::vec![],
                            aggregator_ops: BTreeMap::new(),
                            granularity: GranularitySpec {
                                max_events: Some(d.monitor_max_events),
                                max_period: Some(d.monitor_max_period),
                            },
                        });
                    }
                } else if record.event_id == ended {
                    self.active = false;
                } else if self.active && record.event_id.family() == drop_family {
                    // Tag the pre-aggregation copies of these drops along
                    // the reverse path: that elects them into the store.
                    let victim = self.cfg.traffic.victim_prefix;
                    fx.reply(ReplyMessage {
                        event_id: record.event_id,
                        constraints: alloc::vec![FilterConstraint {
                            attr_id: dst_addr,
                            kind: ConstraintKind::Prefix(victim.0, victim.1),
                        }],
                        time_from: SimTime::from_micros(
                            meta.period_start.as_micros().saturating_sub(2_000_000),
                        ),
                        time_to: meta.period_end,
                        tags: alloc::vec![evidence_tag],
                        zfilter,
                    });
                }
            }
            _ => {}
        }
    }
}

/// Node labels of the fixed roles.
pub const ROLE_LABELS: [&str; 7] = ["R", "T", "V", "U", "S", "A", "M"];

/// Builds and runs the scenario; deterministic in `(config, seed)`.
pub fn run_scenario(
    config: &ScenarioConfig,
    seed: u64,
    trace: bool,
) -> Result<ScenarioOutput, ConfigError> {
    run_scenario_until(config, seed, trace, None)
}

/// Like [`run_scenario`], optionally stopping the kernel early at `until`
/// (the configured phases stay as declared; the clock just does not get
/// there).
pub fn run_scenario_until(
    config: &ScenarioConfig,
    seed: u64,
    trace: bool,
    until: Option<SimTime>,
) -> Result<ScenarioOutput, ConfigError> {
    config.validate()?;
    let vocab = default_vocabulary();

    let mut labels: Vec<String> = ROLE_LABELS.iter().map(|s| s.to_string()).collect();
    for i in 0..config.topology.relays {
        labels.push(alloc::format!("relay-{i}"));
    }
    let members: Vec<NodeId> = labels.iter().map(|l| node_id_for(l)).collect();

    let retention = RetentionPolicy {
        base_ttl: config.disco.base_ttl,
        per_tag_bonus: {
            let mut m = BTreeMap::new();
            m.insert(vocab.id_of(EVIDENCE_TAG_PATH).unwrap(), config.disco.evidence_tag_bonus);
            m
        },
        default_tag_bonus: SimDuration::ZERO,
        per_lookup_bonus: config.disco.per_lookup_bonus,
        per_subscriber_bonus: config.disco.per_subscriber_bonus,
    };
    let sim_config = SimConfig {
        seed,
        default_latency: config.topology.default_latency,
        jitter_max: config.topology.jitter_max,
        lts_capacity: config.disco.lts_capacity,
        lts_ttl: config.disco.edge_latency * config.disco.lts_ttl_multiple as u64,
        bucket_width: config.disco.bucket_width,
        zfilter_bits_per_link: config.disco.zfilter_bits_per_link,
        retention,
        trace,
    };
    let mut sim = Sim::new(members, vocab, sim_config);
    for label in &labels {
        sim.set_label(node_id_for(label), label);
    }
    for (a, b, latency) in &config.topology.link_latencies {
        let (na, nb) = (node_id_for(a), node_id_for(b));
        sim.net.set_latency(na, nb, *latency);
        sim.net.set_latency(nb, na, *latency);
    }

    if config.disco.legacy_enabled {
        install_routing_table_provider(&mut sim, config);
    }

    let root_rng = SplitMix64::new(seed);
    let t = &config.traffic;
    sim.install_agent(
        node_id_for("V"),
        Box::new(DropSensor {
            node: node_id_for("V"),
            cfg: config.clone(),
            rng: root_rng.fork("sensor:V"),
            ids: None,
            share_pct: t.victim_share_pct,
            attack_prefix: t.victim_prefix,
            attack_scale: 100,
        }),
    );
    sim.install_agent(
        node_id_for("U"),
        Box::new(DropSensor {
            node: node_id_for("U"),
            cfg: config.clone(),
            rng: root_rng.fork("sensor:U"),
            ids: None,
            share_pct: 100 - t.victim_share_pct,
            attack_prefix: t.dilution_prefix,
            attack_scale: 100,
        }),
    );
    sim.install_agent(
        node_id_for("R"),
        Box::new(EdgeRouter {
            node: node_id_for("R"),
            cfg: config.clone(),
            rng: root_rng.fork("router:R"),
            ids: None,
        }),
    );
    if config.detector.server_variant {
        sim.install_agent(
            node_id_for("S"),
            Box::new(ServerSensor {
                node: node_id_for("S"),
                cfg: config.clone(),
                rng: root_rng.fork("server:S"),
                ids: None,
            }),
        );
    }
    sim.install_agent(
        node_id_for("A"),
        Box::new(Analyzer::new(node_id_for("A"), node_id_for("R"), config.clone())),
    );
    sim.install_agent(
        node_id_for("M"),
        Box::new(Remediator {
            node: node_id_for("M"),
            cfg: config.clone(),
            ids: None,
            active: false,
            drops_subscribed: false,
        }),
    );

    sim.start_agents();
    schedule_sweeps(&mut sim, config.disco.sweep_interval, config.traffic.horizon);
    let stop = until.map_or(config.traffic.horizon, |u| u.min(config.traffic.horizon));
    sim.run_until(stop);

    let metrics = collect_metrics(&sim, config);
    Ok(ScenarioOutput { metrics, trace: sim.trace.lines().to_vec() })
}

fn schedule_sweeps(sim: &mut Sim, every: SimDuration, horizon: SimTime) {
    let first = sim.now() + every;
    if first > horizon {
        return;
    }
    sim.schedule(first, move |sim| {
        sim.sweep_all();
        schedule_sweeps(sim, every, horizon);
    });
}

/// Static routing-table provider: prefix → nexthop records reached through
/// the lookup proxy.
fn install_routing_table_provider(sim: &mut Sim, config: &ScenarioConfig) {
    let route_event = sim.vocab.id_of(LEGACY_ROUTE_PATH).unwrap();
    let prefix_attr = sim.vocab.id_of(ATTR_PREFIX).unwrap();
    let nexthop_attr = sim.vocab.id_of(ATTR_NEXTHOP).unwrap();
    let coverage = sim.vocab.resolve_str("legacy.routing.*").unwrap();
    let schema = sim.schema;
    let table: Vec<((Ipv4Addr, u8), NodeId)> = alloc::vec![
        (config.traffic.victim_prefix, node_id_for("T")),
        (config.traffic.dilution_prefix, node_id_for("T")),
        ((Ipv4Addr::new(10, 0, 0, 0), 8), node_id_for("R")),
    ];
    let template = Template {
        issuer: node_id_for("R"),
        template_id: ROUTE_TEMPLATE_ID,
        event_id: route_event,
        fields: alloc::vec![(prefix_attr, AttrType::Ipv4Prefix), (nexthop_attr, AttrType::NodeLoc)],
    };
    sim.add_legacy(LegacyIndirection {
        coverage,
        provider: Box::new(move |query: &LookupQuery| {
            let mut out = Vec::new();
            for ((addr, len), nexthop) in &table {
                let record = EventRecord {
                    event_id: route_event,
                    template_id: template.template_id,
                    issuer: template.issuer,
                    values: alloc::vec![
                        AttrValue::Ipv4Prefix(*addr, *len),
                        AttrValue::NodeLoc(*nexthop),
                    ],
                };
                let matches = query.event_pattern.matches(route_event)
                    && crate::aggregation::eval_filter(
                        &record,
                        &template,
                        &query.constraints,
                        &schema,
                    )
                    .unwrap_or(false);
                if matches {
                    out.push(LegacyRecord {
                        record,
                        template: template.clone(),
                        meta: AggMeta::base(SimTime::ZERO),
                    });
                }
            }
            Ok(out)
        }),
    });
}

fn collect_metrics(sim: &Sim, config: &ScenarioConfig) -> Metrics {
    let mut m = Metrics::default();
    for ((src, dst), bytes) in sim.net.bytes_per_link() {
        m.bytes_per_link.insert((sim.label(*src), sim.label(*dst)), *bytes);
    }
    m.bytes_total = sim.net.total_bytes();
    m.bytes_into_analyzer = sim.net.bytes_into(node_id_for("A"));
    m.delivery_bytes_into_analyzer =
        sim.log.delivery_bytes_into.get(&node_id_for("A")).copied().unwrap_or(0);
    m.msgs_per_topic = sim.log.topic_msgs.clone();
    for (topic, (pub_hops, sub_hops)) in &sim.log.stretch {
        m.stretch_per_topic.insert(*topic, pub_hops + sub_hops);
    }
    m.delivered_msgs = sim.log.deliveries.len() as u64;
    m.delivered_base = sim.log.deliveries.iter().map(|d| d.meta.base_count as u64).sum();
    m.publishes = sim.log.publishes.len() as u64;
    m.agg_ratio = if m.delivered_msgs == 0 {
        0.0
    } else {
        m.delivered_base as f64 / m.delivered_msgs as f64
    };

    let detected_id = sim.vocab.id_of(CHALLENGE_DETECTED_PATH).unwrap();
    let ended_id = sim.vocab.id_of(CHALLENGE_ENDED_PATH).unwrap();
    let rate_limit_id = sim.vocab.id_of(RATE_LIMIT_PATH).unwrap();
    let real_attack = !config.traffic.flash_crowd;
    let grace = config.detector.window * (2 + config.detector.end_windows as u64);
    for p in &sim.log.publishes {
        if p.event_id == detected_id {
            m.detect_count += 1;
            if m.detect_latency.is_none() {
                m.detect_latency = Some(p.time.saturating_sub(config.traffic.attack_start));
            }
            let within = p.time >= config.traffic.attack_start
                && p.time <= config.traffic.attack_end + grace;
            if !(real_attack && within) {
                m.false_alarms += 1;
            }
        } else if p.event_id == ended_id {
            m.detect_end_count += 1;
        } else if p.event_id == rate_limit_id {
            m.remediation_actions += 1;
        }
    }
    for (_, key, value) in &sim.log.notes {
        match key.as_str() {
            "flash.crowd" => m.flash_crowd_observed += *value as u64,
            "diag.drop_hits" => m.diag_drop_hits = Some(*value as u64),
            "diag.overload_hits" => m.diag_overload_hits = Some(*value as u64),
            "diag.legacy_hits" => m.diag_legacy_hits = Some(*value as u64),
            _ => {}
        }
    }
    m.dws_entries = sim.dws_total_entries() as u64;
    m.dws_inserts = sim.log.dws_inserts;
    m.dws_evicted = sim.log.dws_evicted;
    m
}

/// The flash-crowd variant of the default configuration: high request
/// volume toward the victim prefix at normal per-request cost, no TTL-drop
/// wave, no congestion collapse.
pub fn flash_crowd_config() -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.traffic.flash_crowd = true;
    c.traffic.queue_full_per_sec = 0;
    c.traffic.server_reports_per_sec = 40;
    c
}
