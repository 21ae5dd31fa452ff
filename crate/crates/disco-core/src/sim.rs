//! The simulated deployment: node state, message dispatch and the client
//! API (publish, subscribe, deliver callbacks, reply, lookup).
//!
//! Everything runs as kernel callbacks on a single `Sim` world. Client code
//! (scenario agents) reacts to deliver callbacks through the [`Agent`] trait
//! and acts by pushing [`Command`]s into an [`Effects`] buffer; the engine
//! drains the buffer after the callback returns, which keeps agents free of
//! re-entrant borrows while still letting them publish, subscribe, reply,
//! look data up and set timers.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::aggregation::{derive_child_template, eval_filter, PendingAggregate, SpecError};
use crate::events::{
    conforms, encode_data, encode_template, AggMeta, DataMessage, EventRecord, FlowKeySchema,
    Template, TemplateKey, MSG_DATA, MSG_DWS_INSERT, MSG_LOOKUP, MSG_LOOKUP_RESULT,
    MSG_NO_SUBSCRIBER, MSG_SUBSCRIBERS_READY, MSG_TEMPLATE,
};
use crate::overlay::{NodeId, Overlay};
use crate::pubsub::{
    align_upstream, topic_for_family, topics_for_pattern, ChildState, ForwarderState,
    SubscriptionSpec, TopicId,
};
use crate::reply::{LtsBuffer, ReplyMessage, ZFilter, ZFilterConfig, DEFAULT_LTS_CAPACITY};
use crate::rng::{fnv1a64, SplitMix64};
use crate::simnet::{
    run_to_quiescence, run_until, HasKernel, Kernel, LinkNet, SimDuration, SimTime, TraceLog,
};
use crate::store::{
    buckets_in_range, partition_key_raw, DwsShard, LegacyIndirection, LookupQuery,
    LookupResultEntry, ResultSource, RetentionPolicy,
};
use crate::vocabulary::{ConceptId, VocabularyTree};
use crate::wire;

/// In-sim message; `encoded_len` follows the wire formats exactly so link
/// byte counters reflect what a real deployment would move.
#[derive(Debug)]
pub enum Message {
    Subscribe { topic: TopicId, spec: SubscriptionSpec },
    Template { topic: TopicId, template: Template, to_root: bool },
    Data { topic: TopicId, dm: DataMessage, down: bool },
    NoSubscriber { topic: TopicId },
    SubscribersReady { topic: TopicId },
    Reply(ReplyMessage),
    Lookup { origin: NodeId, req_id: u64, query: LookupQuery },
    LookupResult { req_id: u64, entries: Vec<LookupResultEntry> },
    DwsInsert {
        record: EventRecord,
        template: Template,
        meta: AggMeta,
        tags: BTreeSet<ConceptId>,
        subscriber_hint: u32,
    },
}

impl Message {
    pub fn encoded_len(&self) -> usize {
        match self {
            Message::Subscribe { topic, spec } => wire::encode_subscribe(*topic, spec).len(),
            Message::Template { template, .. } => encode_template(template).len(),
            Message::Data { dm, .. } => encode_data(dm).len(),
            Message::NoSubscriber { .. } | Message::SubscribersReady { .. } => 1 + 8,
            Message::Lookup { query, .. } => {
                // kind(1) origin(8) reqId(8) pattern(4+1) from(8) to(8) + constraints.
                let mut buf = Vec::new();
                wire::encode_constraints(&query.constraints, &mut buf);
                1 + 8 + 8 + 5 + 16 + buf.len()
            }
            Message::LookupResult { entries, .. } => {
                // kind(1) reqId(8) count(2) + per entry: source(1) tagCount(1)
                // tags(4×), template message, data message.
                let mut n = 1 + 8 + 2;
                for e in entries {
                    n += 2 + 4 * e.tags.len();
                    n += encode_template(&e.template).len();
                    n += e.template.data_len();
                }
                n
            }
            Message::DwsInsert { template, tags, .. } => {
                // kind(1) tagCount(1) tags(4×) hint(4), template message,
                // data message.
                1 + 1 + 4 * tags.len() + 4 + encode_template(template).len() + template.data_len()
            }
            Message::Reply(r) => wire::encode_reply(r).len(),
        }
    }

    fn kind_byte(&self) -> u8 {
        match self {
            Message::Subscribe { .. } => crate::events::MSG_SUBSCRIBE,
            Message::Template { .. } => MSG_TEMPLATE,
            Message::Data { .. } => MSG_DATA,
            Message::NoSubscriber { .. } => MSG_NO_SUBSCRIBER,
            Message::SubscribersReady { .. } => MSG_SUBSCRIBERS_READY,
            Message::Reply(_) => crate::events::MSG_REPLY,
            Message::Lookup { .. } => MSG_LOOKUP,
            Message::LookupResult { .. } => MSG_LOOKUP_RESULT,
            Message::DwsInsert { .. } => MSG_DWS_INSERT,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Message::Subscribe { .. } => "SUBSCRIBE",
            Message::Template { .. } => "TEMPLATE",
            Message::Data { .. } => "DATA",
            Message::NoSubscriber { .. } => "NO-SUBSCRIBER",
            Message::SubscribersReady { .. } => "SUBSCRIBERS-READY",
            Message::Reply(_) => "REPLY",
            Message::Lookup { .. } => "LOOKUP",
            Message::LookupResult { .. } => "LOOKUP-RESULT",
            Message::DwsInsert { .. } => "DWS-INSERT",
        }
    }

    fn topic(&self) -> Option<TopicId> {
        match self {
            Message::Subscribe { topic, .. }
            | Message::Template { topic, .. }
            | Message::Data { topic, .. }
            | Message::NoSubscriber { topic }
            | Message::SubscribersReady { topic } => Some(*topic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishError {
    /// Data referenced a template this issuer has not published.
    UnknownTemplate(TemplateKey),
    /// Values do not line up with the referenced template.
    TemplateMismatch,
    /// Duplicate attribute ids, or the record names a foreign issuer.
    InvalidTemplate,
}

impl fmt::Display for PublishError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PublishError::UnknownTemplate(k) => {
                write!(f, "template {}/{} not published", k.issuer, k.template_id)
            }
            PublishError::TemplateMismatch => write!(f, "event does not conform to its template"),
            PublishError::InvalidTemplate => write!(f, "invalid template"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubscribeError {
    InvalidSpec(SpecError),
    /// Rejected by the entitlement hook.
    Denied,
}

/// Result set of one lookup, merged across working-store shards and legacy
/// providers.
#[derive(Debug, Default)]
pub struct LookupOutcome {
    pub entries: Vec<LookupResultEntry>,
    pub provider_errors: u32,
}

/// Deliver callbacks and notifications surfaced to client agents.
pub enum AgentEvent<'a> {
    Started,
    TemplateDelivered {
        topic: TopicId,
        template: &'a Template,
    },
    DataDelivered {
        topic: TopicId,
        record: &'a EventRecord,
        meta: AggMeta,
        zfilter: ZFilter,
        template: &'a Template,
    },
    NoSubscriberNotice { topic: TopicId },
    SubscribersReadyNotice { topic: TopicId },
    LookupDone { token: u64, outcome: &'a LookupOutcome },
    Timer { token: u64 },
}

pub enum Command {
    PublishTemplate(Template),
    PublishData(EventRecord),
    Subscribe(SubscriptionSpec),
    Reply(ReplyMessage),
    Lookup { token: u64, query: LookupQuery },
    AnnotateResult { entry: LookupResultEntry, tags: Vec<ConceptId> },
    SetTimer { token: u64, at: SimTime },
    Note { key: String, value: i64 },
}

/// Client command buffer; drained by the engine after each callback.
pub struct Effects<'a> {
    pub now: SimTime,
    pub node: NodeId,
    pub vocab: &'a VocabularyTree,
    commands: Vec<Command>,
}

impl Effects<'_> {
    pub fn publish_template(&mut self, template: Template) {
        self.commands.push(Command::PublishTemplate(template));
    }

    pub fn publish_data(&mut self, record: EventRecord) {
        self.commands.push(Command::PublishData(record));
    }

    pub fn subscribe(&mut self, spec: SubscriptionSpec) {
        self.commands.push(Command::Subscribe(spec));
    }

    pub fn reply(&mut self, reply: ReplyMessage) {
        self.commands.push(Command::Reply(reply));
    }

    pub fn lookup(&mut self, token: u64, query: LookupQuery) {
        self.commands.push(Command::Lookup { token, query });
    }

    pub fn annotate_result(&mut self, entry: LookupResultEntry, tags: Vec<ConceptId>) {
        self.commands.push(Command::AnnotateResult { entry, tags });
    }

    pub fn set_timer(&mut self, token: u64, at: SimTime) {
        self.commands.push(Command::SetTimer { token, at });
    }

    pub fn note(&mut self, key: &str, value: i64) {
        self.commands.push(Command::Note { key: key.to_string(), value });
    }
}

/// A client of the middleware API, owned by one node.
pub trait Agent {
    fn on_event(&mut self, fx: &mut Effects<'_>, event: AgentEvent<'_>);
}

#[derive(Debug, Clone)]
pub struct PublishRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub topic: TopicId,
    pub event_id: ConceptId,
}

#[derive(Debug, Clone)]
pub struct DeliveryRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub topic: TopicId,
    pub record: EventRecord,
    pub meta: AggMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotifyKind {
    NoSubscriber,
    SubscribersReady,
}

#[derive(Debug, Clone)]
pub struct NotificationRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub kind: NotifyKind,
    pub topic: TopicId,
}

/// Everything a run leaves behind for metrics and test oracles.
#[derive(Debug, Default)]
pub struct RunLog {
    pub publishes: Vec<PublishRecord>,
    pub deliveries: Vec<DeliveryRecord>,
    pub notifications: Vec<NotificationRecord>,
    pub topic_msgs: BTreeMap<TopicId, u64>,
    /// Per topic: worst publisher→rendezvous hops, worst subscriber hops.
    pub stretch: BTreeMap<TopicId, (u32, u32)>,
    /// Event-delivery traffic (DATA and TEMPLATE) received per node;
    /// excludes query and control traffic.
    pub delivery_bytes_into: BTreeMap<NodeId, u64>,
    pub notes: Vec<(SimTime, String, i64)>,
    pub command_errors: u64,
    pub dropped_type_mismatch: u64,
    pub dropped_missing_attr: u64,
    pub dws_inserts: u64,
    pub dws_evicted: u64,
}

struct PendingLookup {
    token: u64,
    outstanding: usize,
    acc: Vec<LookupResultEntry>,
    provider_errors: u32,
}

struct NodeState {
    forwarders: BTreeMap<TopicId, ForwarderState>,
    templates: BTreeMap<TemplateKey, Template>,
    own_templates: BTreeSet<TemplateKey>,
    next_template_id: u16,
    lts: LtsBuffer,
    dws: DwsShard,
    reply_seen: BTreeSet<u64>,
    waiting_data: BTreeMap<TemplateKey, Vec<(TopicId, DataMessage)>>,
    lookups: BTreeMap<u64, PendingLookup>,
}

impl NodeState {
    fn new(lts_capacity: usize, lts_ttl: SimDuration) -> Self {
        Self {
            forwarders: BTreeMap::new(),
            templates: BTreeMap::new(),
            own_templates: BTreeSet::new(),
            // Forwarder-derived template ids live in the high range so they
            // never collide with publisher-chosen ids.
            next_template_id: 0x8000,
            lts: LtsBuffer::new(lts_capacity, lts_ttl),
            dws: DwsShard::default(),
            reply_seen: BTreeSet::new(),
            waiting_data: BTreeMap::new(),
            lookups: BTreeMap::new(),
        }
    }
}

/// Simulation-wide parameters.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub default_latency: SimDuration,
    pub jitter_max: SimDuration,
    pub lts_capacity: usize,
    /// Edge-to-edge latency estimate × retention multiple.
    pub lts_ttl: SimDuration,
    pub bucket_width: SimDuration,
    pub zfilter_bits_per_link: u8,
    pub retention: RetentionPolicy,
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            default_latency: SimDuration::from_millis(1),
            jitter_max: SimDuration::ZERO,
            lts_capacity: DEFAULT_LTS_CAPACITY,
            lts_ttl: SimDuration::from_millis(150) * 8,
            bucket_width: crate::store::DEFAULT_BUCKET_WIDTH,
            zfilter_bits_per_link: 4,
            retention: RetentionPolicy::default(),
            trace: false,
        }
    }
}

type EntitlementHook = Box<dyn Fn(NodeId, &SubscriptionSpec) -> bool>;

/// The whole simulated deployment.
pub struct Sim {
    kernel: Kernel<Sim>,
    pub net: LinkNet,
    pub overlay: Overlay,
    pub vocab: VocabularyTree,
    pub schema: FlowKeySchema,
    pub zcfg: ZFilterConfig,
    pub retention: RetentionPolicy,
    pub bucket_width: SimDuration,
    nodes: BTreeMap<NodeId, NodeState>,
    agents: BTreeMap<NodeId, Box<dyn Agent>>,
    labels: BTreeMap<NodeId, String>,
    pub trace: TraceLog,
    pub log: RunLog,
    legacy: Vec<LegacyIndirection>,
    entitlement: Option<EntitlementHook>,
    next_req_id: u64,
}

impl HasKernel for Sim {
    fn kernel_mut(&mut self) -> &mut Kernel<Sim> {
        &mut self.kernel
    }
}

enum PipelineEffect {
    SendTemplate { child: NodeId, template: Template },
    LocalTemplate { template: Template },
    StartTimer { child: NodeId, event_id: ConceptId, period: SimDuration },
    Flush { child: NodeId, event_id: ConceptId },
}

impl Sim {
    pub fn new(members: Vec<NodeId>, mut vocab: VocabularyTree, config: SimConfig) -> Self {
        let root_rng = SplitMix64::new(config.seed);
        let mut net = LinkNet::new(config.default_latency, config.jitter_max, &root_rng);
        let mut nodes = BTreeMap::new();
        for &m in &members {
            net.add_node(m);
            nodes.insert(m, NodeState::new(config.lts_capacity, config.lts_ttl));
        }
        let schema = FlowKeySchema::register(&mut vocab).expect("flow schema registers");
        let mut salt_rng = root_rng.fork("zfilter");
        Self {
            kernel: Kernel::new(),
            net,
            overlay: Overlay::new(members),
            vocab,
            schema,
            zcfg: ZFilterConfig {
                bits_per_link: config.zfilter_bits_per_link,
                salt: salt_rng.next_u64(),
            },
            retention: config.retention,
            bucket_width: config.bucket_width,
            nodes,
            agents: BTreeMap::new(),
            labels: BTreeMap::new(),
            trace: TraceLog::new(config.trace),
            log: RunLog::default(),
            legacy: Vec::new(),
            entitlement: None,
            next_req_id: 1,
        }
    }

    pub fn now(&self) -> SimTime {
        self.kernel.now()
    }

    pub fn set_label(&mut self, node: NodeId, label: &str) {
        self.labels.insert(node, label.to_string());
    }

    pub fn label(&self, node: NodeId) -> String {
        self.labels.get(&node).cloned().unwrap_or_else(|| alloc::format!("{node}"))
    }

    pub fn install_agent(&mut self, node: NodeId, agent: Box<dyn Agent>) {
        assert!(self.nodes.contains_key(&node), "agent on unknown node");
        self.agents.insert(node, agent);
    }

    pub fn set_entitlement(&mut self, hook: EntitlementHook) {
        self.entitlement = Some(hook);
    }

    pub fn add_legacy(&mut self, indirection: LegacyIndirection) {
        self.legacy.push(indirection);
    }

    /// Fires `Started` on every installed agent, in node-id order.
    pub fn start_agents(&mut self) {
        let nodes: Vec<NodeId> = self.agents.keys().copied().collect();
        for n in nodes {
            self.agent_event(n, AgentEvent::Started);
        }
    }

    pub fn run_until(&mut self, until: SimTime) {
        run_until(self, until);
    }

    pub fn run_to_quiescence(&mut self) {
        run_to_quiescence(self);
    }

    pub fn schedule(&mut self, at: SimTime, action: impl FnOnce(&mut Sim) + 'static) {
        self.kernel.schedule(at, action).expect("schedule in the future");
    }

    // ------------------------------------------------------------------
    // Client API

    pub fn publish_template(
        &mut self,
        node: NodeId,
        mut template: Template,
    ) -> Result<(), PublishError> {
        template.issuer = node;
        let mut seen = BTreeSet::new();
        if !template.fields.iter().all(|(a, _)| seen.insert(*a)) {
            return Err(PublishError::InvalidTemplate);
        }
        let key = template.key();
        let topic = topic_for_family(template.event_id.family());
        {
            let st = self.nodes.get_mut(&node).expect("publisher is a member");
            st.templates.insert(key, template.clone());
            st.own_templates.insert(key);
        }
        self.trace_node(
            node,
            "publish-template",
            &alloc::format!("event={} tid={}", template.event_id, template.template_id),
        );
        if self.overlay.owner(topic.0) == node {
            return Ok(());
        }
        let next = self.overlay.next_hop(node, topic.0).expect("non-owner has a next hop");
        self.send(node, next, Message::Template { topic, template, to_root: true });
        Ok(())
    }

    pub fn publish_data(&mut self, node: NodeId, record: EventRecord) -> Result<(), PublishError> {
        if record.issuer != node {
            return Err(PublishError::InvalidTemplate);
        }
        let key = record.template_key();
        let template = {
            let st = self.nodes.get(&node).expect("publisher is a member");
            if !st.own_templates.contains(&key) {
                return Err(PublishError::UnknownTemplate(key));
            }
            st.templates.get(&key).cloned().expect("own template stored")
        };
        if !conforms(&record, &template) {
            return Err(PublishError::TemplateMismatch);
        }
        let now = self.now();
        let topic = topic_for_family(record.event_id.family());
        let dm = DataMessage { record, meta: AggMeta::base(now), zfilter: ZFilter::default() };

        self.log.publishes.push(PublishRecord {
            time: now,
            node,
            topic,
            event_id: dm.record.event_id,
        });
        let hops = (self.overlay.path(node, topic.0).len() - 1) as u32;
        let entry = self.log.stretch.entry(topic).or_insert((0, 0));
        entry.0 = entry.0.max(hops);
        self.trace_node(node, "publish", &alloc::format!("event={} topic={topic}", dm.record.event_id));

        {
            let st = self.nodes.get_mut(&node).expect("publisher is a member");
            st.lts.push(dm.record.clone(), dm.meta, now);
        }

        if self.overlay.owner(topic.0) == node {
            self.root_ingress(node, topic, dm);
        } else {
            let next = self.overlay.next_hop(node, topic.0).expect("non-owner has a next hop");
            self.send(node, next, Message::Data { topic, dm, down: false });
        }
        Ok(())
    }

    pub fn subscribe(&mut self, node: NodeId, spec: SubscriptionSpec) -> Result<(), SubscribeError> {
        spec.validate().map_err(SubscribeError::InvalidSpec)?;
        if let Some(hook) = &self.entitlement {
            if !hook(node, &spec) {
                return Err(SubscribeError::Denied);
            }
        }
        let topics = topics_for_pattern(spec.event_pattern, &self.vocab);
        for topic in topics {
            let hops = (self.overlay.path(node, topic.0).len() - 1) as u32;
            let entry = self.log.stretch.entry(topic).or_insert((0, 0));
            entry.1 = entry.1.max(hops);
            self.trace_node(
                node,
                "subscribe",
                &alloc::format!("topic={topic} pattern={}", spec.event_pattern),
            );
            self.handle_subscribe(node, node, topic, spec.clone());
        }
        Ok(())
    }

    pub fn send_reply(&mut self, node: NodeId, reply: ReplyMessage) {
        self.trace_node(
            node,
            "reply",
            &alloc::format!("event={} tags={}", reply.event_id, reply.tags.len()),
        );
        self.handle_reply(node, reply);
    }

    pub fn start_lookup(&mut self, node: NodeId, token: u64, query: LookupQuery) {
        let now = self.now();
        let req_id = self.next_req_id;
        self.next_req_id += 1;

        let mut acc: Vec<LookupResultEntry> = Vec::new();
        let mut provider_errors = 0u32;
        for ind in &self.legacy {
            if ind.covers(query.event_pattern) {
                match (ind.provider)(&query) {
                    Ok(records) => {
                        acc.extend(records.into_iter().map(|r| LookupResultEntry {
                            record: r.record,
                            template: r.template,
                            meta: r.meta,
                            tags: BTreeSet::new(),
                            source: ResultSource::Legacy,
                        }));
                    }
                    Err(_) => provider_errors += 1,
                }
            }
        }

        let families = self.vocab.families_matching(query.event_pattern);
        let buckets = buckets_in_range(query.time_from, query.time_to, self.bucket_width);
        let mut owners: BTreeSet<NodeId> = BTreeSet::new();
        for f in &families {
            for b in &buckets {
                owners.insert(self.overlay.owner(partition_key_raw(*f, *b)));
            }
        }
        self.trace_node(
            node,
            "lookup",
            &alloc::format!("pattern={} owners={}", query.event_pattern, owners.len()),
        );

        if owners.remove(&node) {
            let results = {
                let st = self.nodes.get_mut(&node).expect("member");
                st.dws.lookup(&query, &self.schema, &self.retention, now)
            };
            acc.extend(results);
        }
        let outstanding = owners.len();
        self.nodes
            .get_mut(&node)
            .expect("member")
            .lookups
            .insert(req_id, PendingLookup { token, outstanding, acc, provider_errors });
        if outstanding == 0 {
            self.schedule(now, move |sim| sim.finish_lookup(node, req_id));
        } else {
            for owner in owners {
                self.send(node, owner, Message::Lookup { origin: node, req_id, query: query.clone() });
            }
        }
    }

    /// Tags a lookup result: legacy records get copied into the working
    /// store, working-store records get their tags merged (extending
    /// retention), both at the owner of their partition.
    pub fn annotate_result(&mut self, node: NodeId, entry: LookupResultEntry, tags: Vec<ConceptId>) {
        let tag_set: BTreeSet<ConceptId> = tags.into_iter().collect();
        self.store_entry(node, entry.record, entry.template, entry.meta, tag_set, 0);
    }

    // ------------------------------------------------------------------
    // Accessors for tests and metrics

    pub fn lts(&self, node: NodeId) -> &LtsBuffer {
        &self.nodes[&node].lts
    }

    pub fn dws(&self, node: NodeId) -> &DwsShard {
        &self.nodes[&node].dws
    }

    pub fn dws_total_entries(&self) -> usize {
        self.nodes.values().map(|n| n.dws.len()).sum()
    }

    pub fn forwarder(&self, node: NodeId, topic: TopicId) -> Option<&ForwarderState> {
        self.nodes.get(&node)?.forwarders.get(&topic)
    }

    pub fn forwarders_of(&self, topic: TopicId) -> Vec<(NodeId, &ForwarderState)> {
        self.nodes
            .iter()
            .filter_map(|(n, st)| st.forwarders.get(&topic).map(|f| (*n, f)))
            .collect()
    }

    /// Expires old LTS entries and sweeps the store shard of one node.
    pub fn sweep_node(&mut self, node: NodeId) -> usize {
        let now = self.now();
        let evicted = {
            let st = self.nodes.get_mut(&node).expect("member");
            st.lts.expire(now);
            st.dws.sweep(now)
        };
        self.log.dws_evicted += evicted as u64;
        evicted
    }

    pub fn sweep_all(&mut self) -> usize {
        let nodes: Vec<NodeId> = self.nodes.keys().copied().collect();
        nodes.into_iter().map(|n| self.sweep_node(n)).sum()
    }

    // ------------------------------------------------------------------
    // Transport

    fn trace_node(&mut self, node: NodeId, kind: &str, detail: &str) {
        if self.trace.enabled() {
            let label = self.label(node);
            self.trace.record(self.kernel.now(), &label, kind, detail);
        }
    }

    fn send(&mut self, src: NodeId, dst: NodeId, mut msg: Message) {
        debug_assert!(self.net.contains(src) && self.net.contains(dst));
        if let Message::Data { dm, .. } = &mut msg {
            dm.zfilter.merge(&self.zcfg.link_filter(src, dst));
        }
        let bytes = msg.encoded_len() as u64;
        self.net.account(src, dst, bytes);
        if let Some(topic) = msg.topic() {
            *self.log.topic_msgs.entry(topic).or_insert(0) += 1;
        }
        if matches!(msg, Message::Data { .. } | Message::Template { .. }) {
            *self.log.delivery_bytes_into.entry(dst).or_insert(0) += bytes;
        }
        if self.trace.enabled() {
            let detail =
                alloc::format!("kind={} dst={} bytes={bytes}", msg.kind_name(), self.label(dst));
            self.trace_node(src, "send", &detail);
        }
        let latency = self.net.latency(src, dst).expect("both endpoints are members");
        self.kernel.schedule_in(latency, move |sim| sim.deliver(src, dst, msg));
    }

    fn deliver(&mut self, src: NodeId, dst: NodeId, msg: Message) {
        if self.trace.enabled() {
            let detail = alloc::format!(
                "kind=0x{:02x} {} src={}",
                msg.kind_byte(),
                msg.kind_name(),
                self.label(src)
            );
            self.trace_node(dst, "recv", &detail);
        }
        match msg {
            Message::Subscribe { topic, spec } => self.handle_subscribe(dst, src, topic, spec),
            Message::Template { topic, template, to_root } => {
                self.handle_template(dst, topic, template, to_root)
            }
            Message::Data { topic, dm, down } => self.handle_data(dst, topic, dm, down),
            Message::NoSubscriber { topic } => {
                self.log.notifications.push(NotificationRecord {
                    time: self.now(),
                    node: dst,
                    kind: NotifyKind::NoSubscriber,
                    topic,
                });
                self.agent_event(dst, AgentEvent::NoSubscriberNotice { topic });
            }
            Message::SubscribersReady { topic } => {
                self.log.notifications.push(NotificationRecord {
                    time: self.now(),
                    node: dst,
                    kind: NotifyKind::SubscribersReady,
                    topic,
                });
                self.agent_event(dst, AgentEvent::SubscribersReadyNotice { topic });
            }
            Message::Reply(reply) => self.handle_reply(dst, reply),
            Message::Lookup { origin, req_id, query } => {
                self.handle_lookup(dst, origin, req_id, query)
            }
            Message::LookupResult { req_id, entries } => {
                self.handle_lookup_result(dst, req_id, entries)
            }
            Message::DwsInsert { record, template, meta, tags, subscriber_hint } => {
                self.handle_dws_insert(dst, record, template, meta, tags, subscriber_hint)
            }
        }
    }

    // ------------------------------------------------------------------
    // Subscription handling

    fn handle_subscribe(&mut self, at: NodeId, from: NodeId, topic: TopicId, spec: SubscriptionSpec) {
        // Replacing a child's spec first flushes whatever was pending under
        // the old one so no accumulated base events are lost.
        self.flush_child(at, topic, from);

        let is_root = self.overlay.owner(topic.0) == at;
        let parent = (!is_root).then(|| self.overlay.next_hop(at, topic.0).expect("non-owner"));

        let (aligned, first_child, early) = {
            let node = self.nodes.get_mut(&at).expect("member");
            let st = node.forwarders.entry(topic).or_insert_with(|| ForwarderState::new(topic));
            let first_child = st.children.is_empty();
            st.children.insert(from, ChildState::new(spec));
            st.parent = parent;
            let specs: Vec<&SubscriptionSpec> = st.children.values().map(|c| &c.spec).collect();
            let aligned = align_upstream(&specs);
            let early =
                if first_child { core::mem::take(&mut st.early_publishers) } else { Vec::new() };
            (aligned, first_child, early)
        };

        if is_root {
            if first_child {
                for publisher in early {
                    self.trace_node(at, "notify", &alloc::format!("subscribers-ready topic={topic}"));
                    if publisher == at {
                        self.log.notifications.push(NotificationRecord {
                            time: self.now(),
                            node: at,
                            kind: NotifyKind::SubscribersReady,
                            topic,
                        });
                        self.agent_event(at, AgentEvent::SubscribersReadyNotice { topic });
                    } else {
                        self.send(at, publisher, Message::SubscribersReady { topic });
                    }
                }
            }
        } else {
            let parent = parent.expect("non-root has a parent");
            // Propagation stops at a node already forwarding with an
            // unchanged upstream need; otherwise it (re-)subscribes up.
            let changed = {
                let node = self.nodes.get_mut(&at).expect("member");
                let st = node.forwarders.get_mut(&topic).expect("just created");
                let changed = st.sent_upstream.as_ref() != Some(&aligned);
                if changed {
                    st.sent_upstream = Some(aligned.clone());
                }
                changed
            };
            if changed {
                self.send(at, parent, Message::Subscribe { topic, spec: aligned });
            }
        }
    }

    /// Flushes and removes all pending aggregates one child has at a node.
    fn flush_child(&mut self, at: NodeId, topic: TopicId, child: NodeId) {
        let event_ids: Vec<ConceptId> = match self
            .nodes
            .get(&at)
            .and_then(|n| n.forwarders.get(&topic))
            .and_then(|st| st.children.get(&child))
        {
            Some(cs) => cs.pending.keys().copied().collect(),
            None => return,
        };
        for eid in event_ids {
            self.flush_pending(at, topic, child, eid);
        }
    }

    // ------------------------------------------------------------------
    // Template handling

    fn handle_template(&mut self, at: NodeId, topic: TopicId, template: Template, to_root: bool) {
        let key = template.key();
        let waiting = {
            let node = self.nodes.get_mut(&at).expect("member");
            node.templates.insert(key, template.clone());
            node.waiting_data.remove(&key).unwrap_or_default()
        };
        // Data that raced ahead of its template can be processed now.
        for (t, dm) in waiting {
            self.pipeline(at, t, dm);
        }
        if to_root && self.overlay.owner(topic.0) != at {
            let next = self.overlay.next_hop(at, topic.0).expect("non-owner");
            self.send(at, next, Message::Template { topic, template, to_root: true });
        }
    }

    // ------------------------------------------------------------------
    // Data path

    fn handle_data(&mut self, at: NodeId, topic: TopicId, dm: DataMessage, down: bool) {
        let now = self.now();
        {
            let node = self.nodes.get_mut(&at).expect("member");
            node.lts.push(dm.record.clone(), dm.meta, now);
        }
        if down {
            self.pipeline(at, topic, dm);
        } else if self.overlay.owner(topic.0) == at {
            self.root_ingress(at, topic, dm);
        } else {
            let next = self.overlay.next_hop(at, topic.0).expect("non-owner");
            self.send(at, next, Message::Data { topic, dm, down: false });
        }
    }

    /// A publication reached the rendezvous node.
    fn root_ingress(&mut self, at: NodeId, topic: TopicId, dm: DataMessage) {
        let has_subscribers = self
            .nodes
            .get(&at)
            .and_then(|n| n.forwarders.get(&topic))
            .map(|st| !st.children.is_empty())
            .unwrap_or(false);
        if has_subscribers {
            self.pipeline(at, topic, dm);
            return;
        }
        // No interest: tell the publisher once and remember it for the
        // subscribers-ready notification.
        let publisher = dm.record.issuer;
        let is_new = {
            let node = self.nodes.get_mut(&at).expect("member");
            let st = node.forwarders.entry(topic).or_insert_with(|| ForwarderState::new(topic));
            st.parent = None;
            st.note_early_publisher(publisher)
        };
        if is_new {
            let label = self.label(publisher);
            self.trace_node(at, "notify", &alloc::format!("no-subscriber topic={topic} publisher={label}"));
            if publisher == at {
                self.log.notifications.push(NotificationRecord {
                    time: self.now(),
                    node: at,
                    kind: NotifyKind::NoSubscriber,
                    topic,
                });
                self.agent_event(at, AgentEvent::NoSubscriberNotice { topic });
            } else {
                self.send(at, publisher, Message::NoSubscriber { topic });
            }
        }
    }

    /// The per-node deliver pipeline: pattern match, filter, aggregate,
    /// forward — independently per child.
    fn pipeline(&mut self, at: NodeId, topic: TopicId, dm: DataMessage) {
        let now = self.now();
        let in_key = dm.record.template_key();
        let mut effects: Vec<PipelineEffect> = Vec::new();
        {
            let Sim { nodes, schema, log, .. } = self;
            let node = nodes.get_mut(&at).expect("member");
            let Some(in_template) = node.templates.get(&in_key).cloned() else {
                node.waiting_data.entry(in_key).or_default().push((topic, dm));
                return;
            };
            let NodeState { forwarders, next_template_id, .. } = node;
            let Some(st) = forwarders.get_mut(&topic) else { return };
            for (&child, cs) in st.children.iter_mut() {
                if !cs.spec.event_pattern.matches(dm.record.event_id) {
                    continue;
                }
                // Attribute constraints apply to single-event messages,
                // whose values are still pristine. A multi-event aggregate
                // only arrives here when upstream alignment allowed
                // aggregation, which requires every child's filters to be
                // identical — so it was already filtered upstream, and
                // aggregation has since altered the constrained values.
                if dm.meta.base_count == 1 {
                    match eval_filter(&dm.record, &in_template, &cs.spec.filters, schema) {
                        Ok(true) => {}
                        Ok(false) => continue,
                        Err(_) => {
                            log.dropped_missing_attr += 1;
                            continue;
                        }
                    }
                }
                let (derived, sent) = cs.derived.entry(in_key).or_insert_with(|| {
                    let tid = *next_template_id;
                    *next_template_id = next_template_id.wrapping_add(1);
                    let (t, _) = derive_child_template(&in_template, &cs.spec.discards, at, tid);
                    (t, false)
                });
                if !*sent {
                    *sent = true;
                    if child == at {
                        effects.push(PipelineEffect::LocalTemplate { template: derived.clone() });
                    } else {
                        effects
                            .push(PipelineEffect::SendTemplate { child, template: derived.clone() });
                    }
                }
                let event_id = dm.record.event_id;
                let fresh = !cs.pending.contains_key(&event_id);
                let pending = cs
                    .pending
                    .entry(event_id)
                    .or_insert_with(|| PendingAggregate::new(derived, &cs.spec.aggregator_ops, now));
                if fresh {
                    if let Some(period) = cs.spec.granularity.max_period {
                        effects.push(PipelineEffect::StartTimer { child, event_id, period });
                    }
                }
                if pending.accumulate(&dm.record, &in_template, dm.meta, &dm.zfilter).is_err() {
                    log.dropped_type_mismatch += 1;
                    continue;
                }
                if let Some(max) = cs.spec.granularity.max_events {
                    if pending.base_count() >= max {
                        effects.push(PipelineEffect::Flush { child, event_id });
                    }
                }
            }
        }
        for effect in effects {
            match effect {
                PipelineEffect::SendTemplate { child, template } => {
                    self.send(at, child, Message::Template { topic, template, to_root: false });
                }
                PipelineEffect::LocalTemplate { template } => {
                    {
                        let node = self.nodes.get_mut(&at).expect("member");
                        node.templates.insert(template.key(), template.clone());
                    }
                    self.agent_event(at, AgentEvent::TemplateDelivered { topic, template: &template });
                }
                PipelineEffect::StartTimer { child, event_id, period } => {
                    let handle = self
                        .kernel
                        .schedule_in(period, move |sim| sim.flush_pending(at, topic, child, event_id));
                    if let Some(p) = self
                        .nodes
                        .get_mut(&at)
                        .and_then(|n| n.forwarders.get_mut(&topic))
                        .and_then(|st| st.children.get_mut(&child))
                        .and_then(|cs| cs.pending.get_mut(&event_id))
                    {
                        p.timer = Some(handle);
                    }
                }
                PipelineEffect::Flush { child, event_id } => {
                    self.flush_pending(at, topic, child, event_id);
                }
            }
        }
    }

    /// Finalizes and forwards one pending aggregate (count trigger, period
    /// timer, or spec replacement).
    fn flush_pending(&mut self, at: NodeId, topic: TopicId, child: NodeId, event_id: ConceptId) {
        let now = self.now();
        let taken = {
            let Some(cs) = self
                .nodes
                .get_mut(&at)
                .and_then(|n| n.forwarders.get_mut(&topic))
                .and_then(|st| st.children.get_mut(&child))
            else {
                return;
            };
            cs.pending.remove(&event_id).map(|p| (p, cs.spec.aggregator_ops.clone()))
        };
        let Some((pending, ops)) = taken else { return };
        if let Some(timer) = pending.timer {
            self.kernel.cancel(timer);
        }
        if pending.is_empty() {
            return;
        }
        let (mut record, meta, zfilter) = pending.finalize(now);
        let out_key = record.template_key();
        if child == at {
            let template = self
                .nodes
                .get(&at)
                .and_then(|n| n.templates.get(&out_key))
                .cloned()
                .expect("derived template was delivered locally before data");
            crate::aggregation::present_for_delivery(&mut record, &template, &ops, meta.base_count);
            self.trace_node(
                at,
                "deliver",
                &alloc::format!("event={} base={} topic={topic}", record.event_id, meta.base_count),
            );
            self.log.deliveries.push(DeliveryRecord {
                time: now,
                node: at,
                topic,
                record: record.clone(),
                meta,
            });
            {
                let node = self.nodes.get_mut(&at).expect("member");
                node.lts.push(record.clone(), meta, now);
            }
            self.agent_event(
                at,
                AgentEvent::DataDelivered { topic, record: &record, meta, zfilter, template: &template },
            );
        } else {
            self.send(
                at,
                child,
                Message::Data { topic, dm: DataMessage { record, meta, zfilter }, down: true },
            );
        }
    }

    // ------------------------------------------------------------------
    // Replies and annotation

    fn handle_reply(&mut self, at: NodeId, reply: ReplyMessage) {
        let digest = fnv1a64(&wire::encode_reply(&reply));
        {
            let node = self.nodes.get_mut(&at).expect("member");
            if !node.reply_seen.insert(digest) {
                return;
            }
        }
        let now = self.now();

        let mut promotions: Vec<(EventRecord, Template, AggMeta, BTreeSet<ConceptId>)> = Vec::new();
        let matched;
        {
            let Sim { nodes, schema, .. } = self;
            let node = nodes.get_mut(&at).expect("member");
            let NodeState { lts, templates, .. } = node;
            let idxs = lts.matching_indices(&reply, now, |k| templates.get(&k), schema);
            matched = idxs.len();
            for idx in idxs {
                let new_tags = lts.annotate(idx, &reply.tags);
                if new_tags.is_empty() {
                    continue;
                }
                let entry = lts.entry(idx);
                if let Some(template) = templates.get(&entry.record.template_key()) {
                    promotions.push((
                        entry.record.clone(),
                        template.clone(),
                        entry.meta,
                        entry.tags.clone(),
                    ));
                }
            }
        }
        if matched > 0 {
            self.trace_node(at, "annotate", &alloc::format!("event={} matched={matched}", reply.event_id));
        }
        let topic = topic_for_family(reply.event_id.family());
        let subscriber_hint = self
            .nodes
            .get(&at)
            .and_then(|n| n.forwarders.get(&topic))
            .map(|st| st.children.len() as u32)
            .unwrap_or(0);
        for (record, template, meta, tags) in promotions {
            self.store_entry(at, record, template, meta, tags, subscriber_hint);
        }

        // Reverse forwarding: the reply crosses, backward, every link whose
        // filter is contained in its z-Filter.
        let members: Vec<NodeId> = self.overlay.members().to_vec();
        for upstream in members {
            if upstream == at {
                continue;
            }
            let lf = self.zcfg.link_filter(upstream, at);
            if reply.zfilter.contains(&lf) {
                self.send(at, upstream, Message::Reply(reply.clone()));
            }
        }
    }

    /// Routes an entry to the owner of its partition (elected promotion or
    /// explicit insert).
    fn store_entry(
        &mut self,
        from: NodeId,
        record: EventRecord,
        template: Template,
        meta: AggMeta,
        tags: BTreeSet<ConceptId>,
        subscriber_hint: u32,
    ) {
        let key = crate::store::partition_key(record.event_id, meta.period_start, self.bucket_width);
        let owner = self.overlay.owner(key);
        if owner == from {
            self.handle_dws_insert(from, record, template, meta, tags, subscriber_hint);
        } else {
            self.send(
                from,
                owner,
                Message::DwsInsert { record, template, meta, tags, subscriber_hint },
            );
        }
    }

    fn handle_dws_insert(
        &mut self,
        at: NodeId,
        record: EventRecord,
        template: Template,
        meta: AggMeta,
        tags: BTreeSet<ConceptId>,
        subscriber_hint: u32,
    ) {
        let now = self.now();
        let inserted = {
            let node = self.nodes.get_mut(&at).expect("member");
            node.dws.insert(record, template, meta, &tags, subscriber_hint, at, &self.retention, now)
        };
        if inserted {
            self.log.dws_inserts += 1;
            self.trace_node(at, "elect", "stored");
        }
    }

    // ------------------------------------------------------------------
    // Lookups

    fn handle_lookup(&mut self, at: NodeId, origin: NodeId, req_id: u64, query: LookupQuery) {
        let now = self.now();
        let entries = {
            let node = self.nodes.get_mut(&at).expect("member");
            node.dws.lookup(&query, &self.schema, &self.retention, now)
        };
        self.send(at, origin, Message::LookupResult { req_id, entries });
    }

    fn handle_lookup_result(&mut self, at: NodeId, req_id: u64, entries: Vec<LookupResultEntry>) {
        let done = {
            let node = self.nodes.get_mut(&at).expect("member");
            let Some(pending) = node.lookups.get_mut(&req_id) else { return };
            pending.acc.extend(entries);
            pending.outstanding -= 1;
            pending.outstanding == 0
        };
        if done {
            self.finish_lookup(at, req_id);
        }
    }

    fn finish_lookup(&mut self, at: NodeId, req_id: u64) {
        let Some(pending) = self.nodes.get_mut(&at).and_then(|n| n.lookups.remove(&req_id)) else {
            return;
        };
        let mut outcome =
            LookupOutcome { entries: pending.acc, provider_errors: pending.provider_errors };
        outcome.entries.sort_by(|a, b| {
            (a.record.event_id, a.meta.period_start, a.record.issuer, a.record.template_id)
                .cmp(&(b.record.event_id, b.meta.period_start, b.record.issuer, b.record.template_id))
        });
        self.trace_node(at, "lookup-done", &alloc::format!("hits={}", outcome.entries.len()));
        let token = pending.token;
        self.agent_event(at, AgentEvent::LookupDone { token, outcome: &outcome });
    }

    // ------------------------------------------------------------------
    // Agents

    fn agent_event(&mut self, node: NodeId, event: AgentEvent<'_>) {
        let Some(mut agent) = self.agents.remove(&node) else { return };
        let commands = {
            let mut fx = Effects {
                now: self.kernel.now(),
                node,
                vocab: &self.vocab,
                commands: Vec::new(),
            };
            agent.on_event(&mut fx, event);
            fx.commands
        };
        self.agents.insert(node, agent);
        for cmd in commands {
            self.run_command(node, cmd);
        }
    }

    fn run_command(&mut self, node: NodeId, cmd: Command) {
        match cmd {
            Command::PublishTemplate(t) => {
                if self.publish_template(node, t).is_err() {
                    self.log.command_errors += 1;
                }
            }
            Command::PublishData(r) => {
                if self.publish_data(node, r).is_err() {
                    self.log.command_errors += 1;
                }
            }
            Command::Subscribe(spec) => {
                if self.subscribe(node, spec).is_err() {
                    self.log.command_errors += 1;
                }
            }
            Command::Reply(reply) => self.send_reply(node, reply),
            Command::Lookup { token, query } => self.start_lookup(node, token, query),
            Command::AnnotateResult { entry, tags } => self.annotate_result(node, entry, tags),
            Command::SetTimer { token, at } => {
                let at = at.max(self.now());
                self.schedule(at, move |sim| sim.agent_event(node, AgentEvent::Timer { token }));
            }
            Command::Note { key, value } => {
                self.trace_node(node, "note", &alloc::format!("{key}={value}"));
                self.log.notes.push((self.now(), key, value));
            }
        }
    }
}
