//! Shared fixtures for the integration tests: a small deployment with a
//! two-family vocabulary and helpers for publishing counter/flow events.

#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::rc::Rc;

use disco_core::aggregation::GranularitySpec;
use disco_core::events::{AttrType, AttrValue, EventRecord, FlowKey, Template};
use disco_core::overlay::NodeId;
use disco_core::pubsub::SubscriptionSpec;
use disco_core::rng::SplitMix64;
use disco_core::sim::{Agent, AgentEvent, Effects, LookupOutcome, Sim, SimConfig};
use disco_core::simnet::SimTime;
use disco_core::vocabulary::{ConceptId, ConceptPattern, VocabularyTree};

pub struct TestIds {
    pub load_event: ConceptId,
    pub drop_event: ConceptId,
    pub queue_event: ConceptId,
    pub other_event: ConceptId,
    pub value_attr: ConceptId,
    pub flow_attr: ConceptId,
    pub time_attr: ConceptId,
    pub loc_attr: ConceptId,
    pub tag: ConceptId,
}

pub fn test_vocab() -> (VocabularyTree, TestIds) {
    let mut v = VocabularyTree::new();
    for p in [
        "event",
        "event.metrics",
        "event.metrics.load",
        "event.net",
        "event.net.drops",
        "event.net.drops.ttl",
        "event.net.drops.queue",
        "alarm",
        "alarm.other",
        "attribute",
        "attribute.value",
        "attribute.flow",
        "attribute.time",
        "attribute.loc",
        "tag",
        "tag.marked",
    ] {
        v.register_str(p).unwrap();
    }
    let ids = TestIds {
        load_event: v.id_of("event.metrics.load").unwrap(),
        drop_event: v.id_of("event.net.drops.ttl").unwrap(),
        queue_event: v.id_of("event.net.drops.queue").unwrap(),
        other_event: v.id_of("alarm.other").unwrap(),
        value_attr: v.id_of("attribute.value").unwrap(),
        flow_attr: v.id_of("attribute.flow").unwrap(),
        time_attr: v.id_of("attribute.time").unwrap(),
        loc_attr: v.id_of("attribute.loc").unwrap(),
        tag: v.id_of("tag.marked").unwrap(),
    };
    (v, ids)
}

pub fn build_sim(n: usize, seed: u64) -> (Sim, TestIds, Vec<NodeId>) {
    let (vocab, ids) = test_vocab();
    let mut rng = SplitMix64::new(seed ^ 0x5EED);
    let members: Vec<NodeId> = (0..n).map(|_| NodeId(rng.next_u64())).collect();
    let sim = Sim::new(members.clone(), vocab, SimConfig { seed, ..SimConfig::default() });
    (sim, ids, members)
}

pub fn counter_template(ids: &TestIds, issuer: NodeId, event: ConceptId, tid: u16) -> Template {
    Template {
        issuer,
        template_id: tid,
        event_id: event,
        fields: vec![
            (ids.value_attr, AttrType::Counter64),
            (ids.time_attr, AttrType::Timestamp),
        ],
    }
}

pub fn counter_event(t: &Template, value: u64, ts: SimTime) -> EventRecord {
    EventRecord {
        event_id: t.event_id,
        template_id: t.template_id,
        issuer: t.issuer,
        values: vec![AttrValue::Counter(value), AttrValue::Timestamp(ts)],
    }
}

pub fn flow_template(ids: &TestIds, issuer: NodeId, event: ConceptId, tid: u16) -> Template {
    Template {
        issuer,
        template_id: tid,
        event_id: event,
        fields: vec![
            (ids.flow_attr, AttrType::FlowKey),
            (ids.loc_attr, AttrType::NodeLoc),
            (ids.time_attr, AttrType::Timestamp),
        ],
    }
}

pub fn flow_event(t: &Template, dst: Ipv4Addr, ts: SimTime) -> EventRecord {
    EventRecord {
        event_id: t.event_id,
        template_id: t.template_id,
        issuer: t.issuer,
        values: vec![
            AttrValue::Flow(FlowKey {
                src_addr: Ipv4Addr::new(10, 1, 2, 3),
                dst_addr: dst,
                src_port: 1111,
                dst_port: 80,
                proto: 6,
            }),
            AttrValue::NodeLoc(t.issuer),
            AttrValue::Timestamp(ts),
        ],
    }
}

pub fn plain_spec(pattern: ConceptPattern, granularity: GranularitySpec) -> SubscriptionSpec {
    SubscriptionSpec {
        event_pattern: pattern,
        filters: vec![],
        discards: vec![],
        aggregator_ops: BTreeMap::new(),
        granularity,
    }
}

/// Captures lookup outcomes for a node so tests can inspect them.
#[derive(Default)]
pub struct Capture {
    pub lookups: RefCell<Vec<(u64, usize, u32)>>,
    pub entries: RefCell<Vec<(u64, Vec<(ConceptId, SimTime)>)>>,
}

pub struct CaptureAgent(pub Rc<Capture>);

impl Agent for CaptureAgent {
    fn on_event(&mut self, _fx: &mut Effects<'_>, event: AgentEvent<'_>) {
        if let AgentEvent::LookupDone { token, outcome } = event {
            self.capture(token, outcome);
        }
    }
}

impl CaptureAgent {
    fn capture(&self, token: u64, outcome: &LookupOutcome) {
        self.0.lookups.borrow_mut().push((
            token,
            outcome.entries.len(),
            outcome.provider_errors,
        ));
        self.0.entries.borrow_mut().push((
            token,
            outcome
                .entries
                .iter()
                .map(|e| (e.record.event_id, e.meta.period_start))
                .collect(),
        ));
    }
}
