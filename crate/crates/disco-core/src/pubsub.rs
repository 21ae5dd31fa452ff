//! Topic-based multicast with per-child filtering and aggregation state.
//!
//! Topics are grouped by a deterministic *oracle*: hashing destroys the
//! concept hierarchy, so instead of hashing each event name, publishers and
//! subscribers hash the 16-bit family prefix of the numeric id. A single
//! multicast tree then serves all related event kinds and interior nodes
//! filter by pattern. Subscriptions travel toward the rendezvous node (the
//! owner of the topic key); every traversed node records the sender as a
//! child and becomes a forwarder, and a forwarder's own upstream
//! subscription is the finest-grained merge of its children's needs.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::aggregation::{
    AggregatorOp, FilterConstraint, GranularitySpec, PendingAggregate, SpecError,
};
use crate::events::{Template, TemplateKey};
use crate::overlay::NodeId;
use crate::rng::{fnv1a64, fnv1a64_extend};
use crate::vocabulary::{ConceptId, ConceptPattern, VocabularyTree};

/// Multicast tree identifier: the overlay key of the rendezvous node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicId(pub u64);

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Topic of one 16-bit event family.
pub fn topic_for_family(family: u16) -> TopicId {
    TopicId(fnv1a64_extend(fnv1a64(b"topic-oracle"), &family.to_be_bytes()))
}

/// The topic oracle: patterns at /16 and finer ride their family's tree.
/// (/8 patterns span several families; [`topics_for_pattern`] enumerates
/// them against the vocabulary.)
pub fn oracle_map(pattern: ConceptPattern) -> TopicId {
    topic_for_family(pattern.id.family())
}

/// All topics a pattern needs: one for /16-or-finer patterns, one per
/// registered family under the prefix for /8 patterns.
pub fn topics_for_pattern(pattern: ConceptPattern, vocab: &VocabularyTree) -> Vec<TopicId> {
    if pattern.prefix_bits >= 16 {
        return alloc::vec![oracle_map(pattern)];
    }
    let mut topics: Vec<TopicId> = vocab
        .families_matching(pattern)
        .into_iter()
        .map(topic_for_family)
        .collect();
    topics.sort_unstable();
    topics.dedup();
    topics
}

/// What one subscriber (or one forwarder, upstream) asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct SubscriptionSpec {
    pub event_pattern: ConceptPattern,
    pub filters: Vec<FilterConstraint>,
    pub discards: Vec<ConceptId>,
    pub aggregator_ops: BTreeMap<ConceptId, AggregatorOp>,
    pub granularity: GranularitySpec,
}

impl SubscriptionSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        self.granularity.validate()?;
        for c in &self.filters {
            c.validate()?;
        }
        Ok(())
    }
}

/// State kept for one direct child in the multicast tree.
#[derive(Debug)]
pub struct ChildState {
    pub spec: SubscriptionSpec,
    /// Derived child template per known input template, plus whether it has
    /// been sent to the child yet.
    pub derived: BTreeMap<TemplateKey, (Template, bool)>,
    /// In-flight aggregates, one per event kind.
    pub pending: BTreeMap<ConceptId, PendingAggregate>,
}

impl ChildState {
    pub fn new(spec: SubscriptionSpec) -> Self {
        Self { spec, derived: BTreeMap::new(), pending: BTreeMap::new() }
    }
}

/// Capacity of the early-publisher list kept at the rendezvous node.
pub const EARLY_PUBLISHER_CAP: usize = 64;

/// Per-topic state of a node that is on the multicast tree (or is the
/// rendezvous node holding early publishers for a topic nobody subscribed
/// to yet).
#[derive(Debug)]
pub struct ForwarderState {
    pub topic: TopicId,
    /// `None` when this node is the rendezvous root.
    pub parent: Option<NodeId>,
    /// Children keyed by node id; the node's own id stands for the local
    /// application.
    pub children: BTreeMap<NodeId, ChildState>,
    /// The spec last propagated upstream, for change detection.
    pub sent_upstream: Option<SubscriptionSpec>,
    /// Publishers that published before any subscription existed; notified
    /// once subscribers are ready.
    pub early_publishers: Vec<NodeId>,
}

impl ForwarderState {
    pub fn new(topic: TopicId) -> Self {
        Self {
            topic,
            parent: None,
            children: BTreeMap::new(),
            sent_upstream: None,
            early_publishers: Vec::new(),
        }
    }

    pub fn note_early_publisher(&mut self, publisher: NodeId) -> bool {
        if self.early_publishers.contains(&publisher) {
            return false;
        }
        if self.early_publishers.len() >= EARLY_PUBLISHER_CAP {
            return false;
        }
        self.early_publishers.push(publisher);
        true
    }
}

/// Longest common byte-aligned prefix of the children's patterns: the
/// coarsest pattern that still covers every child.
fn common_pattern(specs: &[&SubscriptionSpec]) -> ConceptPattern {
    let min_bits = specs.iter().map(|s| s.event_pattern.prefix_bits).min().unwrap_or(32);
    let first = specs[0].event_pattern.id.0;
    let mut bits = min_bits;
    loop {
        let mask = if bits == 0 { 0 } else { (!0u32) << (32 - bits as u32) };
        if specs.iter().all(|s| s.event_pattern.id.0 & mask == first & mask) {
            return ConceptPattern { id: ConceptId(first & mask), prefix_bits: bits.max(8) };
        }
        bits -= 8;
    }
}

/// Merges children's specs into the subscription this forwarder places
/// upstream, aligned onto the finest-grained need:
///
/// * pattern — longest common prefix of the children's patterns;
/// * filters — per attribute, the union of the children's accepted regions;
///   an attribute any child leaves unconstrained is dropped entirely;
/// * discards — only attributes every child discards;
/// * granularity — smallest event count, smallest period;
/// * operators and filters — kept (with the finest count/period) only when
///   all children agree; once they diverge this node must discriminate
///   locally on unaggregated values, so the upstream asks for per-event
///   forwarding and each child is filtered and re-aggregated here.
pub fn align_upstream(children: &[&SubscriptionSpec]) -> SubscriptionSpec {
    assert!(!children.is_empty(), "alignment needs at least one child");
    let event_pattern = common_pattern(children);

    let mut filters = Vec::new();
    let constrained_by_all: Vec<ConceptId> = {
        let mut attrs: Vec<ConceptId> =
            children.iter().flat_map(|s| s.filters.iter().map(|c| c.attr_id)).collect();
        attrs.sort_unstable();
        attrs.dedup();
        attrs
            .into_iter()
            .filter(|a| children.iter().all(|s| s.filters.iter().any(|c| c.attr_id == *a)))
            .collect()
    };
    for attr in constrained_by_all {
        for spec in children {
            for c in spec.filters.iter().filter(|c| c.attr_id == attr) {
                if !filters.contains(c) {
                    filters.push(c.clone());
                }
            }
        }
    }

    let discards: Vec<ConceptId> = children
        .first()
        .map(|s| {
            s.discards
                .iter()
                .copied()
                .filter(|d| children.iter().all(|c| c.discards.contains(d)))
                .collect()
        })
        .unwrap_or_default();

    let max_events = children.iter().filter_map(|s| s.granularity.max_events).min();
    let max_period = children.iter().filter_map(|s| s.granularity.max_period).min();

    let ops_agree = children.windows(2).all(|w| w[0].aggregator_ops == w[1].aggregator_ops);
    let filters_agree = children.windows(2).all(|w| w[0].filters == w[1].filters);
    let (aggregator_ops, granularity) = if ops_agree && filters_agree {
        (
            children[0].aggregator_ops.clone(),
            GranularitySpec { max_events, max_period },
        )
    } else {
        (BTreeMap::new(), GranularitySpec { max_events: Some(1), max_period })
    };

    SubscriptionSpec { event_pattern, filters, discards, aggregator_ops, granularity }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::ConstraintKind;
    use crate::events::AttrValue;
    use crate::simnet::SimDuration;
    use alloc::vec;
    use core::net::Ipv4Addr;

    fn spec(pattern: ConceptPattern) -> SubscriptionSpec {
        SubscriptionSpec {
            event_pattern: pattern,
            filters: vec![],
            discards: vec![],
            aggregator_ops: BTreeMap::new(),
            granularity: GranularitySpec { max_events: Some(10), max_period: None },
        }
    }

    #[test]
    fn related_patterns_share_a_topic() {
        let coarse = ConceptPattern { id: ConceptId(0xCAFE_0000), prefix_bits: 16 };
        let fine = ConceptPattern { id: ConceptId(0xCAFE_0100), prefix_bits: 24 };
        assert_eq!(oracle_map(coarse), oracle_map(fine));
    }

    #[test]
    fn unrelated_patterns_get_distinct_topics() {
        let a = ConceptPattern { id: ConceptId(0xCAFE_0000), prefix_bits: 16 };
        let b = ConceptPattern { id: ConceptId(0xDEAD_0000), prefix_bits: 16 };
        assert_ne!(oracle_map(a), oracle_map(b));
    }

    #[test]
    fn oracle_is_a_pure_function() {
        let p = ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 };
        assert_eq!(oracle_map(p), oracle_map(p));
        assert_eq!(topic_for_family(0x0101), oracle_map(p));
    }

    #[test]
    fn slash8_pattern_fans_out_over_registered_families() {
        let mut v = VocabularyTree::new();
        v.register_str("event.network.drops").unwrap();
        v.register_str("event.server.overload").unwrap();
        v.register_str("report.heavy").unwrap();
        let pat = v.resolve_str("event.*").unwrap();
        assert_eq!(pat.prefix_bits, 8);
        let topics = topics_for_pattern(pat, &v);
        // event itself (family 0x0100), event.network, event.server.
        assert_eq!(topics.len(), 3);
        let report = v.resolve_str("report.*").unwrap();
        for t in topics_for_pattern(report, &v) {
            assert!(!topics.contains(&t));
        }
    }

    #[test]
    fn finest_grained_count_wins() {
        let a = {
            let mut s = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
            s.granularity = GranularitySpec { max_events: Some(10), max_period: None };
            s
        };
        let b = {
            let mut s = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
            s.granularity =
                GranularitySpec { max_events: Some(3), max_period: Some(SimDuration::from_millis(500)) };
            s
        };
        let up = align_upstream(&[&a, &b]);
        assert_eq!(up.granularity.max_events, Some(3));
        assert_eq!(up.granularity.max_period, Some(SimDuration::from_millis(500)));
    }

    #[test]
    fn kept_attribute_wins_over_discard() {
        let x = ConceptId(0x0501_0000);
        let mut a = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        a.discards = vec![x];
        let b = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        let up = align_upstream(&[&a, &b]);
        assert!(up.discards.is_empty());
        let mut c = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        c.discards = vec![x];
        let up2 = align_upstream(&[&a, &c]);
        assert_eq!(up2.discards, vec![x]);
    }

    #[test]
    fn disjoint_prefix_filters_union() {
        let dst = ConceptId(0x0502_0000);
        let mk = |prefix: [u8; 4]| {
            let mut s = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
            s.filters = vec![FilterConstraint {
                attr_id: dst,
                kind: ConstraintKind::Prefix(Ipv4Addr::from(prefix), 16),
            }];
            s
        };
        let a = mk([4, 2, 0, 0]);
        let b = mk([7, 7, 0, 0]);
        let up = align_upstream(&[&a, &b]);
        assert_eq!(up.filters.len(), 2);
        assert!(up.filters.iter().all(|c| c.attr_id == dst));
    }

    #[test]
    fn unconstrained_child_drops_attribute_upstream() {
        let dst = ConceptId(0x0502_0000);
        let mut a = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        a.filters = vec![FilterConstraint {
            attr_id: dst,
            kind: ConstraintKind::Exact(AttrValue::Counter(5)),
        }];
        let b = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        let up = align_upstream(&[&a, &b]);
        assert!(up.filters.is_empty());
    }

    #[test]
    fn pattern_alignment_takes_common_prefix() {
        let a = spec(ConceptPattern { id: ConceptId(0x0101_0100), prefix_bits: 24 });
        let b = spec(ConceptPattern { id: ConceptId(0x0101_0200), prefix_bits: 24 });
        let up = align_upstream(&[&a, &b]);
        assert_eq!(up.event_pattern, ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        // A pattern covering a child's covers everything the child accepts.
        assert!(up.event_pattern.matches(ConceptId(0x0101_0203)));
    }

    #[test]
    fn op_disagreement_forces_per_event_upstream() {
        let x = ConceptId(0x0501_0000);
        let mut a = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        a.aggregator_ops.insert(x, AggregatorOp::Sum);
        let mut b = spec(ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 });
        b.aggregator_ops.insert(x, AggregatorOp::Min);
        let up = align_upstream(&[&a, &b]);
        assert_eq!(up.granularity.max_events, Some(1));
        assert!(up.aggregator_ops.is_empty());
    }

    #[test]
    fn early_publisher_list_dedups_and_caps() {
        let mut st = ForwarderState::new(TopicId(1));
        assert!(st.note_early_publisher(NodeId(1)));
        assert!(!st.note_early_publisher(NodeId(1)));
        for i in 2..=EARLY_PUBLISHER_CAP as u64 {
            assert!(st.note_early_publisher(NodeId(i)));
        }
        assert!(!st.note_early_publisher(NodeId(1000)));
    }
}
